"""Optional SVG rendering of the CSV outputs (needs matplotlib)."""

from __future__ import annotations

from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "knetcov"
    return plt


def metrics_svg(path: Path, series, title: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    for s in series:
        t = range(1, s.T + 1)
        line, = ax.plot(t, s.empirical_db, label=f"{s.label} empirical")
        ax.plot(t, s.predicted_db, "--", color=line.get_color(), label=f"{s.label} predicted")
    ax.set_xlabel("t")
    ax.set_ylabel("MSE [dB]")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def trajectory_svg(path: Path, report, kf_label: str = "kf") -> None:
    plt = _pyplot()
    T, m = report.truth.shape
    t = range(1, T + 1)
    fig, axes = plt.subplots(m, 1, figsize=(7, 2.5 * m), squeeze=False)
    for d, ax in enumerate(axes[:, 0]):
        ax.plot(t, report.truth[:, d], "k", lw=1, label="truth")
        for est, sig, name in ((report.kf_est, report.kf_sigma, kf_label),
                               (report.knet_est, report.knet_sigma, "knet")):
            line, = ax.plot(t, est[:, d], lw=1, label=name)
            ax.fill_between(t, est[:, d] - sig[:, d], est[:, d] + sig[:, d],
                            color=line.get_color(), alpha=0.2)
        ax.set_ylabel(f"x[{d}]")
    axes[0, 0].legend()
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
