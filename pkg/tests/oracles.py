"""Independent reference implementations used as test oracles.

Nothing here calls into the BPTT or KalmanNet code paths; the gain network
and the filter recursion are re-derived from their definitions.
"""

from __future__ import annotations

import numpy as np

LORENZ = (10.0, 28.0, 8.0 / 3.0)


def logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def riccati_scalar_root(F=0.9, H=1.0, Q=1.0, R=1.0):
    """Positive root of the scalar steady-state posterior equation."""
    # post = p R / (H^2 p + R) with p = F^2 post + Q
    a = F**2 * H**2
    b = H**2 * Q + R - F**2 * R
    c = -Q * R
    return (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)


def lorenz_rhs(x):
    s, r, b = LORENZ
    return np.array([s * (x[1] - x[0]), x[0] * (r - x[2]) - x[1], x[0] * x[1] - b * x[2]])


def lorenz_rk4(x, dt, substeps=1000):
    x = np.asarray(x, dtype=np.float64)
    h = dt / substeps
    for _ in range(substeps):
        k1 = lorenz_rhs(x)
        k2 = lorenz_rhs(x + 0.5 * h * k1)
        k3 = lorenz_rhs(x + 0.5 * h * k2)
        k4 = lorenz_rhs(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def frozen_lorenz_rk4(x, dt, substeps=1000):
    """Integrate ``dx/ds = A(x0) x`` over ``dt`` with RK4, coefficients frozen at ``x0``."""
    x = np.asarray(x, dtype=np.float64)
    s, r, b = LORENZ
    A = np.array([[-s, s, 0.0], [r, -1.0, -x[0]], [0.0, x[0], -b]])
    h = dt / substeps
    for _ in range(substeps):
        k1 = A @ x
        k2 = A @ (x + 0.5 * h * k1)
        k3 = A @ (x + 0.5 * h * k2)
        k4 = A @ (x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def kf_reference(F, H, Q, R, x0, Sigma0, ys):
    """Textbook KF with explicit inverses, one trajectory (T, n)."""
    x, P = np.array(x0, dtype=float), np.array(Sigma0, dtype=float)
    out = {"x": [], "prior": [], "post": [], "K": []}
    for y in ys:
        x = F @ x
        P = F @ P @ F.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ (y - H @ x)
        out["prior"].append(P)
        P = (np.eye(len(x)) - K @ H) @ P @ (np.eye(len(x)) - K @ H).T + K @ R @ K.T
        out["x"].append(x)
        out["post"].append(P)
        out["K"].append(K)
    return {k: np.array(v) for k, v in out.items()}


def gru_unit(x_seq, h0, w):
    """Scalar-everything GRU evaluated gate by gate with plain floats."""
    h = h0
    outs = []
    for x in x_seq:
        r = 1.0 / (1.0 + np.exp(-(w["wir"] * x + w["bir"] + w["whr"] * h + w["bhr"])))
        z = 1.0 / (1.0 + np.exp(-(w["wiz"] * x + w["biz"] + w["whz"] * h + w["bhz"])))
        c = np.tanh(w["win"] * x + w["bin"] + r * (w["whn"] * h + w["bhn"]))
        h = (1.0 - z) * c + z * h
        outs.append(h)
    return outs


def batched_knet_loss(pb: dict, m: int, n: int, F, H, obs, states, x0, scale=None):
    """KalmanNet training loss for P parameter sets at once (linear dynamics).

    ``pb`` maps parameter names to arrays with a leading P axis. Returns the
    mean squared state error for each of the P parameter sets.
    """
    P = pb["W_in"].shape[0]
    B, T, _ = obs.shape
    hid = pb["W_hh"].shape[2]
    x = np.broadcast_to(x0, (P, B, m)).copy()
    x_prev_prior = x.copy()
    y_prev = None
    h = np.zeros((P, B, hid))
    total = np.zeros(P)
    for t in range(T):
        y = obs[:, t]
        x_prior = x @ F.T
        innov = y - x_prior @ H.T
        dy = np.zeros_like(innov) if y_prev is None else np.broadcast_to(y - y_prev, innov.shape)
        f = np.concatenate([innov, dy, x - x_prev_prior], axis=-1)
        if scale is not None:
            f = f / scale
        u = np.maximum(np.einsum("pij,pbj->pbi", pb["W_in"], f) + pb["b_in"][:, None], 0.0)
        gi = np.einsum("pij,pbj->pbi", pb["W_ih"], u) + pb["b_ih"][:, None]
        gh = np.einsum("pij,pbj->pbi", pb["W_hh"], h) + pb["b_hh"][:, None]
        r = logistic(gi[..., :hid] + gh[..., :hid])
        z = logistic(gi[..., hid:2 * hid] + gh[..., hid:2 * hid])
        c = np.tanh(gi[..., 2 * hid:] + r * gh[..., 2 * hid:])
        h = (1 - z) * c + z * h
        k = np.einsum("pij,pbj->pbi", pb["W_out"], h) + pb["b_out"][:, None]
        K = k.reshape(P, B, m, n)
        x_prev_prior = x_prior
        x = x_prior + np.einsum("pbij,pbj->pbi", K, innov)
        y_prev = y
        total += np.sum((x - states[:, t]) ** 2, axis=(1, 2))
    return total / (B * T * m)


def central_differences(params: dict, loss_fn, rel_step=1e-6, chunk=256):
    """Central-difference gradient of every parameter entry.

    Perturbations are evaluated ``chunk`` at a time through ``loss_fn``,
    which takes a batch of parameter sets (leading axis) and returns losses.
    """
    names = list(params)
    sizes = [params[k].size for k in names]
    flat0 = np.concatenate([params[k].ravel() for k in names])
    steps = rel_step * np.maximum(1.0, np.abs(flat0))
    grad = np.empty_like(flat0)

    def unpack(flat_batch):
        out, pos = {}, 0
        for k, s in zip(names, sizes):
            out[k] = flat_batch[:, pos:pos + s].reshape((-1,) + params[k].shape)
            pos += s
        return out

    for start in range(0, flat0.size, chunk):
        idx = np.arange(start, min(start + chunk, flat0.size))
        plus = np.tile(flat0, (idx.size, 1))
        minus = plus.copy()
        plus[np.arange(idx.size), idx] += steps[idx]
        minus[np.arange(idx.size), idx] -= steps[idx]
        lp = loss_fn(unpack(plus))
        lm = loss_fn(unpack(minus))
        grad[idx] = (lp - lm) / (2 * steps[idx])
    out, pos = {}, 0
    for k, s in zip(names, sizes):
        out[k] = grad[pos:pos + s].reshape(params[k].shape)
        pos += s
    return out


def gradient_rel_errors(analytic: dict, numeric: dict, loss: float, rel_step=1e-6) -> dict:
    """Per-tensor worst relative error with a round-off floor on the denominator.

    Central differences carry round-off of order ``eps * loss / step``; the
    floor is 1e4 times a generous estimate of that (10 ulps), so entries
    smaller than the noise are compared on an absolute scale instead.
    """
    floor = 1e4 * 10 * np.finfo(float).eps * max(abs(loss), 1.0) / rel_step
    out = {}
    for k in analytic:
        a, b = analytic[k], numeric[k]
        den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        out[k] = float(np.max(np.abs(a - b) / den))
    return out
