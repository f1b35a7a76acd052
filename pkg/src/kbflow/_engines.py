"""Vectorized Monte Carlo engines (internal).

These replicate the stepping of :func:`kbflow.ensemble.law_level_run` and
:func:`kbflow.ensemble.run_enkf` with a leading trials axis, for the study
drivers in :mod:`kbflow.stats`.  Trials are simulated in fixed-size chunks;
the chunk index plays the trial-index role in the noise-stream addresses, so
results are deterministic for a given (seed, chunk size) and independent of
scheduling.  Agreement with the public single-run functions is pinned by
tests (to floating-point tolerance for single-trial chunks).

All engines freeze a trial at its first non-finite value (the state turns
NaN and stays NaN) and report the divergence step per trial; callers decide
how to aggregate divergent trials.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from .ensemble import (
    MATRIX_DRIVER,
    MEAN_DRIVER,
    PARTICLE_INIT,
    PARTICLE_OBS,
    PARTICLE_SIGNAL,
    Variant,
)
from .kalman import TRUTH_INIT, TRUTH_OBS, TRUTH_SIGNAL
from .model import LinearGaussianModel
from .sde import NoiseStream, Scheme, TimeGrid

#: Default number of trials simulated per noise-stream chunk.
CHUNK_SIZE = 1024


def _chunks(trials: int, chunk: int, first_chunk: int = 0):
    start = 0
    index = first_chunk
    while start < trials:
        yield index, min(chunk, trials - start)
        start += chunk
        index += 1


def _scalar_coeffs(model: LinearGaussianModel):
    if model.d != 1 or model.d_y != 1:
        raise ValueError("scalar engine requires d = d_y = 1")
    return (float(model.A[0, 0]), float(model.H[0, 0]), float(model.R[0, 0]),
            float(model.R1[0, 0]), float(model.S[0, 0]))


def _quiet_divergence(engine):
    """Overflow/NaN is how a trial diverges; it is recorded, not warned."""

    @functools.wraps(engine)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return engine(*args, **kwargs)

    return wrapper


# ---------------------------------------------------------------------------
# d = 1, law level
# ---------------------------------------------------------------------------

@_quiet_divergence
def law_cov_paths_1d(model: LinearGaussianModel, kappa: float, N: int, Q: float,
                     grid: TimeGrid, seed: int, trials: int, chunk: int = CHUNK_SIZE,
                     scheme=None, record_indices=None, with_mean: bool = False,
                     x0: float = 0.0, m0: float = 0.0, P0: float | None = None,
                     integral_from: int | None = None, first_chunk: int = 0):
    """Batch of scalar law-level paths.

    Returns a dict with ``t`` (recorded times), ``cov`` (trials, n_rec),
    ``diverged_step`` (trials; -1 when finite throughout), and, when
    requested, ``mean``/``error`` (trials, n_rec) and ``integral`` — the
    per-trial closed-loop integral ``int (A - S P_hat) du`` accumulated from
    grid node ``integral_from`` to the end.
    """
    A, H, R, R1, S = _scalar_coeffs(model)
    kappa = float(kappa)
    scheme = (Scheme.TAMED_EULER if kappa == 1.0 else Scheme.EULER_MARUYAMA) \
        if scheme is None else Scheme.parse(scheme)
    sqrt_R, sqrt_R1 = math.sqrt(R), math.sqrt(R1)
    dt = grid.dt
    K = grid.steps
    if record_indices is None:
        record_indices = np.arange(K + 1)
    else:
        record_indices = np.asarray(record_indices, dtype=int)
    rec_pos = np.full(K + 1, -1, dtype=int)
    rec_pos[record_indices] = np.arange(len(record_indices))
    n_rec = len(record_indices)

    P0 = float(Q) if P0 is None else float(P0)
    noise_scale = 2.0 / math.sqrt(N)
    mean_scale = 1.0 / math.sqrt(N + 1)

    cov = np.empty((trials, n_rec))
    mean = np.empty((trials, n_rec)) if with_mean else None
    error = np.empty((trials, n_rec)) if with_mean else None
    diverged = np.full(trials, -1, dtype=int)
    integral = np.zeros(trials) if integral_from is not None else None

    row = 0
    for c, B in _chunks(trials, chunk, first_chunk):
        mat = NoiseStream(seed, c, MATRIX_DRIVER)
        mean_drv = NoiseStream(seed, c, MEAN_DRIVER) if with_mean else None
        t_init = NoiseStream(seed, c, TRUTH_INIT) if with_mean else None
        t_sig = NoiseStream(seed, c, TRUTH_SIGNAL) if with_mean else None
        t_obs = NoiseStream(seed, c, TRUTH_OBS) if with_mean else None

        P = np.full(B, float(Q))
        div = np.full(B, -1, dtype=int)
        acc = np.zeros(B) if integral is not None else None
        if with_mean:
            x = np.full(B, float(x0))
            truth = m0 + math.sqrt(P0) * t_init.normals(B)

        def rec(k):
            p = rec_pos[k]
            if p >= 0:
                cov[row:row + B, p] = P
                if with_mean:
                    mean[row:row + B, p] = x
                    error[row:row + B, p] = x - truth

        rec(0)
        for k in range(K):
            sig = R + kappa * S * P * P
            sig_root = np.sqrt(sig)
            if with_mean:
                dV = t_sig.increments(B, dt)
                dW = t_obs.increments(B, dt)
                dY = H * truth * dt + sqrt_R1 * dW
                gain = P * H / R1
                dB = mean_drv.increments(B, dt)
                x = x + dt * A * x + gain * (dY - H * x * dt) \
                    + mean_scale * sig_root * dB
                truth = truth + dt * A * truth + sqrt_R * dV
            if acc is not None and k >= integral_from:
                np.add(acc, dt * (A - S * P), out=acc, where=np.isfinite(P))
            drift = R + 2.0 * A * P - S * P * P
            if scheme is Scheme.TAMED_EULER:
                drift = drift / (1.0 + dt * np.abs(drift))
            dM = mat.increments(B, dt)
            P = P + dt * drift + noise_scale * np.sqrt(np.maximum(P, 0.0) * sig) * dM
            P = np.maximum(P, 0.0)
            bad = ~np.isfinite(P)
            if with_mean:
                bad |= ~np.isfinite(x) | ~np.isfinite(truth)
            if bad.any():
                fresh = bad & (div < 0)
                div[fresh] = k + 1
                P[bad] = np.nan
                if with_mean:
                    x[bad] = np.nan
            rec(k + 1)
        diverged[row:row + B] = div
        if integral is not None:
            integral[row:row + B] = acc
        row += B

    out = {"t": grid.times()[record_indices], "cov": cov, "diverged_step": diverged}
    if with_mean:
        out["mean"] = mean
        out["error"] = error
    if integral is not None:
        out["integral"] = integral
    return out


# ---------------------------------------------------------------------------
# d = 1, particle level
# ---------------------------------------------------------------------------

@_quiet_divergence
def particle_cov_paths_1d(model: LinearGaussianModel, variant, N: int,
                          grid: TimeGrid, seed: int, trials: int,
                          chunk: int = CHUNK_SIZE, frame: str = "error",
                          m0: float = 0.0, P0: float = 1.0,
                          record_indices=None, with_mean: bool = False,
                          integral_from: int | None = None,
                          init: str = "iid", first_chunk: int = 0):
    """Batch of scalar particle-filter paths (vanilla/deterministic).

    ``frame="error"`` simulates the truth-relative particle coordinates
    ``U^i = X^i - signal`` (the sample covariance and the error are
    invariant to the common shift), which keeps values bounded for
    exponentially unstable signals.  ``frame="absolute"`` matches
    :func:`kbflow.ensemble.run_enkf` directly.  ``init`` is ``"iid"`` or
    ``"matched"`` (sample moments exactly m0/P0; requires N >= 1).

    With ``with_mean`` the ``mean`` output holds the sample mean in the
    absolute frame and the mean *error* in the error frame.
    """
    A, H, R, R1, S = _scalar_coeffs(model)
    variant = Variant.parse(variant)
    if variant is Variant.TRANSPORT:
        raise ValueError("scalar particle engine covers the noisy variants only")
    if frame not in ("error", "absolute"):
        raise ValueError(f"unknown frame {frame!r}")
    sqrt_R, sqrt_R1 = math.sqrt(R), math.sqrt(R1)
    dt = grid.dt
    K = grid.steps
    M = N + 1
    if record_indices is None:
        record_indices = np.arange(K + 1)
    else:
        record_indices = np.asarray(record_indices, dtype=int)
    rec_pos = np.full(K + 1, -1, dtype=int)
    rec_pos[record_indices] = np.arange(len(record_indices))
    n_rec = len(record_indices)

    cov = np.empty((trials, n_rec))
    mean = np.empty((trials, n_rec)) if with_mean else None
    diverged = np.full(trials, -1, dtype=int)
    integral = np.zeros(trials) if integral_from is not None else None

    row = 0
    for c, B in _chunks(trials, chunk, first_chunk):
        p_init = NoiseStream(seed, c, PARTICLE_INIT)
        p_sig = NoiseStream(seed, c, PARTICLE_SIGNAL)
        p_obs = NoiseStream(seed, c, PARTICLE_OBS) if variant is Variant.VANILLA else None
        t_init = NoiseStream(seed, c, TRUTH_INIT)
        t_sig = NoiseStream(seed, c, TRUTH_SIGNAL)
        t_obs = NoiseStream(seed, c, TRUTH_OBS)

        G = p_init.normals((B, M))
        if init == "matched":
            G = G - G.mean(axis=1, keepdims=True)
            G *= np.sqrt(P0 / (np.sum(G * G, axis=1, keepdims=True) / N))
            X = m0 + G
        elif init == "iid":
            X = m0 + math.sqrt(P0) * G
        else:
            raise ValueError(f"unknown init {init!r}")
        truth = m0 + math.sqrt(P0) * t_init.normals(B)
        if frame == "error":
            X = X - truth[:, None]

        div = np.full(B, -1, dtype=int)
        acc = np.zeros(B) if integral is not None else None

        def rec(k, P_hat, X_bar):
            p = rec_pos[k]
            if p >= 0:
                cov[row:row + B, p] = P_hat
                if with_mean:
                    mean[row:row + B, p] = X_bar

        X_bar = X.mean(axis=1)
        dev = X - X_bar[:, None]
        P_hat = np.sum(dev * dev, axis=1) / N
        rec(0, P_hat, X_bar)
        for k in range(K):
            if acc is not None and k >= integral_from:
                np.add(acc, dt * (A - S * P_hat), out=acc, where=np.isfinite(P_hat))
            gain = (P_hat * H / R1)[:, None]
            dVi = p_sig.increments((B, M), dt)
            dV = t_sig.increments(B, dt)
            dW = t_obs.increments(B, dt)
            if frame == "error":
                sig_noise = sqrt_R * (dVi - dV[:, None])
                if variant is Variant.VANILLA:
                    dWi = p_obs.increments((B, M), dt)
                    innov = -H * X * dt + sqrt_R1 * (dW[:, None] - dWi)
                else:
                    innov = -H * (X + X_bar[:, None]) * 0.5 * dt + sqrt_R1 * dW[:, None]
                X = X + dt * A * X + sig_noise + gain * innov
            else:
                dY = (H * truth * dt + sqrt_R1 * dW)[:, None]
                if variant is Variant.VANILLA:
                    dWi = p_obs.increments((B, M), dt)
                    innov = dY - H * X * dt - sqrt_R1 * dWi
                else:
                    innov = dY - H * (X + X_bar[:, None]) * 0.5 * dt
                X = X + dt * A * X + sqrt_R * dVi + gain * innov
                truth = truth + dt * A * truth + sqrt_R * dV

            X_bar = X.mean(axis=1)
            dev = X - X_bar[:, None]
            P_hat = np.sum(dev * dev, axis=1) / N
            bad = ~np.isfinite(P_hat) | ~np.isfinite(X_bar)
            if frame == "absolute":
                bad |= ~np.isfinite(truth)
            if bad.any():
                fresh = bad & (div < 0)
                div[fresh] = k + 1
                X[bad] = np.nan
                P_hat[bad] = np.nan
            rec(k + 1, P_hat, X_bar)
        diverged[row:row + B] = div
        if integral is not None:
            integral[row:row + B] = acc
        row += B

    out = {"t": grid.times()[record_indices], "cov": cov, "diverged_step": diverged}
    if with_mean:
        out["mean"] = mean
    if integral is not None:
        out["integral"] = integral
    return out


# ---------------------------------------------------------------------------
# 2x2 symmetric matrix helpers (vectorized over a leading axis)
# ---------------------------------------------------------------------------

def _sqrt_psd_2x2(M):
    """Principal square root of batched symmetric PSD 2x2 matrices."""
    tr = M[..., 0, 0] + M[..., 1, 1]
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    s = np.sqrt(np.maximum(det, 0.0))
    q = np.sqrt(np.maximum(tr + 2.0 * s, 0.0))
    out = M.copy()
    out[..., 0, 0] += s
    out[..., 1, 1] += s
    safe = np.where(q > 0.0, q, 1.0)[..., None, None]
    out = np.where((q > 0.0)[..., None, None], out / safe, 0.0)
    return out


def _floor_psd_2x2(M):
    """Clamp negative eigenvalues of batched symmetric 2x2 matrices to zero."""
    a = M[..., 0, 0]
    b = 0.5 * (M[..., 0, 1] + M[..., 1, 0])
    c = M[..., 1, 1]
    half_tr = 0.5 * (a + c)
    radius = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lo = half_tr - radius
    hi = half_tr + radius
    out = np.empty_like(M)
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 0] = b
    out[..., 1, 1] = c
    neg = lo < 0.0
    if not np.any(neg):
        return out
    # subtract lo * (projector onto the low eigenvector) where lo < 0;
    # equivalently out = hi_clamped * v+ v+' + max(lo, 0) * v- v-'
    hi_c = np.maximum(hi, 0.0)
    # eigvector for hi: (b, hi - a) unless degenerate
    vx = np.where(np.abs(b) > 0.0, b, 1.0)
    vy = np.where(np.abs(b) > 0.0, hi - a, 0.0)
    # handle b == 0 exactly: diagonal matrix, pick axis of the larger entry
    diag_swap = (np.abs(b) == 0.0) & (c > a)
    vx = np.where(diag_swap, 0.0, vx)
    vy = np.where(diag_swap, 1.0, vy)
    nrm = np.sqrt(vx * vx + vy * vy)
    vx, vy = vx / nrm, vy / nrm
    fixed = np.empty_like(out)
    fixed[..., 0, 0] = hi_c * vx * vx
    fixed[..., 0, 1] = hi_c * vx * vy
    fixed[..., 1, 0] = fixed[..., 0, 1]
    fixed[..., 1, 1] = hi_c * vy * vy
    return np.where(neg[..., None, None], fixed, out)


def _eigh_map(M, spectrum_fn):
    """eigh-based spectral map that passes non-finite (frozen) trials
    through as NaN instead of tripping eigh's convergence check."""
    bad = ~np.all(np.isfinite(M.reshape(M.shape[0], -1)), axis=1)
    if bad.any():
        M = np.where(bad[:, None, None], np.eye(M.shape[-1]), M)
    w, V = np.linalg.eigh(M)
    out = V @ (spectrum_fn(w)[..., None] * np.swapaxes(V, -1, -2))
    if bad.any():
        out[bad] = np.nan
    return out


def _sqrt_psd_batch(M, d):
    if d == 1:
        return np.sqrt(np.maximum(M, 0.0))
    if d == 2:
        return _sqrt_psd_2x2(M)
    return _eigh_map(M, lambda w: np.sqrt(np.maximum(w, 0.0)))


def _floor_psd_batch(M, d):
    if d == 1:
        return np.maximum(M, 0.0)
    if d == 2:
        return _floor_psd_2x2(M)
    return _eigh_map(M, lambda w: np.maximum(w, 0.0))


# ---------------------------------------------------------------------------
# general d, law level (covariance only)
# ---------------------------------------------------------------------------

@_quiet_divergence
def law_cov_paths_nd(model: LinearGaussianModel, kappa: float, N: int, Q,
                     grid: TimeGrid, seed: int, trials: int,
                     chunk: int = CHUNK_SIZE, scheme=None, record_indices=None,
                     first_chunk: int = 0):
    """Batch of law-level covariance paths in dimension d (no mean/truth).

    The covariance SDE is autonomous, so only the matrix driver channel is
    consumed.  Returns ``t``, ``cov`` (trials, n_rec, d, d) and
    ``diverged_step``.
    """
    d = model.d
    kappa = float(kappa)
    scheme = (Scheme.TAMED_EULER if kappa == 1.0 else Scheme.EULER_MARUYAMA) \
        if scheme is None else Scheme.parse(scheme)
    A, S, R = model.A, model.S, model.R
    dt = grid.dt
    K = grid.steps
    if record_indices is None:
        record_indices = np.arange(K + 1)
    else:
        record_indices = np.asarray(record_indices, dtype=int)
    rec_pos = np.full(K + 1, -1, dtype=int)
    rec_pos[record_indices] = np.arange(len(record_indices))
    n_rec = len(record_indices)

    Q = np.asarray(Q, dtype=float)
    noise_scale = 2.0 / math.sqrt(N)
    cov = np.empty((trials, n_rec, d, d))
    diverged = np.full(trials, -1, dtype=int)

    row = 0
    for c, B in _chunks(trials, chunk, first_chunk):
        mat = NoiseStream(seed, c, MATRIX_DRIVER)
        P = np.broadcast_to(Q, (B, d, d)).copy()
        div = np.full(B, -1, dtype=int)

        def rec(k):
            p = rec_pos[k]
            if p >= 0:
                cov[row:row + B, p] = P

        rec(0)
        for k in range(K):
            PS = P @ S
            drift = A @ P + P @ np.swapaxes(A, 0, 1) - PS @ P + R
            drift = 0.5 * (drift + np.swapaxes(drift, -1, -2))
            if scheme is Scheme.TAMED_EULER:
                nrm = np.sqrt(np.sum(drift * drift, axis=(-1, -2)))
                drift = drift / (1.0 + dt * nrm)[:, None, None]
            sig = R + kappa * (P @ S @ P)
            sig = 0.5 * (sig + np.swapaxes(sig, -1, -2))
            sig_root = _sqrt_psd_batch(sig, d)
            P_root = _sqrt_psd_batch(P, d)
            dM = mat.increments((B, d, d), dt)
            wing = P_root @ dM @ sig_root
            P = P + dt * drift + noise_scale * 0.5 * (wing + np.swapaxes(wing, -1, -2))
            P = _floor_psd_batch(0.5 * (P + np.swapaxes(P, -1, -2)), d)
            flat_bad = ~np.all(np.isfinite(P.reshape(B, -1)), axis=1)
            if flat_bad.any():
                fresh = flat_bad & (div < 0)
                div[fresh] = k + 1
                P[flat_bad] = np.nan
            rec(k + 1)
        diverged[row:row + B] = div
        row += B

    return {"t": grid.times()[record_indices], "cov": cov, "diverged_step": diverged}


# ---------------------------------------------------------------------------
# general d, particle level
# ---------------------------------------------------------------------------

@_quiet_divergence
def particle_cov_paths_nd(model: LinearGaussianModel, variant, N: int,
                          grid: TimeGrid, seed: int, trials: int,
                          chunk: int = CHUNK_SIZE, frame: str = "error",
                          m0=None, P0=None, record_indices=None,
                          init: str = "iid", first_chunk: int = 0):
    """Batch of particle-filter covariance paths in dimension d.

    Same conventions as the scalar engine; the transport variant is not
    batched (its runs are deterministic given the truth — use run_enkf).
    """
    variant = Variant.parse(variant)
    if variant is Variant.TRANSPORT:
        raise ValueError("batch engine covers the noisy variants only")
    if frame not in ("error", "absolute"):
        raise ValueError(f"unknown frame {frame!r}")
    d, d_y = model.d, model.d_y
    A, H, R1_inv = model.A, model.H, model.R1_inv
    sqrt_R, sqrt_R1 = model.sqrt_R, model.sqrt_R1
    dt = grid.dt
    K = grid.steps
    M = N + 1
    m0 = np.zeros(d) if m0 is None else np.asarray(m0, dtype=float).reshape(d)
    P0 = np.eye(d) if P0 is None else np.asarray(P0, dtype=float)
    from .model import symmetric_sqrt

    P0_root = symmetric_sqrt(P0)
    if record_indices is None:
        record_indices = np.arange(K + 1)
    else:
        record_indices = np.asarray(record_indices, dtype=int)
    rec_pos = np.full(K + 1, -1, dtype=int)
    rec_pos[record_indices] = np.arange(len(record_indices))
    n_rec = len(record_indices)

    cov = np.empty((trials, n_rec, d, d))
    diverged = np.full(trials, -1, dtype=int)

    row = 0
    for c, B in _chunks(trials, chunk, first_chunk):
        p_init = NoiseStream(seed, c, PARTICLE_INIT)
        p_sig = NoiseStream(seed, c, PARTICLE_SIGNAL)
        p_obs = NoiseStream(seed, c, PARTICLE_OBS) if variant is Variant.VANILLA else None
        t_init = NoiseStream(seed, c, TRUTH_INIT)
        t_sig = NoiseStream(seed, c, TRUTH_SIGNAL)
        t_obs = NoiseStream(seed, c, TRUTH_OBS)

        G = p_init.normals((B, d, M))
        if init == "matched":
            G = G - G.mean(axis=2, keepdims=True)
            C = G @ np.swapaxes(G, 1, 2) / N
            w, V = np.linalg.eigh(C)
            whiten = V @ (w[..., None] ** -0.5 * np.swapaxes(V, 1, 2))
            X = m0[:, None] + P0_root @ whiten @ G
        elif init == "iid":
            X = m0[:, None] + P0_root @ G
        else:
            raise ValueError(f"unknown init {init!r}")
        truth = m0 + t_init.normals((B, d)) @ P0_root.T
        if frame == "error":
            X = X - truth[:, :, None]

        div = np.full(B, -1, dtype=int)

        def stats():
            X_bar = X.mean(axis=2)
            dev = X - X_bar[:, :, None]
            P_hat = dev @ np.swapaxes(dev, 1, 2) / N
            return X_bar, P_hat

        def rec(k, P_hat):
            p = rec_pos[k]
            if p >= 0:
                cov[row:row + B, p] = P_hat

        X_bar, P_hat = stats()
        rec(0, P_hat)
        for k in range(K):
            gain = P_hat @ H.T @ R1_inv                     # (B, d, d_y)
            dVi = p_sig.increments((B, d, M), dt)
            dV = t_sig.increments((B, d), dt)
            dW = t_obs.increments((B, d_y), dt)
            HX = np.einsum("ij,bjm->bim", H, X)
            if frame == "error":
                sig_noise = sqrt_R @ (dVi - dV[:, :, None])
                if variant is Variant.VANILLA:
                    dWi = p_obs.increments((B, d_y, M), dt)
                    innov = -HX * dt + np.einsum(
                        "ij,bjm->bim", sqrt_R1, dW[:, :, None] - dWi)
                else:
                    HXb = np.einsum("ij,bj->bi", H, X_bar)
                    innov = -0.5 * (HX + HXb[:, :, None]) * dt \
                        + (sqrt_R1 @ dW[..., None])
                X = X + dt * np.einsum("ij,bjm->bim", A, X) + sig_noise + gain @ innov
            else:
                dY = np.einsum("ij,bj->bi", H, truth) * dt + dW @ sqrt_R1.T
                if variant is Variant.VANILLA:
                    dWi = p_obs.increments((B, d_y, M), dt)
                    innov = dY[:, :, None] - HX * dt - np.einsum(
                        "ij,bjm->bim", sqrt_R1, dWi)
                else:
                    HXb = np.einsum("ij,bj->bi", H, X_bar)
                    innov = dY[:, :, None] - 0.5 * (HX + HXb[:, :, None]) * dt
                X = X + dt * np.einsum("ij,bjm->bim", A, X) \
                    + sqrt_R @ dVi + gain @ innov
                truth = truth + dt * truth @ A.T + dV @ sqrt_R.T

            X_bar, P_hat = stats()
            flat_bad = ~np.all(np.isfinite(P_hat.reshape(B, -1)), axis=1)
            if frame == "absolute":
                flat_bad |= ~np.all(np.isfinite(truth), axis=1)
            if flat_bad.any():
                fresh = flat_bad & (div < 0)
                div[fresh] = k + 1
                X[flat_bad] = np.nan
                P_hat[flat_bad] = np.nan
            rec(k + 1, P_hat)
        diverged[row:row + B] = div
        row += B

    return {"t": grid.times()[record_indices], "cov": cov, "diverged_step": diverged}
