"""Model definition and structural analysis.

A :class:`LinearGaussianModel` couples a linear signal diffusion with a
linear sensor:

    dX_t = A X_t dt + R^{1/2} dV_t,        dY_t = H X_t dt + R1^{1/2} dW_t,

where ``R`` is the signal noise covariance and ``R1`` the (positive
definite) sensor noise covariance.  Everything downstream — exact filters,
ensemble filters, Riccati flows — consumes this object.  The module also
provides the structural checks (controllability/observability), the
observability/controllability Gramians over a window, the algebraic Riccati
fixed point, and small spectral utilities.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from . import _ode
from .errors import NoStabilizingSolution, NotPSD, SingularGramian, StepSizeUnderflow
from .sde import project_psd

#: Relative singular-value threshold for rank decisions.
RANK_TOL = 1e-10

#: Condition-number ceiling beyond which a Gramian is declared singular.
COND_MAX = 1e12


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------

def _check_symmetric(M, name, tol=1e-12):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    return 0.5 * (M + M.T)


class LinearGaussianModel:
    """Linear-Gaussian signal/observation model.

    Parameters
    ----------
    A : (d, d) array_like
        Signal drift matrix.
    H : (d_y, d) array_like
        Sensor matrix.
    R : (d, d) array_like
        Signal noise covariance; symmetric PSD (``R = 0`` is allowed).
    R1 : (d_y, d_y) array_like
        Sensor noise covariance; symmetric positive definite.

    Attributes
    ----------
    d, d_y : int
        State and observation dimensions.
    S : (d, d) ndarray
        The information-rate matrix ``H' R1^{-1} H`` (derived, never
        serialized).
    """

    def __init__(self, A, H, R, R1):
        A = np.asarray(A, dtype=float)
        H = np.asarray(H, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        d = A.shape[0]
        if H.ndim != 2 or H.shape[1] != d:
            raise ValueError(f"H must be d_y x {d}, got shape {H.shape}")
        d_y = H.shape[0]
        R = _check_symmetric(R, "R")
        if R.shape != (d, d):
            raise ValueError(f"R must be {d} x {d}, got shape {R.shape}")
        R1 = _check_symmetric(R1, "R1")
        if R1.shape != (d_y, d_y):
            raise ValueError(f"R1 must be {d_y} x {d_y}, got shape {R1.shape}")
        for name, M in (("A", A), ("H", H), ("R", R), ("R1", R1)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{name} contains non-finite entries")

        w_R = np.linalg.eigvalsh(R)
        if w_R[0] < -1e-10 * max(1.0, w_R[-1]):
            raise NotPSD(f"R has negative eigenvalue {w_R[0]:.3e}")
        w_R1 = np.linalg.eigvalsh(R1)
        if w_R1[0] <= 1e-12 * max(1.0, w_R1[-1]):
            raise NotPSD(f"R1 must be positive definite (min eigenvalue {w_R1[0]:.3e})")

        self.A = A
        self.H = H
        self.R = project_psd(R)
        self.R1 = R1
        self.d = d
        self.d_y = d_y
        self.R1_inv = np.linalg.inv(R1)
        self.R1_inv = 0.5 * (self.R1_inv + self.R1_inv.T)
        S = H.T @ self.R1_inv @ H
        self.S = 0.5 * (S + S.T)
        self._sqrt_R = None
        self._sqrt_R1 = None

    @property
    def sqrt_R(self) -> np.ndarray:
        """Symmetric PSD square root of R (cached)."""
        if self._sqrt_R is None:
            self._sqrt_R = symmetric_sqrt(self.R)
        return self._sqrt_R

    @property
    def sqrt_R1(self) -> np.ndarray:
        if self._sqrt_R1 is None:
            self._sqrt_R1 = symmetric_sqrt(self.R1)
        return self._sqrt_R1

    def closed_loop(self, P) -> np.ndarray:
        """The filter feedback matrix ``A - P S``."""
        return self.A - np.asarray(P) @ self.S

    def gain(self, P) -> np.ndarray:
        """The filter gain ``P H' R1^{-1}``."""
        return np.asarray(P) @ self.H.T @ self.R1_inv

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "d_y": self.d_y,
            "A": self.A.tolist(),
            "H": self.H.tolist(),
            "R": self.R.tolist(),
            "R1": self.R1.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearGaussianModel":
        required = {"d", "d_y", "A", "H", "R", "R1"}
        keys = set(doc)
        if keys != required:
            extra = sorted(keys - required)
            missing = sorted(required - keys)
            parts = []
            if missing:
                parts.append(f"missing keys {missing}")
            if extra:
                parts.append(f"unknown keys {extra}")
            raise ValueError("model document: " + "; ".join(parts))
        model = cls(doc["A"], doc["H"], doc["R"], doc["R1"])
        if model.d != doc["d"] or model.d_y != doc["d_y"]:
            raise ValueError(
                f"declared dimensions (d={doc['d']}, d_y={doc['d_y']}) do not match "
                f"matrix shapes (d={model.d}, d_y={model.d_y})"
            )
        return model

    def __repr__(self):
        return f"LinearGaussianModel(d={self.d}, d_y={self.d_y})"


def save_model(model: LinearGaussianModel, path) -> None:
    """Write a model to a JSON document (row-major matrices; S is derived)."""
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> LinearGaussianModel:
    """Load a model from its JSON document; rejects unknown keys."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("model document must be a JSON object")
    return LinearGaussianModel.from_dict(doc)


@dataclass(frozen=True)
class ScalarModel:
    """One-dimensional model in reduced form: drift A, noise R > 0, and
    information rate S > 0.

    The pair ``(R, S)`` is what the scalar theory depends on; a full model
    with ``H = sqrt(S)``, ``R1 = 1`` realizes it.
    """

    A: float
    R: float
    S: float

    def __post_init__(self):
        if not (self.R > 0 and self.S > 0):
            raise ValueError(f"scalar models require R > 0 and S > 0, got R={self.R}, S={self.S}")

    def to_model(self) -> LinearGaussianModel:
        return LinearGaussianModel(
            [[self.A]], [[math.sqrt(self.S)]], [[self.R]], [[1.0]]
        )


@dataclass(frozen=True)
class GramianSet:
    """The four windowed Gramians over ``[0, tau]``.

    ``O_tau``/``C_tau`` are the observability and controllability Gramians;
    ``C_tau_of_O`` and ``O_tau_of_C`` are their dual composites entering the
    two-sided Riccati bounds.
    """

    tau: float
    O_tau: np.ndarray
    C_tau: np.ndarray
    C_tau_of_O: np.ndarray
    O_tau_of_C: np.ndarray


# ---------------------------------------------------------------------------
# structural checks
# ---------------------------------------------------------------------------

def _rank(M: np.ndarray) -> int:
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > RANK_TOL * sv[0]))


def check_controllability(model: LinearGaussianModel) -> bool:
    """True iff ``[R^{1/2}, A R^{1/2}, ..., A^{d-1} R^{1/2}]`` has full rank."""
    B = model.sqrt_R
    blocks = [B]
    for _ in range(model.d - 1):
        blocks.append(model.A @ blocks[-1])
    return _rank(np.hstack(blocks)) == model.d


def check_observability(model: LinearGaussianModel) -> bool:
    """True iff the stacked ``[H; HA; ...; H A^{d-1}]`` has full rank."""
    blocks = [model.H]
    for _ in range(model.d - 1):
        blocks.append(blocks[-1] @ model.A)
    return _rank(np.vstack(blocks)) == model.d


# ---------------------------------------------------------------------------
# Gramians
# ---------------------------------------------------------------------------

def _simpson(values: np.ndarray, h: float) -> np.ndarray:
    """Composite Simpson over axis 0 (even number of intervals)."""
    n = values.shape[0] - 1
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return (h / 3.0) * np.tensordot(w, values, axes=(0, 0))


def _gramians_at(model: LinearGaussianModel, tau: float, n: int):
    """All four Gramian integrals with n (multiple of 4) Simpson intervals."""
    h = tau / n
    s = h * np.arange(n + 1)
    Bm = np.stack([expm(-model.A * si) for si in s])        # e^{-A s_i}
    Dp = np.stack([expm(model.A * si) for si in s])         # e^{+A s_i}
    g_obs = np.einsum("kji,jl,klm->kim", Bm, model.S, Bm)   # e^{-A's} S e^{-As}
    g_con = np.einsum("kij,jl,kml->kim", Dp, model.R, Dp)   # e^{As} R e^{A's}

    O_tau = _simpson(g_obs, h)
    C_tau = _simpson(g_con, h)

    # cumulative values at even nodes: O_{s_{2k}}, C_{s_{2k}}
    m = n // 2
    O_cum = np.empty((m + 1,) + O_tau.shape)
    C_cum = np.empty_like(O_cum)
    O_cum[0] = 0.0
    C_cum[0] = 0.0
    for k in range(1, m + 1):
        i = 2 * k
        O_cum[k] = O_cum[k - 1] + (h / 3.0) * (g_obs[i - 2] + 4.0 * g_obs[i - 1] + g_obs[i])
        C_cum[k] = C_cum[k - 1] + (h / 3.0) * (g_con[i - 2] + 4.0 * g_con[i - 1] + g_con[i])

    # outer integrands on the even-node grid (step 2h); the propagators at
    # tau - s_{2k} are the already-computed node values at index n - 2k.
    Bm_rev = Bm[n - 2 * np.arange(m + 1)]
    Dp_rev = Dp[n - 2 * np.arange(m + 1)]
    inner_O = np.einsum("kij,jl,klm->kim", O_cum, model.R, O_cum)   # O_s R O_s
    inner_C = np.einsum("kij,jl,klm->kim", C_cum, model.S, C_cum)   # C_s S C_s
    f_CO = np.einsum("kji,kjl,klm->kim", Bm_rev, inner_O, Bm_rev)   # e^{-(tau-s)A'} (.) e^{-(tau-s)A}
    f_OC = np.einsum("kij,kjl,kml->kim", Dp_rev, inner_C, Dp_rev)   # e^{(tau-s)A} (.) e^{(tau-s)A'}
    I_CO = _simpson(f_CO, 2.0 * h)
    I_OC = _simpson(f_OC, 2.0 * h)
    return O_tau, C_tau, I_CO, I_OC


def gramians(model: LinearGaussianModel, tau: float, rel_tol: float = 1e-8) -> GramianSet:
    """Windowed Gramians over ``[0, tau]`` by converging Simpson quadrature.

    The grid is refined (doubling the interval count) until all four
    integrals change by less than ``rel_tol`` in relative Frobenius norm.

    Raises
    ------
    SingularGramian
        If ``O_tau`` or ``C_tau`` has 2-norm condition number above 1e12
        (their inverses enter the composite Gramians).
    """
    if not (tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    prev = None
    n = 32
    while True:
        cur = _gramians_at(model, tau, n)
        if prev is not None:
            worst = max(
                np.linalg.norm(c - p) / max(1.0, np.linalg.norm(c))
                for c, p in zip(cur, prev)
            )
            if worst < rel_tol:
                break
        if n >= 2 ** 14:
            raise SingularGramian(
                f"Gramian quadrature did not converge by n={n} intervals "
                f"(likely extreme dynamic range in e^(A s) over [0, {tau}])"
            )
        prev = cur
        n *= 2

    O_tau, C_tau, I_CO, I_OC = cur
    O_tau = 0.5 * (O_tau + O_tau.T)
    C_tau = 0.5 * (C_tau + C_tau.T)
    for name, M in (("O_tau", O_tau), ("C_tau", C_tau)):
        if np.linalg.cond(M) > COND_MAX:
            raise SingularGramian(f"{name} condition number exceeds {COND_MAX:.0e}")
    O_inv = np.linalg.inv(O_tau)
    C_inv = np.linalg.inv(C_tau)
    C_of_O = O_inv @ I_CO @ O_inv
    O_of_C = C_inv @ I_OC @ C_inv
    return GramianSet(
        tau=float(tau),
        O_tau=O_tau,
        C_tau=C_tau,
        C_tau_of_O=0.5 * (C_of_O + C_of_O.T),
        O_tau_of_C=0.5 * (O_of_C + O_of_C.T),
    )


# ---------------------------------------------------------------------------
# algebraic Riccati fixed point
# ---------------------------------------------------------------------------

def _ricc(A, S, R, P):
    out = A @ P + P @ A.T - P @ S @ P + R
    return 0.5 * (out + out.T)


def solve_are(model: LinearGaussianModel, max_newton: int = 60):
    """Stabilizing fixed point P∞ of ``A P + P A' - P S P + R = 0``.

    Strategy: run the deterministic Riccati flow from ``Q = I`` until the
    closed loop ``A - P S`` is stable, then polish with Newton steps (each
    solves a Lyapunov equation for the correction).  The result satisfies
    the residual bound ``|Ricc(P)|_F <= 1e-8 (1 + |P|_F^2)`` and has a
    strictly stable closed loop.

    Returns
    -------
    RiccatiState
        With ``t = inf`` (the infinite-horizon fixed point) and ``P = P∞``.

    Raises
    ------
    NoStabilizingSolution
        If the residual tolerance is unreachable within the iteration
        budget or the closed loop fails to stabilize.
    """
    from .kalman import RiccatiState

    if not check_controllability(model):
        warnings.warn("model is not controllable; ARE solution may not exist", stacklevel=2)
    if not check_observability(model):
        warnings.warn("model is not observable; ARE solution may not exist", stacklevel=2)

    A, S, R = model.A, model.S, model.R
    d = model.d

    def flow(_t, P):
        return _ricc(A, S, R, P)

    def post(P):
        return project_psd(P)

    P = np.eye(d)
    try:
        for _ in range(200):
            if spectral_abscissa(model.closed_loop(P)) < 0:
                break
            if not np.all(np.isfinite(P)) or np.linalg.norm(P) > 1e12:
                raise NoStabilizingSolution(
                    "Riccati flow is diverging; no stabilizing iterate exists")
            P = _ode.adaptive_rk4(flow, P, 0.0, 1.0, tol=1e-6, post=post)
        else:
            raise NoStabilizingSolution("Riccati flow failed to reach a stabilizing iterate")
    except StepSizeUnderflow as exc:
        raise NoStabilizingSolution(
            f"Riccati flow diverged while seeking a stabilizing iterate: {exc}"
        ) from exc

    # Newton (Kleinman) polish.  From a barely stabilizing iterate the first
    # step may overshoot in residual norm before the quadratic phase, so a
    # bounded residual hump is tolerated as long as the iterate stays
    # stabilizing.
    res_norm = np.linalg.norm(_ricc(A, S, R, P))
    stall = 0
    for _ in range(max_newton):
        tol = 1e-11 * (1.0 + float(np.sum(P * P)))
        if res_norm <= tol:
            break
        A_cl = model.closed_loop(P)
        delta = solve_continuous_lyapunov(A_cl, -_ricc(A, S, R, P))
        P_new = 0.5 * (P + delta + (P + delta).T)
        new_norm = np.linalg.norm(_ricc(A, S, R, P_new))
        if not np.isfinite(new_norm):
            break
        if new_norm >= res_norm:
            stall += 1
            if stall > 2 or spectral_abscissa(model.closed_loop(P_new)) >= 0:
                break
        else:
            stall = 0
        P, res_norm = P_new, new_norm

    P = project_psd(P)
    res = np.linalg.norm(_ricc(A, S, R, P))
    if res > 1e-8 * (1.0 + float(np.sum(P * P))):
        raise NoStabilizingSolution(f"ARE residual {res:.3e} above tolerance")
    if spectral_abscissa(model.closed_loop(P)) >= 0:
        raise NoStabilizingSolution("closed loop A - P S is not Hurwitz at the fixed point")
    return RiccatiState(t=math.inf, P=P)


# ---------------------------------------------------------------------------
# spectral utilities
# ---------------------------------------------------------------------------

def spectral_abscissa(M) -> float:
    """Largest real part of the eigenvalues of M."""
    M = np.asarray(M, dtype=float)
    return float(np.max(np.linalg.eigvals(M).real))


def log_norm(M) -> float:
    """Logarithmic norm: largest eigenvalue of the symmetric part of M.

    Always at least the spectral abscissa; governs the growth bound
    ``|e^{Mt}| <= e^{mu(M) t}``.
    """
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def symmetric_sqrt(Q) -> np.ndarray:
    """Unique symmetric PSD square root of a symmetric PSD matrix.

    Eigenvalues in ``[-clamp_tol, 0)`` with ``clamp_tol = 1e-10 |Q|`` are
    treated as roundoff and clamped to zero.

    Raises
    ------
    NotPSD
        If an eigenvalue falls below ``-clamp_tol``.
    """
    Q = _check_symmetric(Q, "Q", tol=1e-10)
    w, V = np.linalg.eigh(Q)
    clamp_tol = 1e-10 * max(abs(w[0]), abs(w[-1]))
    if w[0] < -clamp_tol:
        raise NotPSD(f"matrix has eigenvalue {w[0]:.3e} below -{clamp_tol:.3e}")
    w = np.sqrt(np.maximum(w, 0.0))
    return (V * w) @ V.T


def _bottleneck_match(D: np.ndarray) -> float:
    """Smallest v such that the bipartite graph {D <= v} has a perfect matching."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import maximum_bipartite_matching

    n = D.shape[0]
    values = np.unique(D)
    lo, hi = 0, len(values) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        graph = csr_matrix(D <= values[mid])
        match = maximum_bipartite_matching(graph, perm_type="column")
        if np.all(match >= 0):
            hi = mid
        else:
            lo = mid + 1
    return float(values[lo])


def spectral_matching_distance(M1, M2) -> float:
    """Optimal matching distance between the spectra of two square matrices.

    Minimizes, over pairings of the two eigenvalue multisets, the largest
    pairwise distance ``|lambda_i - mu_{perm(i)}|``.  Exhaustive over
    permutations for d <= 8; a bottleneck assignment search otherwise.
    """
    M1 = np.asarray(M1, dtype=float)
    M2 = np.asarray(M2, dtype=float)
    if M1.shape != M2.shape or M1.ndim != 2 or M1.shape[0] != M1.shape[1]:
        raise ValueError("spectral_matching_distance requires two square matrices of equal size")
    lam = np.linalg.eigvals(M1)
    mu = np.linalg.eigvals(M2)
    D = np.abs(lam[:, None] - mu[None, :])
    n = D.shape[0]
    if n <= 8:
        best = math.inf
        for perm in itertools.permutations(range(n)):
            worst = max(D[i, perm[i]] for i in range(n))
            if worst < best:
                best = worst
        return float(best)
    return _bottleneck_match(D)
