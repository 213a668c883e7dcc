"""Koopman matrix estimation by regularized least squares.

The estimate solves ``min (1/q) ||Theta_plus - U Psi||_F^2 +
(alpha/q) ||U||_F^2`` through the normal equations ``U = G
inv(H_alpha)`` with ``G = (1/q) Theta_plus Psi^T``, ``H = (1/q) Psi
Psi^T`` and ``H_alpha = H + (alpha/q) I``. Factoring ``H_alpha`` instead
of pseudo-inverting ``Psi`` keeps the solve well conditioned when there
are many more snapshots than lifted states. The ``1/q`` scaling is kept
inside ``G``, ``H``, ``F`` so regularization coefficients are comparable
across dataset sizes.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import scipy.linalg

from .lifting import SnapshotMatrices

RCOND_SINGULAR = 1e-14


class SingularMatrixError(ValueError):
    """Normal-equations matrix numerically singular; carries the rcond."""

    def __init__(self, message, rcond):
        super().__init__(message)
        self.rcond = rcond


@dataclasses.dataclass(frozen=True)
class GHCache:
    """Scaled data moments shared by every solve on one dataset.

    ``G = (1/q) Theta_plus Psi^T``, ``H = (1/q) Psi Psi^T`` (symmetrized),
    ``F = (1/q) Theta_plus Theta_plus^T`` (symmetrized, used only by the
    cost certificate). ``dims`` carries the snapshot block sizes when the
    cache was built from :class:`SnapshotMatrices`.
    """

    G: np.ndarray
    H: np.ndarray
    F: np.ndarray
    q: int
    dims: Optional[tuple] = None


def compute_gh(data, psi=None) -> GHCache:
    """Build the :class:`GHCache` from snapshots or a raw matrix pair.

    Accepts either a :class:`SnapshotMatrices` instance or the pair
    ``(theta_plus, psi)`` as two arguments.
    """
    if isinstance(data, SnapshotMatrices):
        theta_plus, psi_mat, dims = data.Theta_plus, data.Psi, data.dims
    else:
        if psi is None:
            raise ValueError("raw usage is compute_gh(theta_plus, psi)")
        theta_plus, psi_mat, dims = np.asarray(data, dtype=float), \
            np.asarray(psi, dtype=float), None
    if theta_plus.shape[1] != psi_mat.shape[1]:
        raise ValueError(
            f"column counts differ: Theta_plus has {theta_plus.shape[1]}, "
            f"Psi has {psi_mat.shape[1]}")
    if not (np.all(np.isfinite(theta_plus)) and np.all(np.isfinite(psi_mat))):
        raise ValueError("snapshot data contains non-finite entries")
    q = psi_mat.shape[1]
    if q < 1:
        raise ValueError("need at least one snapshot pair")
    G = (theta_plus @ psi_mat.T) / q
    H = (psi_mat @ psi_mat.T) / q
    F = (theta_plus @ theta_plus.T) / q
    H = 0.5 * (H + H.T)
    F = 0.5 * (F + F.T)
    return GHCache(G=G, H=H, F=F, q=q, dims=dims)


def symmetric_rcond(M) -> float:
    """Reciprocal condition estimate of a symmetric PSD matrix."""
    eigs = np.linalg.eigvalsh(M)
    top = eigs[-1]
    if top <= 0:
        return 0.0
    return float(max(eigs[0], 0.0) / top)


def solve_spd(M, rhs, context: str):
    """Solve ``X M = rhs`` for symmetric positive definite ``M``.

    Raises :class:`SingularMatrixError` (reporting the rcond) when the
    matrix is numerically singular at the ``1e-14`` threshold.
    """
    rcond = symmetric_rcond(M)
    if rcond < RCOND_SINGULAR:
        raise SingularMatrixError(
            f"{context}: matrix numerically singular (rcond={rcond:.3e} < "
            f"{RCOND_SINGULAR:.0e}); increase the regularization "
            f"coefficient", rcond)
    chol = scipy.linalg.cho_factor(M, lower=True)
    return scipy.linalg.cho_solve(chol, rhs.T).T


def solve_edmd(cache: GHCache, alpha: float) -> np.ndarray:
    """Tikhonov-regularized Koopman matrix ``U = G inv(H + (alpha/q) I)``.

    ``alpha = 0`` requires ``H`` itself to be numerically invertible; the
    raised error suggests regularizing otherwise.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    H_alpha = cache.H + (alpha / cache.q) * np.eye(cache.H.shape[0])
    return solve_spd(H_alpha, cache.G, context="EDMD solve")


@dataclasses.dataclass(frozen=True)
class KoopmanPlant:
    """Plant Koopman matrix ``U_p = [A_p | B_p]`` with fixed output maps.

    ``C_p`` retracts the raw states from the lifted state and ``D_p`` is
    identically zero by the lifting convention.
    """

    U_p: np.ndarray
    C_p: np.ndarray

    def __post_init__(self):
        U_p = np.asarray(self.U_p, dtype=float)
        C_p = np.asarray(self.C_p, dtype=float)
        p = U_p.shape[0]
        if U_p.ndim != 2 or U_p.shape[1] <= p:
            raise ValueError(
                f"U_p must be (p, p + nu) with nu >= 1, got {U_p.shape}")
        if C_p.ndim != 2 or C_p.shape[1] != p:
            raise ValueError(
                f"C_p must have {p} columns, got {C_p.shape}")
        object.__setattr__(self, "U_p", U_p)
        object.__setattr__(self, "C_p", C_p)

    @property
    def p_lifted(self) -> int:
        return self.U_p.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.U_p.shape[1] - self.U_p.shape[0]

    @property
    def n_states(self) -> int:
        return self.C_p.shape[0]

    @property
    def A_p(self) -> np.ndarray:
        return self.U_p[:, :self.p_lifted]

    @property
    def B_p(self) -> np.ndarray:
        return self.U_p[:, self.p_lifted:]

    @property
    def D_p(self) -> np.ndarray:
        return np.zeros((self.n_states, self.n_inputs))

    def as_state_space(self, dt: float):
        from .lti_core import StateSpace
        return StateSpace(self.A_p, self.B_p, self.C_p, self.D_p, dt)


def predict_lifted(plant: KoopmanPlant, theta0, inputs) -> np.ndarray:
    """Pure lifted rollout ``theta[k+1] = A_p theta[k] + B_p u[k]``.

    No re-lifting between steps; retraction is applied only when
    reporting. Returns the lifted trajectory including ``theta0``.
    """
    from . import _accel

    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    if theta0.shape[0] != plant.p_lifted:
        raise ValueError(
            f"theta0 has length {theta0.shape[0]}, expected {plant.p_lifted}")
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, 1)
    if inputs.shape[1] != plant.n_inputs:
        raise ValueError(
            f"inputs must be (K, {plant.n_inputs}), got {inputs.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        return _accel.linear_rollout(plant.A_p, plant.B_p, theta0, inputs)
