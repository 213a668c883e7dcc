"""Closed-loop Koopman identification with a known controller.

The closed-loop Koopman matrix ``U_f`` maps ``[controller state; lifted
plant state; reference; feedforward]`` at step k to ``[controller state;
lifted plant state]`` at step k+1. When the loop is assembled from a
plant ``U_p = [A_p | B_p]`` and a controller, its blocks are

    U_f = [[A_c,      -B_c C_p,              B_c,      0   ],
           [B_p C_c,  A_p - B_p D_c C_p,     B_p D_c,  B_p ]].

The constrained estimator keeps exactly this structure on the plant
rows while fitting both ``U_f`` and ``U_p`` from data. The plant rows
of any structured ``U_f`` equal ``U_p @ M`` where ``M`` stacks
``[0, I, 0, 0]`` over ``[C_c, -D_c C_p, D_c, I]``, so the constrained
ridge problem reduces to an ordinary one in ``U_p``; the reduction is
exact, and a numerical certificate against the trace-form cost is
provided for every solution.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from . import _accel
from .edmd import (GHCache, KoopmanPlant, SingularMatrixError, compute_gh,
                   solve_spd)
from .lifting import LiftingConfig, SnapshotMatrices
from .lti_core import StateSpace


@dataclasses.dataclass(frozen=True)
class ControllerModel:
    """Known discrete controller from tracking error to plant input."""

    ss: StateSpace

    @property
    def n_states(self) -> int:
        return self.ss.n_states

    @property
    def n_inputs(self) -> int:
        return self.ss.n_inputs

    @property
    def n_outputs(self) -> int:
        return self.ss.n_outputs

    @property
    def A_c(self) -> np.ndarray:
        return self.ss.A

    @property
    def B_c(self) -> np.ndarray:
        return self.ss.B

    @property
    def C_c(self) -> np.ndarray:
        return self.ss.C

    @property
    def D_c(self) -> np.ndarray:
        return self.ss.D


@dataclasses.dataclass(frozen=True)
class ClosedLoopKoopman:
    """Closed-loop Koopman matrix with its block partition.

    Columns split as (controller states, lifted plant states,
    references, feedforward); rows split as (controller states, lifted
    plant states).
    """

    U_f: np.ndarray
    controller: ControllerModel
    C_p: np.ndarray
    n_references: int
    n_feedforward: int

    def __post_init__(self):
        U_f = np.asarray(self.U_f, dtype=float)
        C_p = np.asarray(self.C_p, dtype=float)
        n_c = self.controller.n_states
        p = C_p.shape[1]
        rows = n_c + p
        cols = rows + self.n_references + self.n_feedforward
        if U_f.shape != (rows, cols):
            raise ValueError(
                f"U_f shape {U_f.shape} inconsistent with blocks "
                f"({n_c}+{p}, {n_c}+{p}+{self.n_references}+"
                f"{self.n_feedforward})")
        object.__setattr__(self, "U_f", U_f)
        object.__setattr__(self, "C_p", C_p)

    @property
    def n_controller_states(self) -> int:
        return self.controller.n_states

    @property
    def p_lifted(self) -> int:
        return self.C_p.shape[1]

    @property
    def D_p(self) -> np.ndarray:
        return np.zeros((self.C_p.shape[0], self.controller.n_outputs))

    def _col_blocks(self):
        n_c, p = self.n_controller_states, self.p_lifted
        c1 = n_c
        c2 = c1 + p
        c3 = c2 + self.n_references
        return c1, c2, c3

    def block(self, row: int, col: int) -> np.ndarray:
        """Block (i, j) of the 2 x 4 partition, 1-indexed."""
        c1, c2, c3 = self._col_blocks()
        rows = slice(0, c1) if row == 1 else slice(c1, None)
        cols = [slice(0, c1), slice(c1, c2), slice(c2, c3),
                slice(c3, None)][col - 1]
        return self.U_f[rows, cols]

    @property
    def controller_rows(self) -> np.ndarray:
        return self.U_f[:self.n_controller_states]

    @property
    def plant_rows(self) -> np.ndarray:
        return self.U_f[self.n_controller_states:]

    @property
    def A_f(self) -> np.ndarray:
        """Closed-loop dynamics block (state columns of ``U_f``)."""
        return self.U_f[:, :self.n_controller_states + self.p_lifted]

    @property
    def B_f(self) -> np.ndarray:
        return self.U_f[:, self.n_controller_states + self.p_lifted:]

    def as_state_space(self, dt: float) -> StateSpace:
        """Closed-loop system with the retracted plant states as output."""
        m = self.C_p.shape[0]
        n = self.n_controller_states + self.p_lifted
        C = np.zeros((m, n))
        C[:, self.n_controller_states:] = self.C_p
        D = np.zeros((m, self.n_references + self.n_feedforward))
        return StateSpace(self.A_f, self.B_f, C, D, dt)


def plant_input_map(controller: ControllerModel, C_p,
                    n_references: int, n_feedforward: int) -> np.ndarray:
    """Matrix ``M`` mapping closed-loop snapshot columns to plant data.

    ``M @ Psi`` stacks the lifted plant state over the reconstructed
    plant input (controller output plus feedforward), and the plant rows
    of any structured closed-loop matrix equal ``U_p @ M``.
    """
    C_p = np.asarray(C_p, dtype=float)
    n_c = controller.n_states
    nu = controller.n_outputs
    p = C_p.shape[1]
    if controller.n_inputs != n_references:
        raise ValueError(
            f"controller expects {controller.n_inputs} reference channels, "
            f"snapshots have {n_references}")
    if nu != n_feedforward:
        raise ValueError(
            f"feedforward dim {n_feedforward} does not match plant input "
            f"dim {nu}")
    if C_p.shape[0] != n_references:
        raise ValueError(
            f"C_p has {C_p.shape[0]} outputs, expected {n_references}")
    M = np.zeros((p + nu, n_c + p + n_references + n_feedforward))
    M[:p, n_c:n_c + p] = np.eye(p)
    M[p:, :n_c] = controller.C_c
    M[p:, n_c:n_c + p] = -controller.D_c @ C_p
    M[p:, n_c + p:n_c + p + n_references] = controller.D_c
    M[p:, n_c + p + n_references:] = np.eye(nu)
    return M


def build_uf_from_plant(plant: KoopmanPlant,
                        controller: ControllerModel) -> ClosedLoopKoopman:
    """Assemble the structured closed-loop matrix from plant and controller."""
    n_c = controller.n_states
    nu = controller.n_outputs
    n_r = controller.n_inputs
    p = plant.p_lifted
    if plant.n_inputs != nu:
        raise ValueError(
            f"plant input dim {plant.n_inputs} does not match controller "
            f"output dim {nu}")
    if plant.C_p.shape[0] != n_r:
        raise ValueError(
            f"plant output dim {plant.C_p.shape[0]} does not match "
            f"controller input dim {n_r}")
    U_f = np.zeros((n_c + p, n_c + p + n_r + nu))
    U_f[:n_c, :n_c] = controller.A_c
    U_f[:n_c, n_c:n_c + p] = -controller.B_c @ plant.C_p
    U_f[:n_c, n_c + p:n_c + p + n_r] = controller.B_c
    M = plant_input_map(controller, plant.C_p, n_r, nu)
    U_f[n_c:] = plant.U_p @ M
    return ClosedLoopKoopman(U_f, controller, plant.C_p, n_r, nu)


def extract_plant_lstsq(clk: ClosedLoopKoopman) -> KoopmanPlant:
    """Least-squares plant recovery from an identified closed loop.

    ``B_p`` solves ``B_p [C_c D_c 1] = [U21 U23 U24]`` in the
    least-squares sense and ``A_p = U22 + B_p D_c C_p``. On a matrix
    without the closed-loop structure this is only an approximation:
    re-assembling the loop from the recovered plant need not return the
    original matrix.
    """
    ctrl = clk.controller
    stacked = np.hstack([clk.block(2, 1), clk.block(2, 3), clk.block(2, 4)])
    basis = np.hstack([ctrl.C_c, ctrl.D_c, np.eye(ctrl.n_outputs)])
    B_p = stacked @ np.linalg.pinv(basis)
    A_p = clk.block(2, 2) + B_p @ ctrl.D_c @ clk.C_p
    return KoopmanPlant(np.hstack([A_p, B_p]), clk.C_p)


def rewrap(clk: ClosedLoopKoopman,
           controller: Optional[ControllerModel] = None) -> ClosedLoopKoopman:
    """Extract the plant by least squares and close the loop again.

    With a structured closed-loop matrix this is the identity; on an
    unstructured one the result generally differs from the input, which
    is the pitfall the constrained estimator avoids.
    """
    return build_uf_from_plant(extract_plant_lstsq(clk),
                               controller if controller is not None
                               else clk.controller)


def reconstruct_controller_state(controller: ControllerModel, errors,
                                 x_c0=None) -> np.ndarray:
    """Controller state sequence driven by the recorded tracking error.

    Returns states aligned with the error samples (same length), started
    from ``x_c0`` (zero by default).
    """
    errors = np.asarray(errors, dtype=float)
    if errors.ndim == 1:
        errors = errors.reshape(-1, 1)
    if errors.shape[1] != controller.n_inputs:
        raise ValueError(
            f"errors must be (T, {controller.n_inputs}), got {errors.shape}")
    n_c = controller.n_states
    if x_c0 is None:
        x_c0 = np.zeros(n_c)
    x_c0 = np.asarray(x_c0, dtype=float).reshape(-1)
    if x_c0.shape[0] != n_c:
        raise ValueError(f"x_c0 has length {x_c0.shape[0]}, expected {n_c}")
    states = _accel.linear_rollout(controller.A_c, controller.B_c, x_c0,
                                   errors)
    return states[:-1]


def attach_controller_states(episode, controller: ControllerModel,
                             x_c0=None):
    """Episode copy with controller states reconstructed from the error.

    The tracking error is the recorded reference minus the recorded
    plant states, which is exactly what the controller acted on, so the
    reconstruction reproduces the true controller trajectory when the
    initial state is right (transient-discarded data makes the default
    zero initial state immaterial).
    """
    errors = episode.references - episode.plant_states
    states = reconstruct_controller_state(controller, errors, x_c0=x_c0)
    return dataclasses.replace(episode, controller_states=states)


def _split_g(cache: GHCache, n_c: int):
    return cache.G[:n_c], cache.G[n_c:]


def _require_dims(data) -> tuple:
    if isinstance(data, SnapshotMatrices):
        return data.dims
    if isinstance(data, GHCache):
        if data.dims is None:
            raise ValueError(
                "GHCache built from raw matrices carries no block dims; "
                "build it from SnapshotMatrices")
        return data.dims
    raise TypeError(f"expected SnapshotMatrices or GHCache, got {type(data)}")


def solve_cl_edmd(data, controller: ControllerModel, C_p, alpha: float,
                  pin_controller_rows: bool = False):
    """Structure-constrained closed-loop estimate of ``U_f`` and ``U_p``.

    Globally minimizes the Tikhonov ridge cost over all closed-loop
    matrices whose plant rows carry the feedback structure, by solving
    the equivalent reduced ridge problem in ``U_p``. The controller rows
    are fit from data by default (the constraint set leaves them free);
    ``pin_controller_rows=True`` instead sets them to the known
    controller matrices.

    Parameters
    ----------
    data : SnapshotMatrices or GHCache
        Closed-loop snapshots, or a cache built from them (reusable
        across regularization coefficients).
    controller : ControllerModel
    C_p : (m, p) array
        Retraction map fixed by the lifting.
    alpha : float
        Nonnegative regularization coefficient.

    Returns
    -------
    (ClosedLoopKoopman, KoopmanPlant)
        Consistent pair: the closed-loop plant rows equal ``U_p @ M``
        exactly.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    dims = _require_dims(data)
    cache = data if isinstance(data, GHCache) else compute_gh(data)
    n_c, p, n_r, n_f, q = dims
    C_p = np.asarray(C_p, dtype=float)
    if C_p.shape[1] != p:
        raise ValueError(
            f"C_p has {C_p.shape[1]} columns, snapshots have lifted "
            f"dimension {p}")
    if controller.n_states != n_c:
        raise ValueError(
            f"controller has {controller.n_states} states, snapshots "
            f"have {n_c}")
    M = plant_input_map(controller, C_p, n_r, n_f)
    H_alpha = cache.H + (alpha / q) * np.eye(cache.H.shape[0])
    G1, G2 = _split_g(cache, n_c)

    reduced = M @ H_alpha @ M.T
    U_p = solve_spd(reduced, G2 @ M.T,
                    context="constrained closed-loop solve (plant rows)")
    if n_c > 0:
        if pin_controller_rows:
            V = np.zeros((n_c, n_c + p + n_r + n_f))
            V[:, :n_c] = controller.A_c
            V[:, n_c:n_c + p] = -controller.B_c @ C_p
            V[:, n_c + p:n_c + p + n_r] = controller.B_c
        else:
            V = solve_spd(H_alpha, G1,
                          context="constrained closed-loop solve "
                                  "(controller rows)")
        U_f = np.vstack([V, U_p @ M])
    else:
        U_f = U_p @ M
    clk = ClosedLoopKoopman(U_f, controller, C_p, n_r, n_f)
    return clk, KoopmanPlant(U_p, C_p)


@dataclasses.dataclass(frozen=True)
class SdpData:
    """Data matrices of the trace-form cost and its matrix-inequality form.

    ``H_alpha`` is positive definite with lower-triangular Cholesky
    factor ``R_alpha``; the ridge cost of any candidate equals
    ``tr(F - He(U G^T) + U H_alpha U^T)``.
    """

    F: np.ndarray
    G: np.ndarray
    H_alpha: np.ndarray
    R_alpha: np.ndarray
    alpha: float
    q: int
    dims: Optional[tuple] = None

    def lmi_block(self, U_f, W) -> np.ndarray:
        """Assemble the Schur-complement block matrix of the slack form.

        The candidate/slack pair is feasible exactly when this matrix is
        negative definite, which encodes ``F - He(U G^T) +
        U H_alpha U^T < W`` through the Cholesky factor.
        """
        U_f = np.asarray(U_f, dtype=float)
        W = np.asarray(W, dtype=float)
        top_left = -W + self.F - (U_f @ self.G.T + self.G @ U_f.T)
        top_right = U_f @ self.R_alpha
        n_out = top_left.shape[0]
        n_in = self.R_alpha.shape[0]
        block = np.zeros((n_out + n_in, n_out + n_in))
        block[:n_out, :n_out] = top_left
        block[:n_out, n_out:] = top_right
        block[n_out:, :n_out] = top_right.T
        block[n_out:, n_out:] = -np.eye(n_in)
        return block


def build_sdp_data(data, alpha: float) -> SdpData:
    """Cost matrices ``F, G, H_alpha`` and the Cholesky factor of the latter.

    Raises when ``H_alpha`` is not positive definite, reporting how much
    regularization would fix it (snapshot columns must be linearly
    independent for ``alpha = 0``).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    cache = data if isinstance(data, GHCache) else compute_gh(data)
    H_alpha = cache.H + (alpha / cache.q) * np.eye(cache.H.shape[0])
    eigs = np.linalg.eigvalsh(H_alpha)
    if eigs[0] <= 0 or eigs[0] / eigs[-1] < 1e-15:
        needed = (1e-12 - eigs[0]) * cache.q
        raise SingularMatrixError(
            f"H_alpha is not positive definite (min eigenvalue "
            f"{eigs[0]:.3e}); alpha > {max(needed, 0.0):.3e} would make it "
            f"so", float(max(eigs[0], 0.0) / eigs[-1]))
    R_alpha = np.linalg.cholesky(H_alpha)
    return SdpData(F=cache.F, G=cache.G, H_alpha=H_alpha, R_alpha=R_alpha,
                   alpha=float(alpha), q=cache.q, dims=cache.dims)


def evaluate_cl_cost(U_f, sdp: SdpData) -> float:
    """Trace form of the ridge cost at a candidate closed-loop matrix.

    Equals ``(1/q) ||Theta_plus - U_f Psi||_F^2 + (alpha/q)
    ||U_f||_F^2`` up to round-off.
    """
    U_f = np.asarray(U_f, dtype=float)
    if U_f.shape != sdp.G.shape:
        raise ValueError(
            f"U_f shape {U_f.shape} does not match data shape {sdp.G.shape}")
    cross = float(np.sum(U_f * sdp.G))
    quad = float(np.sum((U_f @ sdp.H_alpha) * U_f))
    return float(np.trace(sdp.F)) - 2.0 * cross + quad


@dataclasses.dataclass(frozen=True)
class StationarityReport:
    """Numerical optimality certificate for a constrained solution."""

    passed: bool
    residual_controller_rows: float
    residual_plant_rows: float
    tolerance: float
    cost: float
    min_cost_increase: float
    n_perturbations: int


def verify_stationarity(clk: ClosedLoopKoopman, plant: KoopmanPlant,
                        sdp: SdpData, n_perturbations: int = 10,
                        perturbation_scale: float = 1e-3,
                        seed: int = 0) -> StationarityReport:
    """Certify that a solution solves the constrained ridge problem.

    Checks the reduced normal equations of both row blocks against the
    cost data, then verifies that random structure-preserving
    perturbations of the solution never decrease the trace-form cost.
    Returns a failed report rather than raising.
    """
    n_c = clk.n_controller_states
    M = plant_input_map(clk.controller, clk.C_p, clk.n_references,
                        clk.n_feedforward)
    G1, G2 = sdp.G[:n_c], sdp.G[n_c:]
    tol = 1e-8 * (1.0 + float(np.linalg.norm(sdp.G)))
    if n_c > 0:
        res1 = float(np.linalg.norm(
            clk.controller_rows @ sdp.H_alpha - G1))
    else:
        res1 = 0.0
    res2 = float(np.linalg.norm(
        plant.U_p @ (M @ sdp.H_alpha @ M.T) - G2 @ M.T))

    rng = np.random.default_rng(seed)
    base_cost = evaluate_cl_cost(clk.U_f, sdp)
    scale_v = perturbation_scale * (1.0 + np.linalg.norm(clk.controller_rows)) \
        if n_c > 0 else 0.0
    scale_p = perturbation_scale * (1.0 + np.linalg.norm(plant.U_p))
    min_increase = np.inf
    for _ in range(n_perturbations):
        d_up = rng.standard_normal(plant.U_p.shape) * scale_p
        rows = [(plant.U_p + d_up) @ M]
        if n_c > 0:
            d_v = rng.standard_normal((n_c, clk.U_f.shape[1])) * scale_v
            rows.insert(0, clk.controller_rows + d_v)
        perturbed = np.vstack(rows)
        increase = evaluate_cl_cost(perturbed, sdp) - base_cost
        min_increase = min(min_increase, increase)
    passed = (res1 <= tol and res2 <= tol and min_increase > 0.0)
    return StationarityReport(
        passed=passed,
        residual_controller_rows=res1,
        residual_plant_rows=res2,
        tolerance=tol,
        cost=base_cost,
        min_cost_increase=float(min_increase),
        n_perturbations=n_perturbations,
    )


def model_to_dict(clk: ClosedLoopKoopman, plant: KoopmanPlant, alpha: float,
                  config: LiftingConfig) -> dict:
    """JSON-ready description of an identified closed-loop/plant pair."""
    return {
        "U_f": clk.U_f.tolist(),
        "U_p": plant.U_p.tolist(),
        "controller": clk.controller.ss.to_dict(),
        "alpha": float(alpha),
        "lifting": config.to_dict(),
        "n_references": clk.n_references,
        "n_feedforward": clk.n_feedforward,
    }


def model_from_dict(data: dict):
    """Inverse of :func:`model_to_dict`."""
    config = LiftingConfig.from_dict(data["lifting"])
    controller = ControllerModel(StateSpace.from_dict(data["controller"]))
    C_p = np.zeros((config.state_dim, config.p_lifted))
    C_p[:, :config.state_dim] = np.eye(config.state_dim)
    plant = KoopmanPlant(np.array(data["U_p"], dtype=float), C_p)
    clk = ClosedLoopKoopman(np.array(data["U_f"], dtype=float), controller,
                            C_p, int(data["n_references"]),
                            int(data["n_feedforward"]))
    return clk, plant, float(data["alpha"]), config
