"""Discrete-time LTI state-space algebra.

Provides the state-space container used for plants, controllers, and
their interconnections, plus series/feedback interconnection, a
well-posedness check, eigenvalue analysis, rollout simulation, and
zero-order-hold discretization.

Systems with zero states are first class: a static gain is represented
by empty ``A``, ``B``, ``C`` and a plain feedthrough ``D``.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.linalg

RCOND_ILL_POSED = 1e-12


class IllPosedError(ValueError):
    """Feedback interconnection with a (numerically) singular loop matrix."""


def _as_matrix(value, rows=None, cols=None, name="matrix"):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if rows == 1 else arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclasses.dataclass(frozen=True)
class StateSpace:
    """Discrete-time LTI system ``x+ = A x + B u``, ``y = C x + D u``.

    Parameters
    ----------
    A : (n, n) array_like
    B : (n, nu) array_like
    C : (ny, n) array_like
    D : (ny, nu) array_like
    dt : float
        Sample period in seconds, positive.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.size == 0:
            A = A.reshape(0, 0)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]

        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.size == 0:
            # Preserve a declared input count on zero-state systems.
            B = B.reshape(n, B.shape[1] if B.shape[0] == n or n == 0 else 0)
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got shape {B.shape}")
        nu = B.shape[1]

        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.size == 0:
            C = C.reshape(C.shape[0] if C.shape[1] == n or n == 0 else 0, n)
        if C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got shape {C.shape}")
        ny = C.shape[0]

        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if D.size == 0:
            D = D.reshape(ny, nu) if ny * nu == 0 else D
        if D.shape != (ny, nu):
            raise ValueError(f"D must be ({ny}, {nu}), got shape {D.shape}")

        for name, arr in (("A", A), ("B", B), ("C", C), ("D", D)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if np.ndim(self.dt) != 0 or not float(self.dt) > 0:
            raise ValueError(f"dt must be a positive scalar, got {self.dt}")
        for field, arr in (("A", A), ("B", B), ("C", C), ("D", D)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, field, arr)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    @staticmethod
    def static_gain(D, dt: float) -> "StateSpace":
        """Zero-state system that is pure feedthrough."""
        D = _as_matrix(D, name="D")
        ny, nu = D.shape
        return StateSpace(np.zeros((0, 0)), np.zeros((0, nu)),
                          np.zeros((ny, 0)), D, dt)

    def to_dict(self) -> dict:
        """JSON-ready dict with row-major nested arrays."""
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "dt": self.dt,
        }

    @staticmethod
    def from_dict(data: dict) -> "StateSpace":
        n = len(data["A"])
        ny = len(data["D"])
        nu = len(data["D"][0]) if ny else 0
        A = np.array(data["A"], dtype=float).reshape(n, n)
        B = np.array(data["B"], dtype=float).reshape(n, nu)
        C = np.array(data["C"], dtype=float).reshape(ny, n)
        D = np.array(data["D"], dtype=float).reshape(ny, nu)
        return StateSpace(A, B, C, D, float(data["dt"]))


@dataclasses.dataclass(frozen=True)
class Spectrum:
    """Eigenvalues sorted by descending modulus then ascending phase."""

    eigenvalues: np.ndarray
    spectral_radius: float


@dataclasses.dataclass(frozen=True)
class WellPosedness:
    """Result of the loop-matrix invertibility check."""

    well_posed: bool
    rcond: float


def _check_pair(controller: StateSpace, plant: StateSpace):
    if controller.dt != plant.dt:
        raise ValueError(
            f"sample period mismatch: controller dt={controller.dt}, "
            f"plant dt={plant.dt}")
    if controller.n_outputs != plant.n_inputs:
        raise ValueError(
            f"controller output dim {controller.n_outputs} does not match "
            f"plant input dim {plant.n_inputs}")


def series_interconnect(controller: StateSpace, plant: StateSpace) -> StateSpace:
    """Cascade plant after controller, with feedforward at the plant input.

    The combined input is the controller input stacked with a feedforward
    signal added directly to the plant input; the combined state stacks
    controller state over plant state, and the output is the plant output.
    """
    _check_pair(controller, plant)
    n_c, n_p = controller.n_states, plant.n_states
    nu_c, nu_p = controller.n_inputs, plant.n_inputs
    n = n_c + n_p
    A = np.zeros((n, n))
    A[:n_c, :n_c] = controller.A
    A[n_c:, :n_c] = plant.B @ controller.C
    A[n_c:, n_c:] = plant.A
    B = np.zeros((n, nu_c + nu_p))
    B[:n_c, :nu_c] = controller.B
    B[n_c:, :nu_c] = plant.B @ controller.D
    B[n_c:, nu_c:] = plant.B
    C = np.zeros((plant.n_outputs, n))
    C[:, :n_c] = plant.D @ controller.C
    C[:, n_c:] = plant.C
    D = np.zeros((plant.n_outputs, nu_c + nu_p))
    D[:, :nu_c] = plant.D @ controller.D
    D[:, nu_c:] = plant.D
    return StateSpace(A, B, C, D, plant.dt)


def is_well_posed(controller: StateSpace, plant: StateSpace) -> WellPosedness:
    """Check invertibility of the loop matrix ``Q = 1 + D_plant D_ctrl``.

    Returns the verdict together with a reciprocal condition estimate of
    ``Q`` (ratio of extreme singular values). ``Q = 1`` whenever the
    plant has no feedthrough, so such loops are always well posed.
    """
    _check_pair(controller, plant)
    if plant.n_outputs != controller.n_inputs:
        raise ValueError(
            f"plant output dim {plant.n_outputs} does not match controller "
            f"input dim {controller.n_inputs}")
    ny = plant.n_outputs
    if ny == 0:
        return WellPosedness(True, 1.0)
    Q = np.eye(ny) + plant.D @ controller.D
    svals = np.linalg.svd(Q, compute_uv=False)
    rcond = float(svals[-1] / svals[0]) if svals[0] > 0 else 0.0
    return WellPosedness(rcond >= RCOND_ILL_POSED, rcond)


def feedback_interconnect(controller: StateSpace, plant: StateSpace) -> StateSpace:
    """Negative feedback loop: controller input is reference minus output.

    The loop input is the reference stacked with a feedforward signal
    added at the plant input; the state stacks controller state over
    plant state; the output is the plant output. Raises
    :class:`IllPosedError` when the algebraic loop is not solvable.
    """
    report = is_well_posed(controller, plant)
    if not report.well_posed:
        raise IllPosedError(
            f"ill-posed feedback interconnection: rcond(1 + Dp Dc) = "
            f"{report.rcond:.3e} < {RCOND_ILL_POSED:.0e}")
    n_c, n_p = controller.n_states, plant.n_states
    ny = plant.n_outputs
    nu_p = plant.n_inputs
    Ac, Bc, Cc, Dc = controller.A, controller.B, controller.C, controller.D
    Ap, Bp, Cp, Dp = plant.A, plant.B, plant.C, plant.D
    Q = np.eye(ny) + Dp @ Dc

    def qsolve(X):
        return np.linalg.solve(Q, X) if X.size else X.reshape(ny, -1)

    Qi_DpCc = qsolve(Dp @ Cc)
    Qi_Cp = qsolve(Cp)
    Qi_DpDc = qsolve(Dp @ Dc)
    Qi_Dp = qsolve(Dp)

    n = n_c + n_p
    A = np.zeros((n, n))
    A[:n_c, :n_c] = Ac - Bc @ Qi_DpCc
    A[:n_c, n_c:] = -Bc @ Qi_Cp
    A[n_c:, :n_c] = Bp @ Cc - Bp @ Dc @ Qi_DpCc
    A[n_c:, n_c:] = Ap - Bp @ Dc @ Qi_Cp
    B = np.zeros((n, ny + nu_p))
    B[:n_c, :ny] = Bc - Bc @ Qi_DpDc
    B[:n_c, ny:] = -Bc @ Qi_Dp
    B[n_c:, :ny] = Bp @ Dc - Bp @ Dc @ Qi_DpDc
    B[n_c:, ny:] = Bp - Bp @ Dc @ Qi_Dp
    C = np.zeros((ny, n))
    C[:, :n_c] = Qi_DpCc
    C[:, n_c:] = Qi_Cp
    D = np.zeros((ny, ny + nu_p))
    D[:, :ny] = Qi_DpDc
    D[:, ny:] = Qi_Dp
    return StateSpace(A, B, C, D, plant.dt)


def spectrum(A) -> Spectrum:
    """All eigenvalues of a square matrix plus the spectral radius."""
    A = _as_matrix(A, name="A") if np.size(A) else np.zeros((0, 0))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    if A.shape[0] == 0:
        return Spectrum(np.zeros(0, dtype=complex), 0.0)
    eigs = np.linalg.eigvals(A)
    order = np.lexsort((np.angle(eigs), -np.abs(eigs)))
    eigs = eigs[order]
    return Spectrum(eigs, float(np.abs(eigs[0])))


def simulate(sys: StateSpace, x0, inputs):
    """Pure rollout of a state-space system, no re-anchoring to data.

    Parameters
    ----------
    sys : StateSpace
    x0 : (n,) array_like
    inputs : (K, nu) array_like
        Accepts a 1-D sequence when the system has one input.

    Returns
    -------
    states : (K + 1, n) array
    outputs : (K, ny) array
        ``y[k] = C x[k] + D u[k]``.

    Divergence is representable: overflow to non-finite values is not an
    error, since unstable rollouts are expected data.
    """
    from . import _accel

    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != sys.n_states:
        raise ValueError(
            f"x0 has length {x0.shape[0]}, expected {sys.n_states}")
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, 1) if sys.n_inputs == 1 else \
            inputs.reshape(-1, sys.n_inputs)
    if inputs.ndim != 2 or inputs.shape[1] != sys.n_inputs:
        raise ValueError(
            f"inputs must be (K, {sys.n_inputs}), got {inputs.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        states = _accel.linear_rollout(sys.A, sys.B, x0, inputs)
        outputs = states[:-1] @ sys.C.T + inputs @ sys.D.T
    return states, outputs


def zoh_discretize(Ac, Bc, dt: float):
    """Zero-order-hold discretization of continuous (Ac, Bc).

    Computed through the augmented matrix exponential, so
    ``Ad = exp(Ac dt)`` and ``Bd = int_0^dt exp(Ac s) ds Bc``.
    """
    Ac = _as_matrix(Ac, name="Ac")
    if Ac.shape[0] != Ac.shape[1]:
        raise ValueError(f"Ac must be square, got shape {Ac.shape}")
    n = Ac.shape[0]
    Bc = _as_matrix(Bc, rows=n, name="Bc") if n else np.zeros((0, 0))
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    nu = Bc.shape[1]
    if n == 0:
        return np.zeros((0, 0)), np.zeros((0, nu))
    block = np.zeros((n + nu, n + nu))
    block[:n, :n] = Ac * dt
    block[:n, n:] = Bc * dt
    exp_block = scipy.linalg.expm(block)
    return exp_block[:n, :n], exp_block[:n, n:]
