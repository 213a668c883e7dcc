"""State lifting and snapshot-matrix assembly.

Lifting applies monomials of the raw plant state (degree 1 up to the
configured degree, graded lexicographic, raw state first, no constant
term) followed by delay embedding. Snapshot matrices stack, per column
and in this order: controller state, lifted plant state, reference,
feedforward. Snapshot pairs never cross episode boundaries.

The monomial ordering is coordinate-defining for every identified
matrix, so it is fixed: for each degree, index tuples are enumerated
lexicographically (``itertools.combinations_with_replacement`` order).
With two states and degree two the lifted vector is
``[x1, x2, x1^2, x1*x2, x2^2]``.
"""

from __future__ import annotations

import dataclasses
import functools
import itertools
import math
from typing import Optional, Sequence

import numpy as np


@dataclasses.dataclass(frozen=True)
class LiftingConfig:
    """Configuration of the lifting map.

    Parameters
    ----------
    state_dim : int
        Number of raw plant states ``m``.
    monomial_degree : int
        Highest monomial degree, at least 1 (1 keeps the state as is).
    n_delays : int
        Number of past lifted samples appended to the current one.
    delay_inputs : bool
        When True, references and feedforward are delay-embedded with
        the same horizon as the plant state. Controller states never
        are. Default False: inputs enter unlifted and undelayed.
    """

    state_dim: int
    monomial_degree: int = 2
    n_delays: int = 0
    delay_inputs: bool = False

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be positive")
        if self.monomial_degree < 1:
            raise ValueError("monomial_degree must be at least 1")
        if self.n_delays < 0:
            raise ValueError("n_delays must be nonnegative")

    @property
    def p_base(self) -> int:
        """Lifted dimension before delays (monomial count)."""
        m, deg = self.state_dim, self.monomial_degree
        return math.comb(m + deg, deg) - 1

    @property
    def p_lifted(self) -> int:
        """Total lifted plant-state dimension including delays."""
        return self.p_base * (self.n_delays + 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "LiftingConfig":
        return LiftingConfig(**data)


@functools.lru_cache(maxsize=None)
def _monomial_index_tuples(state_dim: int, degree: int):
    combos = []
    for deg in range(1, degree + 1):
        combos.extend(itertools.combinations_with_replacement(range(state_dim), deg))
    return tuple(combos)


def lift_state(config: LiftingConfig, x) -> np.ndarray:
    """Monomial lift of a single state vector (no delays, no constant)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != config.state_dim:
        raise ValueError(
            f"state has length {x.shape[0]}, expected {config.state_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite entries")
    return lift_trajectory(config, x.reshape(1, -1))[0]


def lift_trajectory(config: LiftingConfig, states) -> np.ndarray:
    """Monomial lift applied row-wise to a (T, m) state trajectory."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != config.state_dim:
        raise ValueError(
            f"states must be (T, {config.state_dim}), got {states.shape}")
    combos = _monomial_index_tuples(config.state_dim, config.monomial_degree)
    out = np.empty((states.shape[0], len(combos)))
    m = config.state_dim
    out[:, :m] = states
    for col, combo in enumerate(combos[m:], start=m):
        out[:, col] = np.prod(states[:, combo], axis=1)
    return out


def delay_embed(config: LiftingConfig, lifted) -> np.ndarray:
    """Stack each sample with its ``n_delays`` predecessors.

    Row ``k`` of the output is ``[theta_k, theta_{k-1}, ...,
    theta_{k-n_delays}]``; the first ``n_delays`` samples are consumed,
    so a length-T input yields length ``T - n_delays``.
    """
    lifted = np.asarray(lifted, dtype=float)
    if lifted.ndim != 2:
        raise ValueError(f"lifted sequence must be 2-D, got {lifted.shape}")
    d = config.n_delays
    if lifted.shape[0] <= d:
        raise ValueError(
            f"sequence of length {lifted.shape[0]} is too short for "
            f"{d} delays")
    if d == 0:
        return lifted.copy()
    T = lifted.shape[0]
    return np.concatenate([lifted[d - j:T - j] for j in range(d + 1)], axis=1)


@dataclasses.dataclass(frozen=True)
class Episode:
    """One recorded closed-loop trajectory, uniformly sampled.

    All signal arrays have one row per sample. ``controller_states`` may
    be None when not recorded; reconstruct them from the tracking error
    before assembling snapshots.
    """

    index: int
    dt: float
    plant_states: np.ndarray
    plant_input: np.ndarray
    references: np.ndarray
    feedforward: np.ndarray
    controller_states: Optional[np.ndarray] = None

    def __post_init__(self):
        def coerce(name, value, allow_none=False):
            if value is None:
                if allow_none:
                    return None
                raise ValueError(f"{name} must not be None")
            arr = np.asarray(value, dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 1-D or 2-D")
            return arr

        fields = {
            "plant_states": coerce("plant_states", self.plant_states),
            "plant_input": coerce("plant_input", self.plant_input),
            "references": coerce("references", self.references),
            "feedforward": coerce("feedforward", self.feedforward),
            "controller_states": coerce(
                "controller_states", self.controller_states, allow_none=True),
        }
        lengths = {name: arr.shape[0] for name, arr in fields.items()
                   if arr is not None}
        if len(set(lengths.values())) > 1:
            raise ValueError(f"signal lengths differ: {lengths}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name, arr in fields.items():
            object.__setattr__(self, name, arr)

    @property
    def n_samples(self) -> int:
        return self.plant_states.shape[0]


@dataclasses.dataclass(frozen=True)
class SnapshotMatrices:
    """Column-paired lifted data.

    ``Psi`` stacks ``[controller state; lifted plant state; reference;
    feedforward]`` at step k; ``Theta_plus`` stacks ``[controller state;
    lifted plant state]`` at step k+1. ``dims`` records the row-block
    sizes ``(n_c, p_lifted, n_r, n_f, q)``.
    """

    Psi: np.ndarray
    Theta_plus: np.ndarray
    dims: tuple

    def __post_init__(self):
        n_c, p_lift, n_r, n_f, q = self.dims
        if self.Psi.shape != (n_c + p_lift + n_r + n_f, q):
            raise ValueError(
                f"Psi shape {self.Psi.shape} inconsistent with dims {self.dims}")
        if self.Theta_plus.shape != (n_c + p_lift, q):
            raise ValueError(
                f"Theta_plus shape {self.Theta_plus.shape} inconsistent "
                f"with dims {self.dims}")
        if q < 1:
            raise ValueError("snapshot matrices need at least one column")

    @property
    def n_controller_states(self) -> int:
        return self.dims[0]

    @property
    def p_lifted(self) -> int:
        return self.dims[1]

    @property
    def n_references(self) -> int:
        return self.dims[2]

    @property
    def n_feedforward(self) -> int:
        return self.dims[3]

    @property
    def q(self) -> int:
        return self.dims[4]


def assemble_snapshots(config: LiftingConfig,
                       episodes: Sequence[Episode]) -> SnapshotMatrices:
    """Lift, delay-embed, and column-pair a list of episodes.

    Episodes contribute ``len - n_delays - 1`` snapshot pairs each, in
    episode order; no pair straddles an episode boundary. Controller
    states must be present on every episode.
    """
    if not episodes:
        raise ValueError("need at least one episode")
    d = config.n_delays
    psi_cols, theta_cols = [], []
    ref_dim = None
    for ep in episodes:
        if ep.controller_states is None:
            raise ValueError(
                f"episode {ep.index} has no controller states; reconstruct "
                f"them first")
        if ep.n_samples < d + 2:
            raise ValueError(
                f"episode {ep.index} has {ep.n_samples} samples; need at "
                f"least {d + 2} for {d} delays")
        lifted = delay_embed(config, lift_trajectory(config, ep.plant_states))
        refs, ffwd = ep.references, ep.feedforward
        if config.delay_inputs:
            refs = delay_embed(config, refs)
            ffwd = delay_embed(config, ffwd)
        else:
            refs, ffwd = refs[d:], ffwd[d:]
        xc = ep.controller_states[d:]
        dims_here = (xc.shape[1], lifted.shape[1], refs.shape[1], ffwd.shape[1])
        if ref_dim is None:
            ref_dim = dims_here
        elif dims_here != ref_dim:
            raise ValueError(
                f"episode {ep.index} block dims {dims_here} differ from "
                f"{ref_dim}")
        full = np.hstack([xc, lifted, refs, ffwd])
        psi_cols.append(full[:-1].T)
        theta_cols.append(full[1:, :xc.shape[1] + lifted.shape[1]].T)
    Psi = np.hstack(psi_cols)
    Theta_plus = np.hstack(theta_cols)
    n_c, p_lift, n_r, n_f = ref_dim
    return SnapshotMatrices(Psi, Theta_plus,
                            (n_c, p_lift, n_r, n_f, Psi.shape[1]))


def retract(p_lifted: int, state_dim: int) -> np.ndarray:
    """Output matrix recovering the raw state from the lifted state.

    Returns ``[I_m, 0]``; the matching feedthrough is identically zero
    because the lifted plant keeps the raw state in its leading
    coordinates.
    """
    if p_lifted < state_dim:
        raise ValueError(
            f"lifted dimension {p_lifted} smaller than state dimension "
            f"{state_dim}")
    C = np.zeros((state_dim, p_lifted))
    C[:, :state_dim] = np.eye(state_dim)
    return C


CSV_FIELDS = ["k", "t", "x1", "x2", "u", "r1", "r2", "f"]
CSV_CONTROLLER_FIELDS = ["xc1", "xc2"]


def write_episode_csv(path, episode: Episode) -> None:
    """Write one episode in the harness CSV schema.

    Header is ``k,t,x1,x2,u,r1,r2,f`` plus ``xc1,xc2`` when controller
    states are recorded. Requires the harness signal layout: two plant
    states, one input, two references, one feedforward.
    """
    shapes = (episode.plant_states.shape[1], episode.plant_input.shape[1],
              episode.references.shape[1], episode.feedforward.shape[1])
    if shapes != (2, 1, 2, 1):
        raise ValueError(
            f"episode CSV schema needs signal dims (2, 1, 2, 1), got {shapes}")
    has_xc = episode.controller_states is not None
    if has_xc and episode.controller_states.shape[1] != 2:
        raise ValueError("episode CSV schema stores exactly two controller "
                         "states")
    header = CSV_FIELDS + (CSV_CONTROLLER_FIELDS if has_xc else [])
    k = np.arange(episode.n_samples, dtype=float)
    columns = [k, k * episode.dt, episode.plant_states,
               episode.plant_input, episode.references, episode.feedforward]
    if has_xc:
        columns.append(episode.controller_states)
    table = np.column_stack(columns)
    # %.17g round-trips float64 exactly, keeping regeneration byte-stable.
    np.savetxt(path, table, fmt="%.17g", delimiter=",",
               header=",".join(header), comments="")


def read_episode_csv(path, index: int = 0, dt: Optional[float] = None) -> Episode:
    """Load an episode written by :func:`write_episode_csv`.

    The sample period is inferred from the time column unless given.
    """
    with open(path, newline="") as handle:
        header = handle.readline().strip().split(",")
        data = np.loadtxt(handle, delimiter=",", ndmin=2)
    if header[:8] != CSV_FIELDS:
        raise ValueError(f"unexpected episode CSV header: {header}")
    has_xc = header[8:10] == CSV_CONTROLLER_FIELDS
    if data.shape[0] < 2:
        raise ValueError("episode CSV needs at least two rows")
    if dt is None:
        dt = float(data[1, 1] - data[0, 1])
    return Episode(
        index=index,
        dt=dt,
        plant_states=data[:, 2:4],
        plant_input=data[:, 4:5],
        references=data[:, 5:7],
        feedforward=data[:, 7:8],
        controller_states=data[:, 8:10] if has_xc else None,
    )
