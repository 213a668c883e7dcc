"""Rotary inverted pendulum surrogate and dataset generation.

A Furuta pendulum (motor-driven arm, free pendulum, upright unstable
equilibrium at zero pendulum angle) is simulated in closed loop with two
parallel discretized PD controllers tracking the arm and pendulum
angles. Excitation uses smoothed pseudorandom binary sequences; the
motor-angle reference is the integrated variant. Episodes record the two
measured angles, the saturated input voltage, references, feedforward,
and controller states. Everything is deterministic given the seeds, so
datasets regenerate bit for bit.

Angle conventions: the pendulum angle is zero upright; the arm encoder
counts opposite to motor polarity, so positive voltage accelerates the
measured arm angle negative and the pendulum angle positive. With this
orientation (a wiring convention on real devices) the all-positive
parallel PD law balances the pendulum.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import pathlib
from typing import List, Tuple

import numpy as np

from . import _accel
from .cl_koopman import ControllerModel
from .lifting import Episode, read_episode_csv, write_episode_csv
from .lti_core import StateSpace, zoh_discretize

ENCODER_QUANTUM = 2.0 * np.pi / 2048.0


@dataclasses.dataclass(frozen=True)
class FurutaParams:
    """Physical parameters of the rotary pendulum (SI units).

    Defaults are nominal values for a small desktop device: a DC motor
    driving a short arm with a light rod pendulum.
    """

    rotor_inertia: float = 1.0e-4
    pendulum_mass: float = 0.024
    pendulum_length: float = 0.095
    arm_length: float = 0.085
    gravity: float = 9.81
    damping_rotor: float = 1.0e-3
    damping_pendulum: float = 5e-5
    torque_constant: float = 0.042
    resistance: float = 8.4
    voltage_limit: float = 10.0

    def __post_init__(self):
        for field in dataclasses.fields(self):
            if getattr(self, field.name) <= 0:
                raise ValueError(f"{field.name} must be positive")

    def as_vector(self) -> np.ndarray:
        return np.array([
            self.rotor_inertia, self.pendulum_mass, self.pendulum_length,
            self.arm_length, self.gravity, self.damping_rotor,
            self.damping_pendulum, self.torque_constant, self.resistance,
            self.voltage_limit,
        ])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "FurutaParams":
        return FurutaParams(**data)


@dataclasses.dataclass(frozen=True)
class SignalSpec:
    """Excitation signal description.

    ``kind`` is ``"prbs"``, ``"integrated_prbs"``, or
    ``"constant_zero"``. The raw binary sequence takes values in
    ``{-amplitude, +amplitude}`` and holds each bit for ``bit_period``
    samples; the integrated variant is its running sum scaled by the
    sample period. A first-order discrete low-pass at ``cutoff_hz``
    smooths the result (0 disables smoothing).
    """

    kind: str = "prbs"
    amplitude: float = 1.0
    bit_period: int = 50
    cutoff_hz: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("prbs", "integrated_prbs", "constant_zero"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if self.bit_period < 1:
            raise ValueError("bit_period must be at least one sample")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "SignalSpec":
        return SignalSpec(**data)


def _prbs_bits(seed: int, n_bits: int) -> np.ndarray:
    # 16-bit maximal-length Galois LFSR (taps 16, 14, 13, 11).
    state = (seed % 65535) + 1
    bits = np.empty(n_bits)
    for i in range(n_bits):
        lsb = state & 1
        state >>= 1
        if lsb:
            state ^= 0xB400
        bits[i] = 1.0 if lsb else -1.0
    return bits


def generate_signal(spec: SignalSpec, length: int, dt: float) -> np.ndarray:
    """Deterministic excitation sequence of the given length."""
    if length < 1:
        raise ValueError("length must be at least 1")
    if spec.kind == "constant_zero":
        return np.zeros(length)
    n_bits = -(-length // spec.bit_period)
    bits = _prbs_bits(spec.seed, n_bits)
    signal = np.repeat(bits, spec.bit_period)[:length] * spec.amplitude
    if spec.kind == "integrated_prbs":
        signal = np.cumsum(signal) * dt
    if spec.cutoff_hz > 0:
        pole = np.exp(-2.0 * np.pi * spec.cutoff_hz * dt)
        smoothed = np.empty_like(signal)
        prev = 0.0
        for k in range(length):
            prev = pole * prev + (1.0 - pole) * signal[k]
            smoothed[k] = prev
        signal = smoothed
    return signal


def build_pd_controller(kp1: float, kd1: float, kp2: float, kd2: float,
                        cutoff: float, dt: float,
                        cutoff_in_hz: bool = False) -> ControllerModel:
    """Two parallel PD channels with filtered derivative action.

    Each channel realizes ``Kp + Kd * a s / (s + a)`` from one tracking
    error; the two outputs sum into the single plant input. The filtered
    derivative is realized through ``a s / (s + a) = a - a^2 / (s + a)``,
    giving one continuous state per channel, then discretized with the
    zero-order hold. ``cutoff`` is interpreted in rad/s unless
    ``cutoff_in_hz`` is set.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = cutoff * (2.0 * np.pi if cutoff_in_hz else 1.0)
    A_cont = -a * np.eye(2)
    B_cont = np.eye(2)
    C = np.array([[-kd1 * a * a, -kd2 * a * a]])
    D = np.array([[kp1 + kd1 * a, kp2 + kd2 * a]])
    A_d, B_d = zoh_discretize(A_cont, B_cont, dt)
    return ControllerModel(StateSpace(A_d, B_d, C, D, dt))


def default_controller(dt: float = 1.0 / 500.0) -> ControllerModel:
    """PD controller with the experiment's gain set."""
    return build_pd_controller(6.0, 1.8, 30.0, 2.5, 50.0, dt)


def furuta_derivatives(params: FurutaParams, state, voltage: float) -> np.ndarray:
    """Continuous-time derivative of (arm angle, pendulum angle, rates)."""
    state = np.asarray(state, dtype=float).reshape(4)
    return _accel.furuta_derivatives(params.as_vector(), state, float(voltage))


def furuta_step(params: FurutaParams, state, voltage: float, dt: float,
                substeps: int = 1) -> np.ndarray:
    """One sample of the pendulum under a held, saturated voltage (RK4)."""
    state = np.asarray(state, dtype=float).reshape(4)
    if not np.all(np.isfinite(state)):
        raise ValueError("state contains non-finite entries")
    v = float(np.clip(voltage, -params.voltage_limit, params.voltage_limit))
    return _accel.furuta_rk4_step(params.as_vector(), state, v, dt, substeps)


def mechanical_energy(params: FurutaParams, state) -> float:
    """Total mechanical energy of the pendulum-arm system."""
    _, ang_p, rate_a, rate_p = np.asarray(state, dtype=float).reshape(4)
    l_c = 0.5 * params.pendulum_length
    j_p = params.pendulum_mass * params.pendulum_length ** 2 / 3.0
    j_0 = params.rotor_inertia + params.pendulum_mass * params.arm_length ** 2
    m11 = j_0 + j_p * np.sin(ang_p) ** 2
    m12 = params.pendulum_mass * params.arm_length * l_c * np.cos(ang_p)
    kinetic = 0.5 * m11 * rate_a ** 2 + 0.5 * j_p * rate_p ** 2 \
        + m12 * rate_a * rate_p
    potential = params.pendulum_mass * params.gravity * l_c * np.cos(ang_p)
    return float(kinetic + potential)


def open_loop_jacobian(params: FurutaParams, state=None, voltage: float = 0.0,
                       eps: float = 1e-6) -> np.ndarray:
    """Finite-difference Jacobian of the continuous dynamics."""
    state = np.zeros(4) if state is None else np.asarray(state, float).reshape(4)
    jac = np.zeros((4, 4))
    for i in range(4):
        step = np.zeros(4)
        step[i] = eps
        upper = furuta_derivatives(params, state + step, voltage)
        lower = furuta_derivatives(params, state - step, voltage)
        jac[:, i] = (upper - lower) / (2.0 * eps)
    return jac


def closed_loop_jacobian(params: FurutaParams, controller: ControllerModel,
                         dt: float, substeps: int = 4,
                         eps: float = 1e-7) -> np.ndarray:
    """Finite-difference one-step map of the regulated loop at upright.

    The combined state stacks the plant state over the controller state;
    references, feedforward, noise, and quantization are all zero.
    """
    n_c = controller.n_states

    def step(z):
        x = z[:4]
        xc = z[4:]
        err = -x[:2]
        u = float((controller.C_c @ xc + controller.D_c @ err)[0])
        u = float(np.clip(u, -params.voltage_limit, params.voltage_limit))
        x_next = _accel.furuta_rk4_step(params.as_vector(), x, u, dt, substeps)
        xc_next = controller.A_c @ xc + controller.B_c @ err
        return np.concatenate([x_next, xc_next])

    dim = 4 + n_c
    jac = np.zeros((dim, dim))
    for i in range(dim):
        delta = np.zeros(dim)
        delta[i] = eps
        jac[:, i] = (step(delta) - step(-delta)) / (2.0 * eps)
    return jac


@dataclasses.dataclass(frozen=True)
class EpisodeResult:
    """Episode data plus the fall verdict (reported, never raised)."""

    episode: Episode
    fell: bool
    fall_index: int


def _mix_seed(seed: int, channel: int) -> int:
    # splitmix64 round; decorrelates per-channel streams from one seed.
    z = (seed * 0x9E3779B97F4A7C15 + channel * 0xBF58476D1CE4E5B9) % (1 << 64)
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % (1 << 64)
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % (1 << 64)
    return int(z ^ (z >> 31))


def run_closed_loop_episode(
    params: FurutaParams,
    controller: ControllerModel,
    r1_spec: SignalSpec,
    r2_spec: SignalSpec,
    f_spec: SignalSpec,
    duration: float,
    dt: float,
    seed: int = 0,
    index: int = 0,
    noise_std: float = 0.0,
    quantize: bool = False,
    discard: float = 1.0,
    fall_threshold: float = 0.6,
    x0=None,
    substeps: int = 4,
) -> EpisodeResult:
    """Simulate one excited closed-loop episode.

    Signal seeds are derived deterministically from ``seed``, overriding
    the per-spec seeds, so one integer reproduces the whole episode. The
    first ``discard`` seconds are dropped from all recorded signals to
    remove startup transients. The pendulum falling past
    ``fall_threshold`` (radians, true angle) is reported in the result,
    not raised, so excitation amplitudes can be tuned by inspection.
    """
    n_samples = int(round(duration / dt))
    n_discard = int(round(discard / dt))
    if n_samples <= n_discard + 1:
        raise ValueError(
            f"duration {duration} s does not exceed the discard window "
            f"{discard} s")
    r1 = generate_signal(
        dataclasses.replace(r1_spec, seed=_mix_seed(seed, 1)), n_samples, dt)
    r2 = generate_signal(
        dataclasses.replace(r2_spec, seed=_mix_seed(seed, 2)), n_samples, dt)
    ffwd = generate_signal(
        dataclasses.replace(f_spec, seed=_mix_seed(seed, 3)), n_samples, dt)
    refs = np.column_stack([r1, r2])
    if noise_std > 0:
        rng = np.random.default_rng(_mix_seed(seed, 4))
        noise = rng.normal(0.0, noise_std, size=(n_samples, 2))
    else:
        noise = np.zeros((n_samples, 2))
    x0 = np.zeros(4) if x0 is None else np.asarray(x0, float).reshape(4)
    measured, applied, xc, fall_index = _accel.furuta_episode_loop(
        params.as_vector(), controller.A_c, controller.B_c, controller.C_c,
        controller.D_c, refs, ffwd, noise,
        ENCODER_QUANTUM if quantize else 0.0, x0,
        np.zeros(controller.n_states), dt, substeps, fall_threshold)
    episode = Episode(
        index=index,
        dt=dt,
        plant_states=measured[n_discard:],
        plant_input=applied[n_discard:].reshape(-1, 1),
        references=refs[n_discard:],
        feedforward=ffwd[n_discard:].reshape(-1, 1),
        controller_states=xc[n_discard:],
    )
    return EpisodeResult(episode=episode, fell=fall_index >= 0,
                         fall_index=int(fall_index))


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    """Full description of a surrogate dataset.

    The hash of the JSON form is stored in the manifest, so any
    parameter change is detectable downstream.
    """

    n_train: int = 30
    n_test: int = 20
    duration: float = 20.0
    dt: float = 1.0 / 500.0
    discard: float = 1.0
    seed: int = 0
    noise_std: float = 0.0
    quantize: bool = False
    fall_threshold: float = 0.6
    substeps: int = 4
    params: FurutaParams = dataclasses.field(default_factory=FurutaParams)
    kp1: float = 6.0
    kd1: float = 1.8
    kp2: float = 30.0
    kd2: float = 2.5
    cutoff: float = 50.0
    cutoff_in_hz: bool = False
    r1_spec: SignalSpec = dataclasses.field(default_factory=lambda: SignalSpec(
        kind="integrated_prbs", amplitude=0.2, bit_period=25,
        cutoff_hz=200.0))
    r2_spec: SignalSpec = dataclasses.field(default_factory=lambda: SignalSpec(
        kind="prbs", amplitude=0.02, bit_period=100, cutoff_hz=200.0))
    f_spec: SignalSpec = dataclasses.field(default_factory=lambda: SignalSpec(
        kind="prbs", amplitude=0.5, bit_period=25, cutoff_hz=200.0))

    def controller(self) -> ControllerModel:
        return build_pd_controller(self.kp1, self.kd1, self.kp2, self.kd2,
                                   self.cutoff, self.dt, self.cutoff_in_hz)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        return data

    @staticmethod
    def from_dict(data: dict) -> "DatasetConfig":
        data = dict(data)
        if "params" in data:
            data["params"] = FurutaParams.from_dict(data["params"])
        for key in ("r1_spec", "r2_spec", "f_spec"):
            if key in data:
                data[key] = SignalSpec.from_dict(data[key])
        return DatasetConfig(**data)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def generate_dataset(config: DatasetConfig, out_dir) -> dict:
    """Write the training/test episode CSVs plus a manifest JSON.

    Episode seeds are ``config.seed + episode number``. Any episode in
    which the pendulum fell aborts generation, reporting the seed so the
    excitation can be retuned.
    """
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    controller = config.controller()
    entries = []
    for i in range(config.n_train + config.n_test):
        split = "train" if i < config.n_train else "test"
        local = i if split == "train" else i - config.n_train
        seed = config.seed + i
        result = run_closed_loop_episode(
            config.params, controller, config.r1_spec, config.r2_spec,
            config.f_spec, config.duration, config.dt, seed=seed, index=local,
            noise_std=config.noise_std, quantize=config.quantize,
            discard=config.discard, fall_threshold=config.fall_threshold,
            substeps=config.substeps)
        if result.fell:
            raise RuntimeError(
                f"pendulum fell in {split} episode {local} (seed {seed}, "
                f"sample {result.fall_index}); reduce excitation amplitudes")
        filename = f"{split}_{local:03d}.csv"
        write_episode_csv(out / filename, result.episode)
        entries.append({"file": filename, "split": split, "index": local,
                        "seed": seed})
    manifest = {
        "episodes": entries,
        "config": config.to_dict(),
        "hash": config.hash(),
    }
    with open(out / "manifest.json", "w") as handle:
        json.dump(manifest, handle, indent=1, sort_keys=True)
    return manifest


def load_dataset(data_dir) -> Tuple[List[Episode], List[Episode], dict]:
    """Read back a generated dataset directory."""
    data_dir = pathlib.Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    dt = float(manifest["config"]["dt"])
    train, test = [], []
    for entry in manifest["episodes"]:
        episode = read_episode_csv(data_dir / entry["file"],
                                   index=entry["index"], dt=dt)
        (train if entry["split"] == "train" else test).append(episode)
    return train, test, manifest
