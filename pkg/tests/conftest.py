"""Shared oracles and generators for the test suite.

The loop simulators here are deliberately independent of the package's
interconnection algebra and rollout kernels: they advance the controller
and plant sample by sample, solving the output algebraic loop directly,
and serve as the reference implementations the library is checked
against.
"""

import numpy as np
import pytest

from clkoop.cl_koopman import ControllerModel, build_uf_from_plant
from clkoop.edmd import KoopmanPlant
from clkoop.lifting import Episode, LiftingConfig, assemble_snapshots, retract
from clkoop.lti_core import StateSpace, spectrum


def random_state_space(rng, n, nu, ny, dt=0.01, radius=0.9,
                       feedthrough=True) -> StateSpace:
    """Random discrete system with spectral radius scaled to ``radius``."""
    A = rng.standard_normal((n, n))
    if n:
        eigs = np.abs(np.linalg.eigvals(A))
        top = eigs.max()
        if top > 0:
            A = A * (radius / top)
    B = rng.standard_normal((n, nu))
    C = rng.standard_normal((ny, n))
    D = rng.standard_normal((ny, nu)) if feedthrough else np.zeros((ny, nu))
    return StateSpace(A, B, C, D, dt)


def chain_simulate(controller: StateSpace, plant: StateSpace, u_c, ffwd):
    """Step-by-step series interconnection: plant input is controller
    output plus feedforward. Returns the plant output sequence."""
    x_c = np.zeros(controller.n_states)
    x_p = np.zeros(plant.n_states)
    outputs = []
    for k in range(u_c.shape[0]):
        y_c = controller.C @ x_c + controller.D @ u_c[k]
        u_p = y_c + ffwd[k]
        outputs.append(plant.C @ x_p + plant.D @ u_p)
        x_c = controller.A @ x_c + controller.B @ u_c[k]
        x_p = plant.A @ x_p + plant.B @ u_p
    return np.asarray(outputs)


def loop_simulate(controller: StateSpace, plant: StateSpace, refs, ffwd):
    """Step-by-step negative feedback loop with the algebraic output loop
    solved exactly each sample. Returns (stacked states, outputs)."""
    n_y = plant.n_outputs
    Q = np.eye(n_y) + plant.D @ controller.D
    x_c = np.zeros(controller.n_states)
    x_p = np.zeros(plant.n_states)
    states, outputs = [], []
    for k in range(refs.shape[0]):
        rhs = (plant.C @ x_p + plant.D @ controller.C @ x_c
               + plant.D @ controller.D @ refs[k] + plant.D @ ffwd[k])
        zeta = np.linalg.solve(Q, rhs)
        states.append(np.concatenate([x_c, x_p]))
        outputs.append(zeta)
        u_c = refs[k] - zeta
        u_p = controller.C @ x_c + controller.D @ u_c + ffwd[k]
        x_c = controller.A @ x_c + controller.B @ u_c
        x_p = plant.A @ x_p + plant.B @ u_p
    return np.asarray(states), np.asarray(outputs)


def linear_closed_loop_episode(A_p, B_p, C_p, controller: ControllerModel,
                               refs, ffwd, dt, index=0) -> Episode:
    """Generate one episode of an exactly linear plant in closed loop.

    The recorded plant states are the full lifted state (identity
    lifting), so snapshot assembly with degree-1, zero-delay lifting
    reproduces the generating system exactly.
    """
    A_p = np.atleast_2d(np.asarray(A_p, dtype=float))
    B_p = np.atleast_2d(np.asarray(B_p, dtype=float))
    C_p = np.atleast_2d(np.asarray(C_p, dtype=float))
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    if refs.shape[0] == 1:
        refs = refs.T
    ffwd = np.atleast_2d(np.asarray(ffwd, dtype=float))
    if ffwd.shape[0] == 1:
        ffwd = ffwd.T
    T = refs.shape[0]
    x_c = np.zeros(controller.n_states)
    theta = np.zeros(A_p.shape[0])
    plant_states = np.empty((T, A_p.shape[0]))
    inputs = np.empty((T, B_p.shape[1]))
    xc_rec = np.empty((T, controller.n_states))
    for k in range(T):
        err = refs[k] - C_p @ theta
        u = controller.C_c @ x_c + controller.D_c @ err + ffwd[k]
        plant_states[k] = theta
        inputs[k] = u
        xc_rec[k] = x_c
        x_c = controller.A_c @ x_c + controller.B_c @ err
        theta = A_p @ theta + B_p @ u
    return Episode(index=index, dt=dt, plant_states=plant_states,
                   plant_input=inputs, references=refs, feedforward=ffwd,
                   controller_states=xc_rec)


def prbs(rng, length, dim=1, amplitude=1.0, hold=5):
    """Random binary multichannel excitation held for ``hold`` samples."""
    n_bits = -(-length // hold)
    bits = np.where(rng.standard_normal((n_bits, dim)) > 0, 1.0, -1.0)
    return np.repeat(bits, hold, axis=0)[:length] * amplitude


def static_controller(gain=0.2, n_r=1, dt=0.01) -> ControllerModel:
    return ControllerModel(StateSpace.static_gain(np.full((1, n_r), gain),
                                                  dt))


def random_controller(rng, n_c=2, n_r=1, nu=1, dt=0.01) -> ControllerModel:
    return ControllerModel(random_state_space(rng, n_c, n_r, nu, dt=dt,
                                              radius=0.6))


def random_consistent_dataset(rng, p=3, n_c=2, T=120):
    """Snapshots generated by a random, stable lifted-linear closed loop.

    Returns (snapshots, controller, C_p, true U_p, episode). The
    controller gain is halved until the true closed loop is comfortably
    stable, so the data never blows up.
    """
    m = p  # identity lifting
    A_p = random_state_space(rng, p, 1, 1, radius=0.8).A
    B_p = rng.standard_normal((p, 1))
    C_p = retract(p, m)
    raw = random_state_space(rng, n_c, m, 1, radius=0.5, feedthrough=True)
    scale = 0.1
    while True:
        ctrl = ControllerModel(StateSpace(raw.A, raw.B, scale * raw.C,
                                          scale * raw.D, raw.dt))
        plant_true = KoopmanPlant(np.hstack([A_p, B_p]), C_p)
        loop = build_uf_from_plant(plant_true, ctrl)
        if spectrum(loop.A_f).spectral_radius < 0.95:
            break
        scale *= 0.5
    refs = prbs(rng, T, dim=m, amplitude=0.5, hold=3)
    ffwd = prbs(rng, T, dim=1, amplitude=0.3, hold=7)
    episode = linear_closed_loop_episode(A_p, B_p, C_p, ctrl, refs, ffwd,
                                         dt=0.01)
    config = LiftingConfig(state_dim=m, monomial_degree=1)
    snaps = assemble_snapshots(config, [episode])
    return snaps, ctrl, C_p, np.hstack([A_p, B_p]), episode


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
