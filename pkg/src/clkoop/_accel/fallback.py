"""Pure-numpy implementations of the hot-loop kernels.

These mirror the compiled kernels in ``_kernels.pyx`` operation for
operation, so both backends produce numerically equivalent trajectories.
The compiled backend is preferred at import time when available; this
module keeps the package functional without a C toolchain.
"""

import numpy as np

BACKEND_NAME = "fallback"


def linear_rollout(A, B, x0, inputs):
    """Roll out ``x[k+1] = A x[k] + B u[k]`` and return all states.

    Parameters
    ----------
    A : (n, n) array
    B : (n, nu) array
    x0 : (n,) array
    inputs : (K, nu) array

    Returns
    -------
    (K + 1, n) array
        States ``x[0] .. x[K]``; ``x[0]`` is a copy of ``x0``.
    """
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    inputs = np.ascontiguousarray(inputs, dtype=float)
    n = A.shape[0]
    n_steps = inputs.shape[0]
    states = np.empty((n_steps + 1, n))
    states[0] = x0
    if n == 0:
        return states
    # Input contributions are independent of the state recursion, so they
    # can be batched into one matrix product up front.
    bu = inputs @ B.T
    x = states[0]
    for k in range(n_steps):
        x = A @ x + bu[k]
        states[k + 1] = x
    return states


def linear_rollout_batch(A, B, x0, inputs):
    """Roll out a batch of trajectories sharing the same (A, B).

    Parameters
    ----------
    A : (n, n) array
    B : (n, nu) array
    x0 : (n, E) array
        One initial state per column.
    inputs : (K, nu, E) array
        Per-step inputs for every trajectory.

    Returns
    -------
    (K + 1, n, E) array
    """
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    inputs = np.ascontiguousarray(inputs, dtype=float)
    n = A.shape[0]
    n_steps, _, n_traj = inputs.shape
    states = np.empty((n_steps + 1, n, n_traj))
    states[0] = x0
    if n == 0:
        return states
    bu = np.matmul(B, inputs)
    x = states[0]
    for k in range(n_steps):
        x = A @ x + bu[k]
        states[k + 1] = x
    return states


def furuta_derivatives(phys, state, voltage):
    """Continuous-time state derivative of the rotary pendulum.

    ``phys`` packs, in order: rotor inertia, pendulum mass, pendulum
    length, arm length, gravity, rotor damping, pendulum damping, motor
    torque constant, motor resistance, voltage limit (unused here).
    ``state`` is (arm angle, pendulum angle, arm rate, pendulum rate)
    with the pendulum angle measured from the upright position. The arm
    encoder counts opposite to motor polarity, so positive voltage
    torques the arm negative; back-EMF damping opposes the arm rate
    either way. With this orientation the all-positive parallel PD law
    is stabilizing.
    """
    j_r, m_p, l_p, l_a, grav, b_r, b_p, k_t, r_m = phys[:9]
    _, ang_p, rate_a, rate_p = state
    l_c = 0.5 * l_p
    j_p = m_p * l_p * l_p / 3.0
    j_0 = j_r + m_p * l_a * l_a
    s = np.sin(ang_p)
    c = np.cos(ang_p)
    torque = k_t * (-voltage - k_t * rate_a) / r_m
    m11 = j_0 + j_p * s * s
    m12 = m_p * l_a * l_c * c
    m22 = j_p
    rhs1 = (torque - b_r * rate_a - 2.0 * j_p * s * c * rate_a * rate_p
            + m_p * l_a * l_c * s * rate_p * rate_p)
    rhs2 = (m_p * grav * l_c * s + j_p * s * c * rate_a * rate_a
            - b_p * rate_p)
    det = m11 * m22 - m12 * m12
    acc_a = (m22 * rhs1 - m12 * rhs2) / det
    acc_p = (m11 * rhs2 - m12 * rhs1) / det
    return np.array([rate_a, rate_p, acc_a, acc_p])


def furuta_rk4_step(phys, state, voltage, dt, substeps):
    """Advance the pendulum one sample with RK4 under a held voltage."""
    x = np.asarray(state, dtype=float)
    h = dt / substeps
    for _ in range(substeps):
        k1 = furuta_derivatives(phys, x, voltage)
        k2 = furuta_derivatives(phys, x + 0.5 * h * k1, voltage)
        k3 = furuta_derivatives(phys, x + 0.5 * h * k2, voltage)
        k4 = furuta_derivatives(phys, x + h * k3, voltage)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def furuta_episode_loop(phys, a_c, b_c, c_c, d_c, refs, ffwd, noise,
                        quant_step, x0, xc0, dt, substeps, fall_threshold):
    """Simulate one closed-loop episode of the rotary pendulum.

    Per sample: measure the two angles (quantize and add noise when
    enabled), form the tracking error, evaluate the discrete controller,
    add the feedforward, saturate the voltage, then integrate the plant
    over one sample period with the voltage held.

    Parameters
    ----------
    phys : (10,) array
        Physical parameters; index 9 is the voltage limit.
    a_c, b_c, c_c, d_c : arrays
        Discrete controller with 2 inputs (angle errors) and 1 output.
    refs : (T, 2) array
    ffwd : (T,) array
    noise : (T, 2) array
        Pre-drawn measurement noise (zeros when disabled).
    quant_step : float
        Encoder quantum in radians; 0 disables quantization.
    x0 : (4,) array
    xc0 : (n_c,) array
    dt, substeps, fall_threshold : float, int, float

    Returns
    -------
    measured : (T, 2) array
    applied : (T,) array
        Saturated plant input voltage.
    controller_states : (T, n_c) array
    fall_index : int
        First sample where the true pendulum angle magnitude exceeded
        ``fall_threshold``; -1 if the pendulum never fell.
    """
    phys = np.ascontiguousarray(phys, dtype=float)
    a_c = np.ascontiguousarray(a_c, dtype=float)
    b_c = np.ascontiguousarray(b_c, dtype=float)
    c_c = np.ascontiguousarray(c_c, dtype=float)
    d_c = np.ascontiguousarray(d_c, dtype=float)
    refs = np.ascontiguousarray(refs, dtype=float)
    ffwd = np.ascontiguousarray(ffwd, dtype=float)
    noise = np.ascontiguousarray(noise, dtype=float)
    n_samples = refs.shape[0]
    n_c = a_c.shape[0]
    v_max = phys[9]

    measured = np.empty((n_samples, 2))
    applied = np.empty(n_samples)
    controller_states = np.empty((n_samples, n_c))

    x = np.array(x0, dtype=float)
    xc = np.array(xc0, dtype=float)
    fall_index = -1
    for k in range(n_samples):
        z = x[:2] + noise[k]
        if quant_step > 0.0:
            z = np.round(z / quant_step) * quant_step
        if fall_index < 0 and abs(x[1]) > fall_threshold:
            fall_index = k
        err = refs[k] - z
        y_c = c_c @ xc + d_c @ err
        u = float(y_c[0]) + ffwd[k]
        if u > v_max:
            u = v_max
        elif u < -v_max:
            u = -v_max
        measured[k] = z
        applied[k] = u
        controller_states[k] = xc
        xc = a_c @ xc + b_c @ err
        x = furuta_rk4_step(phys, x, u, dt, substeps)
    return measured, applied, controller_states, fall_index
