# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot-loop kernels.

Mirrors ``fallback.py``: linear state-space rollouts (single and batched,
BLAS-backed) and the closed-loop rotary-pendulum episode loop. Selected at
import by ``clkoop._accel`` when the extension built successfully.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, round, sin
from scipy.linalg.cython_blas cimport dgemm, dgemv

cnp.import_array()

BACKEND_NAME = "compiled"

cdef _carr(x):
    # Contiguous float64 view; copies when the source is read-only, since
    # typed memoryviews require writable buffers.
    arr = np.ascontiguousarray(x, dtype=float)
    if not arr.flags.writeable:
        arr = arr.copy()
    return arr



cdef void _matvec(double[:, ::1] a, double* x, double* y, int n) noexcept nogil:
    # y := a @ x + y for row-major a via the transposed column-major view.
    cdef int inc = 1
    cdef double one = 1.0
    if n > 0:
        dgemv("T", &n, &n, &one, &a[0, 0], &n, x, &inc, &one, y, &inc)


def linear_rollout(A, B, x0, inputs):
    """Roll out ``x[k+1] = A x[k] + B u[k]``; see the fallback docstring."""
    cdef double[:, ::1] a = _carr(A)
    b = _carr(B)
    u = _carr(inputs)
    cdef int n = a.shape[0]
    cdef int n_steps = u.shape[0]
    states_arr = np.empty((n_steps + 1, n))
    states_arr[0] = x0
    if n == 0:
        return states_arr
    bu_arr = u @ b.T
    cdef double[:, ::1] states = states_arr
    cdef double[:, ::1] bu = bu_arr
    cdef int k, i
    with nogil:
        for k in range(n_steps):
            for i in range(n):
                states[k + 1, i] = bu[k, i]
            _matvec(a, &states[k, 0], &states[k + 1, 0], n)
    return states_arr


def linear_rollout_batch(A, B, x0, inputs):
    """Batched rollout sharing (A, B); see the fallback docstring."""
    cdef double[:, ::1] a = _carr(A)
    b = _carr(B)
    u = _carr(inputs)
    cdef int n = a.shape[0]
    cdef int n_steps = u.shape[0]
    cdef int n_traj = u.shape[2]
    states_arr = np.empty((n_steps + 1, n, n_traj))
    states_arr[0] = x0
    if n == 0 or n_traj == 0:
        return states_arr
    bu_arr = np.ascontiguousarray(np.matmul(np.asarray(b), np.asarray(u)))
    cdef double[:, :, ::1] states = states_arr
    cdef double[:, :, ::1] bu = bu_arr
    cdef int k, i, j
    cdef double one = 1.0
    with nogil:
        for k in range(n_steps):
            for i in range(n):
                for j in range(n_traj):
                    states[k + 1, i, j] = bu[k, i, j]
            # Row-major X' = A @ X + X' computed as the column-major
            # product X'^T = X^T A^T with beta = 1.
            dgemm("N", "N", &n_traj, &n, &n, &one, &states[k, 0, 0],
                  &n_traj, &a[0, 0], &n, &one, &states[k + 1, 0, 0],
                  &n_traj)
    return states_arr


cdef void _furuta_derivatives(double* phys, double* state, double voltage,
                              double* out) noexcept nogil:
    cdef double j_r = phys[0]
    cdef double m_p = phys[1]
    cdef double l_p = phys[2]
    cdef double l_a = phys[3]
    cdef double grav = phys[4]
    cdef double b_r = phys[5]
    cdef double b_p = phys[6]
    cdef double k_t = phys[7]
    cdef double r_m = phys[8]
    cdef double ang_p = state[1]
    cdef double rate_a = state[2]
    cdef double rate_p = state[3]
    cdef double l_c = 0.5 * l_p
    cdef double j_p = m_p * l_p * l_p / 3.0
    cdef double j_0 = j_r + m_p * l_a * l_a
    cdef double s = sin(ang_p)
    cdef double c = cos(ang_p)
    cdef double torque = k_t * (-voltage - k_t * rate_a) / r_m
    cdef double m11 = j_0 + j_p * s * s
    cdef double m12 = m_p * l_a * l_c * c
    cdef double m22 = j_p
    cdef double rhs1 = (torque - b_r * rate_a
                        - 2.0 * j_p * s * c * rate_a * rate_p
                        + m_p * l_a * l_c * s * rate_p * rate_p)
    cdef double rhs2 = (m_p * grav * l_c * s + j_p * s * c * rate_a * rate_a
                        - b_p * rate_p)
    cdef double det = m11 * m22 - m12 * m12
    out[0] = rate_a
    out[1] = rate_p
    out[2] = (m22 * rhs1 - m12 * rhs2) / det
    out[3] = (m11 * rhs2 - m12 * rhs1) / det


cdef void _furuta_rk4(double* phys, double* x, double voltage, double dt,
                      int substeps) noexcept nogil:
    cdef double h = dt / substeps
    cdef double k1[4]
    cdef double k2[4]
    cdef double k3[4]
    cdef double k4[4]
    cdef double tmp[4]
    cdef int s, i
    for s in range(substeps):
        _furuta_derivatives(phys, x, voltage, k1)
        for i in range(4):
            tmp[i] = x[i] + 0.5 * h * k1[i]
        _furuta_derivatives(phys, tmp, voltage, k2)
        for i in range(4):
            tmp[i] = x[i] + 0.5 * h * k2[i]
        _furuta_derivatives(phys, tmp, voltage, k3)
        for i in range(4):
            tmp[i] = x[i] + h * k3[i]
        _furuta_derivatives(phys, tmp, voltage, k4)
        for i in range(4):
            x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i]
                                       + k4[i])


def furuta_rk4_step(phys, state, voltage, dt, substeps):
    """Advance the pendulum one sample; see the fallback docstring."""
    cdef double[::1] p = _carr(phys)
    out_arr = np.array(state, dtype=float)
    cdef double[::1] x = out_arr
    cdef double v = voltage
    cdef double h = dt
    cdef int n_sub = substeps
    with nogil:
        _furuta_rk4(&p[0], &x[0], v, h, n_sub)
    return out_arr


def furuta_episode_loop(phys, a_c, b_c, c_c, d_c, refs, ffwd, noise,
                        quant_step, x0, xc0, dt, substeps, fall_threshold):
    """Simulate one closed-loop episode; see the fallback docstring."""
    cdef double[::1] p = _carr(phys)
    cdef double[:, ::1] ac = _carr(a_c)
    cdef double[:, ::1] bc = _carr(b_c)
    cdef double[:, ::1] cc = _carr(c_c)
    cdef double[:, ::1] dc = _carr(d_c)
    cdef double[:, ::1] r = _carr(refs)
    cdef double[::1] f = _carr(ffwd)
    cdef double[:, ::1] w = _carr(noise)
    cdef int n_samples = r.shape[0]
    cdef int n_c = ac.shape[0]
    cdef double v_max = p[9]
    cdef double q_step = quant_step
    cdef double h = dt
    cdef int n_sub = substeps
    cdef double fall = fall_threshold

    measured_arr = np.empty((n_samples, 2))
    applied_arr = np.empty(n_samples)
    xc_arr = np.empty((n_samples, n_c))
    cdef double[:, ::1] measured = measured_arr
    cdef double[::1] applied = applied_arr
    cdef double[:, ::1] xc_out = xc_arr

    cdef double x[4]
    x0_arr = _carr(x0)
    cdef double[::1] x0v = x0_arr
    cdef int i, j, k
    for i in range(4):
        x[i] = x0v[i]
    xc_buf = np.array(xc0, dtype=float)
    xc_next_buf = np.empty(n_c)
    cdef double[::1] xc = xc_buf
    cdef double[::1] xc_next = xc_next_buf
    cdef double z0, z1, e0, e1, y, u, acc
    cdef int fall_index = -1
    with nogil:
        for k in range(n_samples):
            z0 = x[0] + w[k, 0]
            z1 = x[1] + w[k, 1]
            if q_step > 0.0:
                z0 = round(z0 / q_step) * q_step
                z1 = round(z1 / q_step) * q_step
            if fall_index < 0 and fabs(x[1]) > fall:
                fall_index = k
            e0 = r[k, 0] - z0
            e1 = r[k, 1] - z1
            y = 0.0
            for j in range(n_c):
                y = y + cc[0, j] * xc[j]
            y = y + (dc[0, 0] * e0 + dc[0, 1] * e1)
            u = y + f[k]
            if u > v_max:
                u = v_max
            elif u < -v_max:
                u = -v_max
            measured[k, 0] = z0
            measured[k, 1] = z1
            applied[k] = u
            for j in range(n_c):
                xc_out[k, j] = xc[j]
            for i in range(n_c):
                acc = 0.0
                for j in range(n_c):
                    acc = acc + ac[i, j] * xc[j]
                xc_next[i] = acc + (bc[i, 0] * e0 + bc[i, 1] * e1)
            for i in range(n_c):
                xc[i] = xc_next[i]
            _furuta_rk4(&p[0], x, u, h, n_sub)
    return measured_arr, applied_arr, xc_arr, fall_index
