"""Constrained closed-loop identification: exactness, structure, optimality."""

import numpy as np
import numpy.testing as npt
import pytest
import scipy.optimize

from clkoop.cl_koopman import (ClosedLoopKoopman, ControllerModel,
                               build_sdp_data, build_uf_from_plant,
                               evaluate_cl_cost, extract_plant_lstsq,
                               model_from_dict, model_to_dict,
                               plant_input_map, reconstruct_controller_state,
                               rewrap, solve_cl_edmd, verify_stationarity)
from clkoop.edmd import (KoopmanPlant, SingularMatrixError, compute_gh,
                         solve_edmd)
from clkoop.lifting import LiftingConfig, SnapshotMatrices, \
    assemble_snapshots, retract
from clkoop.lti_core import StateSpace, feedback_interconnect, is_well_posed, \
    simulate, spectrum
from conftest import (linear_closed_loop_episode, prbs, random_controller,
                      random_consistent_dataset, static_controller)


def scalar_consistent_snapshots(rng, T=300, with_feedforward=False):
    """Noiseless data from the scalar loop A_p=0.5, B_p=1, D_c=0.2."""
    ctrl = static_controller(0.2)
    refs = prbs(rng, T, dim=1, amplitude=0.5)
    if with_feedforward:
        ffwd = prbs(rng, T, dim=1, amplitude=0.3, hold=7)
    else:
        ffwd = np.zeros((T, 1))
    episode = linear_closed_loop_episode([[0.5]], [[1.0]], [[1.0]], ctrl,
                                         refs, ffwd, dt=0.01)
    config = LiftingConfig(state_dim=1, monomial_degree=1)
    return assemble_snapshots(config, [episode]), ctrl, retract(1, 1)


class TestBuildUf:
    def test_scalar_static_controller(self):
        plant = KoopmanPlant(np.array([[0.5, 1.0]]), retract(1, 1))
        clk = build_uf_from_plant(plant, static_controller(0.2))
        npt.assert_allclose(clk.U_f, [[0.3, 0.2, 1.0]])

    def test_zero_controller(self):
        plant = KoopmanPlant(np.array([[0.5, 1.0]]), retract(1, 1))
        clk = build_uf_from_plant(plant, static_controller(0.0))
        npt.assert_allclose(clk.U_f, [[0.5, 0.0, 1.0]])

    def test_state_block_matches_feedback_interconnect(self, rng):
        p, n_c = 4, 2
        plant = KoopmanPlant(0.4 * rng.standard_normal((p, p + 1)),
                             retract(p, 1))
        ctrl = random_controller(rng, n_c=n_c)
        clk = build_uf_from_plant(plant, ctrl)
        loop = feedback_interconnect(ctrl.ss, plant.as_state_space(0.01))
        npt.assert_allclose(np.sort_complex(spectrum(clk.A_f).eigenvalues),
                            np.sort_complex(spectrum(loop.A).eigenvalues),
                            atol=1e-10)

    def test_feedforward_block_is_b_p(self, rng):
        plant = KoopmanPlant(rng.standard_normal((3, 4)), retract(3, 1))
        ctrl = random_controller(rng)
        clk = build_uf_from_plant(plant, ctrl)
        npt.assert_array_equal(clk.block(2, 4), plant.B_p)
        npt.assert_array_equal(clk.block(1, 4), np.zeros((2, 1)))


class TestExtractPlant:
    def test_round_trip_on_structured_matrix(self, rng):
        plant = KoopmanPlant(rng.standard_normal((3, 4)), retract(3, 1))
        ctrl = random_controller(rng)
        clk = build_uf_from_plant(plant, ctrl)
        recovered = extract_plant_lstsq(clk)
        npt.assert_allclose(recovered.U_p, plant.U_p, atol=1e-12)

    def test_perturbed_scalar_hand_example(self):
        ctrl = static_controller(0.2)
        clk = ClosedLoopKoopman(np.array([[0.3, 0.25, 1.0]]), ctrl,
                                retract(1, 1), 1, 1)
        plant = extract_plant_lstsq(clk)
        assert plant.B_p[0, 0] == pytest.approx(1.05 / 1.04)
        assert plant.A_p[0, 0] == pytest.approx(0.3 + 0.2 * 1.05 / 1.04)

    def test_rewrap_differs_on_unstructured_matrix(self):
        ctrl = static_controller(0.2)
        clk = ClosedLoopKoopman(np.array([[0.3, 0.25, 1.0]]), ctrl,
                                retract(1, 1), 1, 1)
        wrapped = rewrap(clk)
        npt.assert_allclose(wrapped.U_f,
                            [[0.3, 0.201923076923077, 1.0096153846153846]],
                            atol=1e-12)
        assert np.max(np.abs(wrapped.U_f - clk.U_f)) > 1e-2


class TestSolveClEdmd:
    def test_scalar_noiseless_recovery(self, rng):
        snaps, ctrl, C_p = scalar_consistent_snapshots(rng)
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.0)
        npt.assert_allclose(plant.U_p, [[0.5, 1.0]], atol=1e-8)
        npt.assert_allclose(clk.U_f, [[0.3, 0.2, 1.0]], atol=1e-8)

    def test_alpha_zero_equivalence_with_reconstructed_input(self, rng):
        snaps, ctrl, C_p, _, episode = random_consistent_dataset(rng)
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.0)
        # independent route: plant-input reconstruction from the episode
        theta = episode.plant_states
        errors = episode.references - theta @ C_p.T
        xc = episode.controller_states
        u_hat = xc @ ctrl.C_c.T + errors @ ctrl.D_c.T + episode.feedforward
        psi_p = np.hstack([theta, u_hat])[:-1].T
        theta_plus = theta[1:].T
        U_edmd = solve_edmd(compute_gh(theta_plus, psi_p), 0.0)
        npt.assert_allclose(plant.U_p, U_edmd, atol=1e-10)

    def test_matches_constrained_minimizer_oracle(self, rng):
        n_c, p, n_r, n_f, q = 2, 3, 1, 1, 50
        psi = rng.standard_normal((n_c + p + n_r + n_f, q))
        theta_plus = rng.standard_normal((n_c + p, q))
        snaps = SnapshotMatrices(psi, theta_plus, (n_c, p, n_r, n_f, q))
        ctrl = random_controller(rng, n_c=n_c, n_r=n_r, nu=n_f)
        C_p = retract(p, n_r)
        alpha = 0.1
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, alpha)
        M = plant_input_map(ctrl, C_p, n_r, n_f)
        n_cols = n_c + p + n_r + n_f

        def cost(z):
            V = z[:n_c * n_cols].reshape(n_c, n_cols)
            U_p = z[n_c * n_cols:].reshape(p, p + n_f)
            U_f = np.vstack([V, U_p @ M])
            return (np.linalg.norm(theta_plus - U_f @ psi) ** 2
                    + alpha * np.linalg.norm(U_f) ** 2) / q

        z0 = np.zeros(n_c * n_cols + p * (p + n_f))
        result = scipy.optimize.minimize(cost, z0, method="L-BFGS-B",
                                         options={"ftol": 1e-18,
                                                  "gtol": 1e-14,
                                                  "maxiter": 20000})
        U_p_opt = result.x[n_c * n_cols:].reshape(p, p + n_f)
        V_opt = result.x[:n_c * n_cols].reshape(n_c, n_cols)
        assert np.linalg.norm(plant.U_p - U_p_opt) <= 1e-6
        assert np.linalg.norm(clk.controller_rows - V_opt) <= 1e-6

    def test_plant_rows_consistent(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.5)
        M = plant_input_map(ctrl, C_p, snaps.n_references,
                            snaps.n_feedforward)
        npt.assert_array_equal(clk.plant_rows, plant.U_p @ M)

    def test_pin_controller_rows(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, 1.0,
                                   pin_controller_rows=True)
        n_c, p = ctrl.n_states, C_p.shape[1]
        npt.assert_array_equal(clk.block(1, 1), ctrl.A_c)
        npt.assert_array_equal(clk.block(1, 2), -ctrl.B_c @ C_p)
        npt.assert_array_equal(clk.block(1, 3), ctrl.B_c)
        npt.assert_array_equal(clk.block(1, 4), np.zeros((n_c, 1)))
        # plant rows are the same as in the default mode
        _, plant_default = solve_cl_edmd(snaps, ctrl, C_p, 1.0)
        npt.assert_array_equal(plant.U_p, plant_default.U_p)

    def test_dimension_mismatch(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        wrong_ctrl = random_controller(rng, n_c=1, n_r=1, nu=1)
        with pytest.raises(ValueError):
            solve_cl_edmd(snaps, wrong_ctrl, C_p, 0.0)


class TestSdpData:
    def test_scalar_cholesky(self):
        psi = np.array([[1.0, 2.0]])
        theta = np.array([[2.0, 4.0]])
        snaps = SnapshotMatrices(
            np.vstack([psi, np.zeros((0, 2))]), theta, (0, 1, 0, 0, 2))
        # H = 2.5; alpha/q = 0.5 needs alpha = 1 with q = 2
        sdp = build_sdp_data(compute_gh(snaps), 1.0)
        assert sdp.H_alpha[0, 0] == pytest.approx(3.0)
        assert sdp.R_alpha[0, 0] == pytest.approx(np.sqrt(3.0))

    def test_rank_deficient_rejected_at_zero_alpha(self):
        psi = np.vstack([np.ones((1, 5)), np.ones((1, 5))])
        cache = compute_gh(psi[:1], psi)
        with pytest.raises(SingularMatrixError, match="alpha"):
            build_sdp_data(cache, 0.0)

    def test_cholesky_residual(self, rng):
        psi = rng.standard_normal((4, 30))
        cache = compute_gh(psi[:2], psi)
        sdp = build_sdp_data(cache, 0.7)
        npt.assert_allclose(sdp.R_alpha @ sdp.R_alpha.T, sdp.H_alpha,
                            atol=1e-12)

    def test_lmi_block_feasibility(self, rng):
        theta = rng.standard_normal((2, 40))
        psi = rng.standard_normal((4, 40))
        cache = compute_gh(theta, psi)
        sdp = build_sdp_data(cache, 0.5)
        U = solve_edmd(cache, 0.5)
        quad = sdp.F - (U @ sdp.G.T + sdp.G @ U.T) + U @ sdp.H_alpha @ U.T
        W = quad + 1e-6 * np.eye(2)
        block = sdp.lmi_block(U, W)
        assert np.max(np.linalg.eigvalsh(block)) < 0
        # shrinking the slack below the quadratic form breaks feasibility
        block_bad = sdp.lmi_block(U, quad - 1e-6 * np.eye(2))
        assert np.max(np.linalg.eigvalsh(block_bad)) > 0


class TestEvaluateCost:
    def test_zero_cost_on_consistent_data(self, rng):
        snaps, ctrl, C_p = scalar_consistent_snapshots(
            rng, with_feedforward=True)
        clk, _ = solve_cl_edmd(snaps, ctrl, C_p, 0.0)
        sdp = build_sdp_data(compute_gh(snaps), 0.0)
        assert evaluate_cl_cost(clk.U_f, sdp) == pytest.approx(0.0, abs=1e-12)

    def test_zero_matrix_gives_trace_f(self, rng):
        psi = rng.standard_normal((3, 20))
        cache = compute_gh(psi[:2], psi)
        sdp = build_sdp_data(cache, 0.2)
        assert evaluate_cl_cost(np.zeros((2, 3)), sdp) == pytest.approx(
            np.trace(sdp.F))

    def test_matches_direct_norms(self, rng):
        theta = rng.standard_normal((2, 25))
        psi = rng.standard_normal((4, 25))
        cache = compute_gh(theta, psi)
        alpha = 0.3
        sdp = build_sdp_data(cache, alpha)
        U = rng.standard_normal((2, 4))
        direct = (np.linalg.norm(theta - U @ psi) ** 2
                  + alpha * np.linalg.norm(U) ** 2) / 25
        assert evaluate_cl_cost(U, sdp) == pytest.approx(direct, rel=1e-9)


class TestVerifyStationarity:
    def test_solver_output_passes(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        alpha = 0.2
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, alpha)
        sdp = build_sdp_data(compute_gh(snaps), alpha)
        report = verify_stationarity(clk, plant, sdp)
        assert report.passed
        assert report.residual_plant_rows <= 1e-10 * (
            1 + np.linalg.norm(sdp.G))

    def test_perturbed_solution_fails_with_scaled_residual(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        alpha = 0.2
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, alpha)
        sdp = build_sdp_data(compute_gh(snaps), alpha)
        M = plant_input_map(ctrl, C_p, snaps.n_references,
                            snaps.n_feedforward)
        delta = np.zeros_like(plant.U_p)
        delta[0, 0] = 1e-3
        bad_plant = KoopmanPlant(plant.U_p + delta, C_p)
        bad_clk = ClosedLoopKoopman(
            np.vstack([clk.controller_rows, bad_plant.U_p @ M]), ctrl, C_p,
            snaps.n_references, snaps.n_feedforward)
        report = verify_stationarity(bad_clk, bad_plant, sdp)
        assert not report.passed
        reduced = M @ sdp.H_alpha @ M.T
        expected = np.linalg.norm(delta @ reduced)
        assert report.residual_plant_rows == pytest.approx(expected, rel=1e-6)

    def test_exact_zero_residual_on_consistent_alpha_zero(self, rng):
        snaps, ctrl, C_p = scalar_consistent_snapshots(
            rng, with_feedforward=True)
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.0)
        sdp = build_sdp_data(compute_gh(snaps), 0.0)
        report = verify_stationarity(clk, plant, sdp)
        assert report.passed
        assert report.residual_plant_rows <= 1e-14


class TestRewrap:
    def test_identity_on_constrained_solution(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        clk, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.3,
                                   pin_controller_rows=True)
        wrapped = rewrap(clk)
        npt.assert_allclose(wrapped.U_f, clk.U_f, atol=1e-12)

    def test_moves_eigenvalues_on_noisy_unconstrained_fit(self, rng):
        snaps, ctrl, C_p, _, episode = random_consistent_dataset(rng, T=400)
        noisy_psi = snaps.Psi + 0.01 * rng.standard_normal(snaps.Psi.shape)
        noisy_theta = snaps.Theta_plus + 0.01 * rng.standard_normal(
            snaps.Theta_plus.shape)
        U_free = solve_edmd(compute_gh(noisy_theta, noisy_psi), 1e-3)
        clk_free = ClosedLoopKoopman(U_free, ctrl, C_p, snaps.n_references,
                                     snaps.n_feedforward)
        wrapped = rewrap(clk_free)
        before = np.sort_complex(spectrum(clk_free.A_f).eigenvalues)
        after = np.sort_complex(spectrum(wrapped.A_f).eigenvalues)
        assert np.max(np.abs(before - after)) > 1e-4


class TestReconstructControllerState:
    def test_zero_errors_decay(self):
        ctrl = ControllerModel(StateSpace([[0.5]], [[1.0]], [[1.0]],
                                          [[0.0]], 0.01))
        states = reconstruct_controller_state(ctrl, np.zeros((5, 1)),
                                              x_c0=[2.0])
        npt.assert_allclose(states[:, 0], [2.0, 1.0, 0.5, 0.25, 0.125])

    def test_static_controller_empty(self):
        states = reconstruct_controller_state(static_controller(0.2),
                                              np.zeros((7, 1)))
        assert states.shape == (7, 0)

    def test_matches_simulate(self, rng):
        ctrl = random_controller(rng, n_c=3, n_r=2, nu=1)
        errors = rng.standard_normal((30, 2))
        states = reconstruct_controller_state(ctrl, errors)
        oracle, _ = simulate(ctrl.ss, np.zeros(3), errors)
        npt.assert_allclose(states, oracle[:-1], atol=1e-13)


class TestInvariants:
    def test_structural_round_trip(self, rng):
        for _ in range(5):
            snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
            alpha = float(rng.uniform(0, 2))
            clk, plant = solve_cl_edmd(snaps, ctrl, C_p, alpha)
            structured = build_uf_from_plant(plant, ctrl)
            assert np.max(np.abs(structured.plant_rows
                                 - clk.plant_rows)) <= 1e-12
            recovered = extract_plant_lstsq(structured)
            assert np.max(np.abs(recovered.U_p - plant.U_p)) <= 1e-10

    def test_alpha_zero_equivalence_randomized(self, rng):
        for _ in range(5):
            snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
            _, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.0)
            M = plant_input_map(ctrl, C_p, snaps.n_references,
                                snaps.n_feedforward)
            cache = compute_gh(snaps.Theta_plus[ctrl.n_states:],
                               M @ snaps.Psi)
            U_edmd = solve_edmd(cache, 0.0)
            assert np.max(np.abs(plant.U_p - U_edmd)) <= 1e-10

    def test_optimality_over_alpha_grid(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        cache = compute_gh(snaps)
        for alpha in np.logspace(-3, 3, 7):
            clk, plant = solve_cl_edmd(cache, ctrl, C_p, alpha)
            sdp = build_sdp_data(cache, alpha)
            report = verify_stationarity(clk, plant, sdp,
                                         n_perturbations=100)
            assert report.passed
            assert report.min_cost_increase > -1e-12

    def test_tikhonov_shrinkage(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        cache = compute_gh(snaps)
        norms = [np.linalg.norm(solve_cl_edmd(cache, ctrl, C_p, a)[0].U_f)
                 for a in np.logspace(-3, 3, 20)]
        assert np.all(np.diff(norms) <= 1e-12)

    def test_identified_loop_always_well_posed(self, rng):
        snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
        _, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.1)
        report = is_well_posed(ctrl.ss, plant.as_state_space(ctrl.ss.dt))
        assert report.well_posed and report.rcond == pytest.approx(1.0)


def test_model_serialization_round_trip(rng):
    config = LiftingConfig(state_dim=3, monomial_degree=1)
    snaps, ctrl, C_p, _, _ = random_consistent_dataset(rng)
    clk, plant = solve_cl_edmd(snaps, ctrl, C_p, 0.05)
    data = model_to_dict(clk, plant, 0.05, config)
    clk2, plant2, alpha2, config2 = model_from_dict(data)
    npt.assert_array_equal(clk2.U_f, clk.U_f)
    npt.assert_array_equal(plant2.U_p, plant.U_p)
    assert alpha2 == 0.05
    assert config2 == config


def test_attach_controller_states_matches_recording():
    from clkoop.cl_koopman import attach_controller_states
    from clkoop import furuta_sim as fs

    cfg = fs.DatasetConfig(n_train=1, n_test=0, duration=2.0, seed=2)
    ctrl = cfg.controller()
    result = fs.run_closed_loop_episode(
        cfg.params, ctrl, cfg.r1_spec, cfg.r2_spec, cfg.f_spec, 2.0,
        1.0 / 500.0, seed=2, discard=0.0, quantize=True)
    stripped = result.episode
    import dataclasses as dc
    recorded = stripped.controller_states
    stripped = dc.replace(stripped, controller_states=None)
    rebuilt = attach_controller_states(stripped, ctrl)
    npt.assert_allclose(rebuilt.controller_states, recorded, atol=1e-12)
