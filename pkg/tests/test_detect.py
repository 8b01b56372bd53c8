"""Detection maps, support finding, and the constrained refinement stage.

The consistency-map cases are small enough to evaluate by hand; every
expected value below was derived from the voting rule directly (neighbor
votes are cosines between the recovered offset and the direction back to
the scored site, photon-weighted, scaled by normalized neighborhood mass).
The refinement solver is checked against exact noiseless recovery and its
step-size helpers against root-finding on the constraint boundaries.
"""

import numpy as np
import pytest

from smolm import moments
from smolm.detect import (
    DEFAULT_MIN_SEPARATION,
    Detection,
    RefineConfig,
    _barrier_minimize,
    _concentrated_start,
    _cone_margins,
    _interior_start,
    _max_definite_step,
    _max_feasible_step,
    _moment_matrices,
    _ownership,
    find_support,
    grad_map,
    grad_map_from_signal,
    pool_maps,
    refine_support,
)
from smolm.forward import Emitter, render_scene
from smolm.operator import N_PLANES
from smolm.solver import JointSignal, SolverConfig, deconvolve

RHO = 0.5  # grid step is one camera pixel throughout these tests


class TestGradMap:
    def test_single_clean_site_scores_one(self):
        eta = np.zeros((5, 5))
        eta[2, 2] = 4.0
        zx = np.zeros((5, 5))
        zy = np.zeros((5, 5))
        score = grad_map(eta, zx, zy, RHO)
        expected = np.zeros((5, 5))
        expected[2, 2] = 1.0
        np.testing.assert_allclose(score, expected, atol=1e-12)

    def test_displaced_site_votes_for_its_neighbor(self):
        # One site holding all photons but pointing 0.6 rho to +x: the site
        # disqualifies itself (offset too large to claim the photons) and the
        # right-hand neighbor collects a perfect back-pointing vote, with
        # cos(45 deg) votes on that neighbor's vertical flanks.
        eta = np.zeros((5, 5))
        eta[2, 2] = 4.0
        zx = np.zeros((5, 5))
        zx[2, 2] = 4.0 * 0.6 * RHO
        zy = np.zeros((5, 5))
        score = grad_map(eta, zx, zy, RHO)
        expected = np.zeros((5, 5))
        expected[2, 3] = 1.0
        expected[1, 3] = np.sqrt(0.5)
        expected[3, 3] = np.sqrt(0.5)
        np.testing.assert_allclose(score, expected, atol=1e-12)

    def test_split_emitter_peaks_on_the_shared_pair(self):
        # An emitter on the midpoint between two sites, its photons split
        # evenly and both offsets pointing at the midpoint (on the cone rim).
        # Neither site may claim itself; each claims the other, so the pair
        # forms a tied plateau at 0.5 flanked diagonally by cos(45 deg)/2.
        eta = np.zeros((5, 5))
        eta[2, 2] = 2.0
        eta[2, 3] = 2.0
        zx = np.zeros((5, 5))
        zx[2, 2] = +2.0 * RHO
        zx[2, 3] = -2.0 * RHO
        zy = np.zeros((5, 5))
        score = grad_map(eta, zx, zy, RHO)
        expected = np.zeros((5, 5))
        expected[2, 2] = expected[2, 3] = 0.5
        for r, c in ((1, 2), (1, 3), (3, 2), (3, 3)):
            expected[r, c] = np.sqrt(2.0) / 4.0
        np.testing.assert_allclose(score, expected, atol=1e-12)

    def test_mass_scaling_suppresses_dim_clutter(self):
        # Two clean sites, one a hundred times dimmer: both are perfectly
        # consistent, so the dim one's score must equal its relative mass.
        eta = np.zeros((7, 7))
        eta[2, 2] = 100.0
        eta[4, 5] = 1.0
        score = grad_map(eta, np.zeros_like(eta), np.zeros_like(eta), RHO)
        assert score[2, 2] == pytest.approx(1.0, abs=1e-12)
        assert score[4, 5] == pytest.approx(0.01, abs=1e-12)

    def test_negative_brightness_carries_no_weight(self):
        eta = np.zeros((5, 5))
        eta[2, 2] = -3.0
        score = grad_map(eta, np.zeros_like(eta), np.zeros_like(eta), RHO)
        np.testing.assert_allclose(score, 0.0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            grad_map(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)), RHO)

    def test_signal_wrapper_selects_planes(self, rng):
        F = JointSignal(rng.standard_normal((N_PLANES, 6, 6)))
        for j in range(3):
            expected = grad_map(F.data[j], F.data[6 + j], F.data[9 + j], RHO)
            np.testing.assert_array_equal(
                grad_map_from_signal(F, j, RHO), expected
            )
        with pytest.raises(ValueError):
            grad_map_from_signal(F, 3, RHO)

    def test_pooling_is_plane_mean(self, rng):
        maps = [rng.random((4, 4)) for _ in range(3)]
        np.testing.assert_allclose(pool_maps(maps), np.mean(maps, axis=0))
        with pytest.raises(ValueError):
            pool_maps([np.zeros((4, 4)), np.zeros((5, 4))])


def make_op(basis, h=5, w=5):
    from smolm.operator import DesignOperator, GridSpec

    return DesignOperator(basis, GridSpec(h, w, basis.pixel_size_nm))


class TestFindSupport:
    def test_detects_separated_peaks(self, basis):
        op = make_op(basis, 7, 7)
        score = np.zeros((7, 7))
        score[1, 1] = 0.8
        score[4, 5] = 0.6
        F = JointSignal.zeros((7, 7))
        dets = find_support(score, F, op, threshold=0.3)
        assert [(d.iy, d.ix) for d in dets] == [(1, 1), (4, 5)]
        assert dets[0].score == pytest.approx(0.8)

    def test_suppresses_peak_within_separation(self, basis):
        op = make_op(basis, 7, 7)
        score = np.zeros((7, 7))
        score[1, 1] = 0.8
        score[3, 3] = 0.5   # Chebyshev distance 2 from the stronger peak
        F = JointSignal.zeros((7, 7))
        dets = find_support(score, F, op, threshold=0.3,
                            min_separation=DEFAULT_MIN_SEPARATION)
        assert [(d.iy, d.ix) for d in dets] == [(1, 1)]
        dets = find_support(score, F, op, threshold=0.3, min_separation=1)
        assert [(d.iy, d.ix) for d in dets] == [(1, 1), (3, 3)]

    def test_threshold_is_strict(self, basis):
        op = make_op(basis, 5, 5)
        score = np.zeros((5, 5))
        score[2, 2] = 0.5
        F = JointSignal.zeros((5, 5))
        assert find_support(score, F, op, threshold=0.5) == []
        assert len(find_support(score, F, op, threshold=0.49)) == 1

    def test_initial_estimates_fold_offsets(self, basis):
        op = make_op(basis, 5, 5)
        F = JointSignal.zeros((5, 5))
        eta = np.array([3.0, 2.0, 1.0])
        F.data[0:3, 2, 2] = eta
        F.data[6:9, 2, 2] = eta * 0.2
        F.data[9:12, 2, 2] = eta * (-0.1)
        score = np.zeros((5, 5))
        score[2, 2] = 0.9
        det, = find_support(score, F, op, threshold=0.3)
        assert det.s0 == pytest.approx(6.0)
        px = op.grid.pixel_size_nm
        x_c, y_c = op.grid.position_nm(2, 2)
        assert det.x0_nm == pytest.approx(float(x_c) + 0.2 * px, abs=1e-9)
        assert det.y0_nm == pytest.approx(float(y_c) - 0.1 * px, abs=1e-9)

    def test_corner_detection_uses_clipped_neighborhood(self, basis):
        op = make_op(basis, 5, 5)
        F = JointSignal.zeros((5, 5))
        F.data[0, 0, 0] = 2.0
        score = np.zeros((5, 5))
        score[0, 0] = 0.9
        det, = find_support(score, F, op, threshold=0.3)
        assert (det.iy, det.ix) == (0, 0)
        assert det.s0 == pytest.approx(2.0)

    def test_score_shape_must_match_grid(self, basis):
        op = make_op(basis, 5, 5)
        with pytest.raises(ValueError):
            find_support(np.zeros((6, 5)), JointSignal.zeros((6, 5)), op)


class TestOwnershipAndWarmStart:
    def test_ownership_picks_nearest_center(self):
        dets = [Detection(2, 2, 1.0, 0, 0, 0), Detection(2, 6, 1.0, 0, 0, 0)]
        points = (np.array([2, 2, 2]), np.array([3, 5, 4]))
        np.testing.assert_array_equal(_ownership(points, dets), [0, 1, 0])

    def test_concentrated_start_pools_neighborhood(self):
        F = JointSignal.zeros((5, 5))
        F.data[0, 2, 2] = 2.0
        F.data[0, 2, 3] = 2.0
        det = Detection(2, 2, 1.0, 4.0, 0.0, 0.0)
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True

        class MiniGrid:
            rho_px = 0.5
            points_per_pixel = 1

        out = _concentrated_start(F, [det], mask, MiniGrid())
        assert out[0, 2, 2] == pytest.approx(4.0)
        # Mean offset of the pooled mass: half the photons sat one step +x.
        assert out[6, 2, 2] == pytest.approx(4.0 * 0.5)
        assert out[9, 2, 2] == pytest.approx(0.0)
        assert np.all(out[:, 2, 3] == 0.0)

    def test_concentrated_start_clips_offset_to_rim(self):
        F = JointSignal.zeros((5, 5))
        F.data[0, 2, 2] = 1.0
        F.data[0, 2, 3] = 4.0
        det = Detection(2, 2, 1.0, 5.0, 0.0, 0.0)
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True

        class MiniGrid:
            rho_px = 0.5
            points_per_pixel = 1

        out = _concentrated_start(F, [det], mask, MiniGrid())
        # Raw mean offset would be 0.8 px; the rim is at 0.5.
        assert out[6, 2, 2] == pytest.approx(5.0 * 0.5)


class TestStepBounds:
    def test_feasible_step_exact_on_axis_crossing(self):
        V = np.zeros((1, N_PLANES))
        V[0, 0] = 1.0
        D = np.zeros((1, N_PLANES))
        D[0, 0] = -1.0
        assert _max_feasible_step(V, D, RHO) == pytest.approx(1.0, rel=1e-12)

    def test_feasible_step_unbounded_when_moving_inward(self):
        V = np.zeros((1, N_PLANES))
        V[0, 0:3] = 1.0
        D = np.zeros((1, N_PLANES))
        D[0, 0:3] = 1.0
        assert np.isinf(_max_feasible_step(V, D, RHO))

    def test_feasible_step_touches_boundary(self, rng):
        for _ in range(20):
            V = np.zeros((3, N_PLANES))
            V[:, 0:3] = rng.uniform(1.0, 2.0, (3, 3))
            angle = rng.uniform(0, 2 * np.pi, (3, 3))
            radius = rng.uniform(0.0, 0.5) * RHO * V[:, 0:3]
            V[:, 6:9] = radius * np.cos(angle)
            V[:, 9:12] = radius * np.sin(angle)
            D = rng.standard_normal((3, N_PLANES))
            t_max = _max_feasible_step(V, D, RHO)
            assert t_max > 0
            if np.isinf(t_max):
                assert _cone_margins(V + 1e3 * D, RHO).min() > 0
                continue
            for frac in (0.25, 0.5, 0.9, 0.999):
                assert _cone_margins(V + frac * t_max * D, RHO).min() > 0
            scale = np.abs(_cone_margins(V, RHO)).max()
            assert abs(_cone_margins(V + t_max * D, RHO).min()) < 1e-6 * scale

    def test_definite_step_exact_on_diagonal_case(self):
        M = np.eye(3)[None]
        D = np.diag([-0.5, 1.0, 1.0])[None]
        assert _max_definite_step(M, D) == pytest.approx(2.0, rel=1e-12)

    def test_definite_step_unbounded_for_psd_direction(self):
        M = np.eye(3)[None]
        D = np.diag([0.1, 0.2, 0.3])[None]
        assert np.isinf(_max_definite_step(M, D))

    def test_definite_step_touches_singularity(self, rng):
        for _ in range(20):
            R = rng.standard_normal((2, 3, 3))
            M = R @ np.swapaxes(R, 1, 2) + 0.1 * np.eye(3)
            D = rng.standard_normal((2, 3, 3))
            D = 0.5 * (D + np.swapaxes(D, 1, 2))
            t_max = _max_definite_step(M, D)
            assert t_max > 0
            if np.isinf(t_max):
                continue
            before = np.linalg.eigvalsh(M + 0.999 * t_max * D).min()
            at = np.linalg.eigvalsh(M + t_max * D).min()
            assert before > 0
            assert abs(at) < 1e-8 * np.abs(M).max()


class TestInteriorStart:
    def test_repairs_infeasible_rows(self):
        V = np.zeros((2, N_PLANES))
        # Row 0: indefinite moment matrix and an offset far outside the cone.
        V[0, 0:3] = [1.0, -2.0, 0.5]
        V[0, 6] = 3.0
        # Row 1: already comfortably interior.
        V[1, 0:3] = [1.0, 1.0, 1.0]
        V[1, 3:6] = 0.1
        out = _interior_start(V, RHO, eta_floor=1e-3)
        lam = np.linalg.eigvalsh(_moment_matrices(out))
        assert lam.min() >= 1e-3 * (1 - 1e-9)
        margins = _cone_margins(out, RHO)
        assert margins.min() > 0
        for j in range(3):
            nz = np.hypot(out[:, 6 + j], out[:, 9 + j])
            assert np.all(nz <= 0.8 * RHO * out[:, j] + 1e-12)

    def test_keeps_interior_rows_nearly_unchanged(self):
        V = np.zeros((1, N_PLANES))
        V[0, 0:3] = [2.0, 1.5, 1.0]
        V[0, 6:9] = 0.1
        out = _interior_start(V, RHO, eta_floor=1e-6)
        np.testing.assert_allclose(out, V, atol=1e-9)


class TestBarrierSolve:
    def test_exact_recovery_on_noiseless_single_site(self, op20):
        site = (10, 10)
        A = np.stack(
            [op20.unit_response(p, *site).ravel() for p in range(N_PLANES)],
            axis=1,
        )
        m = moments.cone_moments(1.0, 0.6, 0.8)
        v_true = np.zeros(N_PLANES)
        v_true[0:6] = 1200.0 * m
        v_true[6:9] = v_true[0:3] * 0.2
        v_true[9:12] = v_true[0:3] * (-0.1)
        b = np.full(A.shape[0], 3.0)
        g = A @ v_true + b

        V0 = np.zeros((1, N_PLANES))
        V0[0, 0:6] = 1200.0 * 1.3 * np.array([1 / 3, 1 / 3, 1 / 3, 0, 0, 0])
        result = _barrier_minimize(A, g, b, V0, RHO, RefineConfig())
        assert result.converged and not result.stalled
        assert result.fx < 1e-4
        v = result.V[0]
        assert float(v[0:3].sum()) == pytest.approx(1200.0, rel=1e-3)
        np.testing.assert_allclose(v[0:6], v_true[0:6], atol=1.5)
        np.testing.assert_allclose(v[6:12], v_true[6:12], atol=1.5)

    def test_iterates_stay_strictly_feasible(self, op20):
        # The returned point must satisfy both constraint families strictly;
        # with a rim-adjacent truth the solver has to hug the boundary.
        site = (10, 10)
        A = np.stack(
            [op20.unit_response(p, *site).ravel() for p in range(N_PLANES)],
            axis=1,
        )
        m = moments.cone_moments(np.pi / 2, 0.0, 1.0)   # rank-1 moment matrix
        v_true = np.zeros(N_PLANES)
        v_true[0:6] = 800.0 * m
        v_true[6:9] = v_true[0:3] * 0.45                # near the cone rim
        b = np.full(A.shape[0], 2.0)
        g = A @ v_true + b
        V0 = np.zeros((1, N_PLANES))
        V0[0, 0:6] = 800.0 * np.array([1 / 3, 1 / 3, 1 / 3, 0, 0, 0])
        result = _barrier_minimize(A, g, b, V0, RHO, RefineConfig())
        assert _cone_margins(result.V, RHO).min() > 0
        assert np.linalg.eigvalsh(_moment_matrices(result.V)).min() > 0
        assert float(result.V[0, 0:3].sum()) == pytest.approx(800.0, rel=0.01)


def run_pipeline(op, basis, emitters, background, seed=None):
    from smolm.detect import grad_map_from_signal

    frame = render_scene(emitters, basis, op.grid, background=background)
    if seed is not None:
        from smolm.forward import sample_poisson

        frame = sample_poisson(frame, seed)
    counts = frame.pixels
    F, _ = deconvolve(counts, op, SolverConfig(background=background))
    rho = op.grid.rho_px
    pooled = pool_maps([grad_map_from_signal(F, j, rho) for j in range(3)])
    dets = find_support(pooled, F, op)
    return counts, F, dets


class TestRefineSupport:
    def test_empty_detections_short_circuit(self, op20):
        counts = np.full(op20.image_shape, 5.0)
        estimates, info = refine_support(counts, op20, [], JointSignal.zeros(
            op20.grid.grid_shape), 5.0)
        assert estimates == []
        assert info.iterations == 0
        assert info.converged and not info.stalled
        assert info.nll >= 0

    def test_noiseless_emitter_recovered_accurately(self, op20, basis):
        s, theta, phi, gamma = 2500.0, 1.2, -0.8, 0.85
        x_c, y_c = op20.grid.position_nm(10, 10)
        px = op20.grid.pixel_size_nm
        emitter = Emitter(s=s, x_nm=float(x_c) + 0.2 * px,
                          y_nm=float(y_c) - 0.1 * px,
                          theta_rad=theta, phi_rad=phi, gamma=gamma)
        counts, F, dets = run_pipeline(op20, basis, [emitter], 1.0)
        assert len(dets) == 1
        estimates, info = refine_support(counts, op20, dets, F, 1.0)
        assert len(estimates) == 1
        assert info.dropped == 0
        est = estimates[0]
        # The sub-pixel shift model is first order in the offset, so the
        # quadratic remainder leaks into brightness; a few percent is the
        # expected noiseless floor at this offset, not an estimation bug.
        assert est.s == pytest.approx(s, rel=0.05)
        err = np.hypot(est.x_nm - emitter.x_nm, est.y_nm - emitter.y_nm)
        assert err < 4.0
        assert abs(est.theta_rad - theta) < np.deg2rad(7.0)
        assert abs(est.phi_rad - phi) < np.deg2rad(1.0)
        assert abs(est.gamma - gamma) < 0.02
        assert est.grid_index == (10, 10)
        assert est.support_size == 9
        assert "stalled" not in est.flags

    def test_estimates_respect_model_invariants(self, op20, basis):
        s = 2000.0
        x_c, y_c = op20.grid.position_nm(8, 12)
        emitter = Emitter(s=s, x_nm=float(x_c) + 5.0, y_nm=float(y_c) - 8.0,
                          theta_rad=0.9, phi_rad=2.0, gamma=0.7)
        counts, F, dets = run_pipeline(op20, basis, [emitter], 5.0, seed=7)
        estimates, info = refine_support(counts, op20, dets, F, 5.0)
        assert estimates, "detection lost a bright noisy emitter"
        rho_nm = op20.grid.rho_nm
        for est in estimates:
            assert est.s > 0
            assert moments.is_physical(est.moments, tol=1e-9)
            # Offset read-off keeps the position within the anchor site cell.
            ax, ay = op20.grid.position_nm(*est.grid_index)
            assert np.hypot(est.x_nm - float(ax), est.y_nm - float(ay)) \
                <= rho_nm * np.sqrt(2) * (1 + 1e-9)
            assert moments.cone_angle_to_gamma(est.cone_half_angle_rad) \
                == pytest.approx(est.gamma, abs=1e-6)
            assert np.isfinite(est.nll) and est.nll >= 0
        assert info.nll == pytest.approx(estimates[0].nll)

    def test_two_emitters_yield_two_estimates(self, op20, basis):
        x1, y1 = op20.grid.position_nm(10, 7)
        x2, y2 = op20.grid.position_nm(10, 13)
        emitters = [
            Emitter(s=3000.0, x_nm=float(x1), y_nm=float(y1),
                    theta_rad=np.pi / 2, phi_rad=0.2, gamma=1.0),
            Emitter(s=3000.0, x_nm=float(x2), y_nm=float(y2),
                    theta_rad=np.pi / 2, phi_rad=1.8, gamma=1.0),
        ]
        counts, F, dets = run_pipeline(op20, basis, emitters, 5.0, seed=11)
        assert len(dets) == 2
        estimates, info = refine_support(counts, op20, dets, F, 5.0)
        assert len(estimates) == 2
        by_x = sorted(estimates, key=lambda e: e.x_nm)
        assert by_x[0].x_nm == pytest.approx(float(x1), abs=20.0)
        assert by_x[1].x_nm == pytest.approx(float(x2), abs=20.0)

        def axial_gap(a, b):
            # A dipole axis has no head or tail, so compare phi modulo pi.
            return abs((a - b + np.pi / 2) % np.pi - np.pi / 2)

        assert axial_gap(by_x[0].phi_rad, 0.2) < 0.15
        assert axial_gap(by_x[1].phi_rad, 1.8) < 0.15
