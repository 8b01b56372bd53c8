"""Top-level accuracy and equivalence gates for the whole pipeline.

One test per guarantee, each printing a single PASS/FAIL line with the
measured value and its budget. Oracles are independent of the code under
test: finite differences for gradients, derivative-free and constrained
searches for the proximal operators, a restarted projected-subgradient
method for the solver objective, and Monte-Carlo protocols with pinned
seeds for the statistical guarantees.
"""

import time

import numpy as np
import pytest
import scipy.optimize

import smolm.solver as solver_mod
from smolm import benchmark as bench
from smolm import moments
from smolm.detect import find_support, grad_map_from_signal, pool_maps, refine_support
from smolm.forward import Emitter, render_scene, sample_poisson
from smolm.operator import N_PLANES, DesignOperator, GridSpec
from smolm.pipeline import process_frame
from smolm.config import PipelineConfig
from smolm.io import format_table
from smolm.solver import (
    JointSignal,
    SolverConfig,
    cone_residual,
    deconvolve,
    group_norm,
    moreau_envelope,
    moreau_gradient,
    poisson_nll,
    poisson_nll_grad,
    project_soc,
    prox_group_norm,
)

MODULE_T0 = time.monotonic()


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def op_pair(basis):
    """Grid sized for the close-pair study: a pair region plus margins."""
    side = 20 + 2 * int(np.ceil(300.0 / basis.pixel_size_nm))
    return DesignOperator(basis, GridSpec(side, side, basis.pixel_size_nm))


def feasible_random_signal(op, rng, sites=15, lo=50.0, hi=500.0) -> np.ndarray:
    """Sparse positive signal with every site inside the offset cone."""
    gh, gw = op.grid.grid_shape
    rho = op.grid.rho_px
    x = np.zeros((N_PLANES, gh, gw))
    for _ in range(sites):
        iy = int(rng.integers(2, gh - 2))
        ix = int(rng.integers(2, gw - 2))
        m = moments.cone_moments(rng.uniform(0.2, np.pi / 2),
                                 rng.uniform(-np.pi, np.pi),
                                 rng.uniform(0.5, 1.0))
        s = rng.uniform(lo, hi)
        x[0:6, iy, ix] = s * m
        frac = rng.uniform(0.0, 0.8, 2)
        ang = rng.uniform(0, 2 * np.pi)
        x[6:9, iy, ix] = x[0:3, iy, ix] * frac[0] * rho * np.cos(ang)
        x[9:12, iy, ix] = x[0:3, iy, ix] * frac[1] * rho * np.sin(ang)
    return x


class TestGradientCorrectness:
    def test_analytic_gradients_match_finite_differences(self, op_wide, rng):
        t0 = time.perf_counter()
        background = 5.0
        x = feasible_random_signal(op_wide, rng)
        counts = rng.poisson(op_wide.apply(x) + background).astype(float)
        # Evaluate away from the truth so the gradient is not near zero.
        x_eval = x * 0.9
        x_eval[0:6] += 0.3

        grad = poisson_nll_grad(x_eval, op_wide, counts, background)
        coords = [tuple(int(v) for v in (rng.integers(N_PLANES),
                                         rng.integers(x.shape[1]),
                                         rng.integers(x.shape[2])))
                  for _ in range(50)]
        worst_nll = 0.0
        scale = np.abs(grad).max()
        for c in coords:
            h = 1e-3 * max(1.0, abs(x_eval[c]))
            xp, xm = x_eval.copy(), x_eval.copy()
            xp[c] += h
            xm[c] -= h
            fd = (poisson_nll(xp, op_wide, counts, background)
                  - poisson_nll(xm, op_wide, counts, background)) / (2 * h)
            rel = abs(fd - grad[c]) / max(abs(grad[c]), 1e-6 * scale)
            worst_nll = max(worst_nll, rel)

        lam, tau = 2.0, 0.05
        # Mix shrunk-to-tiny and clearly active groups to hit both branches.
        x_mix = x_eval * rng.choice([1e-4, 1.0], size=x_eval.shape[1:])[None]
        genv = moreau_gradient(x_mix, lam, tau)
        worst_env = 0.0
        gscale = np.abs(genv.data if isinstance(genv, JointSignal) else genv).max()
        genv = np.asarray(genv.data if isinstance(genv, JointSignal) else genv)
        for c in coords:
            h = 1e-4 * max(1.0, abs(x_mix[c]))
            xp, xm = x_mix.copy(), x_mix.copy()
            xp[c] += h
            xm[c] -= h
            fd = (moreau_envelope(xp, lam, tau)
                  - moreau_envelope(xm, lam, tau)) / (2 * h)
            rel = abs(fd - genv[c]) / max(abs(genv[c]), 1e-6 * gscale)
            worst_env = max(worst_env, rel)

        elapsed = time.perf_counter() - t0
        report(
            "gradient-check",
            worst_nll < 1e-5 and worst_env < 1e-5 and elapsed < 10.0,
            f"data-term rel {worst_nll:.2e}, envelope rel {worst_env:.2e} "
            f"(budget 1e-5), {elapsed:.1f} s (budget 10 s)",
        )


class TestProxAndProjectionOracles:
    def test_prox_matches_derivative_free_search(self, rng):
        worst = 0.0
        for _ in range(3):
            v = rng.standard_normal((N_PLANES, 1, 3)) * rng.uniform(0.5, 3.0)
            t = float(rng.uniform(0.2, 2.0))
            out = prox_group_norm(v, t)
            for g in range(3):
                vg = v[:, 0, g]

                def objective(z, vg=vg, t=t):
                    return 0.5 * np.sum((z - vg) ** 2) + t * np.linalg.norm(z)

                best = None
                for x0 in (vg, 0.5 * vg, np.zeros(N_PLANES)):
                    res = scipy.optimize.minimize(
                        objective, x0, method="Powell",
                        options={"xtol": 1e-10, "ftol": 1e-12, "maxiter": 8000},
                    )
                    if best is None or res.fun < best.fun:
                        best = res
                gap = np.abs(out[:, 0, g] - best.x).max()
                worst = max(worst, gap / max(1.0, np.linalg.norm(vg)))
        report("prox-oracle", worst < 1e-3,
               f"max deviation {worst:.2e} (budget 1e-3)")

    def test_projection_matches_constrained_search(self, rng):
        rho = 0.5
        worst = 0.0
        for _ in range(3):
            v = rng.standard_normal((N_PLANES, 1, 3)) * 2.0
            out = project_soc(v, rho)
            for g in range(3):
                vg = v[:, 0, g]

                def objective(z, vg=vg):
                    return np.sum((z - vg) ** 2)

                cons = []
                for j in range(3):
                    cons.append({"type": "ineq",
                                 "fun": (lambda z, j=j: z[j])})
                    cons.append({"type": "ineq",
                                 "fun": (lambda z, j=j:
                                         (rho * z[j]) ** 2
                                         - z[6 + j] ** 2 - z[9 + j] ** 2)})
                interior = vg.copy()
                interior[0:3] = np.abs(vg[0:3]) + np.hypot(vg[6:9], vg[9:12]) / rho + 1.0
                best = None
                for x0 in (interior, np.zeros(N_PLANES)):
                    res = scipy.optimize.minimize(
                        objective, x0, method="SLSQP", constraints=cons,
                        options={"ftol": 1e-12, "maxiter": 500},
                    )
                    feasible = all(c["fun"](res.x) > -1e-9 for c in cons)
                    if feasible and (best is None or res.fun < best.fun):
                        best = res
                gap = np.abs(out[:, 0, g] - best.x).max()
                worst = max(worst, gap / max(1.0, np.linalg.norm(vg)))
        report("projection-oracle", worst < 1e-3,
               f"max deviation {worst:.2e} (budget 1e-3)")

    def test_projection_idempotent_bitwise(self, rng):
        rho = 0.5
        clean = True
        for _ in range(50):
            v = rng.standard_normal((N_PLANES, 4, 4)) * rng.uniform(0.1, 10)
            once = project_soc(v, rho)
            twice = project_soc(once, rho)
            clean &= bool(np.array_equal(once, twice))
        report("projection-idempotence", clean, "bitwise stable on 50 draws")

    def test_both_operators_nonexpansive(self, rng):
        rho, t = 0.5, 1.3
        worst = 0.0
        for _ in range(100):
            u = rng.standard_normal((N_PLANES, 3, 3)) * 3
            v = rng.standard_normal((N_PLANES, 3, 3)) * 3
            d = np.linalg.norm(u - v)
            for f in (lambda z: prox_group_norm(z, t),
                      lambda z: project_soc(z, rho)):
                ratio = np.linalg.norm(f(u) - f(v)) / d
                worst = max(worst, ratio)
        report("nonexpansiveness", worst <= 1.0 + 1e-12,
               f"max Lipschitz ratio {worst:.12f} over 100 pairs")


def dense_design_matrix(op) -> np.ndarray:
    gh, gw = op.grid.grid_shape
    npix = 2 * op.image_shape[1] * op.image_shape[2]
    A = np.zeros((npix, N_PLANES * gh * gw))
    col = 0
    for p in range(N_PLANES):
        for iy in range(gh):
            for ix in range(gw):
                A[:, col] = op.unit_response(p, iy, ix).ravel()
                col += 1
    return A


def projected_subgradient(A, counts, bg, lam, rho, shape, *, epochs=26,
                          iters=5000, seed=0):
    """Restarted-Polyak projected subgradient for the sparse Poisson model.

    The target level starts near the first objective value and is pulled
    toward the running best as the restarts shrink the gap estimate, which
    makes the method converge to the true minimum without knowing it.
    """
    y = counts.ravel()
    x = np.zeros(A.shape[1])
    f_best = np.inf
    x_best = x.copy()

    def value(z):
        mu = A @ z + bg
        pos = y > 0
        return float(mu.sum() - y.sum()
                     + (y[pos] * np.log(y[pos] / mu[pos])).sum()
                     + lam * group_norm(z.reshape(shape)))

    delta = None
    for _ in range(epochs):
        for _ in range(iters):
            mu = A @ x + bg
            g_data = A.T @ (1.0 - y / mu)
            z = x.reshape(shape)
            norms = np.sqrt((z**2).sum(axis=0))
            scale = np.divide(1.0, norms, out=np.zeros_like(norms),
                              where=norms > 0)
            g = g_data + lam * (z * scale[None]).ravel()
            fx = value(x)
            if fx < f_best:
                f_best, x_best = fx, x.copy()
            if delta is None:
                delta = 0.05 * abs(f_best) + 1.0
            step = (fx - (f_best - delta)) / max(float(g @ g), 1e-300)
            x = project_soc((x - step * g).reshape(shape), rho).ravel()
        delta = max(delta * 0.5, 1e-9 * abs(f_best))
        x = x_best.copy()
    return x_best.reshape(shape), f_best


class TestSolverOptimality:
    def test_objective_matches_subgradient_oracle(self, basis, rng):
        t0 = time.perf_counter()
        op = DesignOperator(basis, GridSpec(6, 6, basis.pixel_size_nm))
        background = 2.0
        emitter = Emitter(s=400.0, x_nm=12.0, y_nm=-20.0,
                          theta_rad=1.1, phi_rad=0.7, gamma=0.9)
        frame = sample_poisson(
            render_scene([emitter], basis, op.grid, background), 42)
        counts = frame.pixels
        lam = 1.0

        cfg = SolverConfig(lam=lam, background=background,
                           max_iterations=30000, tol=1e-13)
        F, diag = deconvolve(counts, op, cfg)
        f_solver = poisson_nll(F, op, counts, background) + lam * group_norm(F)

        A = dense_design_matrix(op)
        x_test = rng.random((N_PLANES,) + op.grid.grid_shape)
        np.testing.assert_allclose(
            (A @ x_test.ravel()).reshape(counts.shape),
            op.apply(x_test), atol=1e-8,
        )
        x_orc, _ = projected_subgradient(
            A, counts, background, lam, op.grid.rho_px,
            (N_PLANES,) + op.grid.grid_shape)
        f_oracle = (poisson_nll(x_orc, op, counts, background)
                    + lam * group_norm(x_orc))

        gap = abs(f_solver - f_oracle) / abs(f_oracle)
        elapsed = time.perf_counter() - t0
        report(
            "solver-vs-subgradient",
            gap < 1e-4 and elapsed < 60.0,
            f"objectives {f_solver:.8f} vs {f_oracle:.8f}, relative gap "
            f"{gap:.2e} (budget 1e-4), {elapsed:.1f} s (budget 60 s)",
        )


class TestSingleEmitterRecovery:
    def test_noiseless_subpixel_sweep(self, op20, basis):
        sweep = bench.sweep_subpixel(op20, basis, background=1.0)
        rho_nm = op20.grid.rho_nm
        rms_pos = float(np.sqrt(np.mean(sweep.position_error_nm**2)))
        rms_bright = float(np.sqrt(np.mean(sweep.brightness_rel_error**2)))
        report(
            "noiseless-accuracy",
            rms_pos < rho_nm / 10 and rms_bright < 0.02,
            f"position rms {rms_pos:.3f} nm (budget {rho_nm / 10:.3f}), "
            f"brightness rms {rms_bright * 100:.2f}% (budget 2%), worst "
            f"{sweep.worst_position_error_nm:.3f} nm / "
            f"{np.abs(sweep.brightness_rel_error).max() * 100:.2f}%",
        )

    def test_noisy_recall_and_precision(self, op20, basis):
        trials = bench.single_emitter_trials(
            op20, basis, trials=200, s=2000.0, background=5.0, seed=0)
        px = op20.grid.pixel_size_nm
        report(
            "noisy-recovery",
            trials.rms_r_nm < px and trials.recall >= 0.95,
            f"rms position {trials.rms_r_nm:.1f} nm (budget {px:.0f}), "
            f"recall {trials.recall:.3f} (budget 0.95), "
            f"false positives {trials.false_positives}/200",
        )


class TestOrientationRecovery:
    def test_noisy_in_plane_orientation(self, op20, basis):
        trials = bench.single_emitter_trials(
            op20, basis, trials=50, s=5000.0, background=5.0, seed=1,
            gamma_range=(0.5, 1.0), theta_range=(np.pi / 2, np.pi / 2))
        theta_deg = np.rad2deg(trials.rms_theta_rad)
        phi_deg = np.rad2deg(trials.rms_phi_rad)
        report(
            "orientation-noisy",
            theta_deg <= 10.0 and phi_deg <= 10.0 and trials.rms_gamma <= 0.1,
            f"rms polar {theta_deg:.2f} deg, azimuth {phi_deg:.2f} deg "
            f"(budget 10), wobble {trials.rms_gamma:.3f} (budget 0.1), "
            f"recall {trials.recall:.2f}",
        )

    def test_moment_roundtrip_without_solver(self):
        worst = 0.0
        for theta in np.linspace(0.05, np.pi / 2, 12):
            for phi in np.linspace(-np.pi + 1e-3, np.pi - 1e-3, 13):
                for gamma in (0.5, 0.7, 0.9, 1.0):
                    m = moments.cone_moments(theta, phi, gamma)
                    est = moments.orientation_from_moments(3000.0 * m)
                    a_true = moments.dipole_axis(theta, phi)
                    a_est = moments.dipole_axis(est.theta_rad, est.phi_rad)
                    axis_err = np.sqrt(max(0.0, 1.0 - min(1.0, abs(a_true @ a_est)) ** 2))
                    worst = max(worst, axis_err,
                                abs(est.theta_rad - theta),
                                abs(est.gamma - gamma))
        report("orientation-moments-exact", worst < 1e-9,
               f"worst parameter error {worst:.2e} (budget 1e-9) over 624 cases")


class TestPooledCountingUnderMisalignment:
    def test_pooling_restores_single_counts(self, op20, basis):
        study = bench.misalignment_study(
            op20, basis, trials=200, shift_px=1.0, s=2000.0, background=5.0,
            seed=2)
        report(
            "misalignment-counting",
            study.pooled_exactly_one >= 0.95
            and study.per_plane_split > study.pooled_split,
            f"pooled exactly-one {study.pooled_exactly_one:.3f} (budget 0.95), "
            f"per-detector split {study.per_plane_split:.3f} > pooled split "
            f"{study.pooled_split:.3f} (strict)",
        )


class TestClosePairResolution:
    def test_counts_correct_at_300nm(self, op_pair, basis):
        study = bench.two_emitter_study(
            op_pair, basis, trials=100, separation_nm=300.0, s=3000.0,
            background=5.0, seed=0)
        report(
            "close-pair-resolution",
            study.resolved_fraction >= 0.90,
            f"resolved {study.resolved_fraction:.2f} (budget 0.90), "
            f"count histogram {study.count_histogram}",
        )


class TestInvariantsAndDeterminism:
    def test_moment_vectors_stay_physical(self):
        worst = -np.inf
        for theta in np.linspace(0.0, np.pi, 15):
            for phi in np.linspace(-np.pi, np.pi, 15):
                for gamma in np.linspace(0.0, 1.0, 9):
                    m = moments.cone_moments(theta, phi, gamma)
                    trace_err = abs(m[0:3].sum() - 1.0)
                    eigmin = np.linalg.eigvalsh(moments.moment_matrix(m)).min()
                    worst = max(worst, trace_err, -eigmin)
                    assert moments.is_physical(m, tol=1e-9)
        report("moment-invariants", worst < 1e-12,
               f"worst trace/eigenvalue defect {worst:.2e} over 2025 cases")

    def test_solver_iterates_stay_feasible(self, op20, basis, monkeypatch):
        emitter = Emitter(s=2500.0, x_nm=20.0, y_nm=-15.0,
                          theta_rad=1.0, phi_rad=0.3, gamma=0.9)
        counts = sample_poisson(
            render_scene([emitter], basis, op20.grid, 5.0), 3).pixels
        rho = op20.grid.rho_px
        residuals = []
        original = solver_mod._monotone_fista

        def spying(x0, value, value_grad, project, alpha0, **kwargs):
            outer = kwargs.get("on_iterate")

            def watch(k, x, fx):
                residuals.append(cone_residual(x, rho))
                if outer is not None:
                    outer(k, x, fx)

            kwargs["on_iterate"] = watch
            return original(x0, value, value_grad, project, alpha0, **kwargs)

        monkeypatch.setattr(solver_mod, "_monotone_fista", spying)
        F, diag = deconvolve(counts, op20, SolverConfig(background=5.0))
        worst = max(residuals) if residuals else np.inf
        report(
            "iterate-feasibility",
            len(residuals) == diag.iterations and worst <= 1e-9,
            f"{len(residuals)} iterates, worst cone violation {worst:.2e}",
        )

    def test_end_to_end_byte_determinism(self, op20, basis):
        emitters = [Emitter(s=2500.0, x_nm=-30.0, y_nm=25.0,
                            theta_rad=np.pi / 2, phi_rad=0.8, gamma=0.9)]
        clean = render_scene(emitters, basis, op20.grid, 5.0)
        frames = [sample_poisson(clean, 11).pixels for _ in range(2)]
        assert frames[0].tobytes() == frames[1].tobytes()

        cfg = PipelineConfig()
        cfg.camera.width_px = cfg.camera.height_px = 20
        cfg.background.value = 5.0
        tables = []
        signals = []
        for counts in frames:
            res = process_frame(counts, op20, cfg)
            from smolm.pipeline import _estimate_row

            tables.append(format_table(
                [_estimate_row(0, e) for e in res.estimates]))
            F, _ = deconvolve(counts, op20, SolverConfig(background=5.0))
            signals.append(F.data.tobytes())
        report(
            "byte-determinism",
            tables[0] == tables[1] and signals[0] == signals[1]
            and len(tables[0].splitlines()) == 2,
            "identical noise draw, solver signal, and output table bytes",
        )

    def test_suite_runtime_within_budget(self):
        elapsed = time.monotonic() - MODULE_T0
        report("runtime-budget", elapsed < 480.0,
               f"acceptance module took {elapsed:.0f} s (budget 480 s of the "
               f"600 s full-suite target)")
