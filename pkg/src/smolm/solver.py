"""Group-sparse Poisson inversion of orientation-sensitive images.

The estimation problem: given photon counts ``g`` with expectation
``A F + b``, recover the grid signal ``F`` by minimizing

    L(F) + lam * R(F)   subject to   F in C,

where ``L`` is the Poisson negative log likelihood (constants dropped),
``R`` sums the Euclidean norms of the twelve numbers attached to each grid
site (a group-sparsity penalty: occupied sites pay once, empty sites are
pushed to exact zero), and ``C`` couples each site's offset terms to its
brightness: ``||(zeta_x[j], zeta_y[j])|| <= rho * eta[j]`` for the three
diagonal-moment planes. The cross-moment planes carry no offsets and are
unconstrained in sign.

``R`` is nonsmooth, and its proximal step does not commute with the cone
projection, so the solver minimizes the Moreau envelope of ``lam * R``
(gradient ``(F - prox(F)) / tau``) plus ``L``, both smooth, under the cone
constraint alone: accelerated projected gradient with backtracking line
search and an adaptive restart that falls back to a plain monotone step
whenever momentum raises the objective. Iterates stay feasible because the
projection is the last operation of every step. A final exact shrinkage
pass (one proximal-gradient step on the unsmoothed objective, accepted only
if it does not increase it) turns the envelope's residual fuzz into exact
zeros so downstream code sees a genuinely sparse support.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .operator import DesignOperator, ETA, N_PLANES, ZETA_X, ZETA_Y

MEAN_FLOOR = 1e-9
# Relative slack on the cone membership test: wide enough that a point
# produced by the projection itself always passes (making the projection
# bitwise idempotent), far below every stated feasibility tolerance.
CONE_SLACK = 1e-14


class SolverError(RuntimeError):
    """Numerical failure inside deconvolve, carrying the iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class JointSignal:
    """Twelve planes of grid unknowns: six moments plus six offset products.

    data : (12, Hg, Wg). Planes 0..5 are the brightness-scaled second
    moments eta[j]; planes 6..8 and 9..11 are the photon-weighted sub-grid
    offsets zeta_x[j], zeta_y[j] for the three diagonal moments, in units of
    photons times camera pixels.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[0] != N_PLANES:
            raise ValueError(f"expected (12, Hg, Wg) planes, got {self.data.shape}")

    @classmethod
    def zeros(cls, grid_shape: tuple[int, int]) -> "JointSignal":
        return cls(np.zeros((N_PLANES, *grid_shape)))

    @property
    def eta(self) -> np.ndarray:
        return self.data[ETA]

    @property
    def zeta_x(self) -> np.ndarray:
        return self.data[ZETA_X]

    @property
    def zeta_y(self) -> np.ndarray:
        return self.data[ZETA_Y]

    def group_norms(self) -> np.ndarray:
        return np.sqrt((self.data**2).sum(axis=0))

    def n_active_groups(self) -> int:
        return int(np.count_nonzero(self.group_norms()))

    def copy(self) -> "JointSignal":
        return JointSignal(self.data.copy())


def _planes(F) -> np.ndarray:
    return F.data if isinstance(F, JointSignal) else np.asarray(F, dtype=float)


# -- Poisson data term -------------------------------------------------------


def poisson_nll(F, op: DesignOperator, counts: np.ndarray,
                background: float | np.ndarray) -> float:
    """Poisson negative log likelihood of counts given the grid signal.

    Normalized so the value is zero when the model mean reproduces the
    counts exactly and positive otherwise (count-only terms, which carry no
    information about the signal, are subtracted out). This keeps the
    objective on the scale of the remaining misfit, which is what relative
    convergence tolerances should see. Model means are floored at a tiny
    positive value so transiently unphysical iterates stay finite.
    """
    mean = op.apply(_planes(F)) + background
    return _nll_of_mean(mean, counts)


def _nll_of_mean(mean: np.ndarray, counts: np.ndarray) -> float:
    m = np.maximum(mean, MEAN_FLOOR)
    value = m.sum() - counts.sum()
    pos = counts > 0
    if np.any(pos):
        g = counts[pos]
        value += (g * np.log(g / m[pos])).sum()
    return float(value)


def poisson_nll_grad(F, op: DesignOperator, counts: np.ndarray,
                     background: float | np.ndarray) -> np.ndarray:
    """Gradient of poisson_nll with respect to the twelve signal planes.

    Where the mean saturates at the floor the local derivative is zero
    (the floored model no longer responds to the signal there).
    """
    mean = op.apply(_planes(F)) + background
    m = np.maximum(mean, MEAN_FLOOR)
    w = np.where(mean > MEAN_FLOOR, 1.0 - counts / m, 0.0)
    return op.adjoint(w)


# -- group-sparsity penalty --------------------------------------------------


def group_norm(F) -> float:
    """Sum over grid sites of the Euclidean norm of the site's 12 unknowns."""
    x = _planes(F)
    return float(np.sqrt((x**2).sum(axis=0)).sum())


def prox_group_norm(F, t: float):
    """Proximal map of t * group_norm: per-site block soft threshold.

    Sites with norm below t collapse to exact zero; the rest shrink toward
    zero by t while keeping their direction.
    """
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    x = _planes(F)
    norms = np.sqrt((x**2).sum(axis=0))
    scale = np.zeros_like(norms)
    np.divide(norms - t, norms, out=scale, where=norms > t)
    out = x * scale[None]
    return JointSignal(out) if isinstance(F, JointSignal) else out


def moreau_envelope(F, lam: float, tau: float) -> float:
    """Value of the Moreau envelope of lam * group_norm at smoothing tau."""
    x = _planes(F)
    p = prox_group_norm(x, tau * lam)
    return float(lam * group_norm(p) + ((x - p) ** 2).sum() / (2.0 * tau))


def moreau_gradient(F, lam: float, tau: float):
    """Gradient of the Moreau envelope: (F - prox_{tau lam}(F)) / tau."""
    x = _planes(F)
    out = (x - prox_group_norm(x, tau * lam)) / tau
    return JointSignal(out) if isinstance(F, JointSignal) else out


# -- offset-brightness cone --------------------------------------------------


def project_soc(F, rho: float):
    """Project each site onto {(eta, zeta): ||zeta||_2 <= rho * eta}, per plane.

    Applied independently for j = 1..3 to the triple (eta[j], zeta_x[j],
    zeta_y[j]); cross-moment planes pass through untouched. Cases: points
    inside the cone are returned unchanged (bitwise); points in the polar
    cone map to zero; the rest land on the cone surface by the closed-form
    second-order-cone projection.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    x = _planes(F)
    out = x.copy()
    for j in range(3):
        eta = x[j]
        zx = x[6 + j]
        zy = x[9 + j]
        n = np.hypot(zx, zy)
        inside = n <= rho * eta * (1.0 + CONE_SLACK)
        polar = rho * n <= -eta
        boundary = ~(inside | polar)

        eta_new = np.where(polar, 0.0, eta)
        zx_new = np.where(polar, 0.0, zx)
        zy_new = np.where(polar, 0.0, zy)
        if np.any(boundary):
            eta_b = (eta + rho * n) / (1.0 + rho * rho)
            with np.errstate(invalid="ignore", divide="ignore"):
                scale = np.where(n > 0, rho * eta_b / n, 0.0)
            eta_new = np.where(boundary, eta_b, eta_new)
            zx_new = np.where(boundary, zx * scale, zx_new)
            zy_new = np.where(boundary, zy * scale, zy_new)
        keep = inside
        out[j] = np.where(keep, eta, eta_new)
        out[6 + j] = np.where(keep, zx, zx_new)
        out[9 + j] = np.where(keep, zy, zy_new)
    return JointSignal(out) if isinstance(F, JointSignal) else out


def cone_residual(F, rho: float) -> float:
    """Largest violation of the offset-brightness cone over all sites."""
    x = _planes(F)
    worst = 0.0
    for j in range(3):
        n = np.hypot(x[6 + j], x[9 + j])
        worst = max(worst, float((n - rho * x[j]).max(initial=0.0)))
    return worst


# -- solver ------------------------------------------------------------------


@dataclass
class SolverConfig:
    """Knobs for deconvolve.

    lam : explicit group-penalty weight; when None it defaults to
        lam0 * sqrt(median background) * (kernel Frobenius scale), which
        tracks how the per-site gradient noise scales with background level.
    tau_factor : Moreau smoothing as a fraction of the initial curvature
        scale 1 / L of the data term. Smaller is closer to the nonsmooth
        objective but slows the solver down roughly proportionally.
    sparsify : run the final exact shrinkage pass (see module docstring).
    """

    lam: float | None = None
    lam0: float = 2.0
    background: float | np.ndarray = 0.0
    tau_factor: float = 0.1
    max_iterations: int = 2000
    tol: float = 1e-6
    tol_patience: int = 5
    step_shrink: float = 0.5
    step_growth: float = 1.2
    sparsify: bool = True
    record: bool = True

    def __post_init__(self) -> None:
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.lam0 <= 0 or self.tau_factor <= 0:
            raise ValueError("lam0 and tau_factor must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if not 0 < self.step_shrink < 1:
            raise ValueError("step_shrink must lie in (0, 1)")
        if self.step_growth < 1:
            raise ValueError("step_growth must be >= 1")
        bg = np.asarray(self.background, dtype=float)
        if np.any(bg < 0):
            raise ValueError("background must be nonnegative")


class IterationRecord(NamedTuple):
    iteration: int
    objective: float
    step: float
    active_groups: int


@dataclass
class SolveDiagnostics:
    """Everything deconvolve observed on its way to the returned signal."""

    iterations: int
    converged: bool
    termination: str
    restarts: int
    objective: float
    exact_objective: float
    lam: float
    tau: float
    sparsified: bool
    trace: list[IterationRecord] = field(default_factory=list)

    def trace_text(self, sep: str = ",") -> str:
        """Per-iteration records as delimited text (iteration,objective,step,groups)."""
        lines = [sep.join(("iteration", "objective", "step", "active_groups"))]
        for rec in self.trace:
            lines.append(sep.join((
                str(rec.iteration),
                format(rec.objective, ".10g"),
                format(rec.step, ".6g"),
                str(rec.active_groups),
            )))
        return "\n".join(lines) + "\n"


def _monotone_fista(x0: np.ndarray, value, value_grad, project, alpha0: float, *,
                    max_iterations: int, tol: float, tol_patience: int,
                    step_shrink: float, step_growth: float,
                    stall_patience: int | None = None,
                    on_iterate=None) -> "_DescentResult":
    """Accelerated projected descent with a monotone restart guard.

    Minimizes value(x) over the feasible set encoded by project: momentum
    extrapolation plus a backtracking line search against the local quadratic
    model; whenever the momentum candidate would raise the recorded
    objective, momentum is dropped and a plain monotone step is taken from
    the current iterate instead. value_grad(x) must return (value, gradient)
    with the gradient restricted however the caller wants (the step
    direction is used as given).

    Stops as converged when the relative objective drop stays below tol for
    tol_patience consecutive iterations with at least one strict decrease
    among them. When stall_patience is given, stops as stalled instead after
    that many consecutive iterations with no decrease at all (descent is
    exhausted rather than converging). on_iterate(iteration, fx, alpha, x),
    when given, runs once per accepted iterate.

    Raises SolverError on a non-finite objective or a collapsed line search.
    """
    x = np.asarray(x0, dtype=float)
    fx = value(x)
    if not np.isfinite(fx):
        raise SolverError("objective not finite at the starting point", 0)
    alpha_floor = 1e-18 * alpha0

    def backtrack(base: np.ndarray, f_base: float, grad: np.ndarray,
                  alpha: float, iteration: int) -> tuple[np.ndarray, float, float]:
        while True:
            cand = project(base - alpha * grad)
            f_cand = value(cand)
            d = cand - base
            bound = f_base + float(np.vdot(grad, d)) + (d**2).sum() / (2.0 * alpha)
            if f_cand <= bound + 1e-12 * max(1.0, abs(f_base)):
                return cand, f_cand, alpha
            alpha *= step_shrink
            if alpha < alpha_floor:
                raise SolverError(
                    f"line search collapsed at iteration {iteration}", iteration
                )

    x_prev = x
    y = x
    t = 1.0
    alpha = alpha0
    restarts = 0
    streak = 0
    stall = 0
    converged = False
    stalled = False
    iteration = 0

    for iteration in range(1, max_iterations + 1):
        fy, grad_y = value_grad(y)
        cand, f_cand, alpha = backtrack(y, fy, grad_y, alpha * step_growth,
                                        iteration)

        if f_cand > fx + 1e-12 * max(1.0, abs(fx)):
            # Momentum overshot: drop it and take a monotone step from x.
            restarts += 1
            t = 1.0
            fx_here, grad_x = value_grad(x)
            cand, f_cand, alpha = backtrack(x, fx_here, grad_x, alpha, iteration)
            if f_cand > fx:
                cand, f_cand = x, fx

        if not np.isfinite(f_cand):
            raise SolverError(f"objective not finite at iteration {iteration}",
                              iteration)

        rel_drop = (fx - f_cand) / max(abs(fx), 1.0)
        x_prev, x, fx = x, cand, f_cand
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next

        if on_iterate is not None:
            on_iterate(iteration, fx, alpha, x)

        streak = streak + 1 if rel_drop < tol else 0
        stall = stall + 1 if rel_drop <= 0.0 else 0
        if streak >= tol_patience and stall < tol_patience:
            converged = True
            break
        if stall_patience is not None and stall >= stall_patience:
            stalled = True
            break

    return _DescentResult(x, fx, iteration, converged, stalled, restarts, alpha)


class _DescentResult(NamedTuple):
    x: np.ndarray
    fx: float
    iterations: int
    converged: bool
    stalled: bool
    restarts: int
    alpha: float


def default_lam(op: DesignOperator, background, lam0: float) -> float:
    bg = float(np.median(np.asarray(background, dtype=float)))
    return lam0 * np.sqrt(max(bg, MEAN_FLOOR)) * op.kernel_scale


def deconvolve(counts: np.ndarray, op: DesignOperator,
               config: SolverConfig | None = None) -> tuple[JointSignal, SolveDiagnostics]:
    """Recover a sparse twelve-plane grid signal from one two-channel frame.

    Returns the feasible minimizer estimate and a diagnostics record. The
    solver starts from zero, keeps the recorded objective non-increasing
    (momentum steps that would raise it trigger a restart and a plain
    projected-gradient step), and stops when the relative objective change
    stays below config.tol for config.tol_patience consecutive iterations.

    Raises SolverError on non-finite objectives or a collapsed line search.
    """
    if config is None:
        config = SolverConfig()
    counts = np.asarray(counts, dtype=float)
    if counts.shape != op.image_shape:
        raise ValueError(f"expected counts of shape {op.image_shape}, got {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("negative photon counts")

    bg = np.broadcast_to(np.asarray(config.background, dtype=float), counts.shape)
    lam = config.lam if config.lam is not None else default_lam(op, bg, config.lam0)
    rho = op.grid.rho_px

    # First step of the data term alone: start from the worst-case curvature
    # bound (spectral norm times the stiffest pixel at the zero start) and
    # grow along the first descent direction until sufficient decrease fails.
    curvature0 = op.norm_sq * float((counts / np.maximum(bg, MEAN_FLOOR) ** 2).max())
    step0 = _probe_data_step(op, counts, bg, rho, 1.0 / max(curvature0, MEAN_FLOOR))

    # The smoothing width must track the step scale near the solution, not at
    # the start. Once the model mean sits under the bright pixels, what keeps
    # the data term stiff are the dim pixels, whose curvature is about one
    # over the background; anchoring the width to the zero-start curvature
    # (orders of magnitude stiffer) would throttle every later step, because
    # the smoothed penalty contributes curvature one over the width.
    mean_end = np.maximum(counts, np.maximum(bg, MEAN_FLOOR))
    stiff_end = float((counts / mean_end**2).max())
    if stiff_end <= 0.0:
        stiff_end = 1.0 / float(np.maximum(bg, MEAN_FLOOR).max())
    tau = config.tau_factor / (op.norm_sq * stiff_end)

    def smooth_value(x: np.ndarray) -> float:
        return _nll_of_mean(op.apply(x) + bg, counts) + moreau_envelope(x, lam, tau)

    def smooth_value_grad(x: np.ndarray) -> tuple[float, np.ndarray]:
        mean = op.apply(x) + bg
        m = np.maximum(mean, MEAN_FLOOR)
        w = np.where(mean > MEAN_FLOOR, 1.0 - counts / m, 0.0)
        grad = op.adjoint(w)
        p = prox_group_norm(x, tau * lam)
        diff = x - p
        value = _nll_of_mean(mean, counts) + lam * group_norm(p) \
            + (diff**2).sum() / (2.0 * tau)
        grad += diff / tau
        return value, grad

    trace: list[IterationRecord] = []

    def on_iterate(iteration: int, fx: float, alpha: float, xk: np.ndarray) -> None:
        nnz = int(np.count_nonzero((xk**2).sum(axis=0)))
        trace.append(IterationRecord(iteration, fx, alpha, nnz))

    run = _monotone_fista(
        np.zeros(op.signal_shape), smooth_value, smooth_value_grad,
        lambda z: project_soc(z, rho), step0,
        max_iterations=config.max_iterations, tol=config.tol,
        tol_patience=config.tol_patience, step_shrink=config.step_shrink,
        step_growth=config.step_growth,
        on_iterate=on_iterate if config.record else None)
    x, alpha = run.x, run.alpha
    converged = run.converged
    iteration = run.iterations
    restarts = run.restarts
    termination = "converged" if converged else "max_iterations"

    sparsified = False
    if config.sparsify:
        x, sparsified = _exact_shrinkage_pass(
            x, op, counts, bg, lam, rho, alpha, config.step_shrink
        )

    exact_obj = _nll_of_mean(op.apply(x) + bg, counts) + lam * group_norm(x)
    diag = SolveDiagnostics(
        iterations=iteration,
        converged=converged,
        termination=termination,
        restarts=restarts,
        objective=smooth_value(x),
        exact_objective=exact_obj,
        lam=lam,
        tau=tau,
        sparsified=sparsified,
        trace=trace,
    )
    return JointSignal(x), diag


def _probe_data_step(op: DesignOperator, counts: np.ndarray, bg: np.ndarray,
                     rho: float, alpha: float, max_doublings: int = 80) -> float:
    """Largest power-of-two multiple of alpha passing sufficient decrease.

    Probes the Poisson term alone along its projected gradient direction at
    the zero start; the result calibrates both the first line-search step
    and the Moreau smoothing width.
    """
    mean0 = np.maximum(bg, MEAN_FLOOR)
    f0 = _nll_of_mean(mean0, counts)
    w = np.where(bg > MEAN_FLOOR, 1.0 - counts / mean0, 0.0)
    grad = op.adjoint(w)
    accepted = alpha
    for _ in range(max_doublings):
        cand = project_soc(-alpha * grad, rho)
        if not np.any(cand):
            # Projection wiped the candidate; curvature information is
            # unreachable along this direction, keep the bound.
            break
        f_cand = _nll_of_mean(op.apply(cand) + bg, counts)
        bound = f0 + float(np.vdot(grad, cand)) + (cand**2).sum() / (2.0 * alpha)
        if f_cand > bound:
            break
        accepted = alpha
        alpha *= 2.0
    return accepted


def _exact_shrinkage_pass(x: np.ndarray, op: DesignOperator, counts: np.ndarray,
                          bg: np.ndarray, lam: float, rho: float,
                          alpha: float, shrink: float) -> tuple[np.ndarray, bool]:
    """One proximal-gradient step on the unsmoothed objective, if it helps.

    Produces exact zeros on sites whose norm falls below the shrinkage
    threshold. Accepted only when the true objective L + lam * R does not
    increase; the step is halved a few times before giving up.
    """
    mean = op.apply(x) + bg
    base_obj = _nll_of_mean(mean, counts) + lam * group_norm(x)
    m = np.maximum(mean, MEAN_FLOOR)
    w = np.where(mean > MEAN_FLOOR, 1.0 - counts / m, 0.0)
    grad = op.adjoint(w)
    for _ in range(12):
        cand = project_soc(prox_group_norm(x - alpha * grad, alpha * lam), rho)
        cand_obj = _nll_of_mean(op.apply(cand) + bg, counts) + lam * group_norm(cand)
        if cand_obj <= base_obj + 1e-12 * max(1.0, abs(base_obj)):
            return cand, True
        alpha *= shrink
    return x, False
