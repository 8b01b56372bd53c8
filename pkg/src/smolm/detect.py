"""Emitter detection on solver output and support-restricted refinement.

The solver spreads each emitter's photons over a few neighboring grid
sites, and shot noise sprinkles small spurious groups elsewhere. Detection
exploits a geometric signature that separates the two: around a real
emitter, every neighboring site's recovered sub-grid offset points back
toward the emitter, while noise sites point nowhere in particular. The
gradient-consistency map scores that agreement per site, photon-weighted;
pooling the maps of the three diagonal-moment planes makes the score robust
to instrument misregistration between the polarization channels, since a
registration error displaces whole channels but cannot destroy the local
back-pointing pattern within each plane.

Detected sites seed a small support (their 3x3 neighborhoods) on which the
Poisson likelihood is re-minimized without the sparsity penalty, removing
its shrinkage bias, under the offset cones plus positive semidefiniteness
of each site's second-moment matrix, before brightness, position, and
orientation are read off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .moments import orientation_from_moments
from .operator import N_PLANES, DesignOperator, _integer_shift
from .solver import (
    MEAN_FLOOR,
    JointSignal,
    _nll_of_mean,
    project_soc,
)

DEFAULT_THRESHOLD = 0.3
DEFAULT_MIN_SEPARATION = 2


def grad_map(eta_j: np.ndarray, zeta_x_j: np.ndarray, zeta_y_j: np.ndarray,
             rho_px: float) -> np.ndarray:
    """Gradient-consistency score of one diagonal-moment plane.

    For each site, every 3x3 neighbor with photons votes with weight
    eta: a neighbor votes max(0, cos angle) between its implied offset
    (zeta / eta) and the direction back to the center site; the center
    itself votes 1 when its own offset is small (below rho / 2), else 0.
    The photon-weighted mean vote is then scaled by the neighborhood photon
    mass normalized to [0, 1], so bright consistent sites dominate.
    """
    if eta_j.shape != zeta_x_j.shape or eta_j.shape != zeta_y_j.shape:
        raise ValueError("plane shapes differ")
    votes = np.zeros_like(eta_j)
    mass = np.zeros_like(eta_j)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            eta_n = _integer_shift(eta_j, -dy, -dx)
            zx_n = _integer_shift(zeta_x_j, -dy, -dx)
            zy_n = _integer_shift(zeta_y_j, -dy, -dx)
            eta_n = np.maximum(eta_n, 0.0)
            z_norm = np.hypot(zx_n, zy_n)
            if dy == 0 and dx == 0:
                # Offset small relative to the grid: the site claims itself.
                vote = ((z_norm < 0.5 * rho_px * eta_n) & (eta_n > 0)).astype(float)
            else:
                r = float(np.hypot(dx, dy))
                back_x, back_y = -dx / r, -dy / r
                dot = zx_n * back_x + zy_n * back_y
                with np.errstate(invalid="ignore", divide="ignore"):
                    vote = np.where(z_norm > 0, np.maximum(dot, 0.0) / z_norm, 0.0)
            votes += eta_n * vote
            mass += eta_n
    score = np.zeros_like(votes)
    np.divide(votes, mass, out=score, where=mass > 0)
    peak = mass.max()
    if peak > 0:
        score *= mass / peak
    return score


def grad_map_from_signal(F: JointSignal, j: int, rho_px: float) -> np.ndarray:
    """grad_map of diagonal-moment plane j (0..2) of a joint signal."""
    if not 0 <= j < 3:
        raise ValueError("only the diagonal-moment planes 0..2 carry offsets")
    return grad_map(F.data[j], F.data[6 + j], F.data[9 + j], rho_px)


def pool_maps(maps) -> np.ndarray:
    """Average per-plane consistency maps into one detection map."""
    maps = [np.asarray(m, dtype=float) for m in maps]
    first = maps[0].shape
    for m in maps[1:]:
        if m.shape != first:
            raise ValueError(f"map shapes differ: {first} vs {m.shape}")
    return np.mean(maps, axis=0)


@dataclass(frozen=True)
class Detection:
    """A local maximum of a detection map plus crude initial estimates."""

    iy: int
    ix: int
    score: float
    s0: float
    x0_nm: float
    y0_nm: float


def _local_maxima(score: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    neighborhood_max = score.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                np.maximum(neighborhood_max, _integer_shift(score, dy, dx),
                           out=neighborhood_max)
    mask = (score >= neighborhood_max) & (score > threshold)
    ys, xs = np.nonzero(mask)
    order = np.lexsort((xs, ys, -score[ys, xs]))
    return [(int(ys[k]), int(xs[k])) for k in order]


def find_support(score: np.ndarray, F: JointSignal, op: DesignOperator,
                 threshold: float = DEFAULT_THRESHOLD,
                 min_separation: int = DEFAULT_MIN_SEPARATION) -> list[Detection]:
    """Detect emitters on a detection map.

    Local maxima above the threshold are accepted greedily in descending
    score order; candidates within min_separation grid steps (Chebyshev) of
    an accepted detection are suppressed. Initial brightness and position
    come from the photon-weighted 3x3 neighborhood of the recovered signal.
    """
    grid = op.grid
    if score.shape != grid.grid_shape:
        raise ValueError(f"score shape {score.shape} does not match grid {grid.grid_shape}")
    accepted: list[tuple[int, int]] = []
    scores: list[float] = []
    for iy, ix in _local_maxima(score, threshold):
        if all(max(abs(iy - ay), abs(ix - ax)) > min_separation
               for ay, ax in accepted):
            accepted.append((iy, ix))
            scores.append(float(score[iy, ix]))

    detections = []
    gh, gw = grid.grid_shape
    px_nm = grid.pixel_size_nm
    for (iy, ix), sc in zip(accepted, scores):
        ys = slice(max(iy - 1, 0), min(iy + 2, gh))
        xs = slice(max(ix - 1, 0), min(ix + 2, gw))
        eta = np.maximum(F.data[0:3, ys, xs], 0.0)
        zx = F.data[6:9, ys, xs]
        zy = F.data[9:12, ys, xs]
        yy, xx = np.mgrid[ys, xs]
        x_nm, y_nm = grid.position_nm(yy, xx)
        total = eta.sum()
        if total > 0:
            x0 = float((eta * x_nm + zx * px_nm).sum() / total)
            y0 = float((eta * y_nm + zy * px_nm).sum() / total)
        else:
            x0, y0 = grid.position_nm(iy, ix)
            x0, y0 = float(x0), float(y0)
        detections.append(Detection(iy=iy, ix=ix, score=sc, s0=float(total),
                                    x0_nm=x0, y0_nm=y0))
    return detections


@dataclass(frozen=True)
class EmitterEstimate:
    """Final per-emitter output of the refinement stage."""

    x_nm: float
    y_nm: float
    s: float
    eta: np.ndarray            # (6,) brightness-scaled second moments
    moments: np.ndarray        # (6,) physically projected
    theta_rad: float
    phi_rad: float
    gamma: float
    cone_half_angle_rad: float
    nll: float
    grid_index: tuple[int, int]
    support_size: int
    flags: tuple[str, ...] = ()


@dataclass
class RefineInfo:
    iterations: int
    converged: bool
    stalled: bool
    nll: float
    dropped: int = 0


@dataclass
class RefineConfig:
    max_iterations: int = 200
    tol: float = 1e-12
    stall_patience: int = 50
    step_shrink: float = 0.5
    newton_ridge: float = 1e-9
    barrier_shrink: float = 0.1


def _ownership(points: tuple[np.ndarray, np.ndarray],
               detections: list[Detection]) -> np.ndarray:
    """Index of the nearest detection center for each (iy, ix) point."""
    centers = np.array([[d.iy, d.ix] for d in detections], dtype=float)
    pts = np.stack(points, axis=1).astype(float)
    dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(dist, axis=1)


def _concentrated_start(F: JointSignal, detections: list[Detection],
                        mask: np.ndarray, grid) -> np.ndarray:
    """Pool each detection's neighborhood mass into its center site.

    The sparse solve leaves an emitter's photons split across adjacent grid
    sites; the likelihood is nearly flat along directions that shuffle mass
    between them, so refinement started from the split state crawls. Summing
    each plane over the sites owned by a detection and folding the photon-
    weighted mean offset into the center site's linear terms starts the fit
    near the concentrated optimum instead. The refinement can still spread
    mass back over the neighborhood when the data demand it.
    """
    rho = grid.rho_px
    step_px = 1.0 / grid.points_per_pixel
    x = np.zeros_like(F.data)
    active = np.nonzero(mask & ((F.data**2).sum(axis=0) > 0))
    if active[0].size == 0:
        return x
    owner = _ownership(active, detections)
    for k, det in enumerate(detections):
        sel = owner == k
        if not np.any(sel):
            continue
        ys, xs = active[0][sel], active[1][sel]
        eta6 = F.data[0:6, ys, xs].sum(axis=1)
        weights = np.maximum(F.data[0:3, ys, xs], 0.0)
        total = weights.sum()
        if total > 0:
            off_x = float((F.data[6:9, ys, xs]
                           + weights * (xs - det.ix) * step_px).sum() / total)
            off_y = float((F.data[9:12, ys, xs]
                           + weights * (ys - det.iy) * step_px).sum() / total)
            norm = np.hypot(off_x, off_y)
            if norm > rho:
                off_x *= rho / norm
                off_y *= rho / norm
        else:
            off_x = off_y = 0.0
        x[0:6, det.iy, det.ix] = eta6
        x[6:9, det.iy, det.ix] = eta6[0:3] * off_x
        x[9:12, det.iy, det.ix] = eta6[0:3] * off_y
    return x


def _cone_margins(Vk: np.ndarray, rho: float) -> np.ndarray:
    """Per-group slack (rho eta)^2 - ||zeta||^2, shape (k, 3); positive inside."""
    eta = Vk[:, 0:3]
    zx = Vk[:, 6:9]
    zy = Vk[:, 9:12]
    return (rho * eta) ** 2 - zx**2 - zy**2


def _moment_matrices(Vk: np.ndarray) -> np.ndarray:
    """Per-site symmetric 3x3 moment matrices from the six eta planes."""
    M = np.empty((len(Vk), 3, 3))
    M[:, 0, 0] = Vk[:, 0]
    M[:, 1, 1] = Vk[:, 1]
    M[:, 2, 2] = Vk[:, 2]
    M[:, 0, 1] = M[:, 1, 0] = Vk[:, 3]
    M[:, 0, 2] = M[:, 2, 0] = Vk[:, 4]
    M[:, 1, 2] = M[:, 2, 1] = Vk[:, 5]
    return M


def _interior_start(Vk: np.ndarray, rho: float, eta_floor: float) -> np.ndarray:
    """Move per-site variables strictly inside both constraint cones.

    Each site's moment matrix has its eigenvalues floored at a small
    positive value (making it strictly positive definite, with brightnesses
    on the diagonal then at least that floor), and offsets are pulled to at
    most 80 percent of the cone rim, so every barrier term starts finite.
    """
    out = Vk.copy()
    lam, U = np.linalg.eigh(_moment_matrices(out))
    lam = np.maximum(lam, eta_floor)
    M = (U * lam[:, None, :]) @ np.swapaxes(U, 1, 2)
    out[:, 0] = M[:, 0, 0]
    out[:, 1] = M[:, 1, 1]
    out[:, 2] = M[:, 2, 2]
    out[:, 3] = M[:, 0, 1]
    out[:, 4] = M[:, 0, 2]
    out[:, 5] = M[:, 1, 2]
    for j in range(3):
        nz = np.hypot(out[:, 6 + j], out[:, 9 + j])
        limit = 0.8 * rho * out[:, j]
        with np.errstate(invalid="ignore", divide="ignore"):
            shrink = np.where(nz > limit, limit / np.maximum(nz, 1e-300), 1.0)
        out[:, 6 + j] *= shrink
        out[:, 9 + j] *= shrink
    return out


def _max_feasible_step(Vk: np.ndarray, Dk: np.ndarray, rho: float) -> float:
    """Largest t keeping every group of Vk + t Dk strictly inside the cone.

    The slack of one group is quadratic in t with a positive constant term,
    so the bound is the smallest positive root over all groups (infinite
    when no group ever reaches the surface).
    """
    t_max = np.inf
    for j in range(3):
        eta, de = Vk[:, j], Dk[:, j]
        zx, dzx = Vk[:, 6 + j], Dk[:, 6 + j]
        zy, dzy = Vk[:, 9 + j], Dk[:, 9 + j]
        a = (rho * de) ** 2 - dzx**2 - dzy**2
        b = 2.0 * (rho**2 * eta * de - zx * dzx - zy * dzy)
        c = (rho * eta) ** 2 - zx**2 - zy**2
        for i in range(len(eta)):
            ai, bi, ci = float(a[i]), float(b[i]), float(c[i])
            if abs(ai) < 1e-300:
                if bi < 0.0:
                    t_max = min(t_max, -ci / bi)
                continue
            disc = bi * bi - 4.0 * ai * ci
            if disc < 0.0:
                continue
            sq = np.sqrt(disc)
            for root in ((-bi - sq) / (2.0 * ai), (-bi + sq) / (2.0 * ai)):
                if root > 0.0:
                    t_max = min(t_max, root)
    return t_max


def _max_definite_step(Ms: np.ndarray, Ds: np.ndarray) -> float:
    """Largest t keeping every matrix of Ms + t Ds positive definite.

    Ms holds strictly positive definite matrices, so M + t D stays definite
    until 1 + t lambda crosses zero for the most negative eigenvalue lambda
    of M^-1 D (real, as M^-1 D is similar to a symmetric matrix).
    """
    t_max = np.inf
    lam = np.linalg.eigvals(np.linalg.solve(Ms, Ds)).real
    neg = lam[lam < 0.0]
    if neg.size:
        t_max = float((-1.0 / neg).min())
    return t_max


class _BarrierResult(NamedTuple):
    V: np.ndarray              # (k, 12) final feasible point
    fx: float                  # data objective at V
    iterations: int
    converged: bool
    stalled: bool


def _barrier_minimize(A: np.ndarray, g: np.ndarray, b: np.ndarray,
                      V0: np.ndarray, rho: float,
                      config: RefineConfig) -> _BarrierResult:
    """Minimize the Poisson deviance of mean A v + b over feasible V.

    V0 has one 12-plane row per support site; feasibility means every
    (eta_j, zeta_xj, zeta_yj) triple lies in the offset cone
    ||zeta|| <= rho eta and every site's 3x3 second-moment matrix (from the
    six eta planes) is positive semidefinite.

    The solve is an interior-point Newton iteration on a sequence of
    log-barrier relaxations: each cone group contributes
    -log((rho eta)^2 - ||zeta||^2), each moment matrix -log det M, the
    barrier weight mu shrinks geometrically to a floor set by config.tol,
    and a fraction-to-boundary rule keeps every iterate strictly feasible.
    Within one mu the iteration stops when the Newton decrement falls below
    mu. Armijo line-search failures and non-decreasing data objectives both
    feed the stall counter; stall_patience consecutive ones abort the solve
    with the stalled flag set.
    """
    k = len(V0)
    n = k * N_PLANES

    def value(v: np.ndarray) -> float:
        return _nll_of_mean(A @ v + b, g)

    def grad_and_curv(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = A @ v + b
        m = np.maximum(mean, MEAN_FLOOR)
        live = mean > MEAN_FLOOR
        w = np.where(live, 1.0 - g / m, 0.0)
        d = np.where(live, g / m**2, 0.0)
        return A.T @ w, d

    def barrier(v: np.ndarray) -> float:
        Vk = v.reshape(k, N_PLANES)
        r = _cone_margins(Vk, rho)
        if np.any(r <= 0.0):
            return np.inf
        lam = np.linalg.eigvalsh(_moment_matrices(Vk))
        if np.any(lam <= 0.0):
            return np.inf
        return -float(np.log(r).sum()) - float(np.log(lam).sum())

    eta_floor = max(1e-3, 1e-6 * float(V0[:, 0:3].sum()))
    v = _interior_start(V0, rho, eta_floor).ravel()
    fx = value(v)
    nu = 6 * k                 # barrier complexity: 3 cones + one 3x3 PSD per site

    # Indices of each group's (eta, zeta_x, zeta_y) triple in the flat layout.
    rows = np.arange(k)[:, None] * N_PLANES
    group_idx = np.stack([rows + np.arange(3),
                          rows + 6 + np.arange(3),
                          rows + 9 + np.arange(3)], axis=2).reshape(-1, 3)

    # Index pairs of the six moment planes within the 3x3 matrix.
    sym_pairs = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))

    mu_final = config.tol * max(1.0, abs(fx)) / nu
    mu = max(abs(fx) / nu, 100.0 * mu_final)
    converged = False
    stalled = False
    stall = 0
    iteration = 0
    while iteration < config.max_iterations:
        inner_left = 20
        while iteration < config.max_iterations and inner_left > 0:
            inner_left -= 1
            iteration += 1
            grad, curv = grad_and_curv(v)
            hess = A.T @ (curv[:, None] * A)

            Vk = v.reshape(k, N_PLANES)
            r = _cone_margins(Vk, rho)                       # (k, 3)
            # Gradient of the slack per group, in (eta, zx, zy) order.
            gr = np.stack([2.0 * rho**2 * Vk[:, 0:3],
                           -2.0 * Vk[:, 6:9],
                           -2.0 * Vk[:, 9:12]], axis=2).reshape(-1, 3)
            rf = r.reshape(-1)
            g_mu = grad.copy()
            np.add.at(g_mu, group_idx.ravel(),
                      (-mu * gr / rf[:, None]).ravel())
            fixed = np.diag([-2.0 * rho**2, 2.0, 2.0])
            for gi in range(3 * k):
                idx = group_idx[gi]
                block = np.outer(gr[gi], gr[gi]) / rf[gi] ** 2 + fixed / rf[gi]
                hess[np.ix_(idx, idx)] += mu * block

            # Log-det barrier on each site's moment matrix. With W = M^-1,
            # the gradient entry for plane a is tr(W E_a) and the Hessian
            # entry for planes a, b is tr(W E_a W E_b), E_a the symmetric
            # unit matrix of that plane (off-diagonal planes touch two cells).
            Ms = _moment_matrices(Vk)
            Winv = np.linalg.inv(Ms)
            H6 = np.empty((6, 6))
            for i in range(k):
                W = Winv[i]
                base = i * N_PLANES
                for a, (p, q) in enumerate(sym_pairs):
                    g_mu[base + a] -= mu * (W[p, q] if p == q else 2.0 * W[p, q])
                    Ta = np.outer(W[:, p], W[:, q])
                    if p != q:
                        Ta = Ta + Ta.T
                    for bi, (p2, q2) in enumerate(sym_pairs):
                        H6[a, bi] = Ta[p2, q2] if p2 == q2 else Ta[p2, q2] + Ta[q2, p2]
                hess[base:base + 6, base:base + 6] += mu * H6

            ridge = config.newton_ridge * max(np.trace(hess) / n, 1.0)
            try:
                step = np.linalg.solve(hess + ridge * np.eye(n), -g_mu)
            except np.linalg.LinAlgError:
                step = np.linalg.solve(hess + (1e6 * ridge) * np.eye(n), -g_mu)
            decrement = -float(g_mu @ step)
            if decrement <= 0.1 * mu:
                break                                        # centered enough

            stepk = step.reshape(k, N_PLANES)
            t_max = min(_max_feasible_step(Vk, stepk, rho),
                        _max_definite_step(Ms, _moment_matrices(stepk)))
            t = min(1.0, 0.99 * t_max)
            F_mu = fx + mu * barrier(v)
            accepted = False
            for _ in range(30):
                cand = v + t * step
                f_cand = value(cand)
                F_cand = f_cand + mu * barrier(cand)
                if F_cand <= F_mu - 1e-4 * t * decrement:
                    accepted = True
                    break
                t *= config.step_shrink
            if not accepted:
                stall += 1
                if stall >= config.stall_patience:
                    stalled = True
                break
            stall = stall + 1 if f_cand >= fx else 0
            v, fx = cand, f_cand
            if stall >= config.stall_patience:
                stalled = True
                break
        if stalled:
            break
        if mu <= mu_final:
            converged = True
            break
        mu = max(config.barrier_shrink * mu, mu_final)

    return _BarrierResult(V=v.reshape(k, N_PLANES), fx=fx,
                          iterations=iteration, converged=converged,
                          stalled=stalled)


def refine_support(counts: np.ndarray, op: DesignOperator,
                   detections: list[Detection], F: JointSignal,
                   background: float | np.ndarray,
                   config: RefineConfig | None = None
                   ) -> tuple[list[EmitterEstimate], RefineInfo]:
    """Re-fit the likelihood on the detected support, then read off emitters.

    The fit runs in two passes, both minimizing the Poisson likelihood with
    no sparsity penalty under the offset cones ||zeta_j|| <= rho eta_j plus
    positive semidefiniteness of each site's 3x3 second-moment matrix. The
    matrix constraint is what makes the fit identifiable: without it the
    likelihood has a spurious valley in which inflated diagonal-plane
    brightnesses cancel large signed cross-plane patterns almost exactly in
    image space, carving into the background, and noise routinely drives an
    unconstrained fit into it.

    The first pass fits jointly on the union of 3x3 neighborhoods of the
    detections, warm started from each detection's pooled neighborhood mass,
    and yields each emitter's photon-weighted position. Reading moments off
    this pass directly would bias the orientation isotropic: the likelihood
    is nearly flat under shuffles of brightness between adjacent sites, so
    shot noise splits one emitter's photons over several sites whose
    individual moment matrices wobble in direction, and their pooled sum
    loses anisotropy. The second pass therefore re-fits each emitter as a
    single group pinned to the grid site nearest its first-pass position
    (all other emitters' fields held fixed in the mean), which concentrates
    the photons and restores a clean per-emitter moment estimate; brightness,
    position, and orientation are read off that group.

    Both passes use the same solver: damped Newton steps on a sequence of
    log-barrier relaxations of the constraints, with a fraction-to-boundary
    rule keeping iterates strictly feasible (see _barrier_minimize). A pass
    whose objective stops decreasing for stall_patience consecutive line
    searches aborts, and estimates are then flagged "stalled".

    An empty detection list returns no estimates and a zero-iteration info.
    """
    if config is None:
        config = RefineConfig()
    grid = op.grid
    gh, gw = grid.grid_shape
    px_nm = grid.pixel_size_nm
    bg = np.broadcast_to(np.asarray(background, dtype=float), counts.shape)

    if not detections:
        return [], RefineInfo(iterations=0, converged=True, stalled=False,
                              nll=_nll_of_mean(np.maximum(bg, MEAN_FLOOR) + 0.0, counts))

    mask = np.zeros((gh, gw), dtype=bool)
    for det in detections:
        ys = slice(max(det.iy - 1, 0), min(det.iy + 2, gh))
        xs = slice(max(det.ix - 1, 0), min(det.ix + 2, gw))
        mask[ys, xs] = True
    sites = np.argwhere(mask)                                # (k, 2) as (iy, ix)
    k = len(sites)

    design = np.empty((k, N_PLANES, counts.size))
    for i, (iy, ix) in enumerate(sites):
        for p in range(N_PLANES):
            design[i, p] = op.unit_response(p, int(iy), int(ix)).ravel()
    A = design.reshape(k * N_PLANES, counts.size).T          # (npix, k*12)

    g = counts.ravel()
    b = bg.ravel()
    rho = grid.rho_px

    start = project_soc(_concentrated_start(F, detections, mask, grid), rho)
    V0 = np.ascontiguousarray(start[:, sites[:, 0], sites[:, 1]].T)  # (k, 12)

    joint = _barrier_minimize(A, g, b, V0, rho, config)
    iterations = joint.iterations
    converged = joint.converged
    stalled = joint.stalled

    owner = _ownership((sites[:, 0], sites[:, 1]), detections)
    signal = np.zeros_like(g)
    drafts = []
    for e, det in enumerate(detections):
        rows = np.nonzero(owner == e)[0]
        Ve = joint.V[rows]
        eta_diag = np.maximum(Ve[:, 0:3], 0.0)
        mass = float(eta_diag.sum())
        if not mass > 0:
            continue

        # Photon-weighted first-pass position over the emitter's sites.
        x_nm, y_nm = grid.position_nm(sites[rows, 0], sites[rows, 1])
        x_hat = float((eta_diag * x_nm[:, None] + Ve[:, 6:9] * px_nm).sum() / mass)
        y_hat = float((eta_diag * y_nm[:, None] + Ve[:, 9:12] * px_nm).sum() / mass)

        # Second pass: one group at the nearest grid site, others fixed.
        iy2, ix2 = grid.nearest_index(x_hat, y_hat)
        A_e = np.stack([op.unit_response(p, iy2, ix2).ravel()
                        for p in range(N_PLANES)], axis=1)
        v_rest = joint.V.copy()
        v_rest[rows] = 0.0
        b_e = b + A @ v_rest.ravel()

        sx_nm, sy_nm = (float(t) for t in grid.position_nm(iy2, ix2))
        eta6 = Ve[:, 0:6].sum(axis=0)
        V0e = np.zeros((1, N_PLANES))
        V0e[0, 0:6] = eta6
        V0e[0, 6:9] = np.maximum(eta6[0:3], 0.0) * ((x_hat - sx_nm) / px_nm)
        V0e[0, 9:12] = np.maximum(eta6[0:3], 0.0) * ((y_hat - sy_nm) / px_nm)

        solo = _barrier_minimize(A_e, g, b_e, V0e, rho, config)
        iterations += solo.iterations
        converged = converged and solo.converged
        stalled = stalled or solo.stalled

        ve = solo.V[0]
        s_e = float(ve[0:3].sum())
        if not s_e > 0:
            continue
        signal += A_e @ ve
        drafts.append((det, (iy2, ix2), len(rows), ve, solo.stalled))

    nll = _nll_of_mean(signal + b, g)
    estimates = []
    for det, site2, nsites, ve, solo_stalled in drafts:
        orient = orientation_from_moments(ve[0:6])
        sx_nm, sy_nm = (float(t) for t in grid.position_nm(*site2))
        flags = ()
        if joint.stalled or solo_stalled:
            flags += ("stalled",)
        if orient.degenerate:
            flags += ("orientation-degenerate",)
        estimates.append(EmitterEstimate(
            x_nm=sx_nm + float(ve[6:9].sum()) / orient.s * px_nm,
            y_nm=sy_nm + float(ve[9:12].sum()) / orient.s * px_nm,
            s=orient.s,
            eta=ve[0:6].copy(),
            moments=orient.moments,
            theta_rad=orient.theta_rad,
            phi_rad=orient.phi_rad,
            gamma=orient.gamma,
            cone_half_angle_rad=orient.cone_half_angle_rad,
            nll=nll,
            grid_index=site2,
            support_size=nsites,
            flags=flags,
        ))
    dropped = len(detections) - len(estimates)
    return estimates, RefineInfo(iterations=iterations, converged=converged,
                                 stalled=stalled, nll=nll, dropped=dropped)
