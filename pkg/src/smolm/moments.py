"""Second-moment descriptions of wobbling dipole emitters.

A fluorophore whose transition dipole wobbles inside a symmetric cone during
one camera exposure is summarized, up to everything a second-moment imaging
system can see, by the 3x3 matrix ``M = <mu mu^T>`` averaged over the wobble.
``M`` is symmetric, positive semidefinite, and has unit trace, so six numbers
carry it. Throughout the package those six numbers are ordered

    m = [<mux^2>, <muy^2>, <muz^2>, <mux muy>, <mux muz>, <muy muz>]

and a dipole axis ``mu(theta, phi)`` uses the physics convention: ``theta``
is the polar angle from the optical (z) axis, ``phi`` the azimuth in the
sample plane. Because ``mu`` and ``-mu`` are the same physical dipole, all
recovered orientations are canonicalized to the upper hemisphere
(``mu_z >= 0``, ``theta <= pi/2``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MOMENT_NAMES = ("mxx", "myy", "mzz", "mxy", "mxz", "myz")

# Eigenvalue gap below which the leading rotational axis of M is treated as
# undefined (denominator of the gamma estimate vanishes near isotropy).
DEGENERATE_GAP = 1e-3


def dipole_axis(theta: float, phi: float) -> np.ndarray:
    """Unit vector [sin t cos p, sin t sin p, cos t] for polar/azimuth angles."""
    st = np.sin(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], dtype=float)


def cone_moments(theta: float, phi: float, gamma: float) -> np.ndarray:
    """Six second moments of a dipole wobbling uniformly in a symmetric cone.

    The rotational mobility ``gamma`` interpolates between an isotropic
    emitter (``gamma = 0``, moments = identity/3) and a fixed dipole
    (``gamma = 1``, moments = mu mu^T):

        M = gamma * mu mu^T + (1 - gamma)/3 * I

    Parameters
    ----------
    theta, phi : float
        Mean dipole axis (radians).
    gamma : float
        Mobility in [0, 1].

    Returns
    -------
    (6,) float array ordered as MOMENT_NAMES. Unit trace by construction.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    mu = dipole_axis(theta, phi)
    M = gamma * np.outer(mu, mu) + (1.0 - gamma) / 3.0 * np.eye(3)
    return moment_vector(M)


def moment_matrix(m: np.ndarray) -> np.ndarray:
    """Pack a 6-vector of second moments into the symmetric 3x3 matrix."""
    m = np.asarray(m, dtype=float)
    if m.shape != (6,):
        raise ValueError(f"expected 6 moments, got shape {m.shape}")
    return np.array(
        [
            [m[0], m[3], m[4]],
            [m[3], m[1], m[5]],
            [m[4], m[5], m[2]],
        ]
    )


def moment_vector(M: np.ndarray) -> np.ndarray:
    """Inverse of moment_matrix: extract the 6 independent entries."""
    M = np.asarray(M, dtype=float)
    return np.array([M[0, 0], M[1, 1], M[2, 2], M[0, 1], M[0, 2], M[1, 2]])


def is_physical(m: np.ndarray, tol: float = 1e-9) -> bool:
    """True when the moment vector is unit-trace and positive semidefinite."""
    M = moment_matrix(m)
    if abs(np.trace(M) - 1.0) > tol:
        return False
    return bool(np.linalg.eigvalsh(M)[0] >= -tol)


def project_physical(m: np.ndarray) -> np.ndarray:
    """Nearest physically admissible moment vector.

    Clips negative eigenvalues of the 3x3 moment matrix to zero and rescales
    to unit trace. Acting on an already physical vector this is the identity.
    """
    M = moment_matrix(m)
    vals, vecs = np.linalg.eigh(M)
    vals = np.maximum(vals, 0.0)
    total = vals.sum()
    if total <= 0.0:
        raise ValueError("moment matrix has no positive part")
    vals /= total
    return moment_vector((vecs * vals) @ vecs.T)


def cone_angle_to_gamma(alpha: float | np.ndarray) -> float | np.ndarray:
    """Mobility gamma of a dipole wobbling uniformly in a cone of half-angle alpha.

    Uniform solid-angle averaging over the cone gives
    ``<cos^2 t> = (1 + c + c^2) / 3`` with ``c = cos(alpha)``, which through
    the moment decomposition yields ``gamma = c (1 + c) / 2``. Monotone from
    gamma(0) = 1 (fixed dipole) down to gamma(pi/2) = 0 (free hemisphere).
    """
    c = np.cos(alpha)
    return c * (1.0 + c) / 2.0


def gamma_to_cone_angle(gamma: float | np.ndarray, iters: int = 60) -> float | np.ndarray:
    """Cone half-angle (radians) whose uniform wobble produces mobility gamma.

    Inverts cone_angle_to_gamma by bisection on [0, pi/2]; sixty halvings
    pin the root to well below 1e-15 rad.
    """
    g = np.clip(np.asarray(gamma, dtype=float), 0.0, 1.0)
    lo = np.zeros_like(g)          # gamma(0) = 1
    hi = np.full_like(g, np.pi / 2)  # gamma(pi/2) = 0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        too_mobile = cone_angle_to_gamma(mid) < g
        hi = np.where(too_mobile, mid, hi)
        lo = np.where(too_mobile, lo, mid)
    out = 0.5 * (lo + hi)
    return float(out) if np.isscalar(gamma) or np.ndim(gamma) == 0 else out


@dataclass(frozen=True)
class OrientationEstimate:
    """Orientation parameters extracted from a recovered moment vector."""

    s: float
    moments: np.ndarray          # projected, physically admissible
    theta_rad: float
    phi_rad: float
    gamma: float
    cone_half_angle_rad: float
    degenerate: bool             # leading eigenvalue gap too small for an axis


def orientation_from_moments(eta: np.ndarray) -> OrientationEstimate:
    """Brightness and orientation from six brightness-scaled second moments.

    The recovered quantities ``eta = s * m`` factor into the photon count
    ``s = eta_1 + eta_2 + eta_3`` (the moment vector has unit trace) and the
    moment vector ``m = eta / s``, which is projected to the physical set
    before the spectral decomposition. The mean dipole axis is the leading
    eigenvector, flipped into the upper hemisphere; the mobility comes from
    the leading eigenvalue, ``gamma = (3 lmax - 1) / 2``, clipped to [0, 1].

    Raises
    ------
    ValueError
        If the implied brightness is not positive.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (6,):
        raise ValueError(f"expected 6 scaled moments, got shape {eta.shape}")
    s = float(eta[0] + eta[1] + eta[2])
    if not s > 0.0:
        raise ValueError(f"nonpositive brightness {s}: orientation undefined")

    m = project_physical(eta / s)
    vals, vecs = np.linalg.eigh(moment_matrix(m))  # ascending
    mu = vecs[:, 2]
    if mu[2] < 0.0:
        mu = -mu
    degenerate = (vals[2] - vals[1]) < DEGENERATE_GAP

    theta = float(np.arccos(np.clip(mu[2], -1.0, 1.0)))
    phi = float(np.arctan2(mu[1], mu[0]))
    if phi <= -np.pi:
        phi = np.pi
    gamma = float(np.clip((3.0 * vals[2] - 1.0) / 2.0, 0.0, 1.0))
    alpha = float(gamma_to_cone_angle(gamma))
    return OrientationEstimate(
        s=s,
        moments=m,
        theta_rad=theta,
        phi_rad=phi,
        gamma=gamma,
        cone_half_angle_rad=alpha,
        degenerate=degenerate,
    )
