"""Orientational basis images: generation, storage, and sub-pixel shifting.

An orientation-sensitive microscope maps the six second moments of a dipole
linearly onto the camera, so its response is fully described by six basis
images per polarization channel: the image of an emitter with moments ``m``
and brightness ``s`` is ``s * sum_j m_j B_j``. This module provides a
synthetic six-lobe Gaussian model of such a system plus container I/O for
measured stacks.

The synthetic model places three Gaussian lobes in each of two orthogonally
polarized channels. Each lobe acts as an analyzer along a fixed 3-vector
``a``: its intensity for moment matrix ``M`` is ``tr(M a a^T) >= 0``, which
keeps every rendered image nonnegative for any admissible ``M``. The lobe
directions are deliberately asymmetric (controlled by a small tilt
``kappa``) so that the six lobe responses span all six moments; with the
default geometry the response matrix has full rank with single-digit
condition number, and the x/y channels split an in-plane dipole's energy
according to its azimuth.

Basis images are stored on a grid oversampled relative to the camera pixel,
in units of intensity per pixel area, normalized so the first three basis
images integrate to one: an emitter of brightness ``s`` then contributes
``s`` expected photons in total (cross-moment images carry small signed
corrections). Coordinates inside this module are camera pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.fft

from . import io

N_BASES = 6
N_CHANNELS = 2


@dataclass(frozen=True)
class SyntheticBasisParams:
    """Geometry of the synthetic six-lobe basis generator."""

    pixel_size_nm: float = 58.0
    oversampling: int = 4
    sigma_px: float = 1.2        # lobe width
    lobe_radius_px: float = 1.5  # distance of lobe centers from the emitter
    footprint_px: int = 13       # camera-pixel extent of one basis image (odd)
    kappa: float = 0.25          # analyzer tilt coupling cross moments

    def __post_init__(self) -> None:
        if self.pixel_size_nm <= 0:
            raise ValueError("pixel_size_nm must be positive")
        if self.oversampling < 1:
            raise ValueError("oversampling must be >= 1")
        if self.sigma_px <= 0:
            raise ValueError("sigma_px must be positive")
        if self.footprint_px % 2 != 1:
            raise ValueError("footprint_px must be odd so the emitter sits on a pixel center")
        # Tails must die out inside the footprint or energy leaks on shifting.
        needed = 2.0 * (self.lobe_radius_px + 3.0 * self.sigma_px)
        if self.footprint_px < needed:
            raise ValueError(
                f"footprint_px={self.footprint_px} too small for "
                f"lobe_radius_px={self.lobe_radius_px}, sigma_px={self.sigma_px} "
                f"(needs >= {needed:.1f})"
            )
        if not 0.0 < self.kappa < 0.5:
            raise ValueError("kappa must lie in (0, 0.5)")


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def lobe_directions(kappa: float) -> np.ndarray:
    """Analyzer directions of the six lobes, x-channel rows first.

    Each channel mixes its dominant polarization with small out-of-plane and
    cross-plane tilts; the asymmetry between the two channels is what makes
    the six responses linearly independent.
    """
    x_channel = [
        _unit([1.0, kappa, 0.0]),
        _unit([1.0, -kappa, kappa]),
        _unit([kappa, 0.0, 1.0]),
    ]
    y_channel = [
        _unit([kappa, 1.0, 0.0]),
        _unit([0.0, 1.0, -kappa]),
        _unit([0.0, kappa, 1.0]),
    ]
    return np.array(x_channel + y_channel)


def lobe_moment_weights(kappa: float) -> np.ndarray:
    """(6 lobes, 6 moments) response of each analyzer lobe.

    Row l is [ax^2, ay^2, az^2, 2 ax ay, 2 ax az, 2 ay az] for direction a_l,
    so row . moments = tr(M a a^T), the lobe intensity for moment matrix M.
    """
    dirs = lobe_directions(kappa)
    ax, ay, az = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return np.stack(
        [ax * ax, ay * ay, az * az, 2 * ax * ay, 2 * ax * az, 2 * ay * az], axis=1
    )


def lobe_gains(kappa: float) -> np.ndarray:
    """Per-lobe gains normalizing the basis energies.

    Minimum-norm solution of four constraints: each of the three diagonal
    basis images integrates to one, and the two channels carry equal total
    gain. All gains must come out positive for the images to stay
    nonnegative.
    """
    W = lobe_moment_weights(kappa)
    C = np.zeros((4, 6))
    C[0] = W[:, 0]
    C[1] = W[:, 1]
    C[2] = W[:, 2]
    C[3] = [1, 1, 1, -1, -1, -1]
    d = np.array([1.0, 1.0, 1.0, 0.0])
    gains, *_ = np.linalg.lstsq(C, d, rcond=None)
    if np.any(gains <= 0):
        raise ValueError(f"lobe gains not all positive for kappa={kappa}: {gains}")
    return gains


@dataclass(frozen=True)
class _LobeModel:
    """Resolved generator state: everything needed to re-render at any shift."""

    sigma_px: float
    positions_px: np.ndarray   # (6, 2) lobe centers, (x, y) in pixels
    channels: np.ndarray       # (6,) channel index of each lobe
    coeffs: np.ndarray         # (6, 6) coeffs[l, j]: weight of lobe l in basis j
    norms: np.ndarray          # (6,) fixed normalization of each Gaussian lobe


def _subpixel_centers(footprint_px: int, oversampling: int) -> np.ndarray:
    """Coordinates of fine-grid sample centers relative to the emitter, in px."""
    n = footprint_px * oversampling
    step = 1.0 / oversampling
    return (np.arange(n) + 0.5) * step - footprint_px / 2.0


def _render_lobes(model: _LobeModel, footprint_px: int, oversampling: int,
                  dx_px: float = 0.0, dy_px: float = 0.0) -> np.ndarray:
    """Evaluate the six basis images for an emitter displaced by (dx, dy)."""
    c = _subpixel_centers(footprint_px, oversampling)
    xg = c[None, :]
    yg = c[:, None]
    n = c.size
    images = np.zeros((N_BASES, N_CHANNELS, n, n))
    inv2s2 = 1.0 / (2.0 * model.sigma_px**2)
    for l in range(model.positions_px.shape[0]):
        px, py = model.positions_px[l]
        lobe = np.exp(-(((xg - px - dx_px) ** 2) + ((yg - py - dy_px) ** 2)) * inv2s2)
        lobe *= model.norms[l]
        ch = model.channels[l]
        for j in range(N_BASES):
            w = model.coeffs[l, j]
            if w != 0.0:
                images[j, ch] += w * lobe
    return images


def _finite_diff(images: np.ndarray, step_px: float) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference spatial derivatives, one-sided at the borders."""
    dx = np.gradient(images, step_px, axis=-1)
    dy = np.gradient(images, step_px, axis=-2)
    return dx, dy


@dataclass(frozen=True)
class BasisStack:
    """Six oversampled basis images per polarization channel plus derivatives.

    images : (6, 2, F, F) intensity per pixel area on the fine grid
    derivs_x, derivs_y : same shape, d/dx and d/dy in per-pixel units
    """

    images: np.ndarray
    derivs_x: np.ndarray
    derivs_y: np.ndarray
    pixel_size_nm: float
    oversampling: int
    lobes: _LobeModel | None = None

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[:2] != (N_BASES, N_CHANNELS):
            raise ValueError(f"expected (6, 2, F, F) images, got {self.images.shape}")
        if self.images.shape[2] != self.images.shape[3]:
            raise ValueError("basis footprint must be square")
        if self.images.shape[2] % self.oversampling != 0:
            raise ValueError("fine grid extent must be a multiple of the oversampling")

    @property
    def footprint_px(self) -> int:
        return self.images.shape[2] // self.oversampling

    def energy(self, j: int) -> float:
        """Integral of basis image j over both channels (pixel-area units)."""
        return float(self.images[j].sum() / self.oversampling**2)

    def channel_energy(self, j: int, channel: int) -> float:
        return float(self.images[j, channel].sum() / self.oversampling**2)

    def shifted(self, dx_px: float, dy_px: float) -> np.ndarray:
        """Basis images of an emitter displaced by (dx, dy) pixels.

        Exact translation: re-evaluates the generator when available, else a
        zero-padded Fourier shift. This is the reference path for rendering;
        it involves no linearization in the displacement.
        """
        if self.lobes is not None:
            return _render_lobes(self.lobes, self.footprint_px, self.oversampling,
                                 dx_px, dy_px)
        shifted = np.empty_like(self.images)
        for j in range(N_BASES):
            for ch in range(N_CHANNELS):
                shifted[j, ch] = fourier_shift(
                    self.images[j, ch],
                    dx_px * self.oversampling,
                    dy_px * self.oversampling,
                )
        return shifted

    def with_channel_shift(self, dx_px: float, dy_px: float = 0.0) -> "BasisStack":
        """Stack whose second (y-polarized) channel is translated.

        Models a registration error between the two polarization channels on
        the instrument side, so that a matched forward operator can be built.
        """
        if self.lobes is not None:
            pos = self.lobes.positions_px.copy()
            mask = self.lobes.channels == 1
            pos[mask, 0] += dx_px
            pos[mask, 1] += dy_px
            model = replace(self.lobes, positions_px=pos)
            images = _render_lobes(model, self.footprint_px, self.oversampling)
        else:
            model = None
            images = self.images.copy()
            for j in range(N_BASES):
                images[j, 1] = fourier_shift(
                    self.images[j, 1],
                    dx_px * self.oversampling,
                    dy_px * self.oversampling,
                )
        dx, dy = _finite_diff(images, 1.0 / self.oversampling)
        return BasisStack(images, dx, dy, self.pixel_size_nm, self.oversampling,
                          lobes=model)

    def save(self, path) -> None:
        """Write the stack in the SMBASIS1 container format."""
        io.write_container(
            path,
            self.images,
            pixel_size_nm=self.pixel_size_nm,
            oversampling=self.oversampling,
        )


def fourier_shift(image: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Translate a 2-D image by (dx, dy) samples via a padded Fourier phase ramp.

    Exact for band-limited content; the padding keeps energy from wrapping
    around for shifts up to its width. Intended for smooth well-contained
    images such as basis stacks.
    """
    pad = int(np.ceil(max(abs(dx), abs(dy)))) + 4
    padded = np.pad(image, pad)
    h, w = padded.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    spec = scipy.fft.rfft2(padded)
    spec *= np.exp(-2j * np.pi * (fx * dx + fy * dy))
    out = scipy.fft.irfft2(spec, s=(h, w))
    return out[pad:-pad, pad:-pad]


def integrate_pixels(fine: np.ndarray, oversampling: int) -> np.ndarray:
    """Integrate fine-grid intensity over camera pixels (midpoint rule).

    Works on any array whose last two axes are the fine grid; they must be
    divisible by the oversampling factor.
    """
    h, w = fine.shape[-2:]
    if h % oversampling or w % oversampling:
        raise ValueError("fine grid extent not divisible by oversampling")
    lead = fine.shape[:-2]
    blocks = fine.reshape(*lead, h // oversampling, oversampling,
                          w // oversampling, oversampling)
    return blocks.sum(axis=(-3, -1)) / oversampling**2


def synthetic_basis(params: SyntheticBasisParams | None = None) -> BasisStack:
    """Build the synthetic six-lobe basis stack.

    Lobe centers sit on a triangle per channel (rotated 60 degrees between
    channels so the two point-spread functions are distinguishable), analyzer
    directions come from lobe_directions, and per-lobe gains normalize the
    diagonal basis energies to one.
    """
    if params is None:
        params = SyntheticBasisParams()
    p = params

    angles_x = np.deg2rad([90.0, 210.0, 330.0])
    angles_y = np.deg2rad([30.0, 150.0, 270.0])
    angles = np.concatenate([angles_x, angles_y])
    positions = p.lobe_radius_px * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    channels = np.array([0, 0, 0, 1, 1, 1])

    gains = lobe_gains(p.kappa)
    coeffs = gains[:, None] * lobe_moment_weights(p.kappa)

    # Fix each lobe's normalization once, from its unshifted discrete sum, so
    # that shifted re-renders preserve energy exactly rather than re-normalize.
    c = _subpixel_centers(p.footprint_px, p.oversampling)
    xg, yg = c[None, :], c[:, None]
    inv2s2 = 1.0 / (2.0 * p.sigma_px**2)
    norms = np.empty(6)
    for l in range(6):
        px, py = positions[l]
        raw = np.exp(-(((xg - px) ** 2) + ((yg - py) ** 2)) * inv2s2)
        total = raw.sum()
        if total <= 0:
            raise ValueError("lobe fell outside the footprint")
        norms[l] = p.oversampling**2 / total

    model = _LobeModel(sigma_px=p.sigma_px, positions_px=positions,
                       channels=channels, coeffs=coeffs, norms=norms)
    images = _render_lobes(model, p.footprint_px, p.oversampling)
    dx, dy = _finite_diff(images, 1.0 / p.oversampling)
    return BasisStack(images, dx, dy, p.pixel_size_nm, p.oversampling, lobes=model)


def load_basis(path) -> BasisStack:
    """Read a basis stack from an SMBASIS1 container.

    Derivatives are recomputed by finite differences; the generator state is
    not stored, so sub-pixel shifts of a loaded stack use the Fourier path.
    """
    planes, meta = io.read_container(path)
    if planes.shape[0] != N_BASES:
        raise io.FormatError(
            f"bases: expected {N_BASES} basis planes, found {planes.shape[0]}"
        )
    oversampling = int(meta["oversampling"])
    stack_shape_ok = planes.shape[2] == planes.shape[3]
    if not stack_shape_ok:
        raise io.FormatError("width/height: basis planes must be square")
    dx, dy = _finite_diff(planes, 1.0 / oversampling)
    return BasisStack(planes, dx, dy, float(meta["pixel_size_nm"]), oversampling)
