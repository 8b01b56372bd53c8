"""Scene rendering and noise: the physics side of the imaging model.

Rendering is deliberately independent of the reconstruction operator: an
emitter's basis images are re-evaluated at its exact continuous position
(no linearization in the sub-pixel offset) and integrated over camera
pixels. The solver's first-order grid model is therefore tested against
this path rather than against itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .basis import BasisStack, integrate_pixels
from .moments import cone_moments, is_physical
from .operator import GridSpec

MAX_CHANNEL_SHIFT_PX = 2.0


@dataclass(frozen=True)
class Emitter:
    """One molecule: brightness, position, and orientation parameters."""

    s: float
    x_nm: float
    y_nm: float
    theta_rad: float = 0.0
    phi_rad: float = 0.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.s < 0:
            raise ValueError(f"brightness must be nonnegative, got {self.s}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def moments(self) -> np.ndarray:
        """Six second moments implied by the orientation parameters."""
        return cone_moments(self.theta_rad, self.phi_rad, self.gamma)


@dataclass
class Frame:
    """A two-channel camera exposure plus its background level.

    pixels : (2, H, W) photons (expected values or counts)
    background : scalar or (2, H, W) expected background per pixel
    """

    pixels: np.ndarray
    background: float | np.ndarray = 0.0

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 2:
            raise ValueError(f"expected (2, H, W) pixels, got {self.pixels.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def background_map(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.background, dtype=float),
                               self.pixels.shape)


def render_scene(
    emitters,
    basis: BasisStack,
    grid: GridSpec,
    background: float | np.ndarray = 0.0,
) -> Frame:
    """Expected photon image of a scene (noiseless).

    Each emitter is decomposed as nearest pixel center plus a continuous
    remainder; the basis stack is re-evaluated at that exact remainder and
    integrated over pixels, so sub-pixel positions are rendered without
    model error. Emitters must lie inside the frame; footprints are cropped
    at the frame edge. Moment vectors outside the physical set are rejected.

    Custom moment vectors can be rendered by passing (emitter, moments)
    pairs; by default moments come from the emitter's orientation.
    """
    H, W = grid.height_px, grid.width_px
    px_nm = grid.pixel_size_nm
    image = np.zeros((2, H, W))
    K = basis.footprint_px
    half = K // 2

    for entry in emitters:
        if isinstance(entry, tuple):
            emitter, m = entry
            m = np.asarray(m, dtype=float)
        else:
            emitter, m = entry, entry.moments
        if not grid.contains(emitter.x_nm, emitter.y_nm):
            raise ValueError(
                f"emitter at ({emitter.x_nm:.1f}, {emitter.y_nm:.1f}) nm lies "
                "outside the imaged region"
            )
        if not is_physical(m, tol=1e-6):
            raise ValueError("emitter moments are not positive semidefinite with unit trace")

        # Nearest pixel center and the exact remaining offset, in pixels.
        x_px = emitter.x_nm / px_nm + W / 2.0 - 0.5
        y_px = emitter.y_nm / px_nm + H / 2.0 - 0.5
        ix, iy = int(np.rint(x_px)), int(np.rint(y_px))
        dx, dy = x_px - ix, y_px - iy

        fine = basis.shifted(dx, dy)                       # (6, 2, F, F)
        spot = integrate_pixels(np.tensordot(m, fine, axes=(0, 0)), basis.oversampling)
        spot *= emitter.s                                  # (2, K, K)

        y0, y1 = iy - half, iy + half + 1
        x0, x1 = ix - half, ix + half + 1
        sy = slice(max(y0, 0), min(y1, H))
        sx = slice(max(x0, 0), min(x1, W))
        ky = slice(sy.start - y0, K - (y1 - sy.stop))
        kx = slice(sx.start - x0, K - (x1 - sx.stop))
        image[:, sy, sx] += spot[:, ky, kx]

    return Frame(image + np.broadcast_to(np.asarray(background, float), image.shape),
                 background=background)


def sample_poisson(frame: Frame, seed: int | np.random.Generator) -> Frame:
    """Draw one shot-noise realization of an expected-value frame."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if np.any(frame.pixels < 0):
        raise ValueError("expected photon image has negative entries")
    counts = rng.poisson(frame.pixels).astype(float)
    return Frame(counts, background=frame.background)


def shift_channel_image(pixels: np.ndarray, dx_px: float, dy_px: float) -> np.ndarray:
    """Translate the y-polarized channel of a (2, H, W) image.

    Integer shifts move whole pixels and zero-fill the vacated strip;
    fractional shifts use cubic spline interpolation. Positive dx moves
    content toward larger x (column index).
    """
    if max(abs(dx_px), abs(dy_px)) > MAX_CHANNEL_SHIFT_PX:
        raise ValueError(
            f"channel shift ({dx_px}, {dy_px}) px exceeds the supported "
            f"|shift| <= {MAX_CHANNEL_SHIFT_PX} px"
        )
    out = pixels.astype(float).copy()
    if dx_px == int(dx_px) and dy_px == int(dy_px):
        from .operator import _integer_shift

        out[1] = _integer_shift(pixels[1], int(dy_px), int(dx_px))
    else:
        out[1] = scipy.ndimage.shift(pixels[1], (dy_px, dx_px), order=3,
                                     mode="constant", cval=0.0)
    return out


def apply_channel_misalignment(target, dx_px: float, dy_px: float = 0.0):
    """Shift the y-polarized channel of a Frame or of a BasisStack.

    Shifting a Frame models a mis-registered instrument; shifting a
    BasisStack builds the matched model an informed reconstruction would
    use. Returns a new object of the same kind.
    """
    if isinstance(target, Frame):
        return Frame(shift_channel_image(target.pixels, dx_px, dy_px),
                     background=target.background)
    if isinstance(target, BasisStack):
        if max(abs(dx_px), abs(dy_px)) > MAX_CHANNEL_SHIFT_PX:
            raise ValueError(
                f"channel shift ({dx_px}, {dy_px}) px exceeds the supported "
                f"|shift| <= {MAX_CHANNEL_SHIFT_PX} px"
            )
        return target.with_channel_shift(dx_px, dy_px)
    raise TypeError(f"cannot shift channels of {type(target).__name__}")
