"""Linear forward operator mapping gridded emitter signals to camera images.

The reconstruction works on a regular grid of candidate emitter sites. Each
site i carries twelve numbers: six brightness-scaled second moments
``eta[j]`` and, for the three diagonal moments, photon-weighted sub-grid
offsets ``zeta_x[j], zeta_y[j]``. To first order in the offset, an emitter
displaced by ``delta`` from its grid point contributes

    sum_j eta[j] B_j(u - d) - zeta_x[j] dBx_j(u - d) - zeta_y[j] dBy_j(u - d)

per camera pixel, where B_j are the pixel-integrated basis images and dB
their spatial derivatives. Stacking all sites makes the map linear, and
because every site uses the same translated kernels, applying it is a sum of
2-D convolutions; both the forward map and its exact adjoint are evaluated
with padded FFTs.

Convention: positions and offsets inside the solver are measured in camera
pixels (``zeta`` is photons times pixels); nanometers appear only at the
public boundary. The grid may refine the pixel pitch by an integer factor q,
in which case one convolution per sub-pixel phase is performed and the basis
oversampling must be a multiple of 2q so phase kernels are exact integer
shifts on the fine grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft

from .basis import BasisStack, integrate_pixels

N_PLANES = 12  # 6 moments + 3 x-offsets + 3 y-offsets
ETA = slice(0, 6)
ZETA_X = slice(6, 9)
ZETA_Y = slice(9, 12)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one reconstruction problem: camera frame plus emitter grid."""

    height_px: int
    width_px: int
    pixel_size_nm: float
    points_per_pixel: int = 1

    def __post_init__(self) -> None:
        if self.height_px < 1 or self.width_px < 1:
            raise ValueError("frame dimensions must be positive")
        if self.pixel_size_nm <= 0:
            raise ValueError("pixel_size_nm must be positive")
        if self.points_per_pixel < 1:
            raise ValueError("points_per_pixel must be a positive integer")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (2, self.height_px, self.width_px)

    @property
    def grid_shape(self) -> tuple[int, int]:
        q = self.points_per_pixel
        return (self.height_px * q, self.width_px * q)

    @property
    def rho_px(self) -> float:
        """Half the grid spacing: largest representable offset magnitude."""
        return 0.5 / self.points_per_pixel

    @property
    def rho_nm(self) -> float:
        return self.rho_px * self.pixel_size_nm

    def axis_positions_px(self, n_px: int) -> np.ndarray:
        q = self.points_per_pixel
        return (np.arange(n_px * q) + 0.5) / q - n_px / 2.0

    def grid_x_px(self) -> np.ndarray:
        return self.axis_positions_px(self.width_px)

    def grid_y_px(self) -> np.ndarray:
        return self.axis_positions_px(self.height_px)

    def position_nm(self, iy: np.ndarray | int, ix: np.ndarray | int):
        """Physical (x, y) of grid points, origin at the frame center."""
        q = self.points_per_pixel
        x = ((np.asarray(ix) + 0.5) / q - self.width_px / 2.0) * self.pixel_size_nm
        y = ((np.asarray(iy) + 0.5) / q - self.height_px / 2.0) * self.pixel_size_nm
        return x, y

    def nearest_index(self, x_nm: float, y_nm: float) -> tuple[int, int]:
        """Grid indices of the site closest to a physical position."""
        q = self.points_per_pixel
        gx = int(np.floor((x_nm / self.pixel_size_nm + self.width_px / 2.0) * q))
        gy = int(np.floor((y_nm / self.pixel_size_nm + self.height_px / 2.0) * q))
        gh, gw = self.grid_shape
        return min(max(gy, 0), gh - 1), min(max(gx, 0), gw - 1)

    def contains(self, x_nm: float, y_nm: float) -> bool:
        half_w = self.width_px / 2.0 * self.pixel_size_nm
        half_h = self.height_px / 2.0 * self.pixel_size_nm
        return abs(x_nm) < half_w and abs(y_nm) < half_h


def _integer_shift(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift a 2-D array by whole samples, filling the vacated strip with zeros."""
    out = np.zeros_like(plane)
    h, w = plane.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = plane[ys_src, xs_src]
    return out


class DesignOperator:
    """FFT-backed forward map and adjoint for one grid/basis combination.

    Attributes
    ----------
    grid : GridSpec
    basis : BasisStack
    kernels : (q, q, 2, 12, K, K) pixel-integrated per-phase kernels. Plane
        p < 6 holds basis image p; planes 6..8 and 9..11 hold the negated x
        and y derivative kernels for the diagonal moments, so that apply()
        is a plain sum of convolutions.
    """

    def __init__(self, basis: BasisStack, grid: GridSpec):
        if abs(basis.pixel_size_nm - grid.pixel_size_nm) > 1e-9 * grid.pixel_size_nm:
            raise ValueError(
                f"basis pixel size {basis.pixel_size_nm} does not match "
                f"grid pixel size {grid.pixel_size_nm}"
            )
        q = grid.points_per_pixel
        os = basis.oversampling
        if q > 1 and os % (2 * q) != 0:
            raise ValueError(
                f"points_per_pixel={q} needs basis oversampling divisible by "
                f"{2 * q}, got {os}"
            )
        self.grid = grid
        self.basis = basis

        K = basis.footprint_px
        kernels = np.empty((q, q, 2, N_PLANES, K, K))
        # Fine-grid planes in solver sign convention: offsets enter negatively.
        fine = np.concatenate(
            [basis.images, -basis.derivs_x[:3], -basis.derivs_y[:3]], axis=0
        )  # (12, 2, F, F)
        for py in range(q):
            for px in range(q):
                # Grid phase (py, px) sits off the pixel center by this many
                # fine-grid samples (integer by the oversampling precondition).
                off_x = round(os * ((px + 0.5) / q - 0.5))
                off_y = round(os * ((py + 0.5) / q - 0.5))
                for p in range(N_PLANES):
                    for ch in range(2):
                        plane = fine[p, ch]
                        if off_x or off_y:
                            plane = _integer_shift(plane, off_y, off_x)
                        kernels[py, px, ch, p] = integrate_pixels(plane, os)
        self.kernels = kernels
        self._prepare_ffts()

    def _prepare_ffts(self) -> None:
        H, W = self.grid.height_px, self.grid.width_px
        K = self.basis.footprint_px
        self._pad_shape = (
            scipy.fft.next_fast_len(H + K - 1, real=True),
            scipy.fft.next_fast_len(W + K - 1, real=True),
        )
        self._center = K // 2
        q = self.grid.points_per_pixel
        ph, pw = self._pad_shape
        kf = np.empty((q, q, 2, N_PLANES, ph, pw // 2 + 1), dtype=np.complex128)
        buf = np.zeros((2, N_PLANES, ph, pw))
        for py in range(q):
            for px in range(q):
                buf[:] = 0.0
                buf[:, :, :K, :K] = self.kernels[py, px]
                kf[py, px] = scipy.fft.rfft2(buf)
        self._kernels_f = kf
        self._kernels_f_conj = kf.conj()

    # -- shapes ------------------------------------------------------------

    @property
    def signal_shape(self) -> tuple[int, int, int]:
        gh, gw = self.grid.grid_shape
        return (N_PLANES, gh, gw)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.grid.image_shape

    # -- linear map --------------------------------------------------------

    def apply(self, planes: np.ndarray) -> np.ndarray:
        """Expected photon image (2, H, W) of a twelve-plane grid signal."""
        if planes.shape != self.signal_shape:
            raise ValueError(f"expected signal shape {self.signal_shape}, got {planes.shape}")
        q = self.grid.points_per_pixel
        H, W = self.grid.height_px, self.grid.width_px
        ph, pw = self._pad_shape
        c = self._center
        out_f = np.zeros((2, ph, pw // 2 + 1), dtype=np.complex128)
        buf = np.zeros((N_PLANES, ph, pw))
        for py in range(q):
            for px in range(q):
                buf[:, :H, :W] = planes[:, py::q, px::q]
                x_f = scipy.fft.rfft2(buf)
                out_f += np.einsum("cpyx,pyx->cyx", self._kernels_f[py, px], x_f)
        out = scipy.fft.irfft2(out_f, s=self._pad_shape)
        return out[:, c:c + H, c:c + W].copy()

    def unit_response(self, p: int, iy: int, ix: int) -> np.ndarray:
        """Camera image (2, H, W) of a unit impulse in plane p at one site.

        Equals apply() of an indicator signal, evaluated directly from the
        stored kernels; used to assemble dense design matrices on small
        supports.
        """
        if not 0 <= p < N_PLANES:
            raise ValueError(f"plane index {p} out of range")
        gh, gw = self.grid.grid_shape
        if not (0 <= iy < gh and 0 <= ix < gw):
            raise ValueError(f"grid site ({iy}, {ix}) out of range")
        q = self.grid.points_per_pixel
        H, W = self.grid.height_px, self.grid.width_px
        K = self.basis.footprint_px
        c = self._center
        Y, X = iy // q, ix // q
        out = np.zeros((2, H, W))
        y0, y1 = max(0, Y - c), min(H, Y - c + K)
        x0, x1 = max(0, X - c), min(W, X - c + K)
        out[:, y0:y1, x0:x1] = self.kernels[
            iy % q, ix % q, :, p,
            y0 - Y + c:y1 - Y + c,
            x0 - X + c:x1 - X + c,
        ]
        return out

    def adjoint(self, image: np.ndarray) -> np.ndarray:
        """Exact transpose of apply(); maps a residual image back to the grid."""
        if image.shape != self.image_shape:
            raise ValueError(f"expected image shape {self.image_shape}, got {image.shape}")
        q = self.grid.points_per_pixel
        H, W = self.grid.height_px, self.grid.width_px
        ph, pw = self._pad_shape
        c = self._center
        buf = np.zeros((2, ph, pw))
        buf[:, c:c + H, c:c + W] = image
        r_f = scipy.fft.rfft2(buf)
        out = np.empty(self.signal_shape)
        for py in range(q):
            for px in range(q):
                g_f = np.einsum("cpyx,cyx->pyx", self._kernels_f_conj[py, px], r_f)
                g = scipy.fft.irfft2(g_f, s=self._pad_shape)
                out[:, py::q, px::q] = g[:, :H, :W]
        return out

    # -- derived quantities --------------------------------------------------

    @cached_property
    def norm_sq(self) -> float:
        """Estimate of the squared spectral norm of the map (power iteration)."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal(self.signal_shape)
        x /= np.linalg.norm(x)
        value = 1.0
        for _ in range(30):
            y = self.adjoint(self.apply(x))
            value = float(np.linalg.norm(y))
            if value == 0.0:
                return 0.0
            x = y / value
        return value

    @cached_property
    def kernel_scale(self) -> float:
        """Largest Frobenius norm among the diagonal-moment kernels.

        Used to make the default regularization weight insensitive to how
        the basis spreads its energy over pixels.
        """
        phi = self.kernels[0, 0, :, :3]  # (2, 3, K, K)
        norms = np.sqrt((phi**2).sum(axis=(0, 2, 3)))
        return float(norms.max())
