"""File formats: raw plane containers, TIFF stacks, scenes, and result tables."""

from __future__ import annotations

import csv
import io as _stdio
from pathlib import Path

import numpy as np
from PIL import Image, ImageSequence

MAGIC = b"SMBASIS1"

# Localization table columns, in output order.
TABLE_COLUMNS = (
    "frame_index",
    "x_nm",
    "y_nm",
    "s_photons",
    "eta1", "eta2", "eta3", "eta4", "eta5", "eta6",
    "theta_rad",
    "phi_rad",
    "gamma",
    "cone_half_angle_rad",
    "nll",
    "flags",
)

SCENE_COLUMNS = ("s", "x_nm", "y_nm", "theta_rad", "phi_rad", "gamma")


class FormatError(ValueError):
    """A file does not conform to its declared format."""


def write_container(path, planes: np.ndarray, *, pixel_size_nm: float,
                    oversampling: int = 1) -> None:
    """Write an (n, 2, H, W) plane stack as an SMBASIS1 container.

    Layout: magic line, key=value header lines, one blank line, then raw
    little-endian float64 planes ordered plane-major, channel-minor,
    row-major.
    """
    planes = np.ascontiguousarray(planes, dtype="<f8")
    if planes.ndim != 4 or planes.shape[1] != 2:
        raise ValueError(f"expected (n, 2, H, W) planes, got {planes.shape}")
    n, channels, height, width = planes.shape
    header = (
        f"pixel_size_nm={pixel_size_nm!r}\n"
        f"oversampling={oversampling}\n"
        f"width={width}\n"
        f"height={height}\n"
        f"channels={channels}\n"
        f"bases={n}\n"
        f"dtype=float64\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(header.encode("ascii"))
        fh.write(planes.tobytes())


def read_container(path) -> tuple[np.ndarray, dict]:
    """Read an SMBASIS1 container; returns (planes (n, 2, H, W), header dict).

    Raises FormatError naming the offending field on any malformed input.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != MAGIC:
            raise FormatError(f"magic: expected {MAGIC.decode()}, found {magic[:16]!r}")
        meta: dict[str, str] = {}
        while True:
            line = fh.readline()
            if line in (b"\n", b"\r\n"):
                break
            if not line:
                raise FormatError("header: file ended before the blank separator line")
            text = line.decode("ascii", errors="replace").strip()
            if "=" not in text:
                raise FormatError(f"header: malformed line {text!r}")
            key, value = text.split("=", 1)
            meta[key.strip()] = value.strip()

        for key in ("pixel_size_nm", "oversampling", "width", "height",
                    "channels", "bases", "dtype"):
            if key not in meta:
                raise FormatError(f"{key}: missing from header")
        if meta["dtype"] != "float64":
            raise FormatError(f"dtype: only float64 is supported, found {meta['dtype']}")
        try:
            width = int(meta["width"])
            height = int(meta["height"])
            channels = int(meta["channels"])
            n = int(meta["bases"])
            pixel_size = float(meta["pixel_size_nm"])
            oversampling = int(meta["oversampling"])
        except ValueError as exc:
            raise FormatError(f"header: non-numeric field ({exc})") from None
        if channels != 2:
            raise FormatError(f"channels: expected 2, found {channels}")
        if min(width, height, n, oversampling) < 1 or pixel_size <= 0:
            raise FormatError("header: dimensions and pixel size must be positive")

        count = n * channels * height * width
        raw = np.fromfile(fh, dtype="<f8", count=count)
        if raw.size != count:
            raise FormatError(
                f"payload: truncated, expected {count} float64 values, read {raw.size}"
            )
    planes = raw.reshape(n, channels, height, width)
    return planes, {
        "pixel_size_nm": pixel_size,
        "oversampling": oversampling,
        "width": width,
        "height": height,
        "channels": channels,
        "bases": n,
    }


def write_tiff_stack(path, frames: np.ndarray) -> None:
    """Write (T, 2, H, W) photon-count frames as a multipage 16-bit TIFF.

    The two polarization channels are placed side by side (x-channel left),
    giving H x 2W pages. Values are rounded and clipped to the uint16 range.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 2:
        raise ValueError(f"expected (T, 2, H, W) frames, got {frames.shape}")
    pages = []
    for t in range(frames.shape[0]):
        wide = np.concatenate([frames[t, 0], frames[t, 1]], axis=1)
        wide = np.clip(np.rint(wide), 0, np.iinfo(np.uint16).max).astype(np.uint16)
        pages.append(Image.fromarray(wide))
    pages[0].save(path, save_all=True, append_images=pages[1:], compression=None)


def read_tiff_stack(path) -> np.ndarray:
    """Read a multipage TIFF written by write_tiff_stack back to (T, 2, H, W)."""
    with Image.open(path) as img:
        pages = [np.array(page, dtype=np.float64) for page in ImageSequence.Iterator(img)]
    frames = np.stack(pages)
    if frames.ndim != 3 or frames.shape[2] % 2 != 0:
        raise FormatError(f"pages: expected H x 2W grayscale pages, got {frames.shape}")
    half = frames.shape[2] // 2
    return np.stack([frames[:, :, :half], frames[:, :, half:]], axis=1)


def read_frames(path) -> tuple[np.ndarray, dict]:
    """Read a frame stack from TIFF or container, by file suffix."""
    suffix = Path(path).suffix.lower()
    if suffix in (".tif", ".tiff"):
        return read_tiff_stack(path), {}
    planes, meta = read_container(path)
    return planes, meta


def _format_float(x: float) -> str:
    return format(float(x), ".10g")


def write_scene(path, emitters) -> None:
    """Write emitters as a CSV scene file (columns SCENE_COLUMNS)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCENE_COLUMNS)
        for e in emitters:
            writer.writerow([_format_float(v) for v in
                             (e.s, e.x_nm, e.y_nm, e.theta_rad, e.phi_rad, e.gamma)])


def read_scene(path):
    """Read a CSV scene file into a list of Emitter objects.

    Lines starting with '#' are comments. Raises FormatError naming the
    offending column or line on malformed input.
    """
    from .forward import Emitter

    emitters = []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)
                if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise FormatError("scene: file is empty")
    header = [c.strip() for c in rows[0]]
    if header != list(SCENE_COLUMNS):
        raise FormatError(
            f"scene header: expected {','.join(SCENE_COLUMNS)}, found {','.join(header)}"
        )
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(SCENE_COLUMNS):
            raise FormatError(f"scene line {lineno}: expected {len(SCENE_COLUMNS)} fields")
        try:
            values = dict(zip(SCENE_COLUMNS, map(float, row)))
        except ValueError:
            raise FormatError(f"scene line {lineno}: non-numeric field") from None
        try:
            emitters.append(Emitter(**values))
        except ValueError as exc:
            raise FormatError(f"scene line {lineno}: {exc}") from None
    return emitters


def write_table(path, rows) -> None:
    """Write localization rows (dicts keyed by TABLE_COLUMNS) as CSV."""
    with open(path, "w", newline="") as fh:
        fh.write(format_table(rows))


def format_table(rows) -> str:
    """Render localization rows to CSV text (deterministic float formatting)."""
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        out = []
        for col in TABLE_COLUMNS:
            value = row[col]
            if col == "frame_index":
                out.append(str(int(value)))
            elif col == "flags":
                out.append(";".join(value) if not isinstance(value, str) else value)
            else:
                out.append(_format_float(value))
        writer.writerow(out)
    return buf.getvalue()


def read_table(path) -> list[dict]:
    """Read a localization table back into dicts with numeric fields parsed."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(TABLE_COLUMNS):
            raise FormatError("table header: unexpected columns")
        rows = []
        for row in reader:
            parsed: dict = {}
            for col in TABLE_COLUMNS:
                if col == "frame_index":
                    parsed[col] = int(row[col])
                elif col == "flags":
                    parsed[col] = tuple(f for f in row[col].split(";") if f)
                else:
                    parsed[col] = float(row[col])
            rows.append(parsed)
    return rows
