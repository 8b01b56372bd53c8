"""End-to-end workflows behind the CLI subcommands.

Each run_* function takes a PipelineConfig plus paths, writes its outputs
(delimited tables, rasters, figures) into an output directory, and returns
a small result object the caller can inspect. Nothing here prompts or
reads state outside the given paths.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, plots
from .config import PipelineConfig
from .detect import find_support, grad_map_from_signal, pool_maps, refine_support
from .forward import Frame, apply_channel_misalignment, render_scene, sample_poisson
from .operator import DesignOperator
from .solver import SolveDiagnostics, SolverError, deconvolve

log = logging.getLogger("smolm")


def estimate_background(counts: np.ndarray, mode: str, value: float):
    """Background level for one frame.

    fixed: the configured value. border-median: per-channel median of the
    one-pixel frame border (a robust signal-free region for sparse scenes).
    """
    if mode == "fixed":
        return value
    border = np.concatenate([
        counts[:, 0, :], counts[:, -1, :], counts[:, :, 0], counts[:, :, -1],
    ], axis=1)
    med = np.median(border, axis=1)
    med = np.maximum(med, 1e-3)
    return med[:, None, None] * np.ones_like(counts)


@dataclass
class FrameResult:
    frame_index: int
    estimates: list
    detections: list
    diagnostics: SolveDiagnostics | None
    error: str | None = None


def process_frame(counts: np.ndarray, op: DesignOperator, cfg: PipelineConfig,
                  frame_index: int = 0) -> FrameResult:
    """Deconvolve, detect, and refine one frame."""
    background = estimate_background(counts, cfg.background.mode,
                                     cfg.background.value)
    solver_cfg = cfg.solver_config(background)
    F, diag = deconvolve(counts, op, solver_cfg)
    maps = [grad_map_from_signal(F, j, op.grid.rho_px) for j in range(3)]
    if cfg.detect.pooling == "pooled":
        score_maps = [pool_maps(maps)]
    else:
        score_maps = maps
    seen: dict[tuple[int, int], object] = {}
    for score in score_maps:
        for det in find_support(score, F, op, cfg.detect.threshold,
                                cfg.detect.min_separation):
            seen.setdefault((det.iy, det.ix), det)
    detections = list(seen.values())
    estimates, _ = refine_support(counts, op, detections, F, background,
                                  cfg.refine_config())
    return FrameResult(frame_index, estimates, detections, diag)


def _estimate_row(frame_index: int, e) -> dict:
    return {
        "frame_index": frame_index,
        "x_nm": e.x_nm,
        "y_nm": e.y_nm,
        "s_photons": e.s,
        "eta1": e.eta[0], "eta2": e.eta[1], "eta3": e.eta[2],
        "eta4": e.eta[3], "eta5": e.eta[4], "eta6": e.eta[5],
        "theta_rad": e.theta_rad,
        "phi_rad": e.phi_rad,
        "gamma": e.gamma,
        "cone_half_angle_rad": e.cone_half_angle_rad,
        "nll": e.nll,
        "flags": e.flags,
    }


# -- simulate -----------------------------------------------------------------


@dataclass
class SimulateResult:
    frames_path: Path
    truth_path: Path
    n_frames: int
    noiseless: np.ndarray


def run_simulate(cfg: PipelineConfig, scene_path, output_dir) -> SimulateResult:
    """Render a scene, apply optional channel misregistration, add shot noise.

    Writes a 16-bit TIFF stack (channels side by side), a ground-truth
    sidecar table, and a quick-look figure of the first frame. The stack is
    a deterministic function of the config seed.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    emitters = io.read_scene(scene_path)
    basis = cfg.make_basis()
    grid = cfg.grid_spec(cfg.camera.height_px, cfg.camera.width_px)

    clean = render_scene(emitters, basis, grid, cfg.simulate.background)
    shift = (cfg.simulate.channel_shift_x_px, cfg.simulate.channel_shift_y_px)
    if shift != (0.0, 0.0):
        clean = apply_channel_misalignment(clean, *shift)

    rng = np.random.default_rng(cfg.simulate.seed)
    frames = np.stack([
        sample_poisson(clean, rng).pixels for _ in range(cfg.simulate.n_frames)
    ])

    frames_path = out / "frames.tif"
    io.write_tiff_stack(frames_path, frames)

    truth_path = out / "truth.csv"
    with open(truth_path, "w") as fh:
        fh.write("frame_index," + ",".join(io.SCENE_COLUMNS) + "\n")
        for t in range(cfg.simulate.n_frames):
            for e in emitters:
                fields = (e.s, e.x_nm, e.y_nm, e.theta_rad, e.phi_rad, e.gamma)
                fh.write(f"{t}," + ",".join(format(v, ".10g") for v in fields) + "\n")

    plots.save_frame_figure(frames[0], out / "frame0.png",
                            title="first simulated frame")
    log.info("simulate: wrote %d frame(s) to %s", cfg.simulate.n_frames, frames_path)
    return SimulateResult(frames_path, truth_path, cfg.simulate.n_frames, clean.pixels)


# -- reconstruct --------------------------------------------------------------


@dataclass
class ReconstructResult:
    table_path: Path
    density_path: Path
    n_frames: int
    n_localizations: int
    failed_frames: list = field(default_factory=list)
    rows: list = field(default_factory=list)


def density_histogram(rows, grid, bin_px: float) -> tuple[np.ndarray, tuple]:
    """2-D localization counts on a sub-pixel raster covering the frame."""
    px = grid.pixel_size_nm
    half_w = grid.width_px / 2.0 * px
    half_h = grid.height_px / 2.0 * px
    nx = max(int(round(grid.width_px / bin_px)), 1)
    ny = max(int(round(grid.height_px / bin_px)), 1)
    xs = [r["x_nm"] for r in rows]
    ys = [r["y_nm"] for r in rows]
    hist, _, _ = np.histogram2d(ys, xs, bins=(ny, nx),
                                range=((-half_h, half_h), (-half_w, half_w)))
    return hist, (-half_w, half_w, -half_h, half_h)


def run_reconstruct(cfg: PipelineConfig, frames_path, output_dir) -> ReconstructResult:
    """Localize every frame of a stack and write table, density map, figures.

    Frames are processed independently (a bounded thread pool when
    reconstruct.workers > 1; results are merged in frame order so the output
    is identical either way). A frame whose solve fails is logged and
    skipped; the remaining frames still produce output and the failure is
    reported to the caller.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, meta = io.read_frames(frames_path)
    if meta.get("pixel_size_nm") and \
            abs(meta["pixel_size_nm"] - cfg.camera.pixel_size_nm) > 1e-9:
        log.info("reconstruct: using pixel size %.3f nm from the container",
                 meta["pixel_size_nm"])
        cfg.camera.pixel_size_nm = float(meta["pixel_size_nm"])

    n_frames, _, height, width = frames.shape
    basis = cfg.make_basis()
    grid = cfg.grid_spec(height, width)
    op = DesignOperator(basis, grid)

    def work(t: int) -> FrameResult:
        try:
            return process_frame(frames[t], op, cfg, frame_index=t)
        except SolverError as exc:
            return FrameResult(t, [], [], None, error=str(exc))

    if cfg.reconstruct.workers > 1 and n_frames > 1:
        with ThreadPoolExecutor(max_workers=cfg.reconstruct.workers) as pool:
            results = list(pool.map(work, range(n_frames)))
    else:
        results = [work(t) for t in range(n_frames)]

    rows: list[dict] = []
    failed: list[int] = []
    first_diag = None
    for res in results:
        if res.error is not None:
            failed.append(res.frame_index)
            log.warning("frame %d failed: %s", res.frame_index, res.error)
            continue
        if first_diag is None:
            first_diag = res.diagnostics
        for e in res.estimates:
            rows.append(_estimate_row(res.frame_index, e))
        if cfg.reconstruct.solver_log:
            trace_path = out / f"solver_frame{res.frame_index:04d}.csv"
            trace_path.write_text(res.diagnostics.trace_text())

    table_path = out / "localizations.csv"
    io.write_table(table_path, rows)

    hist, extent = density_histogram(rows, grid, cfg.reconstruct.density_bin_px)
    density_path = out / "density.tif"
    clipped = np.clip(hist, 0, np.iinfo(np.uint16).max).astype(np.uint16)
    from PIL import Image

    Image.fromarray(clipped).save(density_path)
    plots.save_density_figure(hist, extent, out / "density.png")
    if first_diag is not None:
        plots.save_convergence_figure(first_diag, out / "convergence.png")

    log.info("reconstruct: %d localization(s) from %d frame(s), %d failure(s)",
             len(rows), n_frames, len(failed))
    return ReconstructResult(table_path, density_path, n_frames, len(rows),
                             failed, rows)


# -- benchmark ----------------------------------------------------------------


@dataclass
class BenchmarkResult:
    report_path: Path
    sweep: object
    noisy: object
    orientation: object
    misalignment: object
    two_emitter: object


def run_benchmark(cfg: PipelineConfig, output_dir) -> BenchmarkResult:
    """Run the reference studies and write metrics.txt plus figures."""
    from . import benchmark as bench

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    basis = cfg.make_basis()
    b = cfg.benchmark

    def make_op(side_px: int) -> DesignOperator:
        return DesignOperator(basis, cfg.grid_spec(side_px, side_px))

    op20 = make_op(20)
    sep_px = int(np.ceil(b.separation_nm / cfg.camera.pixel_size_nm))
    op_pair = make_op(20 + 2 * sep_px)

    sweep = bench.sweep_subpixel(op20, basis, background=1.0)
    noisy = bench.single_emitter_trials(
        op20, basis, trials=b.trials, s=b.signal, background=b.background,
        seed=b.seed)
    orientation = bench.single_emitter_trials(
        op20, basis, trials=b.orientation_trials, s=5000.0,
        background=b.background, seed=b.seed + 1, gamma_range=(0.5, 1.0),
        theta_range=(np.pi / 2, np.pi / 2))
    misalignment = bench.misalignment_study(
        op20, basis, trials=b.misalignment_trials, shift_px=b.misalignment_px,
        s=b.signal, background=b.background, seed=b.seed + 2)
    pair = bench.two_emitter_study(
        op_pair, basis, trials=b.overlap_trials, separation_nm=b.separation_nm,
        s=b.signal, background=b.background, seed=b.seed + 3)

    report_path = out / "metrics.txt"
    rho_nm = op20.grid.rho_nm
    rms_pos = float(np.sqrt(np.mean(sweep.position_error_nm**2)))
    rms_bright = float(np.sqrt(np.mean(sweep.brightness_rel_error**2)))
    lines = [
        "[subpixel-sweep]",
        f"offsets_px = {','.join(str(f) for f in sweep.fractions)}",
        f"rho_nm = {rho_nm:.6g}",
        f"rms_position_error_nm = {rms_pos:.6g}",
        f"rms_brightness_rel_error = {rms_bright:.6g}",
        f"worst_position_error_nm = {sweep.worst_position_error_nm:.6g}",
        f"worst_brightness_rel_error = {np.abs(sweep.brightness_rel_error).max():.6g}",
        f"worst_deconvolve_rel_error = {np.abs(sweep.deconvolve_rel_error).max():.6g}",
        "",
        "[single-emitter]",
        f"trials = {noisy.trials}",
        f"signal_photons = {b.signal:.6g}",
        f"background = {b.background:.6g}",
        f"recall = {noisy.recall:.6g}",
        f"false_positives = {noisy.false_positives}",
        f"rms_position_nm = {noisy.rms_r_nm:.6g}",
        f"mean_brightness_rel_error = {noisy.mean_ds_rel:.6g}",
        "",
        "[orientation]",
        f"trials = {orientation.trials}",
        f"rms_theta_deg = {np.rad2deg(orientation.rms_theta_rad):.6g}",
        f"rms_phi_deg = {np.rad2deg(orientation.rms_phi_rad):.6g}",
        f"rms_axis_deg = {np.rad2deg(orientation.rms_axis_rad):.6g}",
        f"rms_gamma = {orientation.rms_gamma:.6g}",
        "",
        "[misalignment]",
        f"trials = {misalignment.trials}",
        f"shift_px = {misalignment.shift_px:.6g}",
        f"pooled_exactly_one = {misalignment.pooled_exactly_one:.6g}",
        f"pooled_split = {misalignment.pooled_split:.6g}",
        f"per_plane_split = {misalignment.per_plane_split:.6g}",
        "",
        "[two-emitter]",
        f"trials = {pair.trials}",
        f"separation_nm = {pair.separation_nm:.6g}",
        f"resolved_fraction = {pair.resolved_fraction:.6g}",
        f"count_histogram = {pair.count_histogram}",
        "",
    ]
    report_path.write_text("\n".join(lines))

    plots.save_offset_sweep_figure(sweep.fractions, sweep.position_error_nm,
                                   rho_nm, out / "subpixel_sweep.png")
    plots.save_error_histogram(noisy.position_errors_nm,
                               out / "position_errors.png",
                               "position error (nm)",
                               title=f"recall {noisy.recall:.3f}")
    plots.save_detection_count_figure(misalignment.pooled_counts,
                                      misalignment.per_plane_counts,
                                      out / "misalignment_counts.png")
    log.info("benchmark: report written to %s", report_path)
    return BenchmarkResult(report_path, sweep, noisy, orientation, misalignment,
                           pair)


# -- dna-axis -----------------------------------------------------------------


@dataclass
class DnaAxisResult:
    table_path: Path
    n_rows: int
    median_abs_delta_phi_rad: float
    coefficients: np.ndarray


def run_dna_axis(cfg: PipelineConfig, table_path, output_dir) -> DnaAxisResult:
    """Relate each molecule's azimuth to the local axis of a curved filament.

    Fits y(x) as a polynomial (weighted by photons) to the localization
    positions, computes the tangent angle at each localization, and reports
    the wrapped difference delta_phi between the molecule azimuth and the
    tangent, in (-pi/2, pi/2] since a dipole axis has no sign. Writes the
    augmented table, a histogram figure, and summary statistics.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = io.read_table(table_path)
    degree = cfg.dna.degree
    if len(rows) < degree + 2:
        raise io.FormatError(
            f"table: {len(rows)} localizations cannot constrain a degree-"
            f"{degree} axis fit"
        )
    x = np.array([r["x_nm"] for r in rows])
    y = np.array([r["y_nm"] for r in rows])
    w = np.sqrt(np.maximum([r["s_photons"] for r in rows], 1.0))
    coeffs = np.polyfit(x, y, deg=degree, w=w)
    slope = np.polyval(np.polyder(coeffs), x)
    tangent = np.arctan(slope)

    delta = np.array([
        (r["phi_rad"] - t + np.pi / 2) % np.pi - np.pi / 2
        for r, t in zip(rows, tangent)
    ])

    aug_path = out / "axis_table.csv"
    with open(table_path) as fh:
        header = fh.readline().strip()
        body = fh.read().splitlines()
    with open(aug_path, "w") as fh:
        fh.write(header + ",tangent_rad,delta_phi_rad\n")
        for line, t, d in zip(body, tangent, delta):
            fh.write(f"{line},{t:.10g},{d:.10g}\n")

    plots.save_delta_phi_figure(delta, out / "delta_phi.png")
    median_abs = float(np.median(np.abs(delta)))
    stats_path = out / "axis_stats.txt"
    stats_path.write_text(
        "[dna-axis]\n"
        f"localizations = {len(rows)}\n"
        f"degree = {degree}\n"
        f"median_abs_delta_phi_rad = {median_abs:.6g}\n"
        f"mean_delta_phi_rad = {float(delta.mean()):.6g}\n"
        f"std_delta_phi_rad = {float(delta.std()):.6g}\n"
    )
    log.info("dna-axis: %d rows, median |delta phi| = %.3f rad", len(rows), median_abs)
    return DnaAxisResult(aug_path, len(rows), median_abs, coeffs)
