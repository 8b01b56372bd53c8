"""Run configuration: flat key=value text with dotted section prefixes.

A config file looks like

    # comment
    camera.width_px = 32
    solver.tol = 1e-6
    detect.pooling = pooled

Every key is section.field where the sections and their defaults are the
dataclasses below; unknown keys and malformed values are configuration
errors. The same dotted syntax is accepted from the command line, so a file
and ad-hoc overrides share one code path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .basis import BasisStack, SyntheticBasisParams, load_basis, synthetic_basis
from .detect import RefineConfig
from .operator import GridSpec
from .solver import SolverConfig


class ConfigError(ValueError):
    """Invalid configuration key, value, or combination."""


@dataclass
class CameraSection:
    width_px: int = 32
    height_px: int = 32
    pixel_size_nm: float = 58.0


@dataclass
class GridSection:
    points_per_pixel: int = 1


@dataclass
class BasisSection:
    source: str = "synthetic"     # "synthetic" or a container path
    oversampling: int = 4
    sigma_px: float = 1.2
    lobe_radius_px: float = 1.5
    footprint_px: int = 13
    kappa: float = 0.25


@dataclass
class SolverSection:
    lam: float = 0.0              # <= 0 selects the default heuristic
    lambda0: float = 2.0
    tau_factor: float = 0.1
    max_iterations: int = 2000
    tol: float = 1e-6


@dataclass
class DetectSection:
    threshold: float = 0.3
    min_separation: int = 2
    pooling: str = "pooled"       # "pooled" or "per-basis"


@dataclass
class RefineSection:
    max_iterations: int = 200


@dataclass
class BackgroundSection:
    mode: str = "fixed"           # "fixed" or "border-median"
    value: float = 5.0


@dataclass
class SimulateSection:
    n_frames: int = 1
    background: float = 5.0
    seed: int = 0
    channel_shift_x_px: float = 0.0
    channel_shift_y_px: float = 0.0


@dataclass
class ReconstructSection:
    workers: int = 1
    density_bin_px: float = 0.25
    solver_log: int = 0           # write per-frame iteration traces


@dataclass
class BenchmarkSection:
    signal: float = 2000.0
    background: float = 5.0
    trials: int = 200
    orientation_trials: int = 50
    overlap_trials: int = 100
    misalignment_trials: int = 200
    misalignment_px: float = 1.0
    separation_nm: float = 300.0
    seed: int = 0


@dataclass
class DnaSection:
    degree: int = 3


@dataclass
class PipelineConfig:
    """All sections together; construct via parse_config / apply_overrides."""

    camera: CameraSection = field(default_factory=CameraSection)
    grid: GridSection = field(default_factory=GridSection)
    basis: BasisSection = field(default_factory=BasisSection)
    solver: SolverSection = field(default_factory=SolverSection)
    detect: DetectSection = field(default_factory=DetectSection)
    refine: RefineSection = field(default_factory=RefineSection)
    background: BackgroundSection = field(default_factory=BackgroundSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    dna: DnaSection = field(default_factory=DnaSection)

    # -- derived objects -----------------------------------------------------

    def validate(self) -> None:
        if self.detect.pooling not in ("pooled", "per-basis"):
            raise ConfigError(
                f"detect.pooling: expected 'pooled' or 'per-basis', got "
                f"{self.detect.pooling!r}"
            )
        if self.background.mode not in ("fixed", "border-median"):
            raise ConfigError(
                f"background.mode: expected 'fixed' or 'border-median', got "
                f"{self.background.mode!r}"
            )
        if self.reconstruct.workers < 1:
            raise ConfigError("reconstruct.workers: must be at least 1")
        if self.detect.threshold < 0:
            raise ConfigError("detect.threshold: must be nonnegative")
        try:
            if self.basis.source == "synthetic":
                self.basis_params()
            self.grid_spec(self.camera.height_px, self.camera.width_px)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def basis_params(self) -> SyntheticBasisParams:
        return SyntheticBasisParams(
            pixel_size_nm=self.camera.pixel_size_nm,
            oversampling=self.basis.oversampling,
            sigma_px=self.basis.sigma_px,
            lobe_radius_px=self.basis.lobe_radius_px,
            footprint_px=self.basis.footprint_px,
            kappa=self.basis.kappa,
        )

    def make_basis(self) -> BasisStack:
        try:
            if self.basis.source == "synthetic":
                return synthetic_basis(self.basis_params())
            return load_basis(self.basis.source)
        except ValueError as exc:
            # Bad generator parameters are configuration problems; a bad
            # container file is input data and stays a FormatError.
            from .io import FormatError

            if isinstance(exc, FormatError):
                raise
            raise ConfigError(f"basis: {exc}") from None

    def grid_spec(self, height_px: int, width_px: int) -> GridSpec:
        return GridSpec(
            height_px=height_px,
            width_px=width_px,
            pixel_size_nm=self.camera.pixel_size_nm,
            points_per_pixel=self.grid.points_per_pixel,
        )

    def solver_config(self, background) -> SolverConfig:
        return SolverConfig(
            lam=self.solver.lam if self.solver.lam > 0 else None,
            lam0=self.solver.lambda0,
            background=background,
            tau_factor=self.solver.tau_factor,
            max_iterations=self.solver.max_iterations,
            tol=self.solver.tol,
        )

    def refine_config(self) -> RefineConfig:
        return RefineConfig(max_iterations=self.refine.max_iterations)


def _coerce(key: str, text: str, kind: type):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def apply_override(config: PipelineConfig, key: str, value: str) -> None:
    """Set one dotted key on a config in place, with type checking."""
    key = key.strip()
    if "." not in key:
        raise ConfigError(f"{key}: keys must look like section.field")
    section_name, field_name = key.split(".", 1)
    section = getattr(config, section_name, None)
    if section is None or not dataclasses.is_dataclass(section):
        raise ConfigError(f"{key}: unknown section {section_name!r}")
    fields = {f.name: f for f in dataclasses.fields(section)}
    if field_name not in fields:
        raise ConfigError(f"{key}: unknown field {field_name!r} in section {section_name!r}")
    current = getattr(section, field_name)
    setattr(section, field_name, _coerce(key, value.strip(), type(current)))


def parse_config_text(text: str, config: PipelineConfig | None = None) -> PipelineConfig:
    """Parse key=value lines into a PipelineConfig (starting from defaults)."""
    config = config or PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        apply_override(config, key, value)
    return config


def load_config(path, overrides: list[str] | None = None) -> PipelineConfig:
    """Config from an optional file plus command-line key=value overrides."""
    config = PipelineConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        parse_config_text(text, config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        apply_override(config, key, value)
    config.validate()
    return config
