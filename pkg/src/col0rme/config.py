"""Flat ``key = value`` run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .forward import GridGeometry, PsfSpec
from .intensity import IntensityParams
from .simulator import AcquisitionConfig, EmitterKinetics
from .support import Cel0Params

THREADS_ENV = "COL0RME_THREADS"

# file keys that are not valid Python identifiers
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


@dataclass
class RunConfig:
    # geometry / optics
    M: int = 32
    q: int = 4
    coarse_pitch_nm: float = 100.0
    fwhm_nm: float = 229.0
    truncation_radius: int = 0  # 0: ceil(4 sigma)
    # support estimation
    lam: float = 0.0  # 0: lambda_rel * largest single-pixel gain
    lambda_rel: float = 1e-7
    outer_max: int = 20
    inner_max: int = 500
    outer_tol: float = 1e-4
    inner_tol: float = 1e-6
    support_threshold: float = 0.0  # 0: support_rel * max(r_x)
    support_rel: float = 0.05
    patch_size: int = 12
    overlap: int = 4
    memory_budget_mb: float = 512.0
    lambda_sweep: str = ""  # comma-separated lambda_rel values
    inner_solver: str = "fista"  # or "active-set"
    init_weights: str = "ones"  # or "cel0"
    # intensity estimation
    mu: float = 0.0  # 0: mu_rel * largest eigenvalue of Psi_Omega^T Psi_Omega
    mu_rel: float = 1e-4
    mu_rule: str = "spectral"  # or "data"
    x_solver: str = "fista"  # or "active-set"
    max_alt: int = 50
    alt_tol: float = 1e-5
    x_inner_max: int = 2000
    # simulation
    tau_on_ms: float = 20.0
    tau_off_ms: float = 40.0
    tau_bleach_s: float = 20.0
    photons: float = 1000.0
    T: int = 700
    fps: float = 100.0
    background: float = 100.0
    snr_db: float = 20.0  # inf: noiseless
    density: float = 10.7
    phantom: str = "tubules"
    placement: str = "continuous"  # tubules only: "continuous" or "sites"
    width_px: float = 0.0  # lateral spread of continuous placement
    n_tubules: int = 4
    site_spacing: float = 1.0
    gap_nm: float = 200.0
    seed: int = 0
    noise_seed: int = -1  # -1: same as seed
    poisson: bool = False
    # evaluation
    delta_nm: float = 40.0
    match_mode: str = "greedy"
    profile_line: str = ""  # "r0,c0,r1,c1" in fine pixels; empty: horizontal line through the centre
    # execution
    threads: int = 0  # 0: $COL0RME_THREADS, else the available cores

    # -- construction ----------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [_FIELD_TO_KEY.get(f.name, f.name) for f in fields(cls)]

    def update(self, values: dict[str, str | int | float | bool]) -> "RunConfig":
        """Return a copy with ``values`` (file keys, raw strings allowed) applied; unknown keys raise."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            name = _KEY_TO_FIELD.get(key, key)
            if name not in types:
                raise KeyError(f"unknown config key {key!r}")
            changes[name] = _coerce(raw, types[name], key)
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value
        return cls().update(values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{_FIELD_TO_KEY.get(f.name, f.name)} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {_FIELD_TO_KEY.get(f.name, f.name): getattr(self, f.name) for f in fields(self)}

    def validate(self):
        if self.M < 1 or self.q < 1:
            raise ValueError("M and q must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.phantom not in ("tubules", "grid", "points", "parallel"):
            raise ValueError(f"unknown phantom {self.phantom!r}")
        if self.match_mode not in ("greedy", "optimal"):
            raise ValueError(f"unknown match_mode {self.match_mode!r}")
        if self.lam < 0 or self.lambda_rel <= 0:
            raise ValueError("lambda must be >= 0 and lambda_rel > 0")
        if self.patch_size < 1 or self.overlap < 0:
            raise ValueError("patch_size >= 1 and overlap >= 0 required")
        if self.threads < 0:
            raise ValueError("threads must be >= 0")
        choices = {
            "placement": ("continuous", "sites"),
            "inner_solver": ("fista", "active-set"),
            "init_weights": ("ones", "cel0"),
            "mu_rule": ("spectral", "data"),
            "x_solver": ("fista", "active-set"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    # -- derived objects -------------------------------------------------------

    def geometry(self, coarse_size: int | None = None) -> GridGeometry:
        return GridGeometry(coarse_size or self.M, self.q, self.coarse_pitch_nm)

    def psf(self) -> PsfSpec:
        return PsfSpec(self.fwhm_nm, self.truncation_radius or None)

    def kinetics(self) -> EmitterKinetics:
        return EmitterKinetics(self.tau_on_ms, self.tau_off_ms, self.tau_bleach_s, self.photons)

    def acquisition(self) -> AcquisitionConfig:
        return AcquisitionConfig(
            geometry=self.geometry(),
            psf=self.psf(),
            frame_rate=self.fps,
            n_frames=self.T,
            background=self.background,
            snr_db=None if math.isinf(self.snr_db) else self.snr_db,
            seed=self.seed,
            noise_seed=None if self.noise_seed < 0 else self.noise_seed,
            poisson=self.poisson,
        )

    def cel0_params(self) -> Cel0Params:
        return Cel0Params(
            lam=self.lam or None,
            outer_max=self.outer_max,
            inner_max=self.inner_max,
            outer_tol=self.outer_tol,
            inner_tol=self.inner_tol,
            support_threshold=self.support_threshold or None,
            support_rel=self.support_rel,
            inner_solver=self.inner_solver,
            init_weights=self.init_weights,
        )

    def intensity_params(self) -> IntensityParams:
        return IntensityParams(
            mu=self.mu or None,
            mu_rel=self.mu_rel,
            mu_rule=self.mu_rule,
            x_solver=self.x_solver,
            max_alt=self.max_alt,
            tol=self.alt_tol,
            inner_max=self.x_inner_max,
        )

    def phantom_kwargs(self) -> dict:
        return {
            "n_tubules": self.n_tubules,
            "site_spacing": self.site_spacing,
            "gap_nm": self.gap_nm,
            "placement": self.placement,
            "width_px": self.width_px,
        }

    def thread_count(self) -> int:
        if self.threads:
            return self.threads
        env = os.environ.get(THREADS_ENV)
        if env:
            return max(1, int(env))
        try:
            return len(os.sched_getaffinity(0))
        except AttributeError:
            return os.cpu_count() or 1

    def sweep_values(self) -> list[float]:
        return [float(v) for v in self.lambda_sweep.split(",") if v.strip()]


# desk-scale versions of the two simulated acquisitions (low and high background)
PRESETS = {
    "low-bg": {"photons": 1000.0, "background": 100.0, "snr_db": 20.0, "density": 10.7, "T": 700, "M": 32},
    "high-bg": {"photons": 500.0, "background": 2500.0, "snr_db": 20.0, "density": 10.7, "T": 700, "M": 32},
}


def _coerce(raw, typ, key):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return str(raw)
