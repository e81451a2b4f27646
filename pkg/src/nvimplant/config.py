"""Scenario files: TOML with one table per pipeline stage.

Unknown keys anywhere are rejected.  See ``scenarios/paper-repro.toml``
for a fully populated example.
"""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .core import SimConfig
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
STAGES = ("trap", "tof", "knife_edge", "implant", "anneal", "characterize")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrapSection(_Section):
    ca_target: int = Field(1, ge=0)
    miscount_prob: float = Field(0.01, ge=0, le=1)
    removal_success: float = Field(0.9, gt=0, le=1)
    load_exposure_s: float = Field(3.0, gt=0)
    dark_exposure_s: float = Field(5.0, gt=0)
    confirmations: int = Field(2, ge=1)
    max_iterations: int = Field(1000, ge=1)


class BeamlineSection(_Section):
    endcap_v_neg: float = -2950.0
    endcap_v_pos: float = 2950.0
    rf_freq_hz: float = Field(20e6, gt=0)
    rf_amp_ms: float = Field(0.0, ge=0)
    rf_phase0: float = 0.0
    tof_mix: dict[str, int] = Field(default_factory=lambda: {"15N2+": 5000, "15N14N+": 500, "14N2+": 1000})
    tof_jitter_s: float = Field(10e-9, ge=0)
    tof_bin_width_s: float = Field(2e-9, gt=0)
    chromatic_coefficient_m: float = Field(2e-6, ge=0)
    energy_spread_rel: float = Field(1e-3, ge=0)
    drift_share: float = Field(0.5, ge=0, le=1)
    ca_sigma_nm: float = Field(11.0, gt=0)
    n2_sigma_nm: float = Field(121.0, gt=0)
    ca_acquisition_min: float = Field(17.0, ge=0)
    n2_acquisition_min: float = Field(117.0, ge=0)
    ca_scan_positions: int = Field(19, ge=5)
    ca_scan_shots: int = Field(20, ge=1)
    n2_scan_positions: int = Field(17, ge=5)
    n2_scan_shots: int = Field(17, ge=1)
    ca_scan_span_sigmas: float = Field(3.0, gt=0)
    n2_scan_span_sigmas: float = Field(2.5, gt=0)


class ImplanterSection(_Section):
    doses: dict[str, int] = Field(default_factory=lambda: {"A": 20, "B": 10, "C": 4, "D": 2, "E": 1, "F": 20})
    rows: int = Field(5, ge=1)
    cols: int = Field(5, ge=1)
    pitch_um: float = Field(2.0, gt=0)
    region_spacing_um: float = Field(20.0, gt=0)
    ca_coimplant: bool = True
    dose_mode: Literal["deterministic", "poisson"] = "deterministic"
    range_ref_energy_eV: float = Field(3000.0, gt=0)
    range_ref_nm: float = Field(4.2, gt=0)
    range_exponent: float = Field(0.7, gt=0)
    relative_straggle: float = Field(0.45, gt=0)
    lateral_straggle_ratio: float = Field(0.4, gt=0)
    vacancies_per_keV: float = Field(4.0, gt=0)


class NVSection(_Section):
    base_yield: float = Field(0.006, ge=0, le=1)
    vacancy_threshold: int = Field(350, ge=0)
    native_capture_prob: float = Field(5e-5, ge=0, le=1)
    background_density_per_um2: float = Field(0.01, ge=0)
    charge_minus_prob: float = Field(0.5, ge=0, le=1)
    t2_min_us: float = Field(0.5, gt=0)
    t2_max_us: float = Field(2.0, gt=0)
    yield_region: str = "F"


class CharacterizeSection(_Section):
    psf_sigma_nm: float = Field(250.0, gt=0)
    image_region: str = "A"
    image_pixel_nm: float = Field(100.0, gt=0)
    counts_per_nv: float = Field(1e4, gt=0)
    odmr_linewidth_hz: float = Field(0.6e6, gt=0)
    odmr_contrast: float = Field(0.15, ge=0, le=1)
    odmr_noise: float = Field(0.015, ge=0)
    hahn_noise_rel: float = Field(0.05, ge=0)
    hahn_stretch_n: float = Field(1.0, ge=1, le=3)
    reference_t2_us: list[float] = Field(default_factory=lambda: [0.66, 1.56])
    fit_free_stretch: bool = False


class Scenario(_Section):
    schema_version: int = SCHEMA_VERSION
    name: str = "scenario"
    master_seed: int = 20210101
    stages: list[str] = Field(default_factory=lambda: list(STAGES))
    output_dir: str | None = None
    workers: int = Field(1, ge=1)
    sim: SimConfig = Field(default_factory=SimConfig)
    trap: TrapSection = Field(default_factory=TrapSection)
    beamline: BeamlineSection = Field(default_factory=BeamlineSection)
    implanter: ImplanterSection = Field(default_factory=ImplanterSection)
    nv: NVSection = Field(default_factory=NVSection)
    characterize: CharacterizeSection = Field(default_factory=CharacterizeSection)

    @field_validator("schema_version")
    @classmethod
    def _known_schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v

    @field_validator("stages")
    @classmethod
    def _known_stages(cls, v):
        bad = [s for s in v if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stages {bad}; choose from {list(STAGES)}")
        return v

    def resolved(self) -> dict:
        """Config as written to the manifest.

        Output location and worker count are left out: neither may change
        the results.
        """
        return self.model_dump(mode="json", exclude={"output_dir", "workers"})


def parse_scenario(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def bundled_scenarios() -> list[str]:
    return sorted(p.name.removesuffix(".toml") for p in resources.files("nvimplant.scenarios").iterdir()
                  if p.name.endswith(".toml"))


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario file; a bare bundled name such as ``paper-repro`` also works."""
    p = Path(path)
    if not p.exists() and str(path) in bundled_scenarios():
        text = resources.files("nvimplant.scenarios").joinpath(f"{path}.toml").read_text()
    elif p.exists():
        text = p.read_text()
    else:
        raise ConfigError(f"scenario file {path} not found")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_scenario(data)
