"""Dose patterns, molecular breakup and analytic range/straggle stopping.

Stopping is a power law through a single reference (energy, range) point
with Gaussian depth and lateral straggle.  The depth distribution is
truncated at the surface with its location shifted so that the truncated
mean still equals the power-law range.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri

from .core import ATOM_MASS_AMU, IonSpecies, RngStream, get_species, map_blocks

UM = 1e-6
NM = 1e-9


@dataclass(frozen=True)
class StoppingModel:
    ref_energy_eV: float = 3000.0
    mean_range_m: float = 4.2e-9
    range_exponent: float = 0.7
    relative_straggle: float = 0.45
    lateral_straggle_ratio: float = 0.4
    vacancies_per_keV: float = 4.0

    def __post_init__(self):
        if min(self.ref_energy_eV, self.mean_range_m, self.range_exponent, self.relative_straggle,
               self.lateral_straggle_ratio, self.vacancies_per_keV) <= 0:
            raise ValueError("stopping parameters must be positive")

    def mean_range(self, energy_eV):
        energy = np.clip(np.asarray(energy_eV, dtype=float), 0.0, None)
        r = self.mean_range_m * (energy / self.ref_energy_eV) ** self.range_exponent
        return float(r) if np.ndim(r) == 0 else r

    @cached_property
    def _location_factor(self) -> float:
        # mean of N(c, rel) truncated at 0 equals 1
        rel = self.relative_straggle

        def excess(c):
            a = c / rel
            return c + rel * math.exp(-0.5 * a * a) / math.sqrt(2 * math.pi) / ndtr(a) - 1.0

        return optimize.brentq(excess, -10.0 * rel, 1.0, xtol=1e-15)


def calibrate_range(datum: tuple[float, float] = (3000.0, 4.2e-9), exponent: float = 0.7,
                    **params) -> StoppingModel:
    """Stopping model whose mean range passes exactly through ``datum``."""
    energy, depth = datum
    if energy <= 0 or depth <= 0:
        raise ValueError("calibration datum must be positive")
    if exponent <= 0:
        raise ValueError("range exponent must be positive")
    return StoppingModel(ref_energy_eV=energy, mean_range_m=depth, range_exponent=exponent, **params)


@dataclass(frozen=True)
class ImpactSample:
    depth_m: float
    dx_m: float
    dy_m: float
    vacancies: int


def sample_impacts(energy_eV, stopping: StoppingModel, rng: np.random.Generator):
    """Vectorised (depth, dx, dy, vacancies) for atoms with the given energies."""
    energy = np.asarray(energy_eV, dtype=float)
    if np.any(energy <= 0):
        raise ValueError("impact energy must be positive")
    n = energy.size
    r = np.atleast_1d(stopping.mean_range(energy))
    loc = stopping._location_factor * r
    scale = stopping.relative_straggle * r
    lo = ndtr(-loc / scale)
    u = lo + (1.0 - lo) * rng.random(n)
    depth = np.clip(loc + scale * ndtri(u), 0.0, None)
    lateral = stopping.lateral_straggle_ratio * r
    dx = rng.normal(0.0, 1.0, n) * lateral
    dy = rng.normal(0.0, 1.0, n) * lateral
    vac = rng.poisson(stopping.vacancies_per_keV * energy / 1000.0)
    return depth, dx, dy, vac


def impact(atom_species: str, energy_eV: float, stopping: StoppingModel, rng: np.random.Generator) -> ImpactSample:
    """Stop a single atom of ``atom_species`` in the substrate."""
    if energy_eV <= 0:
        raise ValueError("impact energy must be positive")
    if atom_species not in ATOM_MASS_AMU:
        raise ValueError(f"unknown atom {atom_species!r}")
    depth, dx, dy, vac = sample_impacts([energy_eV], stopping, rng)
    return ImpactSample(float(depth[0]), float(dx[0]), float(dy[0]), int(vac[0]))


def split_energy(species: IonSpecies, ion_energy_eV: float) -> list[tuple[str, float]]:
    """Per-atom (label, energy) after a molecular ion breaks up at the surface."""
    return [(atom, ion_energy_eV * ATOM_MASS_AMU[atom] / species.mass_amu) for atom in species.atoms]


@dataclass(frozen=True)
class Region:
    label: str
    ions_per_spot: int
    rows: int = 5
    cols: int = 5
    pitch_m: float = 2 * UM
    species: tuple[str, ...] = ("15N2+",)
    origin_m: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.ions_per_spot < 1 or self.rows < 1 or self.cols < 1:
            raise ValueError("dose and grid dimensions must be >= 1")
        if self.pitch_m <= 0:
            raise ValueError("pitch must be positive")

    @property
    def n_spots(self) -> int:
        return self.rows * self.cols

    @property
    def area_m2(self) -> float:
        return self.rows * self.cols * self.pitch_m**2

    @property
    def field_m(self) -> tuple[float, float, float, float]:
        """Bounding box (xmin, xmax, ymin, ymax) with half a pitch of margin."""
        x0, y0 = self.origin_m
        h = 0.5 * self.pitch_m
        return (x0 - h, x0 + (self.cols - 1) * self.pitch_m + h, y0 - h, y0 + (self.rows - 1) * self.pitch_m + h)

    def spot_center(self, row: int, col: int) -> tuple[float, float]:
        return self.origin_m[0] + col * self.pitch_m, self.origin_m[1] + row * self.pitch_m


@dataclass(frozen=True)
class DosePattern:
    regions: tuple[Region, ...]

    def region(self, label: str) -> Region:
        for r in self.regions:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def total_dose_ions(self) -> int:
        return sum(r.ions_per_spot * r.n_spots for r in self.regions)


DEFAULT_DOSES = {"A": 20, "B": 10, "C": 4, "D": 2, "E": 1, "F": 20}


def default_pattern(ca_coimplant: bool = True, region_spacing_m: float = 20 * UM) -> DosePattern:
    """Six 5x5 regions at 2 um pitch; region F optionally co-implants Ca+."""
    regions = []
    for i, (label, kappa) in enumerate(DEFAULT_DOSES.items()):
        species = ("15N2+", "40Ca+") if (label == "F" and ca_coimplant) else ("15N2+",)
        regions.append(Region(label, kappa, species=species, origin_m=(i * region_spacing_m, 0.0)))
    return DosePattern(tuple(regions))


@dataclass(frozen=True)
class ImpactEvent:
    shot_index: int
    region: str
    spot_row: int
    spot_col: int
    spot_x_m: float
    spot_y_m: float
    x_m: float
    y_m: float
    depth_m: float
    species: str
    vacancies: int
    ion_label: str

    @property
    def spot_label(self) -> str:
        return f"{self.region}{self.spot_row}{self.spot_col}"

    @property
    def spot_key(self) -> tuple[str, int, int]:
        return self.region, self.spot_row, self.spot_col


def run_pattern(pattern: DosePattern, beam_sigma_m: Mapping[str, float], stopping: StoppingModel,
                stream: RngStream | np.random.Generator, *, energy_eV: float = 5900.0,
                dose_mode: str = "deterministic", workers: int = 1) -> list[ImpactEvent]:
    """Implant every spot of ``pattern``.

    In ``deterministic`` mode each spot receives exactly ``ions_per_spot``
    dose ions (plus one co-implanted ion per dose ion for every extra
    species listed on the region).  ``poisson`` mode draws the per-spot
    dose from a Poisson law with the same mean, as a stochastic-source
    baseline.  Shot indices are assigned in pattern order after all spots
    are simulated, so the log does not depend on ``workers``.
    """
    if dose_mode not in ("deterministic", "poisson"):
        raise ValueError(f"unknown dose mode {dose_mode!r}")
    spots = [(region, row, col) for region in pattern.regions
             for row in range(region.rows) for col in range(region.cols)]
    sequential = isinstance(stream, np.random.Generator)

    def do_spots(gen, start, stop):
        out = []
        for region, row, col in spots[start:stop]:
            g = gen if sequential else stream.child(f"{region.label}/{row}/{col}").generator()
            out.append(_implant_spot(region, row, col, beam_sigma_m, stopping, g, energy_eV, dose_mode))
        return out

    per_spot = [s for block in map_blocks(stream, len(spots), do_spots, block_size=8, workers=workers)
                for s in block]
    events = []
    shot = 0
    for spot_events in per_spot:
        current = None
        for ev in spot_events:
            if ev["ion"] != current:
                current = ev["ion"]
                shot += 1
            events.append(ImpactEvent(shot_index=shot - 1, **{k: v for k, v in ev.items() if k != "ion"}))
    return events


def _implant_spot(region: Region, row: int, col: int, beam_sigma_m: Mapping[str, float],
                  stopping: StoppingModel, gen: np.random.Generator, energy_eV: float, dose_mode: str):
    kappa = region.ions_per_spot if dose_mode == "deterministic" else int(gen.poisson(region.ions_per_spot))
    sx, sy = region.spot_center(row, col)
    ions = [get_species(label) for _ in range(kappa) for label in region.species]
    atoms, ion_ids, offsets = [], [], []
    for i, species in enumerate(ions):
        sigma = beam_sigma_m.get(species.label, 0.0)
        bx, by = (gen.normal(0.0, sigma, 2) if sigma > 0 else (0.0, 0.0))
        for atom, e in split_energy(species, energy_eV * species.charge_e):
            atoms.append((atom, e, species.label))
            ion_ids.append(i)
            offsets.append((bx, by))
    if not atoms:
        return []
    depth, dx, dy, vac = sample_impacts([a[1] for a in atoms], stopping, gen)
    return [dict(ion=ion_ids[k], region=region.label, spot_row=row, spot_col=col, spot_x_m=sx, spot_y_m=sy,
                 x_m=float(offsets[k][0] + dx[k]), y_m=float(offsets[k][1] + dy[k]), depth_m=float(depth[k]),
                 species=atoms[k][0], vacancies=int(vac[k]), ion_label=atoms[k][2])
            for k in range(len(atoms))]


def delivered_ions(events: Sequence[ImpactEvent], ion_label: str = "15N2+") -> Counter:
    """Number of ``ion_label`` ions that arrived at each (region, row, col)."""
    shots = {(ev.spot_key, ev.shot_index) for ev in events if ev.ion_label == ion_label}
    return Counter(key for key, _ in shots)
