"""Extraction, species separation, time of flight and beam focusing.

Transit model used for timing: an ion starting at rest at the trap centre is
accelerated uniformly across ``gap_m`` towards the negative endcap, then
drifts through the endcap bore of length ``bore_m``.  Flipping the endcap
to positive while the ion is inside the bore adds ``q * v_pos`` to its
energy; an ion still outside the bore is pushed back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc

from .core import (
    AMU_KG,
    ELEMENTARY_CHARGE_C,
    IonSpecies,
    RngStream,
    as_generator,
    get_species,
    map_blocks,
)
from .errors import AmbiguousSeparationError

ENDCAP_BORE_M = 10e-3
ACCEL_GAP_M = 5e-3


@dataclass(frozen=True)
class ExtractionTiming:
    rf_off: bool = True
    dc_switch_delay_s: float = 0.0
    endcap_v_neg: float = -2950.0
    endcap_v_pos: float = 2950.0
    # positive flip time after the extraction pulse; None picks the separating window centre
    pos_switch_s: float | None = None
    gap_m: float = ACCEL_GAP_M
    bore_m: float = ENDCAP_BORE_M

    def __post_init__(self):
        if self.dc_switch_delay_s < 0:
            raise ValueError("dc_switch_delay_s must be >= 0")


@dataclass(frozen=True)
class ExtractionEvent:
    species: IonSpecies
    energy_eV: float
    exit_time_s: float
    velocity_shift_ms: float = 0.0
    reflected: bool = False
    detected: bool = True


@dataclass(frozen=True)
class BeamOptics:
    base_spot_sigma_m: dict[str, float]
    chromatic_coefficient_m: float = 2e-6
    energy_spread_rel: float = 1e-3
    drift_rate_m_per_sqrt_s: float = 0.0

    def __post_init__(self):
        values = [*self.base_spot_sigma_m.values(), self.chromatic_coefficient_m,
                  self.energy_spread_rel, self.drift_rate_m_per_sqrt_s]
        if any(v < 0 for v in values):
            raise ValueError("beam optics parameters must be non-negative")


@dataclass(frozen=True)
class KnifeEdgeScan:
    positions_m: np.ndarray
    transmitted_counts: np.ndarray
    shots_per_position: int

    def __post_init__(self):
        if len(self.positions_m) != len(self.transmitted_counts):
            raise ValueError("positions and counts differ in length")
        counts = np.asarray(self.transmitted_counts)
        if np.any(counts < 0) or np.any(counts > self.shots_per_position):
            raise ValueError("counts must lie in [0, shots_per_position]")

    @property
    def total_shots(self) -> int:
        return self.shots_per_position * len(self.positions_m)


@dataclass(frozen=True)
class TofHistogram:
    bin_edges_s: np.ndarray
    counts: np.ndarray
    n_shots: int
    n_detected: int

    @property
    def bin_centers_s(self) -> np.ndarray:
        return 0.5 * (self.bin_edges_s[:-1] + self.bin_edges_s[1:])

    @property
    def bin_width_s(self) -> float:
        return float(self.bin_edges_s[1] - self.bin_edges_s[0])


def extraction_energy(timing: ExtractionTiming, charge_e: int = 1) -> float:
    """Kinetic energy (eV) of an ion that is inside the bore at the flip."""
    return charge_e * (abs(timing.endcap_v_neg) + abs(timing.endcap_v_pos))


def _bore_window(species: IonSpecies, timing: ExtractionTiming) -> tuple[float, float, float]:
    """(entry time, exit time, speed) for the drift through the endcap bore."""
    speed = math.sqrt(2 * species.charge_c * abs(timing.endcap_v_neg) / species.mass_kg)
    t_enter = 2 * timing.gap_m / speed
    return t_enter, t_enter + timing.bore_m / speed, speed


def arrival_time(species: IonSpecies | str, timing: ExtractionTiming = ExtractionTiming()) -> float:
    """Transit time from the trap centre to the endcap hole."""
    return _bore_window(get_species(species), timing)[0]


def _auto_switch(target: IonSpecies, others: Sequence[IonSpecies], timing: ExtractionTiming) -> float:
    t_in, t_out, _ = _bore_window(target, timing)
    lo, hi = t_in, t_out
    for ion in others:
        o_in, o_out, _ = _bore_window(ion, timing)
        if o_in >= t_in:
            hi = min(hi, o_in)      # others must still be outside the bore
        else:
            lo = max(lo, o_out)     # others must already have left it
    if not lo < hi:
        raise AmbiguousSeparationError(
            f"no switch time isolates {target.label}: window [{lo:.3e}, {hi:.3e}] s is empty")
    return 0.5 * (lo + hi)


def separate_species(crystal: Sequence[IonSpecies | str], timing: ExtractionTiming = ExtractionTiming(),
                     rng: np.random.Generator | None = None, *, sem_efficiency: float = 0.96,
                     rf_freq_hz: float = 20e6, rf_amp_ms: float = 0.0, rf_phase0: float = 0.0
                     ) -> list[ExtractionEvent]:
    """Extract a crystal and separate the dark ion from the calcium.

    A lighter dark ion reaches the endcap first: the flip happens while it
    is in the bore and the calcium, still outside, is reflected.  A heavier
    dark ion arrives last: the flip happens after the calcium has left, so
    the calcium keeps only the first-stage energy and is steered off the
    detector.  The dark ion exits with the full doubled energy either way.
    SEM detection losses are applied only when ``rng`` is given.
    """
    ions = [get_species(s) for s in crystal]
    if not ions:
        return []
    dark = [ion for ion in ions if not ion.is_calcium]
    target = dark[0] if dark else ions[0]
    others = [ion for ion in ions if ion.is_calcium]
    if len(dark) > 1:
        raise AmbiguousSeparationError("more than one dark ion in the crystal")
    if timing.endcap_v_pos == 0:
        if dark and others:
            raise AmbiguousSeparationError("without the positive flip the species cannot be separated")
        t_switch = math.inf
    elif timing.pos_switch_s is None:
        t_switch = _auto_switch(target, others if dark else [], timing)
    else:
        t_switch = timing.pos_switch_s

    full = extraction_energy(timing, target.charge_e)
    events = []
    for ion in ions:
        t_in, t_out, _ = _bore_window(ion, timing)
        shift = rf_phase_velocity_shift(ion, timing.dc_switch_delay_s, rf_freq_hz,
                                        0.0 if timing.rf_off else rf_amp_ms, rf_phase0, timing)
        if t_switch < t_in:
            events.append(ExtractionEvent(ion, 0.0, math.nan, 0.0, reflected=True, detected=False))
            continue
        if t_switch <= t_out:
            energy = ion.charge_e * (abs(timing.endcap_v_neg) + abs(timing.endcap_v_pos))
        else:
            energy = ion.charge_e * abs(timing.endcap_v_neg)
        on_target = ion is target or (not dark and energy == full)
        detected = on_target and (rng is None or rng.random() < sem_efficiency)
        events.append(ExtractionEvent(ion, float(energy), t_out, float(shift), False, bool(detected)))

    tgt = next(e for e in events if e.species is target)
    if tgt.reflected or tgt.energy_eV != full:
        raise AmbiguousSeparationError(f"switch at {t_switch:.3e} s does not extract {target.label} at full energy")
    if dark and any(not e.reflected and e.energy_eV >= full for e in events if e.species is not target):
        raise AmbiguousSeparationError("calcium left with full energy; species not separated")
    return events


def rf_phase_velocity_shift(species: IonSpecies | str, delay_s, rf_freq_hz: float, amp_ms: float,
                            phase0: float = 0.0, timing: ExtractionTiming = ExtractionTiming()):
    """Velocity change (m/s) picked up from residual RF at the endcap hole.

    The ion samples the RF phase at the moment it reaches the hole, so two
    species at the same switch delay see phases that differ by
    ``2 pi f (t_a - t_b)``.
    """
    if amp_ms < 0:
        raise ValueError("amp_ms must be >= 0")
    t_arr = arrival_time(species, timing)
    shift = amp_ms * np.sin(2 * np.pi * rf_freq_hz * (np.asarray(delay_s, dtype=float) + t_arr) + phase0)
    return float(shift) if np.ndim(shift) == 0 else shift


def optimal_switch_delay(species: IonSpecies | str, rf_freq_hz: float, phase0: float = 0.0,
                         timing: ExtractionTiming = ExtractionTiming()) -> float:
    """Smallest non-negative delay placing the arrival on an RF zero crossing."""
    t_arr = arrival_time(species, timing)
    phase = 2 * math.pi * rf_freq_hz * t_arr + phase0
    k = math.ceil(phase / math.pi - 1e-12)
    return (k * math.pi - phase0) / (2 * math.pi * rf_freq_hz) - t_arr


def time_of_flight(mass_kg: float, energy_eV: float, length_m: float) -> float:
    if mass_kg <= 0 or energy_eV <= 0 or length_m <= 0:
        raise ValueError("mass, energy and length must be positive")
    return length_m / math.sqrt(2 * energy_eV * ELEMENTARY_CHARGE_C / mass_kg)


def simulate_tof_histogram(species_mix: Sequence[tuple[IonSpecies | str, int]],
                           timing_jitter_s: float = 10e-9,
                           rng: RngStream | np.random.Generator | None = None, *,
                           energy_eV: float = 5900.0, length_m: float = 0.428,
                           sem_efficiency: float = 0.96, bin_width_s: float = 2e-9,
                           workers: int = 1) -> TofHistogram:
    """Arrival-time histogram of single-ion shots at the SEM.

    Bins are aligned to integer multiples of ``bin_width_s``.
    """
    mix = [(get_species(s), int(n)) for s, n in species_mix]
    if not mix or sum(n for _, n in mix) == 0:
        raise ValueError("species mix is empty")
    if any(n < 0 for _, n in mix) or timing_jitter_s < 0:
        raise ValueError("counts and jitter must be non-negative")
    ideal = np.concatenate([np.full(n, time_of_flight(s.mass_kg, energy_eV * s.charge_e, length_m))
                            for s, n in mix])
    if rng is None:
        rng = np.random.default_rng()

    def shots(gen, start, stop):
        t = ideal[start:stop] + (gen.normal(0.0, timing_jitter_s, stop - start) if timing_jitter_s > 0 else 0.0)
        hit = gen.random(stop - start) < sem_efficiency
        return t[hit]

    arrivals = np.concatenate(map_blocks(rng, len(ideal), shots, workers=workers))
    if arrivals.size == 0:
        edges = np.array([0.0, bin_width_s])
        return TofHistogram(edges, np.zeros(1, dtype=np.int64), len(ideal), 0)
    idx = np.floor(arrivals / bin_width_s).astype(np.int64)
    lo = idx.min()
    counts = np.bincount(idx - lo)
    edges = (lo + np.arange(counts.size + 1)) * bin_width_s
    return TofHistogram(edges, counts, len(ideal), int(arrivals.size))


def calibrate_optics(ca_point: tuple[float, float] = (11e-9, 17 * 60.0),
                     n2_point: tuple[float, float] = (121e-9, 117 * 60.0), *,
                     chromatic_coefficient_m: float = 2e-6, energy_spread_rel: float = 1e-3,
                     drift_share: float = 0.5) -> BeamOptics:
    """Fit the spot model through one (sigma, acquisition time) pair per species.

    The pointing drift is shared by both species.  It is fixed by giving it
    ``drift_share`` of the calcium variance left after the chromatic term;
    the remaining freedom goes into the per-species base spot sizes.
    """
    chrom2 = (chromatic_coefficient_m * energy_spread_rel) ** 2
    (s_ca, t_ca), (s_n2, t_n2) = ca_point, n2_point
    budget = s_ca**2 - chrom2
    if budget <= 0 or not 0 <= drift_share <= 1:
        raise ValueError("calcium spot is smaller than the chromatic term")
    drift2 = drift_share * budget / t_ca if t_ca > 0 else 0.0
    base_ca2 = budget - drift2 * t_ca
    base_n22 = s_n2**2 - chrom2 - drift2 * t_n2
    if base_n22 < 0:
        raise ValueError("drift alone exceeds the nitrogen spot size")
    return BeamOptics({"40Ca+": math.sqrt(base_ca2), "15N2+": math.sqrt(base_n22)},
                      chromatic_coefficient_m, energy_spread_rel, math.sqrt(drift2))


DEFAULT_OPTICS = calibrate_optics()


def effective_spot_sigma(optics: BeamOptics, species: IonSpecies | str, acquisition_time_s: float,
                         energy_spread_rel: float | None = None) -> float:
    """Spot sigma including chromatic blur and accumulated pointing drift."""
    if acquisition_time_s < 0:
        raise ValueError("acquisition_time_s must be >= 0")
    label = get_species(species).label
    spread = optics.energy_spread_rel if energy_spread_rel is None else energy_spread_rel
    base = optics.base_spot_sigma_m[label]
    return math.sqrt(base**2 + (optics.chromatic_coefficient_m * spread) ** 2
                     + optics.drift_rate_m_per_sqrt_s**2 * acquisition_time_s)


def knife_edge_transmission(x, sigma_m: float, center_m: float = 0.0):
    """Fraction of a Gaussian beam passing a half-plane edge at ``x``."""
    return 0.5 * erfc((np.asarray(x, dtype=float) - center_m) / (sigma_m * math.sqrt(2)))


def scan_positions(sigma_m: float, n_positions: int, span_sigmas: float = 3.0, center_m: float = 0.0) -> np.ndarray:
    return center_m + np.linspace(-span_sigmas, span_sigmas, n_positions) * sigma_m


def knife_edge_scan(sigma_m: float, edge_positions, shots_per_position: int,
                    rng: RngStream | np.random.Generator, *, center_m: float = 0.0,
                    sem_efficiency: float = 0.96) -> KnifeEdgeScan:
    """Sweep an ideal edge through the beam, firing single ions at each stop."""
    if shots_per_position < 1:
        raise ValueError("shots_per_position must be >= 1")
    positions = np.asarray(edge_positions, dtype=float)
    if sigma_m == 0:
        p = np.where(positions < center_m, 1.0, np.where(positions > center_m, 0.0, 0.5))
    else:
        p = knife_edge_transmission(positions, sigma_m, center_m)
    counts = as_generator(rng).binomial(shots_per_position, p * sem_efficiency)
    return KnifeEdgeScan(positions, counts.astype(np.int64), shots_per_position)
