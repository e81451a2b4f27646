"""Count-controlled loading of a linear Paul trap.

The automated sequence is modelled as a small state machine: image the
crystal, remove or add ions until the bright-ion count matches the target,
and re-count until the target is confirmed.  Dark (non-fluorescing) ions
are detected from the displacement of the laser-cooled calcium ion, and a
two-ion crystal is re-ordered by melting until the lighter ion faces the
extraction endcap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from .core import CA40, ELEMENTARY_CHARGE_C, EPSILON_0, AMU_KG, IonSpecies, SimConfig, get_species
from .errors import (
    ConvergenceError,
    CountingUnavailableError,
    DetectionUnavailableError,
    NonTerminationError,
    UnknownSpeciesError,
)

# heavier/lighter mass ratio above which sympathetic cooling is not trusted
MAX_COOLING_MASS_RATIO = 5.0


@dataclass(frozen=True)
class TrapState:
    """Ions in axial order, extraction end first."""

    ions: tuple[IonSpecies, ...] = ()
    axial_freq_hz: float = 100e3

    @property
    def n_bright(self) -> int:
        return sum(ion.is_calcium for ion in self.ions)

    @property
    def n_dark(self) -> int:
        return len(self.ions) - self.n_bright

    @property
    def cooled(self) -> bool:
        if self.n_dark == 0:
            return True
        if self.n_bright == 0:
            return False
        return all(cooling_admissible(ion) for ion in self.ions if not ion.is_calcium)

    def with_ions(self, ions: Sequence[IonSpecies]) -> "TrapState":
        return replace(self, ions=tuple(ions))


def cooling_admissible(dark: IonSpecies, coolant: IonSpecies = CA40) -> bool:
    hi, lo = max(dark.mass_amu, coolant.mass_amu), min(dark.mass_amu, coolant.mass_amu)
    return hi / lo <= MAX_COOLING_MASS_RATIO


@dataclass(frozen=True)
class LoadAttempt:
    species: IonSpecies
    exposure_s: float
    loaded_count: int


@dataclass(frozen=True)
class CountObservation:
    true_count: int
    observed_count: int
    miscount_prob: float


@dataclass(frozen=True)
class LogRecord:
    step: int
    action: str
    true_count: int
    observed_count: int | None


@dataclass
class LoadingResult:
    state: TrapState
    log: list[LogRecord] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        """Number of corrective actions (removals and loads)."""
        return sum(rec.action in ("remove", "load") for rec in self.log)


def attempt_load(species: IonSpecies | str, exposure_s: float, rng: np.random.Generator,
                 rates_per_min: Mapping[str, float] | None = None) -> LoadAttempt:
    """Expose the trap to a source for ``exposure_s`` seconds.

    Loading is Poisson in time with the species' capture rate.
    """
    species = get_species(species)
    if exposure_s < 0:
        raise ValueError("exposure_s must be non-negative")
    rates = SimConfig().trap_capture_rates_per_min if rates_per_min is None else rates_per_min
    if species.label not in rates:
        raise UnknownSpeciesError(f"no loading rate for species {species.label!r}")
    mean = exposure_s * rates[species.label] / 60.0
    return LoadAttempt(species, exposure_s, int(rng.poisson(mean)))


def count_ions(state: TrapState, rng: np.random.Generator, miscount_prob: float = 0.01) -> CountObservation:
    """Count fluorescing ions on the camera; dark ions are invisible.

    With probability ``miscount_prob`` the count is off by one.
    """
    if not state.cooled:
        raise CountingUnavailableError("crystal is not cooled; no image available")
    true = state.n_bright
    observed = true
    if miscount_prob > 0 and rng.random() < miscount_prob:
        step = 1 if (true == 0 or rng.random() < 0.5) else -1
        observed = true + step
    return CountObservation(true, observed, miscount_prob)


def enforce_target_count(state: TrapState, target: int, rng: np.random.Generator, *,
                         species: IonSpecies = CA40,
                         miscount_prob: float = 0.01,
                         removal_success: float = 0.9,
                         load_exposure_s: float = 3.0,
                         confirmations: int = 2,
                         max_iterations: int = 1000,
                         rates_per_min: Mapping[str, float] | None = None) -> LoadingResult:
    """Drive the bright-ion count to ``target``.

    Each cycle counts the crystal; an excess triggers the removal sequence
    (one ion, succeeding with ``removal_success``), a deficit triggers a load.
    The loop ends once ``confirmations`` consecutive counts read ``target``.
    """
    if target < 0:
        raise ValueError("target must be >= 0")
    result = LoadingResult(state)
    step = 0
    agreed = 0
    actions = 0
    while True:
        obs = count_ions(result.state, rng, miscount_prob)
        result.log.append(LogRecord(step, "count", obs.true_count, obs.observed_count))
        step += 1
        if obs.observed_count == target:
            agreed += 1
            if agreed >= confirmations:
                result.log.append(LogRecord(step, "done", obs.true_count, obs.observed_count))
                return result
            continue
        agreed = 0
        if actions >= max_iterations:
            raise NonTerminationError(f"target count {target} not reached after {max_iterations} iterations")
        actions += 1
        ions = list(result.state.ions)
        if obs.observed_count > target:
            if rng.random() < removal_success:
                idx = max((i for i, ion in enumerate(ions) if ion == species), default=None)
                if idx is not None:
                    del ions[idx]
            action = "remove"
        else:
            attempt = attempt_load(species, load_exposure_s, rng, rates_per_min)
            ions.extend([species] * attempt.loaded_count)
            action = "load"
        result.state = result.state.with_ions(ions)
        result.log.append(LogRecord(step, action, result.state.n_bright, None))
        step += 1


def _coulomb_length(charge_e: int, axial_freq_hz: float, ref_mass_amu: float) -> float:
    q = charge_e * ELEMENTARY_CHARGE_C
    k = ref_mass_amu * AMU_KG * (2 * math.pi * axial_freq_hz) ** 2
    return (q * q / (4 * math.pi * EPSILON_0 * k)) ** (1.0 / 3.0)


def _forces(u: np.ndarray) -> np.ndarray:
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    return -u + np.sum(np.sign(diff) / diff**2, axis=1)


def _force_jacobian(u: np.ndarray) -> np.ndarray:
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    off = 2.0 / np.abs(diff) ** 3
    jac = off.copy()
    np.fill_diagonal(jac, -1.0 - off.sum(axis=1))
    return jac


_INITIAL = {1: [0.0], 2: [-0.5 * 2 ** (1 / 3), 0.5 * 2 ** (1 / 3)], 3: [-1.0, 0.0, 1.0]}


def equilibrium_positions(masses: Sequence[float], charge_e: int = 1, axial_freq_hz: float = 100e3,
                          ref_mass_amu: float = 40.0) -> np.ndarray:
    """Axial equilibrium positions (m) of a linear crystal of 1-3 ions.

    The axial DC potential is mass independent, so every ion feels the same
    spring constant ``m_ref * (2 pi f)**2`` regardless of its own mass.
    """
    n = len(masses)
    if not 1 <= n <= 3:
        raise ValueError("equilibrium_positions supports 1 to 3 ions")
    if any(m <= 0 for m in masses):
        raise ValueError("masses must be positive")
    scale = _coulomb_length(charge_e, axial_freq_hz, ref_mass_amu)
    if n == 1:
        return np.zeros(1)
    sol = optimize.root(_forces, np.asarray(_INITIAL[n]), jac=_force_jacobian, method="hybr",
                        options={"xtol": 1e-14})
    if not sol.success or np.max(np.abs(_forces(sol.x))) > 1e-12:
        raise ConvergenceError(f"equilibrium solve failed: {sol.message}")
    return np.sort(sol.x) * scale


def detect_dark_ion(state: TrapState) -> bool:
    """Whether a non-fluorescing ion shares the trap with the calcium ion(s).

    Bright-ion positions are compared with the crystal the bright ions would
    form on their own; a shift of at least half the nearest-neighbour
    spacing reveals the dark ion.
    """
    if state.n_bright == 0:
        raise DetectionUnavailableError("no calcium ion to image")
    if not state.cooled:
        raise DetectionUnavailableError("crystal is not cooled")
    if state.n_dark == 0:
        return False
    masses = [ion.mass_amu for ion in state.ions]
    full = equilibrium_positions(masses, axial_freq_hz=state.axial_freq_hz)
    bright_idx = [i for i, ion in enumerate(state.ions) if ion.is_calcium]
    reference = equilibrium_positions([40.0] * len(bright_idx), axial_freq_hz=state.axial_freq_hz)
    shift = np.max(np.abs(full[bright_idx] - reference))
    spacing = np.min(np.diff(full))
    return bool(shift >= 0.5 * spacing * (1 - 1e-9))


def order_crystal(state: TrapState, rng: np.random.Generator, max_cycles: int = 1000) -> tuple[TrapState, int]:
    """Melt and recrystallize a two-ion crystal until the lighter ion leads.

    The order is checked before the first melt, so an already ordered
    crystal costs zero cycles; otherwise the cycle count is geometric with
    mean 2.
    """
    if len(state.ions) != 2:
        raise ValueError("order_crystal expects exactly two ions")
    if not state.cooled:
        raise CountingUnavailableError("crystal is not cooled")
    cycles = 0
    ions = state.ions
    while ions[0].mass_amu > ions[1].mass_amu:
        if cycles >= max_cycles:
            raise NonTerminationError(f"crystal not ordered after {max_cycles} melt cycles")
        cycles += 1
        ions = tuple(ions[i] for i in rng.permutation(2))
    return state.with_ions(ions), cycles
