"""Yield-to-architecture arithmetic for NV lattices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage

FOUR_NEIGHBORS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class LatticeSpec:
    rows: int
    cols: int
    p: float
    pitch_m: float = 20e-9

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("lattice needs at least one row and column")
        if not 0 <= self.p <= 1:
            raise ValueError("occupation probability must lie in [0, 1]")


@dataclass(frozen=True)
class LatticeStats:
    occupied_fraction: float
    interior_neighbor_fraction: float
    largest_cluster: int
    giant_fraction: float
    n_clusters: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def neighbor_prob(p: float, k: int = 4) -> float:
    """Chance that at least one of ``k`` neighbouring sites holds an NV.

    Conditional on the central site being occupied.
    """
    if not 0 <= p <= 1 or k < 1:
        raise ValueError("need 0 <= p <= 1 and k >= 1")
    return 1.0 - (1.0 - p) ** k


def neighbor_count(occ: np.ndarray) -> np.ndarray:
    padded = np.pad(occ.astype(np.int8), 1)
    return padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]


def lattice_population(spec: LatticeSpec, rng: np.random.Generator) -> tuple[np.ndarray, LatticeStats]:
    """Bernoulli site occupation with 4-connected cluster statistics.

    The neighbour statistic uses interior sites only, so every counted site
    has all four neighbours.  ``giant_fraction`` is the share of occupied
    sites belonging to the largest cluster.
    """
    occ = rng.random((spec.rows, spec.cols)) < spec.p
    labels, n_clusters = ndimage.label(occ, structure=FOUR_NEIGHBORS)
    sizes = np.bincount(labels.ravel())[1:]
    largest = int(sizes.max()) if sizes.size else 0
    n_occ = int(occ.sum())
    interior = occ[1:-1, 1:-1]
    has_nb = neighbor_count(occ)[1:-1, 1:-1] > 0
    n_int = int(interior.sum())
    stats = LatticeStats(
        occupied_fraction=n_occ / occ.size,
        interior_neighbor_fraction=float((interior & has_nb).sum() / n_int) if n_int else math.nan,
        largest_cluster=largest,
        giant_fraction=largest / n_occ if n_occ else 0.0,
        n_clusters=int(n_clusters),
    )
    return occ, stats


def required_dose(target_success_prob: float, yield_: float, atoms_per_ion: int = 1) -> int:
    """Smallest ions-per-site dose with P(at least one NV) >= target.

    The threshold test is done in exact rational arithmetic on the decimal
    values of the inputs, so boundary cases are decided exactly.
    """
    if not 0 < target_success_prob < 1:
        raise ValueError("target probability must lie strictly between 0 and 1 (1 is unreachable)")
    if not 0 < yield_ <= 1:
        raise ValueError("yield must lie in (0, 1]")
    if yield_ == 1:
        return 1
    guess = math.log1p(-target_success_prob) / (atoms_per_ion * math.log1p(-yield_))
    kappa = max(1, math.ceil(guess) - 1)
    fail = Fraction(1) - Fraction(str(yield_))
    need = Fraction(1) - Fraction(str(target_success_prob))

    def ok(k: int) -> bool:
        if k * atoms_per_ion > 5000:
            return (k * atoms_per_ion) * math.log1p(-yield_) <= math.log1p(-target_success_prob)
        return fail ** (k * atoms_per_ion) <= need

    while kappa > 1 and ok(kappa - 1):
        kappa -= 1
    while not ok(kappa):
        kappa += 1
    return kappa
