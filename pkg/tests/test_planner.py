import math
from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvimplant.planner import LatticeSpec, lattice_population, neighbor_prob, required_dose


def bfs_largest_cluster(occ):
    seen = np.zeros_like(occ, dtype=bool)
    sizes = []
    rows, cols = occ.shape
    for r0 in range(rows):
        for c0 in range(cols):
            if not occ[r0, c0] or seen[r0, c0]:
                continue
            seen[r0, c0] = True
            q, size = deque([(r0, c0)]), 0
            while q:
                r, c = q.popleft()
                size += 1
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols and occ[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        q.append((rr, cc))
            sizes.append(size)
    return max(sizes, default=0), len(sizes)


def test_neighbor_prob_values():
    assert neighbor_prob(0.5, 4) == 0.9375
    assert neighbor_prob(0.0, 4) == 0.0
    assert neighbor_prob(1.0, 4) == 1.0


@settings(max_examples=60)
@given(p1=st.floats(0, 1), p2=st.floats(0, 1), k=st.integers(1, 12))
def test_neighbor_prob_monotone(p1, p2, k):
    lo, hi = sorted((p1, p2))
    assert neighbor_prob(lo, k) <= neighbor_prob(hi, k)
    assert neighbor_prob(lo, k) <= neighbor_prob(lo, k + 1)
    assert neighbor_prob(lo, 1) == pytest.approx(lo, abs=1e-15)


def test_neighbor_prob_domain():
    with pytest.raises(ValueError):
        neighbor_prob(1.2)
    with pytest.raises(ValueError):
        neighbor_prob(0.5, 0)


def test_full_lattice_single_cluster():
    occ, stats = lattice_population(LatticeSpec(7, 9, 1.0), np.random.default_rng())
    assert occ.all() and stats.largest_cluster == 63 and stats.n_clusters == 1


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 30), cols=st.integers(1, 30), p=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_clusters_match_bfs(rows, cols, p, seed):
    occ, stats = lattice_population(LatticeSpec(rows, cols, p), np.random.default_rng(seed))
    largest, n = bfs_largest_cluster(occ)
    assert stats.largest_cluster == largest and stats.n_clusters == n


def test_interior_fraction_converges():
    errs = []
    for size in (20, 60, 200):
        vals = [lattice_population(LatticeSpec(size, size, 0.5), np.random.default_rng(s))[1].interior_neighbor_fraction
                for s in range(30)]
        errs.append(abs(np.mean(vals) - 0.9375))
    assert errs[-1] < 0.005
    assert errs[-1] <= errs[0] + 1e-3


def test_percolation_bracket():
    g = np.random.default_rng(9)
    above = lattice_population(LatticeSpec(500, 500, 0.65), g)[1].giant_fraction
    below = lattice_population(LatticeSpec(500, 500, 0.5), g)[1].giant_fraction
    assert above > 0.5 and below < 0.1


def test_required_dose_boundary():
    # 1 - 0.5**4 = 0.9375 falls just short of 0.94
    assert required_dose(0.94, 0.5) == 5
    assert required_dose(0.9375, 0.5) == 4


def test_required_dose_closed_form():
    assert required_dose(0.5, 0.006, atoms_per_ion=2) == 58
    assert required_dose(0.5, 0.006, 2) == math.ceil(math.log(0.5) / (2 * math.log(0.994)))


def test_required_dose_certain_activation():
    assert required_dose(0.999, 1.0) == 1


def test_required_dose_errors():
    with pytest.raises(ValueError):
        required_dose(1.0, 0.5)
    with pytest.raises(ValueError):
        required_dose(0.5, 0.0)


@settings(max_examples=80, deadline=None)
@given(t=st.floats(0.01, 0.99), y=st.floats(0.001, 0.99), a=st.integers(1, 2))
def test_required_dose_minimal(t, y, a):
    k = required_dose(t, y, a)
    fail, need = 1 - Fraction(str(y)), 1 - Fraction(str(t))
    assert fail ** (k * a) <= need
    if k > 1:
        assert fail ** ((k - 1) * a) > need


def test_lattice_spec_validation():
    with pytest.raises(ValueError):
        LatticeSpec(0, 3, 0.5)
    with pytest.raises(ValueError):
        LatticeSpec(3, 3, 1.5)
