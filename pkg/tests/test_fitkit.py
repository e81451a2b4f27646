import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erfc

from nvimplant.beamline import KnifeEdgeScan, knife_edge_scan, scan_positions, simulate_tof_histogram, time_of_flight
from nvimplant.core import REGISTRY, derive_stream
from nvimplant.errors import FitFailure, NonIdentifiableError, UnidentifiedSpeciesError
from nvimplant.fitkit import (
    FitResult, decay_jacobian, decay_model, dips_jacobian, dips_model, edge_jacobian, edge_model, estimate_yield,
    fit_decay, fit_dips, fit_edge, fit_tof_peaks, identify_mass, peak_centers, peaks_jacobian, peaks_model,
)
from nvimplant.nv import HahnCurve, synth_hahn, synth_odmr

from oracles import assert_jacobian, decay_grid, dips_grid, edge_grid


# --- Jacobians -----------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(x0=st.floats(-1, 1), s=st.floats(0.3, 3), a=st.floats(0.1, 2), b=st.floats(-0.5, 0.5))
def test_edge_jacobian(x0, s, a, b):
    assert_jacobian(edge_model, edge_jacobian, np.linspace(-5, 5, 41), [x0, s, a, b])


@settings(max_examples=40, deadline=None)
@given(b=st.floats(0, 5), a1=st.floats(1, 50), m1=st.floats(-20, 0), s1=st.floats(2, 10),
       a2=st.floats(1, 50), m2=st.floats(0, 20), s2=st.floats(2, 10))
def test_peaks_jacobian(b, a1, m1, s1, a2, m2, s2):
    assert_jacobian(peaks_model, peaks_jacobian, np.linspace(-40, 40, 81), [b, a1, m1, s1, a2, m2, s2])


@settings(max_examples=40, deadline=None)
@given(n=st.sampled_from([2, 3]), b=st.floats(0.9, 1.1), c=st.floats(0.01, 0.3), f0=st.floats(-0.5, 0.5),
       sp=st.floats(1, 4), w=st.floats(0.2, 1.5))
def test_dips_jacobian(n, b, c, f0, sp, w):
    assert_jacobian(lambda x, p: dips_model(x, p, n), lambda x, p: dips_jacobian(x, p, n),
                    np.linspace(-8, 8, 161), [b, c, f0, sp, w])


@settings(max_examples=40, deadline=None)
@given(b=st.floats(-0.1, 0.1), c=st.floats(0.2, 2), lt=st.floats(-1, 1.5), n=st.floats(1, 3))
def test_decay_jacobian(b, c, lt, n):
    assert_jacobian(decay_model, decay_jacobian, np.linspace(0, 10, 41), [b, c, lt, n])


# --- knife edge ---------------------------------------------------------------------------

def noiseless_scan(sigma, n=21, shots=10**9):
    pos = scan_positions(sigma, n, 3.0, center_m=2e-9)
    counts = np.round(shots * 0.5 * erfc((pos - 2e-9) / (sigma * math.sqrt(2)))).astype(np.int64)
    return KnifeEdgeScan(pos, counts, shots)


@pytest.mark.parametrize("sigma", [11e-9, 121e-9])
def test_edge_exact_recovery(sigma):
    fit = fit_edge(noiseless_scan(sigma))
    assert fit.converged
    assert fit.parameters["sigma"] == pytest.approx(sigma, rel=1e-6)
    assert fit.parameters["x0"] == pytest.approx(2e-9, abs=1e-6 * sigma)


@pytest.mark.parametrize("sigma, n, shots, span, seed", [(11e-9, 19, 20, 3.0, 1), (121e-9, 17, 17, 2.5, 2)])
def test_edge_matches_grid_oracle(sigma, n, shots, span, seed):
    scan = knife_edge_scan(sigma, scan_positions(sigma, n, span), shots, derive_stream(seed, "edge"))
    fit = fit_edge(scan)
    x0s = np.linspace(-1.5 * sigma, 1.5 * sigma, 200)
    sigmas = np.linspace(0.2 * sigma, 2.5 * sigma, 200)
    gx, gs = edge_grid(scan, x0s, sigmas)
    assert abs(fit.parameters["x0"] - gx) <= x0s[1] - x0s[0]
    assert abs(fit.parameters["sigma"] - gs) <= sigmas[1] - sigmas[0]


def test_edge_degenerate():
    pos = np.linspace(-1e-8, 1e-8, 9)
    with pytest.raises(NonIdentifiableError):
        fit_edge(KnifeEdgeScan(pos, np.full(9, 10), 10))
    with pytest.raises(NonIdentifiableError):
        fit_edge(KnifeEdgeScan(pos[:4], np.array([10, 8, 2, 0]), 10))


# --- TOF --------------------------------------------------------------------------------------

def tof(label):
    return time_of_flight(REGISTRY[label].mass_kg, 5900.0, 0.428)


def test_identify_round_trip():
    sp, resid = identify_mass(tof("15N2+"))
    assert sp.label == "15N2+" and abs(resid) < 1e-9
    assert identify_mass(tof("14N2+"))[0].label == "14N2+"


def test_midpoint_time_unidentified():
    with pytest.raises(UnidentifiedSpeciesError):
        identify_mass(0.5 * (tof("15N14N+") + tof("15N2+")))


def test_far_mass_unidentified():
    with pytest.raises(UnidentifiedSpeciesError):
        identify_mass(time_of_flight(35 * 1.66053906660e-27, 5900.0, 0.428))


def test_tof_peaks_three_species():
    h = simulate_tof_histogram([("15N2+", 5000), ("15N14N+", 500), ("14N2+", 1000)], 10e-9,
                               derive_stream(0, "tof"))
    fit = fit_tof_peaks(h, n_peaks=3)
    got = [identify_mass(c)[0].label for c in peak_centers(fit)]
    assert got == ["14N2+", "15N14N+", "15N2+"]


def test_tof_peaks_empty():
    from nvimplant.beamline import TofHistogram
    with pytest.raises(FitFailure):
        fit_tof_peaks(TofHistogram(np.array([0.0, 1e-9, 2e-9]), np.zeros(2, dtype=int), 0, 0))


# --- ODMR --------------------------------------------------------------------------------------

@pytest.mark.parametrize("iso, split", [(15, 3.1e6), (14, 2.2e6)])
def test_dips_noiseless(iso, split):
    fit = fit_dips(synth_odmr(iso))
    assert fit.extra["verdict"] == f"{iso}N"
    assert fit.parameters["splitting"] == pytest.approx(split, rel=1e-6)
    assert fit.parameters["center"] == pytest.approx(2.87e9, abs=1.0)
    assert fit.parameters["linewidth"] == pytest.approx(0.6e6, rel=1e-6)


@pytest.mark.parametrize("iso", [15, 14])
def test_dips_model_selection(iso):
    g = np.random.default_rng(iso)
    ok = sum(fit_dips(synth_odmr(iso, rng=g)).extra["verdict"] == f"{iso}N" for _ in range(200))
    assert ok >= 198


def test_dips_flat_fails():
    with pytest.raises(FitFailure):
        fit_dips(synth_odmr(15, contrast=0.0, rng=np.random.default_rng(0)))


@pytest.mark.parametrize("iso, split", [(15, 3.1), (14, 2.2)])
def test_dips_match_grid_oracle(iso, split):
    spec = synth_odmr(iso, rng=np.random.default_rng(7))
    fit = fit_dips(spec)
    centers = np.linspace(-0.1, 0.1, 41)
    splits = np.linspace(split - 0.2, split + 0.2, 41)
    widths = np.linspace(0.4, 0.8, 41)
    c, s, w = dips_grid(spec, 2 if iso == 15 else 3, centers, splits, widths)
    p = fit.parameters
    assert abs((p["center"] - 2.87e9) / 1e6 - c) <= centers[1] - centers[0]
    assert abs(p["splitting"] / 1e6 - s) <= splits[1] - splits[0]
    assert abs(p["linewidth"] / 1e6 - w) <= widths[1] - widths[0]


# --- Hahn -------------------------------------------------------------------------------------

def test_decay_noiseless():
    fit = fit_decay(synth_hahn(0.66e-6))
    assert fit.parameters["T2"] == pytest.approx(0.66e-6, rel=1e-6)
    free = fit_decay(synth_hahn(1.56e-6, stretch_n=2.0), fix_stretch=False)
    assert free.parameters["stretch_n"] == pytest.approx(2.0, rel=1e-6)
    assert free.parameters["T2"] == pytest.approx(1.56e-6, rel=1e-6)


@pytest.mark.parametrize("t2", [0.66e-6, 1.56e-6])
def test_decay_matches_grid_oracle(t2):
    curve = synth_hahn(t2, rng=np.random.default_rng(3))
    fit = fit_decay(curve)
    grid = np.linspace(0.5 * t2, 1.5 * t2, 2001)
    assert abs(fit.parameters["T2"] - decay_grid(curve, grid)) <= grid[1] - grid[0]


def test_decay_needs_points():
    with pytest.raises(NonIdentifiableError):
        fit_decay(HahnCurve(np.linspace(0, 1e-6, 5), np.linspace(1, 0, 5)))


# --- yield ----------------------------------------------------------------------------------------

def binom_tail_ge(k, n, p):
    return sum(math.exp(math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
                        + i * math.log(p) + (n - i) * math.log1p(-p)) for i in range(k, n + 1))


def test_yield_value_and_exact_interval():
    est = estimate_yield(6, 500, 2)
    assert est.value == 0.006 and est.atoms == 1000
    assert est.lower < 0.006 < est.upper
    assert binom_tail_ge(6, 1000, est.lower) == pytest.approx(0.025, rel=1e-8)
    assert 1 - binom_tail_ge(7, 1000, est.upper) == pytest.approx(0.025, rel=1e-8)


def test_yield_zero_count():
    est = estimate_yield(0, 500, 2)
    assert est.value == 0 and est.lower == 0
    assert (1 - est.upper) ** 1000 == pytest.approx(0.025, rel=1e-8)


def test_yield_errors():
    with pytest.raises(ValueError):
        estimate_yield(1001, 500, 2)
    with pytest.raises(ValueError):
        estimate_yield(1, 0, 2)


# --- result object ----------------------------------------------------------------------------------

def test_fitresult_json_round_trip():
    fit = fit_decay(synth_hahn(1e-6, rng=np.random.default_rng(1)))
    data = json.loads(fit.to_json())
    again = FitResult.from_dict(data)
    assert again.parameters == fit.parameters
    assert all(v >= 0 for v in fit.standard_errors.values())
    assert fit.converged
