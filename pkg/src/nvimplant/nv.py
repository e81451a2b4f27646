"""NV activation statistics and synthetic characterization signals."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .implanter import ImpactEvent

ZERO_FIELD_SPLITTING_HZ = 2.87e9
HYPERFINE_SPLITTING_HZ = {15: 3.1e6, 14: 2.2e6}
ZPL_NM = {"-": 637.0, "0": 575.0}
NITROGEN = {"15N": 15, "14N": 14}


@dataclass(frozen=True)
class ActivationParams:
    base_yield: float = 0.006
    # minimum vacancies in a spot for any NV to form there
    vacancy_threshold: int = 350
    # chance per vacancy (in an active spot) of pairing with a native 14N
    native_capture_prob: float = 5e-5
    background_density_per_um2: float = 0.01
    background_depth_m: float = 1e-6
    charge_minus_prob: float = 0.5
    t2_range_s: tuple[float, float] = (0.5e-6, 2.0e-6)

    def __post_init__(self):
        for name in ("base_yield", "native_capture_prob", "charge_minus_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.vacancy_threshold < 0 or self.background_density_per_um2 < 0:
            raise ValueError("threshold and density must be non-negative")
        lo, hi = self.t2_range_s
        if not 0 < lo <= hi:
            raise ValueError("t2_range_s must be positive and ordered")


@dataclass(frozen=True)
class NVCenter:
    x_m: float
    y_m: float
    depth_m: float
    isotope: int
    charge: str
    t2_s: float
    origin: str
    region: str = ""

    def __post_init__(self):
        if self.isotope not in (14, 15):
            raise ValueError("isotope must be 14 or 15")
        if self.charge not in ("0", "-"):
            raise ValueError("charge must be '0' or '-'")
        if self.origin not in ("implanted", "native-capture", "background"):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.t2_s <= 0:
            raise ValueError("t2 must be positive")

    @property
    def odmr_active(self) -> bool:
        return self.charge == "-"


def assign_identity(nv: NVCenter, params: ActivationParams, rng: np.random.Generator) -> NVCenter:
    """Draw charge state and T2; fix the isotope from the origin.

    Native-capture and background centres carry 14N.  Implanted centres keep
    the isotope of the implanted atom, which is 15N for a pure beam.
    """
    isotope = nv.isotope if nv.origin == "implanted" else 14
    charge = "-" if rng.random() < params.charge_minus_prob else "0"
    t2 = float(rng.uniform(*params.t2_range_s))
    return replace(nv, isotope=isotope, charge=charge, t2_s=t2)


def anneal(impacts: Sequence[ImpactEvent], params: ActivationParams, rng: np.random.Generator, *,
           background_fields_m: Sequence[tuple[float, float, float, float]] = ()) -> list[NVCenter]:
    """Turn implanted atoms into NV centres.

    Spots whose vacancy pool falls short of ``vacancy_threshold`` produce
    nothing.  In the other spots every nitrogen atom activates with
    ``base_yield`` and each vacancy may capture a native 14N.  Background NVs
    are scattered over ``background_fields_m`` at the native density.
    """
    spots: dict[tuple, list[ImpactEvent]] = defaultdict(list)
    for ev in impacts:
        spots[ev.spot_key].append(ev)
    centers = []
    for key in sorted(spots):
        events = spots[key]
        pool = sum(ev.vacancies for ev in events)
        if pool < params.vacancy_threshold:
            continue
        nitrogen = [ev for ev in events if ev.species in NITROGEN]
        active = rng.random(len(nitrogen)) < params.base_yield
        for ev, on in zip(nitrogen, active):
            if on:
                centers.append(NVCenter(ev.spot_x_m + ev.x_m, ev.spot_y_m + ev.y_m, ev.depth_m,
                                        NITROGEN[ev.species], "-", 1e-6, "implanted", ev.region))
        n_native = int(rng.binomial(pool, params.native_capture_prob))
        for i in rng.integers(0, len(events), n_native):
            ev = events[i]
            centers.append(NVCenter(ev.spot_x_m + ev.x_m, ev.spot_y_m + ev.y_m, ev.depth_m,
                                    14, "-", 1e-6, "native-capture", ev.region))
    for xmin, xmax, ymin, ymax in background_fields_m:
        area_um2 = (xmax - xmin) * (ymax - ymin) / 1e-12
        for _ in range(int(rng.poisson(params.background_density_per_um2 * area_um2))):
            centers.append(NVCenter(float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)),
                                    float(rng.uniform(0, params.background_depth_m)), 14, "-", 1e-6, "background"))
    return [assign_identity(nv, params, rng) for nv in centers]


@dataclass(frozen=True)
class Spectrum:
    wavelength_nm: np.ndarray
    intensity: np.ndarray
    noise_level: float = 0.0


@dataclass(frozen=True)
class OdmrSpectrum:
    frequency_hz: np.ndarray
    signal: np.ndarray
    noise_level: float = 0.0


@dataclass(frozen=True)
class HahnCurve:
    delay_s: np.ndarray
    signal: np.ndarray
    noise_level: float = 0.0


@dataclass(frozen=True)
class ConfocalImage:
    x_m: np.ndarray
    y_m: np.ndarray
    counts: np.ndarray  # indexed [iy, ix]


def confocal_image(nvs: Sequence[NVCenter], x_m: np.ndarray, y_m: np.ndarray, *,
                   psf_sigma_m: float = 250e-9, counts_per_nv: float = 1e4,
                   background_per_pixel: float = 2.0, nv0_brightness: float = 0.7,
                   rng: np.random.Generator | None = None) -> ConfocalImage:
    """Scan image: a Gaussian PSF per centre over a flat background.

    ``counts_per_nv`` is the integrated photon count of one NV- centre.
    Without ``rng`` the expected (noise-free) image is returned.
    """
    x = np.asarray(x_m, dtype=float)
    y = np.asarray(y_m, dtype=float)
    dx = float(x[1] - x[0]) if x.size > 1 else 1.0
    dy = float(y[1] - y[0]) if y.size > 1 else 1.0
    peak = counts_per_nv * dx * dy / (2 * math.pi * psf_sigma_m**2)
    image = np.full((y.size, x.size), float(background_per_pixel))
    for nv in nvs:
        bright = 1.0 if nv.charge == "-" else nv0_brightness
        gx = np.exp(-0.5 * ((x - nv.x_m) / psf_sigma_m) ** 2)
        gy = np.exp(-0.5 * ((y - nv.y_m) / psf_sigma_m) ** 2)
        image += bright * peak * np.outer(gy, gx)
    if rng is not None:
        image = rng.poisson(image).astype(float)
    return ConfocalImage(x, y, image)


def _lorentz(x, center, fwhm):
    return 1.0 / (1.0 + ((x - center) / (0.5 * fwhm)) ** 2)


def synth_spectrum(charge: str, wavelength_nm: np.ndarray | None = None, *, zpl_fwhm_nm: float = 1.0,
                   zpl_fraction: float = 0.2, sideband_offset_nm: float = 55.0,
                   sideband_sigma_nm: float = 30.0) -> Spectrum:
    """Fluorescence spectrum: Lorentzian ZPL plus a red-shifted phonon band.

    ``zpl_fraction`` is the share of the integrated emission in the ZPL.
    Normalized to a maximum of 1.
    """
    if charge not in ZPL_NM:
        raise ValueError("charge must be '0' or '-'")
    wl = np.arange(550.0, 800.0, 0.1) if wavelength_nm is None else np.asarray(wavelength_nm, dtype=float)
    zpl = ZPL_NM[charge]
    # unit-area line shapes
    line = _lorentz(wl, zpl, zpl_fwhm_nm) * 2 / (math.pi * zpl_fwhm_nm)
    band = np.exp(-0.5 * ((wl - zpl - sideband_offset_nm) / sideband_sigma_nm) ** 2)
    band /= sideband_sigma_nm * math.sqrt(2 * math.pi)
    band[wl < zpl] *= np.exp(-((zpl - wl[wl < zpl]) / 5.0))
    spec = zpl_fraction * line + (1 - zpl_fraction) * band
    return Spectrum(wl, spec / spec.max())


def odmr_signal(frequency_hz, isotope: int, center_hz: float = ZERO_FIELD_SPLITTING_HZ,
                splitting_hz: float | None = None, linewidth_hz: float = 0.6e6, contrast: float = 0.15):
    """Noise-free pulsed-ODMR line at zero field.

    15N gives a doublet at ``center +- splitting/2``; 14N a triplet at
    ``center`` and ``center +- splitting``.  ``linewidth_hz`` is the FWHM.
    """
    if isotope not in HYPERFINE_SPLITTING_HZ:
        raise ValueError("isotope must be 14 or 15")
    split = HYPERFINE_SPLITTING_HZ[isotope] if splitting_hz is None else splitting_hz
    f = np.asarray(frequency_hz, dtype=float)
    if isotope == 15:
        offsets = (-0.5 * split, 0.5 * split)
    else:
        offsets = (-split, 0.0, split)
    dips = sum(_lorentz(f, center_hz + o, linewidth_hz) for o in offsets)
    return 1.0 - contrast * dips


def default_odmr_grid(center_hz: float = ZERO_FIELD_SPLITTING_HZ, half_span_hz: float = 8e6,
                      step_hz: float = 25e3) -> np.ndarray:
    n = int(round(2 * half_span_hz / step_hz)) + 1
    return center_hz + np.linspace(-half_span_hz, half_span_hz, n)


def synth_odmr(isotope: int, center_hz: float = ZERO_FIELD_SPLITTING_HZ, splitting_hz: float | None = None,
               linewidth_hz: float = 0.6e6, contrast: float = 0.15, rng: np.random.Generator | None = None, *,
               noise_sigma: float = 0.015, frequency_hz: np.ndarray | None = None) -> OdmrSpectrum:
    """Pulsed-ODMR spectrum with Gaussian readout noise (none without ``rng``).

    The defaults give a contrast-to-noise ratio of 10.
    """
    split = HYPERFINE_SPLITTING_HZ.get(isotope, 0.0) if splitting_hz is None else splitting_hz
    if linewidth_hz >= split:
        warnings.warn(f"linewidth {linewidth_hz:g} Hz >= splitting {split:g} Hz; lines will not resolve",
                      stacklevel=2)
    f = default_odmr_grid(center_hz) if frequency_hz is None else np.asarray(frequency_hz, dtype=float)
    signal = odmr_signal(f, isotope, center_hz, split, linewidth_hz, contrast)
    noise = 0.0
    if rng is not None and noise_sigma > 0:
        signal = signal + rng.normal(0.0, noise_sigma, f.size)
        noise = noise_sigma
    return OdmrSpectrum(f, signal, noise)


def synth_odmr_for(nv: NVCenter, rng: np.random.Generator | None = None, **kwargs) -> OdmrSpectrum:
    """ODMR of a simulated centre; NV0 has no accessible spin and stays flat."""
    if not nv.odmr_active:
        kwargs["contrast"] = 0.0
    return synth_odmr(nv.isotope, rng=rng, **kwargs)


def hahn_signal(delay_s, t2_s: float, stretch_n: float = 1.0, contrast: float = 1.0, baseline: float = 0.0):
    tau = np.asarray(delay_s, dtype=float)
    return baseline + contrast * np.exp(-((tau / t2_s) ** stretch_n))


def synth_hahn(t2_s: float, stretch_n: float = 1.0, delay_s: np.ndarray | None = None, contrast: float = 1.0,
               rng: np.random.Generator | None = None, *, baseline: float = 0.0,
               noise_rel: float = 0.05) -> HahnCurve:
    """Hahn-echo decay with Gaussian noise of ``noise_rel * contrast``.

    Default delays run from 0 to 5 T2 in 201 steps.
    """
    if t2_s <= 0:
        raise ValueError("t2 must be positive")
    if not 1 <= stretch_n <= 3:
        raise ValueError("stretch exponent must lie in [1, 3]")
    tau = np.linspace(0.0, 5 * t2_s, 201) if delay_s is None else np.asarray(delay_s, dtype=float)
    signal = hahn_signal(tau, t2_s, stretch_n, contrast, baseline)
    noise = 0.0
    if rng is not None and noise_rel > 0:
        noise = noise_rel * contrast
        signal = signal + rng.normal(0.0, noise, tau.size)
    return HahnCurve(tau, signal, noise)
