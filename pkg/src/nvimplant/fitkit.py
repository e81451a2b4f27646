"""Damped least-squares fits for every measured curve in the pipeline.

All models carry analytic Jacobians and are fitted in rescaled coordinates
(nm, ns, MHz, us) so the normal matrix stays well conditioned.  Standard
errors come from the residual-scaled inverse normal matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks
from scipy.special import erfc

from .beamline import KnifeEdgeScan, TofHistogram
from .core import AMU_KG, ELEMENTARY_CHARGE_C, REGISTRY, IonSpecies
from .errors import ConvergenceError, FitFailure, NonIdentifiableError, UnidentifiedSpeciesError
from .nv import HahnCurve, OdmrSpectrum

GTOL = 1e-10
MAX_ITER = 200
SQRT2 = math.sqrt(2.0)
SQRTPI = math.sqrt(math.pi)


@dataclass
class FitResult:
    parameters: dict[str, float]
    standard_errors: dict[str, float]
    residual_norm: float
    converged: bool
    iterations: int
    gradient_norm: float = 0.0
    n_points: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "FitResult":
        return cls(**data)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# --- models -----------------------------------------------------------------

def edge_model(x, p):
    """Transmitted fraction past an edge: amp * erfc((x-x0)/(sigma*sqrt2))/2 + offset."""
    x0, sigma, amp, offset = p
    return amp * 0.5 * erfc((x - x0) / (sigma * SQRT2)) + offset


def edge_jacobian(x, p):
    x0, sigma, amp, _ = p
    z = (x - x0) / (sigma * SQRT2)
    g = np.exp(-z * z) / SQRTPI
    return np.column_stack([amp * g / (sigma * SQRT2), amp * g * z / sigma,
                            0.5 * erfc(z), np.ones_like(x)])


def peaks_model(x, p):
    """Constant baseline plus Gaussians given as (amplitude, center, width) triples."""
    y = np.full_like(x, p[0], dtype=float)
    for a, mu, s in np.reshape(p[1:], (-1, 3)):
        y += a * np.exp(-0.5 * ((x - mu) / s) ** 2)
    return y


def peaks_jacobian(x, p):
    cols = [np.ones_like(x, dtype=float)]
    for a, mu, s in np.reshape(p[1:], (-1, 3)):
        u = (x - mu) / s
        g = np.exp(-0.5 * u * u)
        cols += [g, a * g * u / s, a * g * u * u / s]
    return np.column_stack(cols)


DIP_OFFSETS = {2: (-0.5, 0.5), 3: (-1.0, 0.0, 1.0)}


def dips_model(x, p, n_dips):
    """baseline - contrast * sum of unit-depth Lorentzians (shared FWHM)."""
    b, c, f0, split, w = p
    total = 0.0
    for o in DIP_OFFSETS[n_dips]:
        u = 2 * (x - f0 - o * split) / w
        total = total + 1.0 / (1.0 + u * u)
    return b - c * total


def dips_jacobian(x, p, n_dips):
    b, c, f0, split, w = p
    s_l = np.zeros_like(x, dtype=float)
    d_f0 = np.zeros_like(s_l)
    d_split = np.zeros_like(s_l)
    d_w = np.zeros_like(s_l)
    for o in DIP_OFFSETS[n_dips]:
        u = 2 * (x - f0 - o * split) / w
        den = (1.0 + u * u)
        s_l += 1.0 / den
        dc = 4 * u / (w * den * den)
        d_f0 += dc
        d_split += o * dc
        d_w += 2 * u * u / (w * den * den)
    return np.column_stack([np.ones_like(s_l), -s_l, -c * d_f0, -c * d_split, -c * d_w])


def decay_model(t, p):
    """baseline + contrast * exp(-(t/T2)**n) with T2 passed as log(T2)."""
    b, c, log_t2, n = p
    q = _stretched(t, log_t2, n)
    return b + c * np.exp(-q)


def _stretched(t, log_t2, n):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(n * (np.log(t[pos]) - log_t2))
    return out


def decay_jacobian(t, p):
    b, c, log_t2, n = p
    t = np.asarray(t, dtype=float)
    q = _stretched(t, log_t2, n)
    e = np.exp(-q)
    log_ratio = np.zeros_like(t)
    pos = t > 0
    log_ratio[pos] = np.log(t[pos]) - log_t2
    return np.column_stack([np.ones_like(t), e, c * e * n * q, -c * e * q * log_ratio])


# --- optimizer ----------------------------------------------------------------

def least_squares_fit(model: Callable, jacobian: Callable, x, y, p0, names: Sequence[str], *,
                      fixed: Mapping[int, float] | None = None, gtol: float = GTOL,
                      max_iter: int = MAX_ITER, sigma=None) -> FitResult:
    """Levenberg-Marquardt fit of ``model(x, p)`` to ``y``.

    ``fixed`` pins parameters by index; they are reported with zero error.
    ``sigma`` gives optional per-point uncertainties used as weights.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    fixed = dict(fixed or {})
    free = [i for i in range(len(p0)) if i not in fixed]
    wt = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)

    def full(q):
        p = p0.copy()
        p[free] = q
        for i, v in fixed.items():
            p[i] = v
        return p

    def resid(q):
        return (model(x, full(q)) - y) * wt

    def jac(q):
        return jacobian(x, full(q))[:, free] * wt[:, None]

    if len(y) <= len(free):
        raise NonIdentifiableError("fewer data points than free parameters")
    res = optimize.least_squares(resid, p0[free], jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                                 gtol=gtol, max_nfev=max_iter * (len(free) + 1))
    p = full(res.x)
    r = res.fun
    J = jac(res.x)
    dof = len(y) - len(free)
    s2 = float(r @ r) / dof
    try:
        cov = s2 * np.linalg.inv(J.T @ J)
        se_free = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se_free = np.full(len(free), np.nan)
    se = np.zeros(len(p))
    se[free] = se_free
    grad = float(np.linalg.norm(J.T @ r))
    scale = float(np.linalg.norm(J) * np.linalg.norm(r)) + 1e-300
    converged = bool(res.status > 0 and np.all(np.isfinite(p)) and (grad <= gtol or grad / scale <= 1e-6))
    return FitResult(dict(zip(names, map(float, p))), dict(zip(names, map(float, se))),
                     float(np.linalg.norm(r)), converged, int(res.njev or res.nfev), grad, len(y))


def _rescale(fit: FitResult, factors: Mapping[str, tuple[float, float]]) -> FitResult:
    """Map fitted parameters ``v -> offset + scale * v`` (errors scale only)."""
    for name, (offset, scale) in factors.items():
        fit.parameters[name] = offset + scale * fit.parameters[name]
        fit.standard_errors[name] = abs(scale) * fit.standard_errors[name]
    return fit


# --- knife edge -------------------------------------------------------------------

def _crossing(x, y, level):
    """First x (in increasing order) where the decreasing curve y falls below ``level``."""
    below = np.nonzero(y < level)[0]
    if below.size == 0 or below[0] == 0:
        return None
    i = below[0]
    x1, x2, y1, y2 = x[i - 1], x[i], y[i - 1], y[i]
    return x1 + (level - y1) * (x2 - x1) / (y2 - y1) if y2 != y1 else x1


def fit_edge(scan: KnifeEdgeScan) -> FitResult:
    """Fit the erf edge profile to a knife-edge scan.

    Seeds: x0 at the 50 % crossing, sigma from half the 16-84 % span.
    """
    order = np.argsort(scan.positions_m)
    x = np.asarray(scan.positions_m, dtype=float)[order]
    y = np.asarray(scan.transmitted_counts, dtype=float)[order] / scan.shots_per_position
    if x.size < 5:
        raise NonIdentifiableError("knife-edge fit needs at least 5 scan points")
    if np.ptp(y) == 0:
        raise NonIdentifiableError("scan is fully blocked or fully open; edge not identifiable")
    ys = gaussian_filter1d(y, 1.0, mode="nearest") if x.size >= 9 else y
    hi, lo = ys.max(), ys.min()
    yn = (ys - lo) / (hi - lo)
    span = x[-1] - x[0]
    x50 = _crossing(x, yn, 0.5)
    x84, x16 = _crossing(x, yn, 0.84), _crossing(x, yn, 0.16)
    x0 = x50 if x50 is not None else x[np.argmin(np.abs(yn - 0.5))]
    sig = 0.5 * (x16 - x84) if (x16 is not None and x84 is not None and x16 > x84) else span / 6
    scale = sig
    xs = (x - x0) / scale
    best = None
    for s0 in (1.0, 0.5, 2.0):
        try:
            fit = least_squares_fit(edge_model, edge_jacobian, xs, y, [0.0, s0, hi - lo, lo],
                                    ["x0", "sigma", "amplitude", "offset"])
        except (ValueError, np.linalg.LinAlgError):
            continue
        if best is None or fit.residual_norm < best.residual_norm - 1e-15:
            best = fit
    if best is None:
        raise ConvergenceError("knife-edge fit failed")
    best.parameters["sigma"] = abs(best.parameters["sigma"])
    return _rescale(best, {"x0": (x0, scale), "sigma": (0.0, scale)})


# --- time of flight -----------------------------------------------------------------

def _poisson_deviance(counts: np.ndarray, mu: np.ndarray) -> float:
    mu = np.maximum(mu, 1e-3)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(counts > 0, counts * np.log(counts / mu), 0.0)
    return float(2.0 * np.sum(term - (counts - mu)))


def fit_tof_peaks(hist: TofHistogram, n_peaks: int | None = None, *, min_prominence: float = 1.0,
                  smoothing_s: float = 8e-9) -> FitResult:
    """Fit Gaussian peaks to a TOF histogram.

    Peaks are seeded from local maxima of the histogram smoothed over
    ``smoothing_s``.  If ``n_peaks`` asks for more peaks than were found,
    further peaks are seeded one at a time at the largest smoothed residual
    of the previous fit.  Parameters are named ``center_k``, ``width_k``,
    ``amplitude_k`` (k in time order) plus ``baseline``.
    """
    counts = np.asarray(hist.counts, dtype=float)
    t = hist.bin_centers_s
    w = hist.bin_width_s
    if counts.sum() == 0:
        raise FitFailure("empty histogram")
    kernel = max(smoothing_s / w, 0.5)
    smooth = gaussian_filter1d(counts, kernel, mode="constant") if counts.size > 3 else counts
    noise = np.sqrt(np.maximum(smooth, 1.0))  # Poisson weights from the smoothed counts
    idx, props = find_peaks(np.concatenate([[0.0], smooth, [0.0]]),
                            prominence=max(min_prominence, 0.02 * smooth.max()))
    idx = idx - 1
    if idx.size == 0:
        idx = np.array([int(np.argmax(counts))])
        props = {"prominences": np.array([counts.max()])}
    keep = np.argsort(props["prominences"])[::-1][: n_peaks or idx.size]
    # ns relative to the first bin
    t_ref, scale = t[0], 1e-9
    x = (t - t_ref) / scale
    width0 = max(1.5 * w / scale, 1.0)
    seeds = [(counts[i], x[i], width0) for i in idx[keep]]
    names = fit = None
    while True:
        seeds.sort(key=lambda s: s[1])
        p0 = [0.0] + [v for s in seeds for v in s]
        names = ["baseline"] + [f"{k}_{j}" for j in range(len(seeds)) for k in ("amplitude", "center", "width")]
        fit = least_squares_fit(peaks_model, peaks_jacobian, x, counts, p0, names, sigma=noise)
        if n_peaks is None or len(seeds) >= n_peaks or len(seeds) >= counts.size // 3:
            break
        # add one peak; try several residual maxima and keep the best fit
        p = np.array([fit.parameters[n] for n in names])
        kept = [tuple(p[1 + 3 * k: 4 + 3 * k]) for k in range(len(seeds))]
        resid = gaussian_filter1d(counts - peaks_model(x, p), kernel, mode="constant")
        cand, _ = find_peaks(np.concatenate([[-np.inf], resid, [-np.inf]]))
        cand = cand - 1
        cand = cand[np.argsort(resid[cand])[::-1][:5]] if cand.size else np.array([int(np.argmax(resid))])
        best = None
        for j in cand:
            trial = sorted(kept + [(max(resid[j], 1.0), x[j], width0)], key=lambda s: s[1])
            tn = ["baseline"] + [f"{k}_{i}" for i in range(len(trial)) for k in ("amplitude", "center", "width")]
            try:
                tf = least_squares_fit(peaks_model, peaks_jacobian, x, counts,
                                       [0.0] + [v for s in trial for v in s], tn, sigma=noise)
            except FitFailure:
                continue
            dev = _poisson_deviance(counts, peaks_model(x, np.array([tf.parameters[n] for n in tn])))
            if best is None or dev < best[2]:
                best = (tf, trial, dev)
        if best is None:
            break
        fit = best[0]
        seeds = [tuple(fit.parameters[f"{k}_{i}"] for k in ("amplitude", "center", "width"))
                 for i in range(len(best[1]))]
    k = len(seeds)
    for j in range(k):
        fit.parameters[f"width_{j}"] = abs(fit.parameters[f"width_{j}"])
    return _rescale(fit, {**{f"center_{j}": (t_ref, scale) for j in range(k)},
                          **{f"width_{j}": (0.0, scale) for j in range(k)}})


def peak_centers(fit: FitResult) -> list[float]:
    return [fit.parameters[k] for k in sorted((k for k in fit.parameters if k.startswith("center_")),
                                              key=lambda k: int(k.split("_")[1]))]


def tof_mass_amu(tof_s: float, energy_eV: float, length_m: float, charge_e: int = 1) -> float:
    """Invert t = L sqrt(m / 2E) for the mass in amu."""
    if tof_s <= 0:
        raise ValueError("time of flight must be positive")
    return 2 * energy_eV * charge_e * ELEMENTARY_CHARGE_C * (tof_s / length_m) ** 2 / AMU_KG


def identify_mass(tof_s: float, energy_eV: float = 5900.0, length_m: float = 0.428,
                  registry: Mapping[str, IonSpecies] | None = None, *, max_residual_amu: float = 0.5,
                  min_margin_amu: float = 0.1) -> tuple[IonSpecies, float]:
    """Nearest registered species for an arrival time, with the amu residual.

    Raises when no species lies within ``max_residual_amu`` or when the two
    nearest candidates are closer together (in residual) than
    ``min_margin_amu``.
    """
    registry = REGISTRY if registry is None else registry
    mass = tof_mass_amu(tof_s, energy_eV, length_m)
    ranked = sorted(registry.values(), key=lambda s: abs(s.mass_amu - mass))
    best = ranked[0]
    resid = mass - best.mass_amu
    if abs(resid) > max_residual_amu:
        raise UnidentifiedSpeciesError(f"mass {mass:.3f} amu is {abs(resid):.3f} amu from {best.label}")
    if len(ranked) > 1 and abs(ranked[1].mass_amu - mass) - abs(resid) < min_margin_amu:
        raise UnidentifiedSpeciesError(
            f"mass {mass:.3f} amu is ambiguous between {best.label} and {ranked[1].label}")
    return best, resid


# --- ODMR -------------------------------------------------------------------------

EXTRA_DIP_PENALTY = 4.0


def _dip_seeds(x, y, n_dips):
    """Candidate (center, splitting) seeds in MHz offsets."""
    step = float(np.median(np.diff(x)))
    smooth = gaussian_filter1d(y, max(0.15 / step, 1.0), mode="nearest")
    depth = np.median(smooth) - smooth
    idx, _ = find_peaks(depth, prominence=0.2 * max(depth.max(), 1e-12))
    idx = idx[np.argsort(depth[idx])[::-1]]
    weights = np.clip(depth, 0, None)
    centroid = float(np.sum(weights * x) / weights.sum()) if weights.sum() > 0 else float(x[np.argmax(depth)])
    seeds = []
    if idx.size >= n_dips:
        pos = np.sort(x[idx[:n_dips]])
        seeds.append((float(np.mean(pos)) if n_dips == 2 else float(pos[1]),
                      float(np.mean(np.diff(pos))) if n_dips == 3 else float(pos[1] - pos[0])))
    for split in (3.1, 2.2, 1.55, 4.4):
        seeds.append((centroid, split))
    return seeds, float(np.median(y)), float(max(depth.max(), 1e-3))


def _fit_dip_model(x, y, n_dips):
    seeds, base, depth = _dip_seeds(x, y, n_dips)
    best = None
    for f0, split in seeds:
        try:
            fit = least_squares_fit(lambda xx, p: dips_model(xx, p, n_dips),
                                    lambda xx, p: dips_jacobian(xx, p, n_dips), x, y,
                                    [base, depth, f0, split, 0.5],
                                    ["baseline", "contrast", "center", "splitting", "linewidth"])
        except (ValueError, np.linalg.LinAlgError, NonIdentifiableError):
            continue
        p = fit.parameters
        if not fit.converged or p["contrast"] <= 0 or p["splitting"] <= 0 or p["linewidth"] <= 0:
            continue
        if best is None or fit.residual_norm < best.residual_norm:
            best = fit
    return best


def fit_dips(spectrum: OdmrSpectrum, *, extra_dip_penalty: float = EXTRA_DIP_PENALTY,
             min_contrast_significance: float = 5.0) -> FitResult:
    """Fit doublet and triplet Lorentzian models and pick one.

    Score is ``n ln(RSS/n) + 2k`` with k = 5 free parameters for both
    models, plus ``extra_dip_penalty`` for the triplet (two parameters'
    worth per extra dip).  Two dips mean 15N, three mean 14N.  The
    reported ``splitting`` is the distance between adjacent dips.
    """
    f = np.asarray(spectrum.frequency_hz, dtype=float)
    y = np.asarray(spectrum.signal, dtype=float)
    ref = float(np.mean(f))
    x = (f - ref) / 1e6
    n = x.size
    fits = {}
    scores = {}
    for n_dips in (2, 3):
        fit = _fit_dip_model(x, y, n_dips)
        if fit is None:
            continue
        rss = max(fit.residual_norm**2, 1e-300)
        fits[n_dips] = fit
        scores[n_dips] = n * math.log(rss / n) + 2 * 5 + extra_dip_penalty * (n_dips - 2)
    if not fits:
        raise FitFailure("neither the doublet nor the triplet model converged")
    n_dips = min(scores, key=scores.get)
    fit = fits[n_dips]
    c, c_se = fit.parameters["contrast"], fit.standard_errors["contrast"]
    if not (c_se > 0 and c / c_se >= min_contrast_significance):
        raise FitFailure(f"no significant resonance (contrast {c:.3g} +- {c_se:.3g})")
    _rescale(fit, {"center": (ref, 1e6), "splitting": (0.0, 1e6), "linewidth": (0.0, 1e6)})
    fit.parameters["n_dips"] = n_dips
    fit.extra = {"verdict": "15N" if n_dips == 2 else "14N",
                 "scores": {str(k): v for k, v in scores.items()}}
    return fit


# --- Hahn echo ------------------------------------------------------------------------

def fit_decay(curve: HahnCurve, *, fix_stretch: bool = True, stretch_n: float = 1.0) -> FitResult:
    """Fit baseline + contrast * exp(-(tau/T2)**n).

    T2 is fitted as log T2 so iterates stay positive.  Seeded from the 1/e
    crossing.  With ``fix_stretch`` the exponent is held at ``stretch_n``.
    """
    tau = np.asarray(curve.delay_s, dtype=float)
    y = np.asarray(curve.signal, dtype=float)
    if tau.size < 8:
        raise NonIdentifiableError("decay fit needs at least 8 delay points")
    order = np.argsort(tau)
    tau, y = tau[order], y[order]
    scale = 1e-6
    t = tau / scale
    tail = y[-max(3, tau.size // 10):]
    base0 = float(np.mean(tail))
    c0 = float(y[0] - base0)
    if c0 <= 0:
        raise NonIdentifiableError("no decay in the echo curve")
    yn = gaussian_filter1d((y - base0) / c0, 1.0, mode="nearest")
    t_e = _crossing(t, yn, math.exp(-1))
    t2_0 = t_e if t_e is not None and t_e > 0 else t[-1] / 3
    if t[-1] < 2 * t2_0:
        raise NonIdentifiableError("maximum delay shorter than twice the T2 estimate")
    fixed = {3: stretch_n} if fix_stretch else None
    best = None
    for mult in (1.0, 0.5, 2.0):
        fit = least_squares_fit(decay_model, decay_jacobian, t, y, [base0, c0, math.log(t2_0 * mult), stretch_n],
                                ["baseline", "contrast", "log_T2", "stretch_n"], fixed=fixed)
        if best is None or fit.residual_norm < best.residual_norm - 1e-15:
            best = fit
    p, se = best.parameters, best.standard_errors
    t2 = math.exp(p["log_T2"]) * scale
    p["T2"] = t2
    se["T2"] = t2 * se["log_T2"]
    return best


# --- yield ------------------------------------------------------------------------------

@dataclass(frozen=True)
class YieldEstimate:
    value: float
    lower: float
    upper: float
    nv_count: int
    atoms: int
    confidence: float = 0.95

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_yield(nv_count: int, ions: int, atoms_per_ion: int = 2, confidence: float = 0.95) -> YieldEstimate:
    """NV centres per implanted atom with a Clopper-Pearson interval."""
    if ions < 1 or nv_count < 0:
        raise ValueError("need ions >= 1 and nv_count >= 0")
    n = ions * atoms_per_ion
    if nv_count > n:
        raise ValueError(f"{nv_count} centres exceed {n} implanted atoms")
    alpha = 1 - confidence
    lower = 0.0 if nv_count == 0 else float(stats.beta.ppf(alpha / 2, nv_count, n - nv_count + 1))
    upper = 1.0 if nv_count == n else float(stats.beta.ppf(1 - alpha / 2, nv_count + 1, n - nv_count))
    return YieldEstimate(nv_count / n, lower, upper, nv_count, n, confidence)
