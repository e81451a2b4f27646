"""Scenario orchestration: run the enabled stages and collate a report."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import io
from .beamline import (
    ExtractionTiming,
    calibrate_optics,
    effective_spot_sigma,
    knife_edge_scan,
    scan_positions,
    separate_species,
    simulate_tof_histogram,
    time_of_flight,
)
from .config import Scenario
from .core import CA40, N15_2, derive_stream, get_species
from .errors import DetectionUnavailableError, NonTerminationError, NVImplantError, UnidentifiedSpeciesError
from .fitkit import estimate_yield, fit_decay, fit_dips, fit_edge, fit_tof_peaks, identify_mass, peak_centers
from .implanter import UM, DosePattern, Region, StoppingModel, calibrate_range, run_pattern
from .nv import (
    ActivationParams,
    anneal,
    confocal_image,
    synth_hahn,
    synth_odmr,
    synth_odmr_for,
    synth_spectrum,
)
from .trap import TrapState, attempt_load, detect_dark_ion, enforce_target_count, order_crystal

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
REPORT = "report.txt"

# (row key, stage, fit file, published value)
REPORT_ROWS = [
    ("Fig2a", "tof", "fit_tof.json", "15N2+ / 15N14N+ / 14N2+ resolved"),
    ("Fig2c", "knife_edge", "fit_knife_ca.json", "sigma = 11(2) nm"),
    ("Fig2d", "knife_edge", "fit_knife_n2.json", "sigma = 121(35) nm"),
    ("Fig6a", "characterize", "fit_odmr_15n.json", "doublet, 3.1 MHz"),
    ("Fig6b", "characterize", "fit_odmr_14n.json", "triplet, 2.2 MHz"),
    ("Fig7", "characterize", "fit_hahn.json", "T2 = 0.66 us, 1.56 us"),
    ("yield", "anneal", "yield.json", "0.6 %"),
]


class _Run:
    def __init__(self, scenario: Scenario, out: Path, workers: int):
        self.sc = scenario
        self.out = out
        self.workers = workers
        self.files: list[str] = []
        self.impacts = None
        self.pattern: DosePattern | None = None
        self.nvs = None
        self.summary: dict = {}

    def stream(self, label):
        return derive_stream(self.sc.master_seed, label)

    def save(self, name: str, writer: Callable, *args, **kwargs):
        writer(self.out / name, *args, **kwargs)
        self.files.append(name)

    def timing(self) -> ExtractionTiming:
        b = self.sc.beamline
        return ExtractionTiming(endcap_v_neg=b.endcap_v_neg, endcap_v_pos=b.endcap_v_pos)

    def build_pattern(self) -> DosePattern:
        im = self.sc.implanter
        regions = []
        for i, (label, kappa) in enumerate(im.doses.items()):
            species = ("15N2+", "40Ca+") if (label == "F" and im.ca_coimplant) else ("15N2+",)
            regions.append(Region(label, kappa, im.rows, im.cols, im.pitch_um * UM, species,
                                  (i * im.region_spacing_um * UM, 0.0)))
        return DosePattern(tuple(regions))

    # --- stages ---------------------------------------------------------------

    def stage_trap(self):
        t, sim = self.sc.trap, self.sc.sim
        gen = self.stream("trap").generator()
        timing = self.timing()
        n_ions = self.build_pattern().total_dose_ions
        records, extraction_rows = [], []
        iterations, cycles, exposures = [], [], []
        restarts = 0
        for ion in range(n_ions):
            n_exp = shot_restarts = 0
            while True:
                res = enforce_target_count(TrapState((), sim.axial_freq_hz), t.ca_target, gen,
                                           miscount_prob=t.miscount_prob, removal_success=t.removal_success,
                                           load_exposure_s=t.load_exposure_s, confirmations=t.confirmations,
                                           max_iterations=t.max_iterations,
                                           rates_per_min=sim.trap_capture_rates_per_min)
                records += [{"ion": ion, **asdict(r)} for r in res.log]
                iterations.append(res.iterations)
                while True:
                    n_exp += 1
                    got = attempt_load(N15_2, t.dark_exposure_s, gen, sim.trap_capture_rates_per_min).loaded_count
                    if got == 1:
                        break
                state = res.state.with_ions(res.state.ions + (N15_2,))
                try:
                    found = detect_dark_ion(state)
                except DetectionUnavailableError:
                    found = None
                if found is not None and state.n_bright == t.ca_target:
                    break
                # the crystal image shows a confirmed miscount: dump the trap and start over
                restarts += 1
                shot_restarts += 1
                records.append({"ion": ion, "step": -1, "action": "restart", "true_count": state.n_bright,
                                "observed_count": None})
                if shot_restarts > t.max_iterations:
                    raise NonTerminationError(f"trap preparation restarted more than {t.max_iterations} times")
            exposures.append(n_exp * t.dark_exposure_s)
            if not found:
                raise NVImplantError(f"dark ion not detected for shot {ion}")
            state, n_cycles = order_crystal(state, gen)
            cycles.append(n_cycles)
            for ev in separate_species(state.ions, timing):
                extraction_rows.append((ion, ev.species.label, ev.energy_eV, ev.exit_time_s, ev.reflected,
                                        ev.detected))
        self.save("trap_log.jsonl", io.write_jsonl, records)
        self.save("extraction.csv", io.write_csv,
                  ["ion", "species", "energy_eV", "exit_time_s", "reflected", "detected"], extraction_rows)
        delivered = [r for r in extraction_rows if r[1] == N15_2.label and not r[4]]
        stats = {
            "ions": n_ions,
            "mean_count_iterations": float(np.mean(iterations)),
            "mean_melt_cycles": float(np.mean(cycles)),
            "restarts": restarts,
            "mean_dark_load_time_s": float(np.mean(exposures)),
            "delivered_at_full_energy": sum(1 for r in delivered if r[2] == sim.extraction_energy_eV),
            "calcium_reflected": sum(1 for r in extraction_rows if r[1] == CA40.label and r[4]),
        }
        self.save("trap_summary.json", io.write_json, stats)
        self.summary["trap"] = stats

    def stage_tof(self):
        b, sim = self.sc.beamline, self.sc.sim
        mix = [(get_species(k), v) for k, v in b.tof_mix.items()]
        hist = simulate_tof_histogram(mix, b.tof_jitter_s, self.stream("tof"), energy_eV=sim.extraction_energy_eV,
                                      length_m=sim.drift_length_m, sem_efficiency=sim.sem_efficiency,
                                      bin_width_s=b.tof_bin_width_s, workers=self.workers)
        self.save("tof_histogram.csv", io.write_histogram, hist)
        fit = fit_tof_peaks(hist, n_peaks=sum(1 for _, n in mix if n > 0))
        peaks = []
        for center in peak_centers(fit):
            try:
                species, resid = identify_mass(center, sim.extraction_energy_eV, sim.drift_length_m)
                expected = time_of_flight(species.mass_kg, sim.extraction_energy_eV, sim.drift_length_m)
                peaks.append({"center_s": center, "species": species.label, "mass_amu": species.mass_amu + resid,
                              "residual_amu": resid, "expected_s": expected,
                              "relative_error": (center - expected) / expected})
            except UnidentifiedSpeciesError as exc:
                peaks.append({"center_s": center, "species": None, "error": str(exc)})
        fit.extra = {"peaks": peaks, "n_shots": hist.n_shots, "n_detected": hist.n_detected,
                     "detected_fraction": hist.n_detected / hist.n_shots}
        self.save("fit_tof.json", io.write_json, fit.to_dict())
        self.summary["tof"] = {"masses": [p.get("species") for p in peaks],
                               "detected_fraction": hist.n_detected / hist.n_shots}

    def optics(self):
        b = self.sc.beamline
        return calibrate_optics((b.ca_sigma_nm * 1e-9, b.ca_acquisition_min * 60),
                                (b.n2_sigma_nm * 1e-9, b.n2_acquisition_min * 60),
                                chromatic_coefficient_m=b.chromatic_coefficient_m,
                                energy_spread_rel=b.energy_spread_rel, drift_share=b.drift_share)

    def beam_sigmas(self) -> dict[str, float]:
        b = self.sc.beamline
        optics = self.optics()
        return {CA40.label: effective_spot_sigma(optics, CA40, b.ca_acquisition_min * 60),
                N15_2.label: effective_spot_sigma(optics, N15_2, b.n2_acquisition_min * 60)}

    def stage_knife_edge(self):
        b = self.sc.beamline
        sigmas = self.beam_sigmas()
        plans = [("ca", CA40, b.ca_sigma_nm, b.ca_scan_positions, b.ca_scan_shots, b.ca_scan_span_sigmas,
                  b.ca_acquisition_min),
                 ("n2", N15_2, b.n2_sigma_nm, b.n2_scan_positions, b.n2_scan_shots, b.n2_scan_span_sigmas,
                  b.n2_acquisition_min)]
        out = {}
        for tag, species, nominal_nm, n_pos, shots, span, acq in plans:
            positions = scan_positions(nominal_nm * 1e-9, n_pos, span)
            scan = knife_edge_scan(sigmas[species.label], positions, shots, self.stream(f"knife/{tag}"),
                                   sem_efficiency=self.sc.sim.sem_efficiency)
            self.save(f"knife_edge_{tag}.csv", io.write_scan, scan, {"species": species.label})
            fit = fit_edge(scan)
            fit.extra = {"species": species.label, "true_sigma_m": sigmas[species.label],
                         "acquisition_min": acq, "ions": scan.total_shots}
            self.save(f"fit_knife_{tag}.json", io.write_json, fit.to_dict())
            out[tag] = {"sigma_nm": fit.parameters["sigma"] * 1e9, "sigma_se_nm": fit.standard_errors["sigma"] * 1e9}
        self.summary["knife_edge"] = out

    def stage_implant(self):
        im, sim = self.sc.implanter, self.sc.sim
        self.pattern = self.build_pattern()
        stopping = calibrate_range((im.range_ref_energy_eV, im.range_ref_nm * 1e-9), im.range_exponent,
                                   relative_straggle=im.relative_straggle,
                                   lateral_straggle_ratio=im.lateral_straggle_ratio,
                                   vacancies_per_keV=im.vacancies_per_keV)
        self.impacts = run_pattern(self.pattern, self.beam_sigmas(), stopping, self.stream("implant"),
                                   energy_eV=sim.extraction_energy_eV, dose_mode=im.dose_mode,
                                   workers=self.workers)
        self.save("impacts.csv", io.write_impacts, self.impacts)
        per_region = {}
        for region in self.pattern.regions:
            evs = [e for e in self.impacts if e.region == region.label]
            per_region[region.label] = {
                "dose_ions": len({e.shot_index for e in evs if e.ion_label == N15_2.label}),
                "atoms": len(evs),
                "vacancies": int(sum(e.vacancies for e in evs)),
                "mean_depth_nm": float(np.mean([e.depth_m for e in evs]) * 1e9) if evs else math.nan,
            }
        self.save("implant_summary.json", io.write_json, per_region)
        self.summary["implant"] = per_region

    def activation(self) -> ActivationParams:
        n = self.sc.nv
        return ActivationParams(n.base_yield, n.vacancy_threshold, n.native_capture_prob,
                                n.background_density_per_um2, charge_minus_prob=n.charge_minus_prob,
                                t2_range_s=(n.t2_min_us * 1e-6, n.t2_max_us * 1e-6))

    def stage_anneal(self):
        if self.impacts is None:
            raise NVImplantError("the anneal stage needs the implant stage")
        params = self.activation()
        self.nvs = anneal(self.impacts, params, self.stream("anneal").generator(),
                          background_fields_m=[r.field_m for r in self.pattern.regions])
        self.save("nv_centers.csv", io.write_nvs, self.nvs)
        label = self.sc.nv.yield_region
        region = self.pattern.region(label)
        implanted = [nv for nv in self.nvs if nv.origin == "implanted" and nv.region == label]
        est = estimate_yield(len(implanted), region.ions_per_spot * region.n_spots, N15_2.atoms_per_ion)
        counts = {r.label: sum(1 for nv in self.nvs if nv.region == r.label) for r in self.pattern.regions}
        data = {**est.to_dict(), "region": label, "nv_per_region": counts,
                "origins": {o: sum(1 for nv in self.nvs if nv.origin == o)
                            for o in ("implanted", "native-capture", "background")}}
        self.save("yield.json", io.write_json, data)
        self.summary["yield"] = data

    def stage_characterize(self):
        c = self.sc.characterize
        for charge, tag in (("-", "nv_minus"), ("0", "nv0")):
            self.save(f"spectrum_{tag}.csv", io.write_spectrum, synth_spectrum(charge), {"charge": charge})
        odmr_kw = dict(linewidth_hz=c.odmr_linewidth_hz, contrast=c.odmr_contrast, noise_sigma=c.odmr_noise)
        for iso in (15, 14):
            spec = synth_odmr(iso, rng=self.stream(f"odmr/{iso}").generator(), **odmr_kw)
            self.save(f"odmr_{iso}n.csv", io.write_odmr, spec, {"isotope": iso})
            self.save(f"fit_odmr_{iso}n.json", io.write_json, fit_dips(spec).to_dict())
        hahn_fits = []
        for i, t2_us in enumerate(c.reference_t2_us):
            curve = synth_hahn(t2_us * 1e-6, c.hahn_stretch_n, rng=self.stream(f"hahn/{i}").generator(),
                               noise_rel=c.hahn_noise_rel)
            self.save(f"hahn_ref{i}.csv", io.write_hahn, curve, {"t2_true_s": t2_us * 1e-6})
            fit = fit_decay(curve, fix_stretch=not c.fit_free_stretch, stretch_n=c.hahn_stretch_n)
            hahn_fits.append({"t2_true_s": t2_us * 1e-6, **fit.to_dict()})
        self.save("fit_hahn.json", io.write_json, {"curves": hahn_fits})

        if self.nvs is None:
            return
        region = self.pattern.region(c.image_region)
        xmin, xmax, ymin, ymax = region.field_m
        px = c.image_pixel_nm * 1e-9
        img = confocal_image([nv for nv in self.nvs if xmin <= nv.x_m <= xmax and ymin <= nv.y_m <= ymax],
                             np.arange(xmin, xmax, px), np.arange(ymin, ymax, px),
                             psf_sigma_m=c.psf_sigma_nm * 1e-9, counts_per_nv=c.counts_per_nv,
                             rng=self.stream("confocal").generator())
        self.save(f"confocal_{c.image_region}.csv", io.write_image, img)
        rows = []
        for i, nv in enumerate(self.nvs):
            if nv.origin == "background":
                continue
            gen = self.stream(f"centre/{i}").generator()
            entry = {"index": i, "region": nv.region, "isotope": nv.isotope, "charge": nv.charge,
                     "origin": nv.origin, "t2_true_s": nv.t2_s}
            try:
                dips = fit_dips(synth_odmr_for(nv, gen, **odmr_kw))
                entry.update(verdict=dips.extra["verdict"], splitting_hz=dips.parameters["splitting"])
            except NVImplantError:
                entry.update(verdict=None, splitting_hz=None)
            if nv.odmr_active:
                fit = fit_decay(synth_hahn(nv.t2_s, c.hahn_stretch_n, rng=gen, noise_rel=c.hahn_noise_rel))
                entry["t2_fit_s"] = fit.parameters["T2"]
            rows.append(entry)
        self.save("centers_characterization.json", io.write_json, rows)


def run_scenario(scenario: Scenario, output_dir: str | Path, *, workers: int | None = None) -> int:
    """Run the enabled stages and write artifacts plus a manifest.

    Returns 0 on success and 1 if a stage fails; the artifacts written so
    far are kept and the manifest records the failure.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(scenario, out, workers or scenario.workers)
    status, notes = "ok", []
    for stage in scenario.stages:
        try:
            log.info("stage %s", stage)
            getattr(run, f"stage_{stage}")()
        except (NVImplantError, ValueError, ArithmeticError) as exc:
            status = "failed"
            notes.append(f"stage {stage} failed: {type(exc).__name__}: {exc}")
            log.error(notes[-1])
            break
    if run.summary:
        run.save("summary.json", io.write_json, run.summary)
    manifest = {
        "schema_version": scenario.schema_version,
        "name": scenario.name,
        "master_seed": scenario.master_seed,
        "stages": list(scenario.stages),
        "status": status,
        "notes": notes,
        "config": scenario.resolved(),
        "files": {name: io.sha256_file(out / name) for name in sorted(run.files)},
    }
    io.write_json(out / MANIFEST, manifest)
    if status == "ok":
        report, _ = emit_report(out)
        manifest["files"][report.name] = io.sha256_file(report)
        io.write_json(out / MANIFEST, manifest)
    return 0 if status == "ok" else 1


# --- report -------------------------------------------------------------------

def _fmt_unc(value: float, err: float, unit_scale: float = 1.0, digits: int = 2) -> str:
    return f"{value * unit_scale:.{digits}f}({err * unit_scale:.{digits}f})"


def _row_value(key: str, data: dict) -> str:
    if key == "Fig2a":
        return ", ".join(f"{p['mass_amu']:.2f} amu -> {p['species']}" for p in data["extra"]["peaks"])
    if key in ("Fig2c", "Fig2d"):
        p, e = data["parameters"], data["standard_errors"]
        return f"sigma = {_fmt_unc(p['sigma'], e['sigma'], 1e9, 1)} nm ({data['extra']['ions']} ions)"
    if key in ("Fig6a", "Fig6b"):
        p, e = data["parameters"], data["standard_errors"]
        return (f"{data['extra']['verdict']}, {p['n_dips']} dips, splitting "
                f"{_fmt_unc(p['splitting'], e['splitting'], 1e-6, 3)} MHz")
    if key == "Fig7":
        return "T2 = " + ", ".join(_fmt_unc(c["parameters"]["T2"], c["standard_errors"]["T2"], 1e6, 3) + " us"
                                   for c in data["curves"])
    if key == "yield":
        return (f"{100 * data['value']:.2f} % ({data['nv_count']}/{data['atoms']} atoms, "
                f"95 % CI {100 * data['lower']:.2f}-{100 * data['upper']:.2f} %)")
    raise KeyError(key)


def emit_report(artifact_dir: str | Path) -> tuple[Path, int]:
    """Collate fit reports into one table keyed by figure.

    Rows whose stage did not run are marked ``not run``; missing or broken
    fit files are flagged, never filled in.  Returns the report path and the
    number of warnings.
    """
    d = Path(artifact_dir)
    manifest_path = d / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {d}")
    manifest = json.loads(manifest_path.read_text())
    stages = set(manifest.get("stages", []))
    lines = [f"run: {manifest.get('name')}  seed: {manifest.get('master_seed')}  status: {manifest.get('status')}",
             "", f"{'row':<7} {'published':<36} simulated", "-" * 100]
    warnings = 0
    for key, stage, fname, published in REPORT_ROWS:
        path = d / fname
        if stage not in stages:
            value = "not run"
        elif not path.exists():
            value, warnings = "missing", warnings + 1
        else:
            try:
                value = _row_value(key, json.loads(path.read_text()))
            except (ValueError, KeyError, TypeError, IndexError):
                value, warnings = "unparseable", warnings + 1
        lines.append(f"{key:<7} {published:<36} {value}")
    lines += ["", f"warnings: {warnings}"]
    report = d / REPORT
    report.write_text("\n".join(lines) + "\n")
    return report, warnings
