"""CSV and line-delimited artifact formats.

CSV files may start with ``# key=value`` metadata lines followed by a
header row.  Floats are written with ``repr`` so files are reproducible
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .beamline import KnifeEdgeScan, TofHistogram
from .implanter import ImpactEvent
from .nv import ConfocalImage, HahnCurve, NVCenter, OdmrSpectrum, Spectrum


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence], meta: Mapping | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}={_fmt(value)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: Path | str) -> tuple[dict[str, str], list[str], list[list[str]]]:
    meta: dict[str, str] = {}
    with Path(path).open(newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise ValueError(f"{path}: no header row")
    return meta, rows[0], rows[1:]


def read_columns(path: Path | str, required: Sequence[str]) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    meta, header, rows = read_csv(path)
    missing = [c for c in required if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}; found {header}")
    cols = {name: np.array([float(r[header.index(name)]) for r in rows]) for name in required}
    return meta, cols


def write_histogram(path, hist: TofHistogram) -> Path:
    meta = {"bin_width_s": hist.bin_width_s, "n_shots": hist.n_shots, "n_detected": hist.n_detected}
    return write_csv(path, ["bin_start_s", "count"], zip(hist.bin_edges_s[:-1], hist.counts), meta)


def read_histogram(path) -> TofHistogram:
    meta, cols = read_columns(path, ["bin_start_s", "count"])
    starts = cols["bin_start_s"]
    width = float(meta["bin_width_s"]) if "bin_width_s" in meta else float(np.median(np.diff(starts)))
    counts = cols["count"].astype(np.int64)
    edges = np.append(starts, starts[-1] + width)
    return TofHistogram(edges, counts, int(meta.get("n_shots", counts.sum())), int(counts.sum()))


def write_scan(path, scan: KnifeEdgeScan, meta: Mapping | None = None) -> Path:
    rows = ((x, c, scan.shots_per_position) for x, c in zip(scan.positions_m, scan.transmitted_counts))
    return write_csv(path, ["position_m", "transmitted", "shots"], rows, meta)


def read_scan(path) -> KnifeEdgeScan:
    _, cols = read_columns(path, ["position_m", "transmitted", "shots"])
    shots = np.unique(cols["shots"])
    if shots.size != 1:
        raise ValueError("knife-edge scan must use the same number of shots at every position")
    return KnifeEdgeScan(cols["position_m"], cols["transmitted"].astype(np.int64), int(shots[0]))


IMPACT_HEADER = ["shot_index", "region", "spot_row", "spot_col", "species", "x_nm", "y_nm", "depth_nm", "vacancies"]


def write_impacts(path, events: Sequence[ImpactEvent]) -> Path:
    rows = ((e.shot_index, e.region, e.spot_row, e.spot_col, e.species, e.x_m * 1e9, e.y_m * 1e9,
             e.depth_m * 1e9, e.vacancies) for e in events)
    return write_csv(path, IMPACT_HEADER, rows)


NV_HEADER = ["x_nm", "y_nm", "depth_nm", "isotope", "charge", "t2_us", "origin"]


def write_nvs(path, nvs: Sequence[NVCenter]) -> Path:
    rows = ((n.x_m * 1e9, n.y_m * 1e9, n.depth_m * 1e9, n.isotope, n.charge, n.t2_s * 1e6, n.origin) for n in nvs)
    return write_csv(path, NV_HEADER, rows)


def read_nvs(path) -> list[NVCenter]:
    _, header, rows = read_csv(path)
    out = []
    for r in rows:
        d = dict(zip(header, r))
        out.append(NVCenter(float(d["x_nm"]) * 1e-9, float(d["y_nm"]) * 1e-9, float(d["depth_nm"]) * 1e-9,
                            int(d["isotope"]), d["charge"], float(d["t2_us"]) * 1e-6, d["origin"]))
    return out


def write_odmr(path, spec: OdmrSpectrum, meta: Mapping | None = None) -> Path:
    return write_csv(path, ["frequency_hz", "signal"], zip(spec.frequency_hz, spec.signal),
                     {"noise_level": spec.noise_level, **(meta or {})})


def read_odmr(path) -> OdmrSpectrum:
    meta, cols = read_columns(path, ["frequency_hz", "signal"])
    return OdmrSpectrum(cols["frequency_hz"], cols["signal"], float(meta.get("noise_level", 0.0)))


def write_hahn(path, curve: HahnCurve, meta: Mapping | None = None) -> Path:
    return write_csv(path, ["delay_s", "signal"], zip(curve.delay_s, curve.signal),
                     {"noise_level": curve.noise_level, **(meta or {})})


def read_hahn(path) -> HahnCurve:
    meta, cols = read_columns(path, ["delay_s", "signal"])
    return HahnCurve(cols["delay_s"], cols["signal"], float(meta.get("noise_level", 0.0)))


def write_spectrum(path, spec: Spectrum, meta: Mapping | None = None) -> Path:
    return write_csv(path, ["wavelength_nm", "intensity"], zip(spec.wavelength_nm, spec.intensity), meta)


def write_matrix(path, matrix: np.ndarray, meta: Mapping | None = None) -> Path:
    cols = [f"c{j}" for j in range(matrix.shape[1])]
    return write_csv(path, cols, matrix.tolist(), meta)


def write_image(path, image: ConfocalImage) -> Path:
    meta = {"x0_m": image.x_m[0], "dx_m": image.x_m[1] - image.x_m[0] if image.x_m.size > 1 else 0.0,
            "y0_m": image.y_m[0], "dy_m": image.y_m[1] - image.y_m[0] if image.y_m.size > 1 else 0.0,
            "shape": f"{image.counts.shape[0]}x{image.counts.shape[1]}"}
    return write_matrix(path, image.counts, meta)


def write_jsonl(path, records: Iterable) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            data = asdict(rec) if hasattr(rec, "__dataclass_fields__") else dict(rec)
            fh.write(json.dumps(data, sort_keys=True) + "\n")
    return path


def write_json(path, data) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
