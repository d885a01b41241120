"""CSV and JSON readers/writers for panels, fits and diagnostics.

CSV files are UTF-8 with Unix newlines; floats are written with ``repr`` so
they round-trip exactly and outputs are byte-reproducible.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .data import LOCAL, CovariatePanel, CovariateTable, ExcessPanel, ModelConfig, RawSeries
from .errors import DataError
from .objective import SwitchingPath
from .regression import RegimeParameters

FORMAT_VERSION = 1


def fmt(x) -> str:
    return repr(float(x))


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(str(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def _read_rows(path, expected_prefix):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header[: len(expected_prefix)] != list(expected_prefix):
            raise DataError(f"{path}:1: header must start with {','.join(expected_prefix)}")
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            rows.append((reader.line_num, [c.strip() for c in row]))
    return header, rows


def _num(path, line, text, kind=float):
    try:
        v = kind(text)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {text!r} as {kind.__name__}") from None
    if kind is float and not math.isfinite(v):
        raise DataError(f"{path}:{line}: non-finite value {text!r}")
    return v


def _group(path, rows, parse):
    groups: OrderedDict[str, list] = OrderedDict()
    for line, row in rows:
        groups.setdefault(row[0], []).append((line, parse(line, row)))
    out = OrderedDict()
    for loc, items in groups.items():
        items.sort(key=lambda it: it[1][0])
        times = [it[1][0] for it in items]
        for (la, ta), (lb, tb) in zip(items, items[1:]):
            if ta[0] == tb[0]:
                raise DataError(f"{path}:{lb}: duplicate time {tb[0]} for location {loc!r}")
        out[loc] = [it[1] for it in items]
    return out


def read_raw_csv(path) -> list[RawSeries]:
    """``location,time,value`` rows; rows of a location may come in any order."""
    _, rows = _read_rows(path, ["location", "time", "value"])
    groups = _group(path, rows, lambda ln, r: (_num(path, ln, r[1], int), _num(path, ln, r[2])))
    if not groups:
        raise DataError(f"{path}: no observations")
    return [RawSeries(loc, [t for t, _ in v], [x for _, x in v]) for loc, v in groups.items()]


def read_excess_csv(path, thresholds_path=None) -> ExcessPanel:
    _, rows = _read_rows(path, ["location", "time", "excess"])
    groups = _group(path, rows, lambda ln, r: (_num(path, ln, r[1], int), _num(path, ln, r[2])))
    locs = list(groups)
    thresholds, level = [], None
    if thresholds_path is not None and Path(thresholds_path).is_file():
        _, trows = _read_rows(thresholds_path, ["location", "threshold", "quantile_level"])
        table = {r[0]: (_num(thresholds_path, ln, r[1]), r[2]) for ln, r in trows}
        for loc, (thr, lv) in table.items():
            if loc not in groups:
                locs.append(loc)  # location without exceedances
                groups[loc] = []
        thresholds = [table.get(loc, (math.nan, ""))[0] for loc in locs]
        levels = {lv for _, lv in table.values() if lv}
        level = float(levels.pop()) if len(levels) == 1 else None
    if not locs:
        raise DataError(f"{path}: no excesses")
    return ExcessPanel(locs, [[t for t, _ in groups[l]] for l in locs],
                       [[y for _, y in groups[l]] for l in locs], thresholds, level)


def write_excess(panel: ExcessPanel, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    rows = [(loc, int(t), fmt(y)) for loc, ts, ys in zip(panel.locations, panel.times, panel.excesses)
            for t, y in zip(ts, ys)]
    atomic_write(out_dir / "excess.csv", _csv_text(["location", "time", "excess"], rows))
    lv = "" if panel.quantile_level is None else fmt(panel.quantile_level)
    trows = [(loc, fmt(u), lv) for loc, u in zip(panel.locations, panel.thresholds)]
    atomic_write(out_dir / "thresholds.csv", _csv_text(["location", "threshold", "quantile_level"], trows))
    return [out_dir / "excess.csv", out_dir / "thresholds.csv"]


def read_covariates_csv(path) -> CovariateTable:
    header, rows = _read_rows(path, ["location", "time"])
    names = header[2:]
    if len(set(names)) != len(names):
        raise DataError(f"{path}:1: duplicate covariate names")
    groups = _group(path, rows, lambda ln, r: (_num(path, ln, r[1], int),
                                               [_num(path, ln, x) for x in r[2:]]))
    data = {loc: (np.array([t for t, _ in v], dtype=np.int64),
                  np.array([x for _, x in v], dtype=float).reshape(len(v), len(names)))
            for loc, v in groups.items()}
    return CovariateTable(names, data)


def write_covariates(panel: ExcessPanel, covs: CovariatePanel, path):
    rows = []
    for loc, ts, U in zip(panel.locations, panel.times, covs.values):
        for t, u in zip(ts, U):
            rows.append([loc, int(t), *(fmt(v) for v in u)])
    atomic_write(path, _csv_text(["location", "time", *covs.names], rows))


def write_paths(panel: ExcessPanel, paths: SwitchingPath, path):
    rows = [(loc, int(t), int(r)) for loc, ts, rs in zip(panel.locations, panel.times, paths.labels)
            for t, r in zip(ts, rs)]
    atomic_write(path, _csv_text(["location", "time", "regime"], rows))


def read_paths_csv(path):
    """Returns an ordered mapping ``location -> (times, labels)``."""
    _, rows = _read_rows(path, ["location", "time", "regime"])
    groups = _group(path, rows, lambda ln, r: (_num(path, ln, r[1], int), _num(path, ln, r[2], int)))
    return OrderedDict((loc, (np.array([t for t, _ in v], np.int64), np.array([r for _, r in v], np.int64)))
                       for loc, v in groups.items())


def paths_for_panel(panel: ExcessPanel, table) -> SwitchingPath:
    labels = []
    for loc, ts in zip(panel.locations, panel.times):
        if loc not in table:
            if len(ts):
                raise DataError(f"paths file has no entry for location {loc!r}")
            labels.append(np.zeros(0, np.int64))
            continue
        pt, pr = table[loc]
        if not np.array_equal(pt, ts):
            raise DataError(f"paths for location {loc!r} do not match the excess times")
        labels.append(pr)
    return SwitchingPath(labels)


def theta_to_json(theta: RegimeParameters, names) -> list:
    terms = ["offset", *names]
    return [{"regime": k,
             "xi": dict(zip(terms, map(float, theta.xi[k]))),
             "sigma": dict(zip(terms, map(float, theta.sigma[k])))}
            for k in range(theta.K)]


def theta_from_json(regimes, names) -> RegimeParameters:
    terms = ["offset", *names]
    try:
        xi = [[float(r["xi"][t]) for t in terms] for r in regimes]
        sigma = [[float(r["sigma"][t]) for t in terms] for r in regimes]
    except (KeyError, TypeError) as exc:
        raise DataError(f"regime coefficients missing entry {exc}") from None
    return RegimeParameters(xi, sigma)


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def fit_document(result, panel: ExcessPanel, covs: CovariatePanel, settings, n: int, p: int,
                 aicc_value) -> dict:
    cfg = result.config
    scaling = {}
    if covs.scaling is not None:
        for loc, row in zip(panel.locations, covs.scaling):
            scaling[loc] = {name: [float(lo), float(hi)] for name, (lo, hi) in zip(covs.names, row)}
    return {
        "format_version": FORMAT_VERSION,
        "model": "fembv-gpd",
        "config": {
            "K": cfg.K, "C": cfg.C, "lambda": cfg.lam, "restarts": cfg.restarts,
            "max_ao_iterations": cfg.max_ao_iterations, "ao_tolerance": cfg.ao_tolerance,
            "seed": cfg.seed, "penalize_offsets": cfg.penalize_offsets,
        },
        "annealer": settings.__dict__.copy(),
        "covariates": {"names": list(covs.names), "kinds": list(covs.kinds)},
        "regimes": theta_to_json(result.theta, covs.names),
        "nll": _finite_or_none(result.nll),
        "penalized_nll": _finite_or_none(result.penalized_nll),
        "n": n,
        "p": p,
        "aicc": _finite_or_none(aicc_value),
        "ao_iterations": result.ao_iterations,
        "converged": result.converged,
        "restart_index_of_best": result.restart_index_of_best,
        "restart_values": [_finite_or_none(v) for v in result.restart_values],
        "trace": [_finite_or_none(v) for v in result.trace],
        "switches_per_location": dict(zip(panel.locations, result.paths.switch_counts())),
        "scaling": scaling,
    }


def write_json(doc, path):
    atomic_write(path, json.dumps(doc, indent=2, allow_nan=False) + "\n")


def read_fit_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    return doc


def config_from_doc(doc) -> ModelConfig:
    c = doc["config"]
    return ModelConfig(K=c["K"], C=c["C"], lam=c["lambda"], restarts=c["restarts"],
                       max_ao_iterations=c["max_ao_iterations"], ao_tolerance=c["ao_tolerance"],
                       seed=c["seed"], penalize_offsets=c.get("penalize_offsets", True))


def kinds_for(names, global_names) -> list[str]:
    unknown = set(global_names) - set(names)
    if unknown:
        raise DataError(f"unknown global covariates: {', '.join(sorted(unknown))}")
    return ["global" if n in global_names else LOCAL for n in names]
