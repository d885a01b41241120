"""Command-line entry point: ``fembv-gpd <command> ...``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Settings resolve as: command-line flag, then ``--config`` file
(``key=value`` lines, ``#`` comments), then built-in default.
Exit codes: 0 success, 2 input/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DEFAULT_EPSILON, DEFAULT_QUANTILE, CovariatePanel, ModelConfig, align_panels,
                   apply_scaling, build_excess_panel, scale_covariates)
from .diagnostics import (cluster_events, event_sync, ks_exponential, qq_data, residual_transform,
                          standard_errors)
from .errors import DataError, FembvError, NumericalError
from .io import (FORMAT_VERSION, _csv_text, atomic_write, config_from_doc, fit_document, fmt, kinds_for,
                 paths_for_panel, read_covariates_csv, read_excess_csv, read_fit_json, read_paths_csv,
                 read_raw_csv, theta_from_json, theta_to_json, write_covariates, write_excess, write_json, write_paths)
from .optimizer import AnnealerSettings, FitResult, fit
from .regression import RegimeParameters, build_design
from .selection import grid_search, record_for
from .synth import CovariateSpec, SynthScenario, default_scenario, gen_panel

logger = logging.getLogger("fembv_gpd")

THREADS_ENV = "FEMBV_GPD_THREADS"

# (type, default) of every setting that may come from a flag or the config file
SETTINGS = {
    "quantile": (float, DEFAULT_QUANTILE),
    "epsilon": (float, DEFAULT_EPSILON),
    "K": (int, 2),
    "C": (int, 10),
    "lambda": (float, 0.0),
    "restarts": (int, 50),
    "seed": (int, 0),
    "tol": (float, 1e-3),
    "max_ao": (int, 1000),
    "annealer_steps": (int, AnnealerSettings.n_steps),
    "patience": (int, AnnealerSettings.patience),
    "global": (str, ""),
    "K_grid": (str, "1,2,3"),
    "C_grid": (str, "10,20"),
    "lambda_grid": (str, "0"),
    "n_boot": (int, 500),
    "level": (float, 0.95),
    "mode": (str, "stationary"),
    "tau_max": (float, math.inf),
    "locations": (int, 5),
    "length": (int, 400),
    "switches": (int, 6),
    "threads": (int, 0),
}


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise DataError(f"{path}:{n}: unknown setting {key!r}")
        out[key] = value
    return out


def _convert(key, text):
    kind = SETTINGS[key][0]
    try:
        return kind(text)
    except ValueError:
        raise DataError(f"setting {key}: cannot parse {text!r}") from None


class Resolved:
    """Flag > config file > default lookup for one invocation."""

    def __init__(self, args):
        self.args = args
        self.file = read_config(args.config) if getattr(args, "config", None) else {}
        self.used = {}

    def __getitem__(self, key):
        flag = getattr(self.args, key, None)
        if flag is not None:
            value = flag
        elif key in self.file:
            value = _convert(key, self.file[key])
        else:
            value = SETTINGS[key][1]
        self.used[key] = value
        return value


def _grid(text, kind, name):
    try:
        vals = [kind(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise DataError(f"--{name}: cannot parse {text!r}") from None
    if not vals:
        raise DataError(f"--{name}: empty grid")
    return vals


def _threads(cfg: Resolved) -> int:
    if cfg.args.threads is not None:
        n = cfg.args.threads
    elif os.environ.get(THREADS_ENV):
        n = _convert("threads", os.environ[THREADS_ENV])
    else:
        n = cfg["threads"] or os.cpu_count() or 1
    if n < 1:
        raise DataError("--threads must be >= 1")
    return n


def _settings(cfg: Resolved) -> AnnealerSettings:
    return AnnealerSettings(n_steps=cfg["annealer_steps"], patience=cfg["patience"])


def _model_config(cfg: Resolved, K=None, C=None, lam=None) -> ModelConfig:
    return ModelConfig(K=cfg["K"] if K is None else K, C=cfg["C"] if C is None else C,
                       lam=cfg["lambda"] if lam is None else lam, restarts=cfg["restarts"],
                       max_ao_iterations=cfg["max_ao"], ao_tolerance=cfg["tol"], seed=cfg["seed"])


def _load_data(args, cfg: Resolved, scaling=None):
    """Excess panel plus covariates aligned to it and scaled on the aligned rows."""
    panel = read_excess_csv(args.excess, Path(args.excess).with_name("thresholds.csv"))
    if not args.covariates:
        return panel, CovariatePanel.empty_like(panel)
    table = read_covariates_csv(args.covariates)
    globals_ = [g for g in cfg["global"].split(",") if g.strip()]
    raw = align_panels(panel, table, kinds_for(table.names, globals_))
    if scaling is None:
        return panel, scale_covariates(raw)
    try:
        constants = [[tuple(scaling[loc][name]) for name in raw.names] for loc in panel.locations]
    except KeyError as exc:
        raise DataError(f"fit has no scaling constants for {exc}") from None
    return panel, apply_scaling(raw, constants)


def cmd_extract(args, cfg):
    series = read_raw_csv(args.raw)
    panel = build_excess_panel(series, cfg["quantile"], cfg["epsilon"])
    return {"raw": args.raw}, write_excess(panel, args.out)


def _fit_outputs(result: FitResult, panel, covs, settings, out: Path):
    rec = record_for(result, panel.n_total)
    write_json(fit_document(result, panel, covs, settings, rec.n, rec.p, rec.aicc), out / "fit.json")
    write_paths(panel, result.paths, out / "paths.csv")
    return [out / "fit.json", out / "paths.csv"]


def cmd_fit(args, cfg):
    panel, covs = _load_data(args, cfg)
    settings = _settings(cfg)
    result = fit(panel, covs, _model_config(cfg), settings, workers=_threads(cfg))
    inputs = {"excess": args.excess, "covariates": args.covariates}
    return inputs, _fit_outputs(result, panel, covs, settings, Path(args.out))


def cmd_select(args, cfg):
    panel, covs = _load_data(args, cfg)
    settings = _settings(cfg)
    Ks = _grid(cfg["K_grid"], int, "K-grid")
    Cs = _grid(cfg["C_grid"], int, "C-grid")
    lams = _grid(cfg["lambda_grid"], float, "lambda-grid")
    table = grid_search(panel, covs, Ks, Cs, lams, _model_config(cfg, K=1, C=0, lam=0.0), settings,
                        workers=_threads(cfg))
    out = Path(args.out)
    rows = [(r.config.K, r.config.C, fmt(r.config.lam), fmt(r.nll), fmt(r.penalized_nll), r.n, r.p,
             fmt(r.aicc), str(r.converged).lower(), r.config.seed) for r in table.records]
    header = ["K", "C", "lambda", "nll", "penalized_nll", "n", "p", "aicc", "converged", "seed"]
    atomic_write(out / "selection.csv", _csv_text(header, rows))
    outputs = [out / "selection.csv"]
    inputs = {"excess": args.excess, "covariates": args.covariates}
    if table.best is None:
        raise NumericalError("every grid cell failed: "
                             + "; ".join(r.error or "non-finite AICc" for r in table.records))
    outputs += _fit_outputs(table.best.result, panel, covs, settings, out / "best")
    return inputs, outputs


def cmd_diagnose(args, cfg):
    doc = read_fit_json(args.fit)
    names = doc["covariates"]["names"]
    globals_ = [n for n, k in zip(names, doc["covariates"]["kinds"]) if k == "global"]
    setattr(args, "global", ",".join(globals_))
    panel, covs = _load_data(args, cfg, scaling=doc["scaling"] if names else None)
    if covs.names != names:
        raise DataError(f"covariates {covs.names} do not match the fit ({names})")
    theta = theta_from_json(doc["regimes"], names)
    paths_file = args.paths or Path(args.fit).with_name("paths.csv")
    paths = paths_for_panel(panel, read_paths_csv(paths_file))
    paths.validate(theta.K, None, panel.lengths)
    result = FitResult(theta, paths, doc["nll"], doc["penalized_nll"], config_from_doc(doc),
                       doc["config"]["seed"], doc["ao_iterations"], doc["restart_index_of_best"],
                       doc["converged"])

    d = build_design(panel, covs)
    labels = paths.flat()
    xi = np.einsum("ij,ij->i", d.X, theta.xi[labels])
    sigma = np.einsum("ij,ij->i", d.X, theta.sigma[labels])
    resid = residual_transform(d.y, xi, sigma)
    qq = qq_data(resid, cfg["n_boot"], cfg["level"], np.random.default_rng(cfg["seed"]))
    ks = ks_exponential(resid)
    report = standard_errors(result, panel, covs)

    out = Path(args.out)
    atomic_write(out / "qq.csv", _csv_text(
        ["theoretical", "empirical", "band_lo", "band_hi"],
        [tuple(map(fmt, row)) for row in zip(qq.theoretical, qq.empirical, qq.band_lo, qq.band_hi)]))
    rows = []
    for reg in report.regimes:
        for i, name in enumerate(report.coefficient_names):
            rows.append((reg.regime, name, "NPD" if reg.not_positive_definite else fmt(reg.se[i])))
    atomic_write(out / "stderr.csv", _csv_text(["regime", "coefficient", "se_or_flag"], rows))
    write_json({"n": int(qq.n), "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
                "qq_inside_fraction": float(np.mean(qq.inside())), "level": cfg["level"],
                "n_boot": cfg["n_boot"]}, out / "diagnostics.json")
    inputs = {"fit": args.fit, "excess": args.excess, "covariates": args.covariates,
              "paths": str(paths_file)}
    return inputs, [out / "qq.csv", out / "stderr.csv", out / "diagnostics.json"]


def _parse_mode(mode):
    if mode == "stationary":
        return None
    if mode.startswith("cluster:"):
        try:
            return int(mode.split(":", 1)[1])
        except ValueError:
            pass
    raise DataError(f"--mode must be 'stationary' or 'cluster:<k>', got {mode!r}")


def cmd_es(args, cfg):
    mode = cfg["mode"]
    k = _parse_mode(mode)
    if args.paths:
        table = read_paths_csv(args.paths)
        locs = list(table)
        times = [table[l][0] for l in locs]
        if k is not None:
            times = cluster_events(times, [table[l][1] for l in locs], k)
        inputs = {"paths": args.paths}
    elif args.excess:
        if k is not None:
            raise DataError("cluster mode needs regime labels: pass --paths")
        panel = read_excess_csv(args.excess)
        locs, times = panel.locations, panel.times
        inputs = {"excess": args.excess}
    else:
        raise DataError("es needs --paths or --excess")
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        es = event_sync(times, cfg["tau_max"], locs, mode)
    out = Path(args.out)
    rows = [(loc, *map(fmt, row)) for loc, row in zip(es.locations, es.values)]
    atomic_write(out / "es.csv", _csv_text(["location", *es.locations], rows))
    return inputs, [out / "es.csv"]


def _scenario_from_json(path, seed, S, T, switches):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    specs = [CovariateSpec(c["name"], c.get("kind", "local"), c.get("generator", "sinusoid"))
             for c in doc.get("covariates", [])]
    theta = theta_from_json(doc["regimes"], [c.name for c in specs])
    return SynthScenario(S, T, theta, switches, specs, seed)


def cmd_simulate(args, cfg):
    seed, S, T, sw = cfg["seed"], cfg["locations"], cfg["length"], cfg["switches"]
    inputs = {}
    if args.scenario:
        scenario = _scenario_from_json(args.scenario, seed, S, T, sw)
        inputs["scenario"] = args.scenario
    elif args.stationary:
        xi, sigma = _grid(args.stationary, float, "stationary")[:2]
        scenario = SynthScenario(S, T, RegimeParameters.offsets([xi], [sigma], 0), 0, [], seed)
    else:
        base = default_scenario(seed, args.noise_covariate)
        scenario = SynthScenario(S, T, base.theta, sw, base.covariates, seed)
    panel, covs, truth = gen_panel(scenario)
    out = Path(args.out)
    outputs = write_excess(panel, out)
    if covs.names:
        write_covariates(panel, covs, out / "covariates.csv")
        outputs.append(out / "covariates.csv")
    write_paths(panel, truth, out / "truth_paths.csv")
    write_json({"format_version": FORMAT_VERSION, "seed": seed,
                "covariates": [c.__dict__ for c in scenario.covariates],
                "regimes": theta_to_json(scenario.theta, covs.names)}, out / "truth.json")
    return inputs, outputs + [out / "truth_paths.csv", out / "truth.json"]


def cmd_replay(args, cfg):
    path = Path(args.manifest)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    man = json.loads(path.read_text(encoding="utf-8"))
    if man.get("command") == "replay":
        raise DataError("refusing to replay a replay manifest")
    prev = os.getcwd()
    os.chdir(man["cwd"])
    try:
        code = main(man["argv"])
    finally:
        os.chdir(prev)
    if code:
        raise (NumericalError if code == 3 else DataError)(f"replayed command exited with {code}")
    return {"manifest": str(path)}, [Path(man["cwd"]) / p for p in man["outputs"]]


COMMANDS = {"extract": cmd_extract, "fit": cmd_fit, "select": cmd_select, "diagnose": cmd_diagnose,
            "es": cmd_es, "simulate": cmd_simulate, "replay": cmd_replay}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fembv-gpd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"fembv-gpd {__version__} (format {FORMAT_VERSION})")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--threads", type=int, help=f"worker processes (env {THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_, out=True):
        p = sub.add_parser(name, parents=[common], help=help_)
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    def data_args(p):
        p.add_argument("--excess", required=True, help="excess CSV (location,time,excess)")
        p.add_argument("--covariates", help="covariate CSV (location,time,<names>)")
        p.add_argument("--global", help="comma-separated names of global covariates")

    def fit_args(p):
        p.add_argument("--restarts", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--tol", type=float, help="AO stopping tolerance")
        p.add_argument("--max-ao", dest="max_ao", type=int, help="AO iteration cap")
        p.add_argument("--annealer-steps", dest="annealer_steps", type=int)
        p.add_argument("--patience", type=int)

    p = cmd("extract", "threshold raw series into excesses")
    p.add_argument("raw", help="raw CSV (location,time,value)")
    p.add_argument("--quantile", type=float)
    p.add_argument("--epsilon", type=float)

    p = cmd("fit", "fit one (K, C, lambda) configuration")
    data_args(p)
    p.add_argument("--K", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--lambda", type=float)
    fit_args(p)

    p = cmd("select", "AICc grid search")
    data_args(p)
    p.add_argument("--K-grid", dest="K_grid")
    p.add_argument("--C-grid", dest="C_grid")
    p.add_argument("--lambda-grid", dest="lambda_grid")
    fit_args(p)

    p = cmd("diagnose", "residual QQ data and standard errors")
    p.add_argument("--fit", required=True, help="fit.json")
    p.add_argument("--paths", help="paths.csv (default: next to fit.json)")
    p.add_argument("--excess", required=True)
    p.add_argument("--covariates")
    p.add_argument("--n-boot", dest="n_boot", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--seed", type=int)

    p = cmd("es", "event-synchronization matrix")
    p.add_argument("--paths")
    p.add_argument("--excess")
    p.add_argument("--mode", help="stationary or cluster:<k>")
    p.add_argument("--tau-max", dest="tau_max", type=float)

    p = cmd("simulate", "draw a synthetic panel with known regimes")
    p.add_argument("--seed", type=int)
    p.add_argument("--locations", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--switches", type=int)
    p.add_argument("--noise-covariate", action="store_true")
    p.add_argument("--scenario", help="JSON with covariates and regimes")
    p.add_argument("--stationary", metavar="XI,SIGMA", help="single regime, no covariates")

    p = cmd("replay", "re-run the command recorded in a manifest", out=False)
    p.add_argument("manifest")
    return parser


def _write_manifest(args, argv, cfg, inputs, outputs, wall):
    out = Path(args.out)
    rel = [os.path.relpath(p, os.getcwd()) for p in outputs]
    man = {
        "command": args.command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "inputs": {k: (None if v is None else str(v)) for k, v in inputs.items()},
        "config": {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                   for k, v in sorted(cfg.used.items())},
        "seed": cfg.used.get("seed"),
        "version": __version__,
        "format_version": FORMAT_VERSION,
        "wall_time_s": wall,
        "outputs": rel,
    }
    write_json(man, out / "manifest.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = Resolved(args)
        inputs, outputs = COMMANDS[args.command](args, cfg)
        if args.command != "replay":
            _write_manifest(args, argv, cfg, inputs, outputs, time.perf_counter() - start)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FembvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
