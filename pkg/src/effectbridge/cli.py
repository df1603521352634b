"""Command-line front end: estimate, simulate, sensitivity, quadratic-compare.

Run settings come from a flat ``key = value`` config file overridden by
flags (flags win). Every artifact embeds the resolved determinism-relevant
settings: JSON outputs carry a ``config`` object, CSV outputs lead with
``# key = value`` comment lines. Feeding an embedded block back as a config
file reproduces the artifact byte for byte; ``out`` and ``workers`` are
deliberately excluded since neither affects the numbers.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .data import (CsvSchema, EstimandSpec, load_combined_csv, split_folds)
from .errors import ConfigError, DataError, NumericalError
from .estimators import (ate_contrast, dr_estimate, influence_values,
                         plugin_contrast, plugin_estimate)
from .learners import LearnerSpec
from .nuisance import NUISANCE_NAMES, cross_fit_nuisances, default_nuisance_specs
from .sensitivity import breakeven_deltas, interval_from_point, sensitivity_interval
from .simulation import quadratic_compare_study, rmse_study
from .survey import survey_transport_estimate
from . import plots

DEFAULT_ALPHA_GRID = (0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)
EMBED_EXCLUDED = ("out", "workers", "config")

_KIND_SHORT = {"ge": "generalization", "tr": "transportation",
               "generalization": "generalization", "transportation": "transportation"}


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file; blank lines and '#' comments ignored."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {line_no}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def extract_config(path) -> dict:
    """Recover the resolved-config block embedded in an output artifact."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            return {k: str(v) for k, v in json.load(fh)["config"].items()}
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.startswith("#"):
                break
            line = raw[1:].strip()
            if "=" in line:
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    return out


def _parse_learner(text: str) -> LearnerSpec:
    text = text.strip()
    if text.startswith("{"):
        raw = json.loads(text)
        return LearnerSpec(raw["family"], **raw.get("params", {}))
    return LearnerSpec(text)


def _format_learner(spec: LearnerSpec) -> str:
    params = {}
    if spec.family == "ridge":
        params["lam"] = spec.lam
    elif spec.family == "knn":
        params["k_nn"] = spec.k_nn
    elif spec.family == "logistic":
        params["max_iter"] = spec.max_iter
        params["tol"] = spec.tol
    return json.dumps({"family": spec.family, "params": params}, sort_keys=True)


def _parse_int_list(text: str) -> list:
    return [int(tok) for tok in str(text).split(",") if tok.strip()]


def _parse_float_list(text: str) -> list:
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


class _Artifacts:
    """Collects written paths so a failed run can remove partial outputs."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.written = []

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.written.append(p)
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return p

    def write_csv(self, name: str, config_lines: list, header: list, rows: list) -> Path:
        p = self.path(name)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            for line in config_lines:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        return p

    def cleanup(self) -> None:
        for p in self.written:
            try:
                p.unlink()
            except OSError:
                pass


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _embed_lines(cfg: dict) -> list:
    return [f"{key} = {_fmt(val)}" for key, val in sorted(cfg.items())
            if key not in EMBED_EXCLUDED and val is not None]


def _embed_dict(cfg: dict) -> dict:
    return {key: _fmt(val) for key, val in sorted(cfg.items())
            if key not in EMBED_EXCLUDED and val is not None}


def _resolve(subcommand: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicit flags."""
    cfg = dict(_DEFAULTS[subcommand])
    file_values = parse_config_file(args.config) if args.config else {}
    for key, value in file_values.items():
        if key == "subcommand":
            continue
        if key in NUISANCE_NAMES:
            cfg[key] = value
        elif key in cfg or key in _OPTIONAL_KEYS.get(subcommand, ()):
            cfg[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r} for subcommand {subcommand}")
    for key in list(cfg) + list(_OPTIONAL_KEYS.get(subcommand, ())):
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            cfg[key] = flag
    for key in NUISANCE_NAMES:
        if key in cfg and isinstance(cfg[key], str):
            cfg[key] = _format_learner(_parse_learner(cfg[key]))
    # normalize types
    casts = _CASTS[subcommand]
    for key, cast in casts.items():
        if cfg.get(key) is not None:
            cfg[key] = cast(cfg[key])
    if "kind" in cfg:
        kind = _KIND_SHORT.get(str(cfg["kind"]).lower())
        if kind is None:
            raise ConfigError(f"kind must be 'ge' or 'tr', got {cfg['kind']!r}")
        cfg["kind"] = kind
    cfg["subcommand"] = subcommand
    return cfg


def _parse_arm(value):
    if value in (None, "", "all"):
        return None
    text = str(value).strip()
    if text in ("0", "1"):
        return int(text)
    if text == "contrast":
        return "contrast"
    raise ConfigError(f"arm must be 0, 1 or 'contrast', got {value!r}")


_DEFAULTS = {
    "estimate": {"source": None, "target": None, "schema": None,
                 "kind": "transportation", "arm": None, "eps": 0.01, "folds": 5,
                 "seed": 0, "tau_method": "nested", "dump_influence": False,
                 "out": "."},
    "simulate": {"n_grid": [5000], "alpha_grid": list(DEFAULT_ALPHA_GRID),
                 "reps": 1000, "seed": 0, "eps": 0.01,
                 "estimators": ["plugin", "dr"], "workers": 0, "out": "."},
    "sensitivity": {"point": None, "kind": "transportation", "arm": "contrast",
                    "delta1": 0.0, "delta2": 0.0, "p_s0": None, "source": None,
                    "target": None, "schema": None, "eps": 0.01, "folds": 5,
                    "seed": 0, "out": "."},
    "quadratic-compare": {"n_grid": [1000], "k_grid": [32],
                          "alpha_grid": [0.1, 0.2, 0.3, 0.4, 0.5], "reps": 200,
                          "seed": 0, "eps": 0.01, "workers": 0, "out": "."},
}

_OPTIONAL_KEYS = {"estimate": tuple(NUISANCE_NAMES), "sensitivity": tuple(NUISANCE_NAMES)}

_CASTS = {
    "estimate": {"eps": float, "folds": int, "seed": int,
                 "dump_influence": _parse_bool, "arm": _parse_arm},
    "simulate": {"n_grid": _parse_int_list, "alpha_grid": _parse_float_list,
                 "reps": int, "seed": int, "eps": float, "workers": int,
                 "estimators": lambda v: [t.strip() for t in str(v).split(",") if t.strip()]
                 if isinstance(v, str) else list(v)},
    "sensitivity": {"point": float, "delta1": float, "delta2": float,
                    "p_s0": float, "eps": float, "folds": int, "seed": int,
                    "arm": _parse_arm},
    "quadratic-compare": {"n_grid": _parse_int_list, "k_grid": _parse_int_list,
                          "alpha_grid": _parse_float_list, "reps": int,
                          "seed": int, "eps": float, "workers": int},
}


def _learner_specs(cfg: dict) -> dict:
    specs = default_nuisance_specs()
    for name in NUISANCE_NAMES:
        if cfg.get(name):
            specs[name] = _parse_learner(cfg[name])
    return specs


def _load_sample(cfg: dict):
    for key in ("source", "target", "schema"):
        if not cfg.get(key):
            raise ConfigError(f"missing required setting '{key}'")
    schema = CsvSchema.from_json(cfg["schema"])
    return load_combined_csv(cfg["source"], cfg["target"], schema)


def _fit_sample(cfg: dict, sample):
    folds = split_folds(sample.n, int(cfg["folds"]), int(cfg["seed"]))
    return cross_fit_nuisances(sample, _learner_specs(cfg), folds, float(cfg["eps"]),
                               seed=int(cfg["seed"]),
                               tau_method=cfg.get("tau_method", "nested"))


def run_estimate(cfg: dict, art: _Artifacts) -> None:
    sample = _load_sample(cfg)
    fit = _fit_sample(cfg, sample)
    kind = cfg["kind"]
    records = []
    for arm in (0, 1):
        records.append(plugin_estimate(sample, fit, arm, kind).to_dict())
        records.append(dr_estimate(sample, fit, arm, kind).to_dict())
    records.append(plugin_contrast(sample, fit, kind).to_dict())
    records.append(ate_contrast(sample, fit, kind).to_dict())
    if kind == "transportation" and sample.has_survey:
        for arm in (0, 1, "contrast"):
            records.append(survey_transport_estimate(sample, fit, arm).to_dict())
    if cfg.get("arm") is not None:  # optional filter to a single estimand
        records = [r for r in records if r["arm"] == cfg["arm"]]
    art.write_json("estimates.json", {"config": _embed_dict(cfg), "estimates": records})
    plots.save_estimates_figure(records, art.path("estimates.png"))
    if cfg["dump_influence"]:
        for arm in (0, 1):
            infl = influence_values(sample, fit, arm, kind)
            rows = [(i, repr(float(v))) for i, v in enumerate(infl.values)]
            art.write_csv(f"influence_arm{arm}.csv", _embed_lines(cfg),
                          ["record_id", "value"], rows)


def run_simulate(cfg: dict, art: _Artifacts) -> None:
    workers = cfg["workers"] or os.cpu_count() or 1
    table = rmse_study(cfg["n_grid"], cfg["alpha_grid"], cfg["reps"], cfg["seed"],
                       estimators=cfg["estimators"], eps=cfg["eps"], workers=workers)
    lines = _embed_lines(cfg)
    rows = [(r.estimator, r.n, repr(r.alpha), repr(r.rmse), repr(r.bias),
             repr(r.mc_se), r.replications) for r in table.rows]
    art.write_csv("rmse.csv", lines,
                  ["estimator", "n", "alpha", "rmse", "bias", "mc_se", "reps"], rows)
    for n in cfg["n_grid"]:
        panel = [r for r in table.rows if r.n == n]
        plot_rows = [(repr(r.alpha), repr(r.rmse), r.estimator) for r in panel]
        art.write_csv(f"plot_n{n}.csv", lines, ["x", "y", "series"], plot_rows)
        plots.save_rmse_figure(panel, n, art.path(f"rmse_n{n}.png"))


def run_sensitivity(cfg: dict, art: _Artifacts) -> None:
    kind = cfg["kind"]
    arm = cfg.get("arm") if cfg.get("arm") is not None else "contrast"
    spec = EstimandSpec(kind, arm)
    have_data = bool(cfg.get("source"))
    if arm != "contrast" and not have_data:
        raise ConfigError(
            "single-arm bounds need data to estimate the off-arm treatment "
            "probability; supply --source/--target/--schema or use --arm contrast")
    if have_data:
        sample = _load_sample(cfg)
        fit = _fit_sample(cfg, sample)
        p_s0 = sample.n2 / sample.n
        interval = sensitivity_interval(sample, fit, cfg["delta1"], cfg["delta2"],
                                        spec, seed=int(cfg["seed"]))
        point = interval.center
        cfg = dict(cfg)
        cfg["point"] = point
        cfg["p_s0"] = p_s0
    else:
        if cfg.get("point") is None:
            raise ConfigError("supply either --point or input data files")
        point = float(cfg["point"])
        p_s0 = cfg.get("p_s0")
        if kind == "generalization" and p_s0 is None:
            raise ConfigError("generalization sensitivity needs p_s0 (target share)")
        interval = interval_from_point(point, cfg["delta1"], cfg["delta2"],
                                       spec, p_s0=p_s0)

    # break-even values and curve are defined for the treated-minus-control
    # contrast, whose half-width needs no extra nuisance
    breakeven = None
    curve_rows = []
    if arm == "contrast":
        breakeven = {"delta1_only": breakeven_deltas(point, "delta1_only", kind, p_s0),
                     "delta2_only": breakeven_deltas(point, "delta2_only", kind, p_s0)}
        curve = breakeven_deltas(point, "curve", kind, p_s0)
        curve_rows = [tuple(repr(float(v)) for v in row) for row in curve]
    art.write_json("sensitivity.json", {
        "config": _embed_dict(cfg),
        "interval": interval.to_dict(),
        "breakeven": breakeven})
    art.write_csv("breakeven_curve.csv", _embed_lines(cfg),
                  ["delta1", "delta2", "lower", "upper"], curve_rows)
    scale = 1.0 if kind == "transportation" else float(p_s0)
    plots.save_sensitivity_figure(point, scale, art.path("sensitivity.png"))


def run_quadratic_compare(cfg: dict, art: _Artifacts) -> None:
    workers = cfg["workers"] or os.cpu_count() or 1
    rows = quadratic_compare_study(cfg["n_grid"], cfg["k_grid"], cfg["alpha_grid"],
                                   cfg["reps"], cfg["seed"], eps=cfg["eps"],
                                   workers=workers)
    csv_rows = [(r.method, r.n, r.k, repr(r.alpha), repr(r.bias), repr(r.rmse),
                 repr(r.var)) for r in rows]
    art.write_csv("quadratic_compare.csv", _embed_lines(cfg),
                  ["method", "n", "k", "alpha", "bias", "rmse", "var"], csv_rows)
    plots.save_compare_figure(rows, art.path("quadratic_compare.png"))


_RUNNERS = {"estimate": run_estimate, "simulate": run_simulate,
            "sensitivity": run_sensitivity, "quadratic-compare": run_quadratic_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="effectbridge",
        description="Estimate treatment effects in a target population")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value run-config file")
        p.add_argument("--out", help="output directory (default '.')")
        p.add_argument("--seed", type=int)
        p.add_argument("--eps", type=float, help="positivity clip (default 0.01)")

    p_est = sub.add_parser("estimate", help="plug-in and doubly robust estimates from CSVs")
    common(p_est)
    p_est.add_argument("--source", help="source-population CSV")
    p_est.add_argument("--target", help="target-population CSV")
    p_est.add_argument("--schema", help="JSON column schema")
    p_est.add_argument("--kind", choices=["ge", "tr"])
    p_est.add_argument("--arm", choices=["0", "1", "contrast"],
                       help="restrict the report to one estimand")
    p_est.add_argument("--folds", type=int, help="cross-fitting folds (default 5)")
    p_est.add_argument("--tau-method", choices=["nested", "pseudo"], dest="tau_method")
    p_est.add_argument("--dump-influence", action="store_const", const=True,
                       dest="dump_influence")

    p_sim = sub.add_parser("simulate", help="replicated RMSE study on the synthetic design")
    common(p_sim)
    p_sim.add_argument("--n-grid", dest="n_grid")
    p_sim.add_argument("--alpha-grid", dest="alpha_grid")
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--estimators")
    p_sim.add_argument("--workers", type=int)

    p_sen = sub.add_parser("sensitivity", help="bound intervals and break-even curve")
    common(p_sen)
    p_sen.add_argument("--point", type=float, help="precomputed contrast estimate")
    p_sen.add_argument("--kind", choices=["ge", "tr"])
    p_sen.add_argument("--arm", choices=["0", "1", "contrast"],
                       help="estimand arm (single-arm bounds need input data)")
    p_sen.add_argument("--delta1", type=float)
    p_sen.add_argument("--delta2", type=float)
    p_sen.add_argument("--p-s0", type=float, dest="p_s0")
    p_sen.add_argument("--source")
    p_sen.add_argument("--target")
    p_sen.add_argument("--schema")
    p_sen.add_argument("--folds", type=int)

    p_qc = sub.add_parser("quadratic-compare",
                          help="second-order vs doubly robust comparison (V = X)")
    common(p_qc)
    p_qc.add_argument("--n-grid", dest="n_grid")
    p_qc.add_argument("--k-grid", dest="k_grid")
    p_qc.add_argument("--k-basis", dest="k_grid", help="alias for --k-grid")
    p_qc.add_argument("--alpha-grid", dest="alpha_grid")
    p_qc.add_argument("--reps", type=int)
    p_qc.add_argument("--workers", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    art = None
    try:
        cfg = _resolve(args.subcommand, args)
        art = _Artifacts(Path(cfg.get("out") or "."))
        _RUNNERS[args.subcommand](cfg, art)
        return 0
    except (ConfigError, ValueError) as exc:
        code, err = 2, exc
    except DataError as exc:
        code, err = 3, exc
    except NumericalError as exc:
        code, err = 4, exc
    if art is not None:
        art.cleanup()
    sys.stderr.write(json.dumps(
        {"error": type(err).__name__, "message": str(err), "exit_code": code}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
