"""Experiment configuration, runner and command-line interface.

Configs are TOML documents; the grammar is documented in ``README.md`` and
the bundled examples live in ``sosvi/configs``.  Outputs per experiment:

``trace_<scheme>_seed<seed>.csv``
    iteration, elbo_estimate, grad_norm, kl_exact, step_norm, wallclock_ms,
    then the scheme diagnostics in first-seen order.
``summary.csv``
    scheme, seed, iterations_to_threshold, final_elbo, total_wallclock_ms,
    final_kl, stopped_by, status.
``manifest.json``
    the resolved configuration, per-run C0 and damping history.

Exit codes: 0 success, 1 configuration error, 2 runtime abort, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from sosvi import __version__
from sosvi.estimators import EstimatorConfig
from sosvi.family import gaussian_family
from sosvi.models import (
    UNIT_ENTROPY_NOISE_VAR,
    Dataset,
    LogJointModel,
    bayes_linreg,
    bayes_logreg,
    conjugate_gaussian,
    synthetic_gaussian_data,
    synthetic_linreg_data,
    synthetic_logreg_data,
)
from sosvi.optimizer import (
    SCHEMES,
    ConvergenceCriterion,
    MonteCarloObjective,
    RunAborted,
    RunResult,
    StepControl,
    TraceRecord,
    run,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2
EXIT_CHECK = 3

TRACE_COLUMNS = ("iteration", "elbo_estimate", "grad_norm", "kl_exact", "step_norm", "wallclock_ms")
SUMMARY_COLUMNS = (
    "scheme",
    "seed",
    "iterations_to_threshold",
    "final_elbo",
    "total_wallclock_ms",
    "final_kl",
    "stopped_by",
    "status",
)

CONFIG_DIR = Path(__file__).parent / "configs"

_MODEL_KEYS = {
    "conjugate_gaussian": {"prior_mean", "prior_var", "noise_var"},
    "bayes_linreg": {"prior_precision", "noise_var"},
    "bayes_logreg": {"prior_precision"},
}
_SYNTHETIC_KEYS = {
    "conjugate_gaussian": {"n", "true_mean", "seed"},
    "bayes_linreg": {"n", "d", "seed", "weight_scale", "orthogonal"},
    "bayes_logreg": {"n", "d", "seed", "weight_scale"},
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ModelSpec:
    name: str
    params: dict = field(default_factory=dict)
    dataset: Optional[Path] = None
    synthetic: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    model: ModelSpec
    schemes: list[str]
    estimator: EstimatorConfig
    step: StepControl
    step_overrides: dict[str, StepControl]
    criterion: ConvergenceCriterion
    seeds: list[int]
    output: Path
    elbo_samples: Optional[int] = None
    kl_threshold: float = 1e-2
    grad_threshold: float = 1e-3
    record_wallclock: bool = True
    init_mean: Any = 0.0
    init_log_scale: Any = 0.0

    def control_for(self, scheme: str) -> StepControl:
        return self.step_overrides.get(scheme, self.step)


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _take(table: dict, allowed: set, where: str) -> dict:
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    return dict(table)


def _dataclass_from(cls, table: dict, where: str):
    names = {f.name for f in fields(cls)}
    kwargs = _take(table, names, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def _noise_var(value, where):
    if value == "unit-entropy":
        return UNIT_ENTROPY_NOISE_VAR
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"{where}: expected a number or \"unit-entropy\", got {value!r}")


def parse_config(doc: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    top = _take(
        doc,
        {"scheme", "schemes", "seeds", "model", "estimator", "step", "convergence", "output", "init", "threshold"},
        "config",
    )
    if "scheme" in top and "schemes" in top:
        raise ConfigError("config: give either scheme or schemes, not both")
    schemes = top.get("schemes", [top["scheme"]] if "scheme" in top else None)
    if not schemes:
        raise ConfigError("config.scheme: missing")
    if isinstance(schemes, str):
        schemes = [schemes]
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"config.scheme: unknown scheme {s!r}; expected one of {', '.join(SCHEMES)}")

    seeds = top.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("config.seeds: need a non-empty list of non-negative integers")

    if "model" not in top:
        raise ConfigError("config.model: missing")
    mt = _take(top["model"], {"name", "params", "dataset", "synthetic"}, "model")
    name = mt.get("name")
    if name not in _MODEL_KEYS:
        raise ConfigError(f"model.name: unknown model {name!r}; expected one of {', '.join(_MODEL_KEYS)}")
    mparams = _take(mt.get("params", {}), _MODEL_KEYS[name], "model.params")
    if "noise_var" in mparams:
        mparams["noise_var"] = _noise_var(mparams["noise_var"], "model.params.noise_var")
    synthetic = _take(mt.get("synthetic", {}), _SYNTHETIC_KEYS[name], "model.synthetic")
    dataset = mt.get("dataset")
    if dataset is not None:
        if synthetic:
            raise ConfigError("model: give either dataset or synthetic, not both")
        dataset = Path(dataset)
        if not dataset.is_absolute():
            dataset = base_dir / dataset
    elif not synthetic:
        raise ConfigError("model: need a dataset path or a [model.synthetic] table")
    model = ModelSpec(name, mparams, dataset, synthetic)

    est_table = dict(top.get("estimator", {}))
    elbo_samples = est_table.pop("elbo_samples", None)
    estimator = _dataclass_from(EstimatorConfig, est_table, "estimator")
    if elbo_samples is not None and (not isinstance(elbo_samples, int) or elbo_samples < 1):
        raise ConfigError("estimator.elbo_samples: must be a positive integer")

    step_table = dict(top.get("step", {}))
    per_scheme = {k: step_table.pop(k) for k in list(step_table) if k in SCHEMES}
    step = _dataclass_from(StepControl, step_table, "step")
    overrides = {}
    for s, tbl in per_scheme.items():
        merged = {**asdict(step), **_take(tbl, {f.name for f in fields(StepControl)}, f"step.{s}")}
        overrides[s] = _dataclass_from(StepControl, merged, f"step.{s}")
    for s in schemes:
        if s == "first-order" and overrides.get(s, step).step_size is None:
            raise ConfigError("step.step_size: first-order needs an explicit step size (set step.first-order.step_size)")

    criterion = _dataclass_from(ConvergenceCriterion, top.get("convergence", {}), "convergence")

    out = _take(top.get("output", {}), {"dir", "wallclock"}, "output")
    out_dir = Path(out.get("dir", "results"))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    wallclock = out.get("wallclock", True)
    if not isinstance(wallclock, bool):
        raise ConfigError("output.wallclock: expected true or false")

    thr = _take(top.get("threshold", {}), {"kl", "grad_norm"}, "threshold")
    init = _take(top.get("init", {}), {"mean", "log_scale"}, "init")

    return ExperimentConfig(
        model=model,
        schemes=list(schemes),
        estimator=estimator,
        step=step,
        step_overrides=overrides,
        criterion=criterion,
        seeds=list(seeds),
        output=out_dir,
        elbo_samples=elbo_samples,
        kl_threshold=float(thr.get("kl", 1e-2)),
        grad_threshold=float(thr.get("grad_norm", 1e-3)),
        record_wallclock=wallclock,
        init_mean=init.get("mean", 0.0),
        init_log_scale=init.get("log_scale", 0.0),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return parse_config(doc, path.parent)


def build_model(spec: ModelSpec) -> LogJointModel:
    p = spec.params
    try:
        if spec.name == "conjugate_gaussian":
            nv = p.get("noise_var", 1.0)
            if spec.dataset is not None:
                x = Dataset.from_csv(spec.dataset, has_target=False).observations.ravel()
            else:
                s = spec.synthetic
                x = synthetic_gaussian_data(int(s.get("n", 20)), float(s.get("true_mean", 1.0)), nv, int(s.get("seed", 0)))
            return conjugate_gaussian(x, float(p.get("prior_mean", 0.0)), float(p.get("prior_var", 1.0)), nv)
        if spec.name == "bayes_linreg":
            nv = p.get("noise_var", 1.0)
            if spec.dataset is not None:
                ds = Dataset.from_csv(spec.dataset)
            else:
                s = spec.synthetic
                ds = synthetic_linreg_data(
                    int(s.get("n", 50)),
                    int(s.get("d", 5)),
                    nv,
                    int(s.get("seed", 0)),
                    float(s.get("weight_scale", 0.5)),
                    bool(s.get("orthogonal", True)),
                )
            return bayes_linreg(ds.observations, ds.targets, float(p.get("prior_precision", 1.0)), nv)
        if spec.dataset is not None:
            ds = Dataset.from_csv(spec.dataset)
        else:
            s = spec.synthetic
            ds = synthetic_logreg_data(
                int(s.get("n", 100)), int(s.get("d", 3)), int(s.get("seed", 0)), float(s.get("weight_scale", 1.0))
            )
        return bayes_logreg(ds.observations, ds.targets, float(p.get("prior_precision", 1.0)))
    except OSError as err:
        raise ConfigError(f"model.dataset: {err}") from None
    except ValueError as err:
        raise ConfigError(f"model: {err}") from None


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    """17 significant digits, empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_trace(path: Path, trace: list[TraceRecord], wallclock: bool = True) -> None:
    extra: list[str] = []
    for rec in trace:
        for k in rec.scheme_specific:
            if k not in extra:
                extra.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(TRACE_COLUMNS) + extra)
        for rec in trace:
            w.writerow(
                [
                    fmt(rec.iteration),
                    fmt(rec.elbo_estimate),
                    fmt(rec.grad_norm),
                    fmt(rec.kl_exact),
                    fmt(rec.step_norm),
                    fmt(rec.wallclock_ms if wallclock else 0.0),
                ]
                + [fmt(rec.scheme_specific.get(k)) for k in extra]
            )


def read_trace(path) -> list[dict]:
    """Parse a trace CSV back into dicts of floats (``None`` for empty fields)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]


def threshold_iteration(trace: list[TraceRecord], kl_threshold: float, grad_threshold: float, window: int) -> Optional[int]:
    """First iteration meeting the KL threshold, or, without an oracle, the
    moving-average gradient-norm threshold."""
    if trace and trace[0].kl_exact is not None:
        for rec in trace:
            if rec.kl_exact is not None and rec.kl_exact <= kl_threshold:
                return rec.iteration
        return None
    norms = [r.grad_norm for r in trace]
    for i in range(len(norms)):
        lo = max(0, i + 1 - window)
        if i + 1 >= window and sum(norms[lo:i + 1]) / (i + 1 - lo) <= grad_threshold:
            return trace[i].iteration
    return None


@dataclass
class RunOutcome:
    scheme: str
    seed: int
    trace: list[TraceRecord]
    params: np.ndarray
    c0: Optional[float]
    stopped_by: str
    status: str
    error: str = ""


def run_one(cfg: ExperimentConfig, model: LogJointModel, scheme: str, seed: int) -> RunOutcome:
    family = gaussian_family(model.latent_dim)
    objective = MonteCarloObjective(model, family, replace(cfg.estimator, seed=seed))
    params0 = family.pack(cfg.init_mean, cfg.init_log_scale)
    try:
        res: RunResult = run(
            scheme, objective, params0, cfg.control_for(scheme), cfg.criterion, seed=seed, elbo_samples=cfg.elbo_samples
        )
    except RunAborted as err:
        return RunOutcome(scheme, seed, err.trace, err.params, None, "aborted", "aborted", str(err.cause))
    return RunOutcome(scheme, seed, res.trace, res.params, res.c0, res.stopped_by, "ok")


def run_experiment(cfg: ExperimentConfig, log=print) -> tuple[int, list[RunOutcome]]:
    model = build_model(cfg.model)
    cfg.output.mkdir(parents=True, exist_ok=True)
    outcomes = []
    for scheme in cfg.schemes:
        for seed in cfg.seeds:
            out = run_one(cfg, model, scheme, seed)
            write_trace(cfg.output / f"trace_{scheme}_seed{seed}.csv", out.trace, cfg.record_wallclock)
            if out.status != "ok":
                log(f"error: {scheme} seed {seed} aborted: {out.error}")
            outcomes.append(out)

    with open(cfg.output / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for o in outcomes:
            final = o.trace[-1] if o.trace else None
            total_ms = sum(r.wallclock_ms for r in o.trace) if cfg.record_wallclock else 0.0
            w.writerow(
                [
                    o.scheme,
                    o.seed,
                    fmt(threshold_iteration(o.trace, cfg.kl_threshold, cfg.grad_threshold, cfg.criterion.window)),
                    fmt(final.elbo_estimate if final else None),
                    fmt(total_ms),
                    fmt(final.kl_exact if final else None),
                    o.stopped_by,
                    o.status,
                ]
            )

    manifest = {
        "version": __version__,
        "model": {
            "name": cfg.model.name,
            "params": cfg.model.params,
            "dataset": str(cfg.model.dataset) if cfg.model.dataset else None,
            "synthetic": cfg.model.synthetic,
            "latent_dim": model.latent_dim,
        },
        "schemes": cfg.schemes,
        "seeds": cfg.seeds,
        "estimator": asdict(cfg.estimator),
        "elbo_samples": cfg.elbo_samples,
        "step": {s: asdict(cfg.control_for(s)) for s in cfg.schemes},
        "convergence": asdict(cfg.criterion),
        "threshold": {"kl": cfg.kl_threshold, "grad_norm": cfg.grad_threshold},
        "runs": [
            {
                "scheme": o.scheme,
                "seed": o.seed,
                "status": o.status,
                "error": o.error,
                "iterations": len(o.trace),
                "stopped_by": o.stopped_by,
                "c0": o.c0,
                "damping_history": [r.scheme_specific.get("damping", 0.0) for r in o.trace],
                "final_params": [float(x) for x in o.params],
            }
            for o in outcomes
        ],
    }
    with open(cfg.output / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    aborted = any(o.status != "ok" for o in outcomes)
    return (EXIT_ABORT if aborted else EXIT_OK), outcomes


def _json_default(x):
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and math.isnan(x):
        return None
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.scheme:
        if args.scheme not in SCHEMES:
            raise ConfigError(f"--scheme: unknown scheme {args.scheme!r}; expected one of {', '.join(SCHEMES)}")
        cfg.schemes = [args.scheme]
        if args.scheme == "first-order" and cfg.control_for(args.scheme).step_size is None:
            raise ConfigError("step.step_size: first-order needs an explicit step size")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be non-negative")
        cfg.seeds = [args.seed]
    if args.samples is not None:
        try:
            cfg.estimator = replace(cfg.estimator, grad_samples=args.samples, hess_samples=args.samples)
        except ValueError as err:
            raise ConfigError(f"--samples: {err}") from None
    if args.max_iters is not None:
        try:
            cfg.criterion = replace(cfg.criterion, max_iterations=args.max_iters)
        except ValueError as err:
            raise ConfigError(f"--max-iters: {err}") from None
    if args.out_dir:
        cfg.output = Path(args.out_dir)
    return cfg


def _cmd_run(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        code, outcomes = run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    ok = sum(o.status == "ok" for o in outcomes)
    print(f"{ok}/{len(outcomes)} runs completed; results in {cfg.output}")
    return code


def _cmd_check(args) -> int:
    from sosvi.checks import run_checks

    results = run_checks()
    width = max(len(r.name) for r in results)
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}"
        if args.verbose:
            line += f"  margin={r.margin:.3g}  {r.detail}  ({r.seconds:.2f}s)"
        elif not r.passed:
            line += f"  {r.detail}"
        print(line.rstrip())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sosvi", description="Second-order stochastic variational inference.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a TOML config")
    p_run.add_argument("--config", required=True, help="path to the experiment config")
    p_run.add_argument("--scheme", help="run only this scheme")
    p_run.add_argument("--seed", type=int, help="run only this seed")
    p_run.add_argument("--samples", type=int, help="set both gradient and Hessian sample counts")
    p_run.add_argument("--max-iters", type=int, help="iteration cap")
    p_run.add_argument("--out-dir", help="output directory")
    p_run.set_defaults(func=_cmd_run)
    p_check = sub.add_parser("check", help="run the invariant suite")
    p_check.add_argument("--verbose", "-v", action="store_true", help="print per-check margins")
    p_check.set_defaults(func=_cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
