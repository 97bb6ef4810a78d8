"""Command-line experiment runner.

Every command reads one JSON configuration (validated against the bundled
``config.schema.json``), runs seeded, and writes into a fresh timestamped
directory under ``--out``::

    atomprior fit --config fig1.json --seed 3 --out runs

Exit codes: 0 success, 1 configuration error, 2 numerical non-convergence,
3 internal error.  Column orders of the emitted tables are listed in
``docs/formats.md``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import time
import traceback
import zlib
from datetime import datetime, timezone
from importlib import resources

import jsonschema
import numpy as np

from . import __version__
from . import infotheory as it
from . import mcmc, optimizer
from .models import fisher_edge_lengths, model_from_dict, model_to_dict, predict, with_dimension
from .priors import AtomicPrior, jeffreys_prior, lognormal_prior

log = logging.getLogger("atomprior")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_INTERNAL = 0, 1, 2, 3
COMMANDS = ("fit", "score", "bias", "posterior", "sample", "sweep")
SWEEP_COLUMNS = ("value", "mi_lower_bits", "mi_upper_bits", "B_lower_bits", "B_upper_bits", "d_eff")


class ConfigError(Exception):
    """Invalid or inconsistent configuration; maps to exit code 1."""


def load_schema():
    return json.loads(resources.files("atomprior").joinpath("config.schema.json").read_text())


def load_config(path):
    """Parse and validate a configuration file.

    Errors name the offending line (syntax) or field path (schema).
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            lines.append(f"{path}: field {where}: {err.message}")
        raise ConfigError("\n".join(lines))
    doc["_base"] = os.path.dirname(os.path.abspath(path))
    return doc


def task_for(command, cfg):
    task = cfg.get("task")
    if command == "sweep":
        if task not in ("sweep_sigma", "sweep_dim"):
            raise ConfigError("field task: the sweep command needs task sweep_sigma or sweep_dim")
        return task
    if task is not None and task != command:
        raise ConfigError(f"field task: config is for {task!r}, not {command!r}")
    return command


def build_model(cfg):
    try:
        return model_from_dict(cfg["model"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"field model: {exc}") from None


def build_prior(cfg, model, required=True):
    spec = cfg.get("prior")
    if spec is None:
        if required:
            raise ConfigError("field prior: this task needs a prior")
        return None
    kind = spec["kind"]
    if kind == "jeffreys":
        return jeffreys_prior(model)
    if kind == "lognormal":
        return lognormal_prior(model, spec.get("mean", 0.0), spec.get("width", 1.0))
    if "file" in spec:
        path = os.path.join(cfg["_base"], spec["file"])
        try:
            with open(path) as fh:
                prior = AtomicPrior.from_json(fh.read(), model)
        except OSError as exc:
            raise ConfigError(f"field prior/file: cannot read {path}: {exc.strerror}") from None
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"field prior/file: {exc}") from None
    elif "atoms" in spec:
        try:
            prior = AtomicPrior(spec["atoms"], spec.get("weights"))
        except ValueError as exc:
            raise ConfigError(f"field prior/atoms: {exc}") from None
    else:
        if required:
            raise ConfigError("field prior: an atomic prior needs file or atoms")
        return None
    if prior.d != model.d:
        raise ConfigError(f"field prior: atoms have d={prior.d}, model has d={model.d}")
    return prior


def build_schedule(params):
    sch = params.get("schedule")
    if sch is None:
        return None
    return mcmc.BennettSchedule.geometric(n=sch.get("rungs", 30), alpha_min=sch.get("alpha_min", 1e-4),
                                          samples_per_rung=sch.get("samples_per_rung", 400),
                                          burn_in=sch.get("burn_in", 200))


def _bits(v):
    return float(it.to_bits(v))


class Run:
    """One command execution: output directory, seeds, warnings, manifest."""

    def __init__(self, command, cfg, args):
        self.command = command
        self.cfg = cfg
        self.args = args
        self.seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        self.seeds = {"root": self.seed}
        self.warnings = []
        self.status = "ok"
        self.files = []
        self.summary = {}
        out = args.out or cfg.get("output") or "runs"
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        base = os.path.join(out, f"{stamp}-{command}")
        path, k = base, 0
        os.makedirs(out, exist_ok=True)
        while True:
            try:
                os.mkdir(path)
                break
            except FileExistsError:
                k += 1
                path = f"{base}-{k}"
        self.dir = path
        self.start = time.time()

    def child_seed(self, name):
        """Deterministic per-stage seed derived from the root seed."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        value = int(ss.generate_state(1, dtype=np.uint32)[0])
        self.seeds[name] = value
        return value

    def warn(self, msg):
        log.warning(msg)
        self.warnings.append(msg)

    def _atomic_write(self, name, text):
        path = os.path.join(self.dir, name)
        tmp = path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
        self.files.append(name)
        return path

    def write_json(self, name, doc):
        return self._atomic_write(name, json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def write_table(self, stem, header, rows):
        """Write rows as CSV or JSON records according to ``--format``."""
        if self.args.format == "json":
            recs = [dict(zip(header, r)) for r in rows]
            return self.write_json(stem + ".json", recs)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([_fmt(v) for v in r])
        return self._atomic_write(stem + ".csv", buf.getvalue())

    def finish(self, model=None):
        cfg = {k: v for k, v in self.cfg.items() if not k.startswith("_")}
        manifest = {
            "command": self.command,
            "config": cfg,
            "model": model_to_dict(model) if model is not None else None,
            "version": __version__,
            "wall_time_s": round(time.time() - self.start, 3),
            "seeds": self.seeds,
            "workers": self.args.workers,
            "status": self.status,
            "warnings": self.warnings,
            "files": sorted(self.files),
            "summary": self.summary,
        }
        self.write_json("manifest.json", manifest)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ----------------------------------------------------------------------------
# commands

def _optimizer_config(params, seed):
    kw = {"seed": seed}
    if "K" in params:
        kw["K_init"] = params["K"]
    if "max_iters" in params:
        kw["max_iters"] = params["max_iters"]
    if "augment_rounds" in params:
        kw["augment_rounds"] = params["augment_rounds"]
    if "n" in params:
        kw["n_mc"] = params["n"]
    return optimizer.OptimizerConfig(**kw)


def _atomic_report(prior, model, params, seed):
    n = params.get("n", 4096)
    mi = it.mi_monte_carlo(prior, model, n=n, seed=seed)
    cand = it.candidate_points(model, prior, n=params.get("candidates", 4096), seed=seed)
    worst = it.worst_case_bias(prior, model, cand, n=n, seed=seed)
    return it.ScoreReport(mi.value, mi.stderr, _bits(worst.lower), _bits(worst.upper),
                          list(worst.theta), seed, n,
                          {"mi_bits": mi.bits, "B_bits": _bits(worst.value), "K": prior.K}), worst


def _continuous_audit(prior, model, params, seed):
    cand = it.candidate_points(model, n=params.get("candidates", 1024), seed=seed)
    audit = mcmc.audit_continuous(prior, model, cand, n_prior=params.get("n_prior", 2000),
                                  top=params.get("top", 4), schedule=build_schedule(params),
                                  n_x=params.get("n_x", 64), seed=seed)
    mi_lo, mi_hi = audit.mi
    w = audit.worst
    report = it.ScoreReport(0.5 * (mi_lo + mi_hi), (mi_hi - mi_lo) / 6, _bits(w.lower), _bits(w.upper),
                            list(w.theta), seed, params.get("n_prior", 2000),
                            {"mi_lower_bits": _bits(mi_lo), "mi_upper_bits": _bits(mi_hi),
                             "B_bits": _bits(w.value)})
    return report, audit


def cmd_fit(run, model, cfg):
    params = cfg.get("params", {})
    seed = run.child_seed("fit")
    result = optimizer.fit_optimal_prior(model, _optimizer_config(params, seed))
    for w in result.warnings:
        run.warn(w)
    run._atomic_write("prior.json", result.prior.to_json(model) + "\n")
    report, _ = _atomic_report(result.prior, model, params, run.child_seed("score"))
    report.extra.update(converged=result.converged, iterations=result.iterations,
                        grad_norm=float(result.grad_norm))
    run.write_json("report.json", report.to_dict())
    run.summary = {k: report.extra[k] for k in ("iterations", "grad_norm", "mi_bits", "B_bits", "K")}
    if not result.converged:
        run.status = "not_converged"
        run.warn("optimizer stopped before meeting the gradient tolerance")
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_score(run, model, cfg):
    params = cfg.get("params", {})
    prior = build_prior(cfg, model)
    if isinstance(prior, AtomicPrior):
        report, _ = _atomic_report(prior, model, params, run.child_seed("score"))
    else:
        report, _ = _continuous_audit(prior, model, params, run.child_seed("score"))
    run.write_json("report.json", report.to_dict())
    run.summary = {"B_lower_bits": report.B_lower, "B_upper_bits": report.B_upper}
    return EXIT_OK


def cmd_bias(run, model, cfg):
    params = cfg.get("params", {})
    prior = build_prior(cfg, model)
    d = model.d
    header = [*(f"theta_{i + 1}" for i in range(d)), "b_bits", "b_lower_bits", "b_upper_bits"]
    rows = []
    if isinstance(prior, AtomicPrior):
        report, _ = _atomic_report(prior, model, params, run.child_seed("bias"))
        cand = it.candidate_points(model, prior, n=params.get("candidates", 4096),
                                   seed=run.child_seed("candidates"))
        vals, ses = it.bias_pressure_batch(cand, prior, model, params.get("n", 1024),
                                           run.child_seed("batch"))
        for th, v, s in zip(cand, vals, ses):
            rows.append([*map(float, th), _bits(v), _bits(v - 3 * s), _bits(v + 3 * s)])
    else:
        report, audit = _continuous_audit(prior, model, params, run.child_seed("bias"))
        for b in audit.refined:
            rows.append([*map(float, b.theta), _bits(b.value), _bits(b.lower), _bits(b.upper)])
    run.write_json("report.json", report.to_dict())
    run.write_table("candidates", header, rows)
    return EXIT_OK


def _data_point(model, params):
    if "x" in params:
        x = np.asarray(params["x"], dtype=float)
    elif "theta" in params:
        x = predict(model, np.asarray(params["theta"], dtype=float))
    else:
        raise ConfigError("field params: posterior needs x or theta")
    if x.shape != (model.m,):
        raise ConfigError(f"field params/x: expected {model.m} values")
    return x


def cmd_posterior(run, model, cfg):
    params = cfg.get("params", {})
    prior = build_prior(cfg, model)
    x = _data_point(model, params)
    dev = mcmc.posterior_deviation(x, prior, model, seed=run.child_seed("posterior"),
                                   steps=params.get("steps", 2000), burn_in=params.get("burn_in"),
                                   W=params.get("walkers"))
    run.write_json("report.json", {
        "delta": dev.value, "delta_stderr": dev.stderr, "theta_hat": dev.theta_hat.tolist(),
        "y_hat": dev.y_hat.tolist(), "y_mean": dev.y_mean.tolist(), "x": x.tolist(),
    })
    return EXIT_OK


def cmd_sample(run, model, cfg):
    params = cfg.get("params", {})
    prior = build_prior(cfg, model)
    if isinstance(prior, AtomicPrior):
        raise ConfigError("field prior: sample needs a continuous prior (jeffreys or lognormal)")
    alpha = params.get("alpha", 0.0)
    target = prior if alpha == 0 else mcmc.TemperedTarget(prior, model, _data_point(model, params), alpha)
    res = mcmc.ensemble_sample(target, params.get("walkers"), params.get("steps", 1000),
                               params.get("burn_in"), run.child_seed("sample"), domain=model.domain)
    if res.stagnated:
        run.warn("sampler stagnated")
    steps, W, d = res.chain.shape
    header = ["walker_id", "step", *(f"theta_{i + 1}" for i in range(d)), "log_density"]
    rows = [[w, res.burn_in + s, *map(float, res.chain[s, w]), float(res.log_density[s, w])]
            for s in range(steps) for w in range(W)]
    run.write_table("samples", header, rows)
    run.write_json("report.json", {"acceptance": float(res.acceptance), "burn_in": res.burn_in,
                                   "stagnated": res.stagnated, "walkers": W, "steps": steps})
    return EXIT_OK


def _sweep_point(model, cfg, params, seed):
    """(MI lower, MI upper, B lower, B upper) in nats at one sweep point."""
    spec = cfg.get("prior") or {"kind": "atomic"}
    if spec["kind"] == "atomic":
        fit = optimizer.fit_optimal_prior(model, _optimizer_config(params, seed))
        report, worst = _atomic_report(fit.prior, model, params, seed)
        se = report.mi_stderr
        return (report.mi_nats - 3 * se, report.mi_nats + 3 * se, worst.lower, worst.upper), fit.converged
    prior = build_prior(cfg, model)
    _, audit = _continuous_audit(prior, model, params, seed)
    return (*audit.mi, audit.worst.lower, audit.worst.upper), True


def cmd_sweep(run, model, cfg, task):
    params = cfg.get("params", {})
    if task == "sweep_sigma":
        values = params.get("sigmas")
        if not values:
            raise ConfigError("field params/sigmas: sweep_sigma needs a list of sigma values")
        models = [dataclasses.replace(model, sigma=float(s)) for s in values]
    else:
        values = params.get("dims")
        if not values:
            raise ConfigError("field params/dims: sweep_dim needs a list of dimensions")
        if model.kind != "exp_decay":
            raise ConfigError("field model/kind: sweep_dim is defined for exp_decay models")
        models = [with_dimension(model, int(d)) for d in values]
    rows, all_ok = [], True
    for i, (v, mdl) in enumerate(zip(values, models)):
        try:
            (mlo, mhi, blo, bhi), ok = _sweep_point(mdl, cfg, params, run.child_seed(f"point{i}"))
            all_ok &= ok
            d_eff = float(np.sum(fisher_edge_lengths(mdl) > 1.0)) if task == "sweep_dim" else math.nan
            rows.append([float(v), _bits(mlo), _bits(mhi), _bits(blo), _bits(bhi), d_eff])
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            run.warn(f"sweep point {v}: {exc}")
            rows.append([float(v)] + [math.nan] * 5)
    if task == "sweep_sigma":
        _fill_slope(rows)
    run.write_table("sweep", list(SWEEP_COLUMNS), rows)
    if not all_ok:
        run.status = "not_converged"
        return EXIT_NONCONVERGED
    return EXIT_OK


def _fill_slope(rows):
    """Local slope of MI (nats) against log(1/sigma) as the d_eff column."""
    sig = np.array([r[0] for r in rows])
    mid = np.array([0.5 * (r[1] + r[2]) for r in rows]) / math.log2(math.e)
    good = np.isfinite(mid)
    if good.sum() < 2:
        return
    order = np.argsort(-sig[good])
    u = np.log(1.0 / sig[good])[order]
    slope = np.gradient(mid[good][order], u)
    idx = np.flatnonzero(good)[order]
    for k, s in zip(idx, slope):
        rows[k][5] = float(s)


# ----------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="atomprior", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment configuration")
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    common.add_argument("--out", default=None, help="parent directory for run directories")
    common.add_argument("--workers", type=int, default=1,
                        help="worker count, recorded in the manifest; execution is serial")
    common.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="format of tabular outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        task = task_for(args.command, cfg)
        model = build_model(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(args.command, cfg, args)
    try:
        if args.command == "sweep":
            code = cmd_sweep(run, model, cfg, task)
        else:
            code = globals()[f"cmd_{args.command}"](run, model, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.status = "config_error"
        code = EXIT_CONFIG
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        run.status = "internal_error"
        code = EXIT_INTERNAL
    run.finish(model)
    print(run.dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
