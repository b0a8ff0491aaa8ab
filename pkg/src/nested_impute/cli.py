"""Batch command-line front-end.

Subcommands: ``impute``, ``synthesize``, ``evaluate``, ``simulate``,
``diagnose``.  Runs are configured by an INI file (sections ``[data]``,
``[rules]``, ``[sampler]``, ``[output]``, plus command-specific sections)
and write a manifest sufficient to reproduce them.  Set
``NESTED_IMPUTE_LOG=debug|info|warning`` for logging verbosity.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import glob
import hashlib
import json
import logging
import os
import sys
from fractions import Fraction

import numpy as np

from . import __version__, _backend
from .gibbs import Hyperparams, SamplerConfig, run_chain
from .impute import emit_completed_datasets, synthesize_datasets, _validate_feasible
from .mi import COMBINERS, estimate_on_dataset, parse_estimand_file
from .model import ModelParams, init_from_prior
from .rules import RuleSet
from .schema import (
    head_to_household_transform,
    load_dataset,
    parse_schema,
    write_dataset,
)
from .simtools import apply_mcar, apply_stress_mechanism, sample_population

log = logging.getLogger("nested_impute")


class ConfigError(ValueError):
    """Raised for missing or malformed configuration."""


def _setup_logging():
    level_name = os.environ.get("NESTED_IMPUTE_LOG", "warning").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )


def _read_config(path) -> configparser.ConfigParser:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read(path)
    return cp


def _require(cp, section: str, key: str) -> str:
    try:
        return cp.get(section, key)
    except (configparser.NoSectionError, configparser.NoOptionError):
        raise ConfigError(f"missing config key [{section}] {key}") from None


def _get(cp, section, key, default=None):
    try:
        return cp.get(section, key)
    except (configparser.NoSectionError, configparser.NoOptionError):
        return default


def _get_bool(cp, section, key, default=False):
    val = _get(cp, section, key)
    if val is None:
        return default
    return val.strip().lower() in ("1", "true", "yes", "on")


def _parse_psi(text: str | None):
    if not text:
        return None
    out = {}
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            h, frac = tok.split(":")
            out[int(h)] = Fraction(frac.strip())
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad psi entry {tok!r}; expected like 2:1/2") from None
    return out


def _parse_counts(text: str) -> dict[int, int]:
    out = {}
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            h, n = tok.split(":")
            out[int(h)] = int(n)
        except ValueError:
            raise ConfigError(f"bad counts entry {tok!r}; expected like 2:1000") from None
    return out


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(outdir, stem, command, config_path, inputs, outputs, extra):
    manifest = {
        "command": command,
        "package_version": __version__,
        "backend": _backend.backend_name(),
        "config": {"path": str(config_path), "sha256": _sha256(config_path)},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    manifest.update(extra)
    path = os.path.join(outdir, f"{stem}.manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _sampler_config(cp, args, selection, L, store_params) -> SamplerConfig:
    seed = args.seed if args.seed is not None else int(_get(cp, "sampler", "seed", "0"))
    threads = args.threads if args.threads is not None else int(_get(cp, "sampler", "threads", "1"))
    return SamplerConfig(
        iterations=int(_require(cp, "sampler", "iterations")),
        burn_in=int(_require(cp, "sampler", "burn_in")),
        thin=int(_get(cp, "sampler", "thin", "1")),
        psi=_parse_psi(_get(cp, "sampler", "psi")),
        seed=seed,
        threads=threads,
        augment_cap=int(_get(cp, "sampler", "augment_cap", str(10 ** 9))),
        impute_cap=int(_get(cp, "sampler", "impute_cap", str(10 ** 6))),
        retain=selection,
        retain_count=L,
        store_params=store_params,
        checkpoint_every=args.checkpoint_every,
        checkpoint_path=args.checkpoint_path,
    )


def _load_inputs(cp):
    schema_path = _require(cp, "data", "schema")
    data_path = _require(cp, "data", "data")
    rules_path = _require(cp, "rules", "file")
    dataset = load_dataset(schema_path, data_path)
    original_schema = dataset.schema
    with open(rules_path) as f:
        rules_text = f.read()
    if _get_bool(cp, "data", "transform_head"):
        dataset = head_to_household_transform(dataset)
    fit_rules = RuleSet.from_text(rules_text, dataset.schema)
    if dataset.schema is not original_schema:
        validate_rules = RuleSet.from_text(rules_text, original_schema)
    else:
        validate_rules = fit_rules
    for source, reason in fit_rules.eliminated:
        log.info("rule eliminated by head-move compile: %s (%s)", source, reason)
    for source, reason in fit_rules.reexpressed:
        log.info("rule re-expressed by head-move compile: %s (%s)", source, reason)
    return dataset, fit_rules, validate_rules, [schema_path, data_path, rules_path]


def _hyper(cp) -> Hyperparams:
    return Hyperparams(
        n_household_classes=int(_get(cp, "sampler", "household_classes", "30")),
        n_member_classes=int(_get(cp, "sampler", "member_classes", "15")),
    )


def _bench_report(result, outdir, stem):
    aug = [row["augment_seconds"] for row in result.diagnostics]
    imp = [row["impute_seconds"] for row in result.diagnostics]
    report = {
        "iterations": len(result.diagnostics),
        "augment_seconds_total": float(np.sum(aug)),
        "augment_seconds_mean": float(np.mean(aug)) if aug else 0.0,
        "impute_seconds_total": float(np.sum(imp)),
        "impute_seconds_mean": float(np.mean(imp)) if imp else 0.0,
        "backend": _backend.backend_name(),
    }
    path = os.path.join(outdir, f"{stem}.bench.json")
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(
        f"bench: augment {report['augment_seconds_total']:.3f}s total "
        f"({report['augment_seconds_mean'] * 1e3:.2f} ms/iter), "
        f"impute {report['impute_seconds_total']:.3f}s total "
        f"({report['impute_seconds_mean'] * 1e3:.2f} ms/iter)"
    )
    return path


def cmd_impute(args) -> int:
    cp = _read_config(args.config)
    dataset, fit_rules, validate_rules, inputs = _load_inputs(cp)
    outdir = _require(cp, "output", "dir")
    stem = _get(cp, "output", "stem", "run")
    L = int(_require(cp, "output", "count"))
    selection = _get(cp, "output", "selection", "evenly")
    os.makedirs(outdir, exist_ok=True)
    cfg = _sampler_config(cp, args, selection, L, store_params=False)
    result = run_chain(dataset, fit_rules, _hyper(cp), cfg)
    emitted = emit_completed_datasets(
        result, L, selection="evenly", validate_rules=validate_rules
    )
    outputs = []
    for l, d in enumerate(emitted.datasets, start=1):
        path = os.path.join(outdir, f"{stem}.imp{l}.csv")
        write_dataset(d, path)
        outputs.append(path)
    trace_path = os.path.join(outdir, f"{stem}.trace.csv")
    result.write_trace(trace_path)
    outputs.append(trace_path)
    if args.bench:
        outputs.append(_bench_report(result, outdir, stem))
    _write_manifest(
        outdir, stem, "impute", args.config, inputs, outputs,
        {
            "seed": cfg.seed,
            "threads": cfg.threads,
            "snapshot_iterations": emitted.snapshot_iterations,
        },
    )
    return 0


def cmd_synthesize(args) -> int:
    cp = _read_config(args.config)
    dataset, fit_rules, validate_rules, inputs = _load_inputs(cp)
    outdir = _require(cp, "output", "dir")
    stem = _get(cp, "output", "stem", "run")
    L = int(_require(cp, "output", "count"))
    selection = _get(cp, "output", "selection", "random")
    impute_enabled = _get_bool(cp, "sampler", "impute", True)
    if not dataset.fully_observed() and not impute_enabled:
        raise ConfigError(
            "synthesis input has missing cells; enable [sampler] impute or "
            "complete the data first"
        )
    os.makedirs(outdir, exist_ok=True)
    cfg = _sampler_config(cp, args, selection, L, store_params=True)
    cfg.impute_enabled = impute_enabled
    result = run_chain(dataset, fit_rules, _hyper(cp), cfg)
    rng = np.random.default_rng([cfg.seed, 0x535D])
    synth = synthesize_datasets(result, fit_rules, L, rng, selection="evenly")
    outputs = []
    for l, d in enumerate(synth.datasets, start=1):
        _validate_feasible(d, validate_rules)
        path = os.path.join(outdir, f"{stem}.syn{l}.csv")
        write_dataset(d, path)
        outputs.append(path)
    trace_path = os.path.join(outdir, f"{stem}.trace.csv")
    result.write_trace(trace_path)
    outputs.append(trace_path)
    if args.bench:
        outputs.append(_bench_report(result, outdir, stem))
    _write_manifest(
        outdir, stem, "synthesize", args.config, inputs, outputs,
        {
            "seed": cfg.seed,
            "threads": cfg.threads,
            "snapshot_iterations": synth.snapshot_iterations,
        },
    )
    return 0


def cmd_evaluate(args) -> int:
    cp = _read_config(args.config)
    schema_path = _require(cp, "evaluate", "schema")
    pattern = _require(cp, "evaluate", "datasets")
    estimand_path = _require(cp, "evaluate", "estimands")
    combiner_name = _get(cp, "evaluate", "combiner", "rubin")
    gamma = float(_get(cp, "evaluate", "gamma", "0.05"))
    out_path = _require(cp, "evaluate", "output")
    if combiner_name not in COMBINERS:
        raise ConfigError(f"unknown combiner {combiner_name!r}")
    combiner = COMBINERS[combiner_name]
    paths = sorted(glob.glob(pattern))
    if len(paths) < 2:
        raise ConfigError(f"dataset pattern {pattern!r} matched {len(paths)} files; need >= 2")
    datasets = [load_dataset(schema_path, p) for p in paths]
    with open(estimand_path) as f:
        estimands = parse_estimand_file(f.read())
    rows = []
    for est in estimands:
        results = [estimate_on_dataset(d, est) for d in datasets]
        pooled = combiner(results, gamma=gamma)
        rows.append(
            [est.label, pooled.q_bar, pooled.T, pooled.df, pooled.lo, pooled.hi]
        )
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["estimand", "q_bar", "T", "df", "lo", "hi"])
        w.writerows(rows)
    outdir = os.path.dirname(out_path) or "."
    _write_manifest(
        outdir, os.path.splitext(os.path.basename(out_path))[0], "evaluate",
        args.config, [schema_path, estimand_path] + paths, [out_path],
        {"combiner": combiner_name, "gamma": gamma, "L": len(datasets)},
    )
    return 0


def cmd_simulate(args) -> int:
    cp = _read_config(args.config)
    schema_path = _require(cp, "simulate", "schema")
    rules_path = _require(cp, "simulate", "rules")
    counts = _parse_counts(_require(cp, "simulate", "counts"))
    outdir = _require(cp, "output", "dir")
    stem = _get(cp, "output", "stem", "sim")
    seed = args.seed if args.seed is not None else int(_get(cp, "simulate", "seed", "0"))
    os.makedirs(outdir, exist_ok=True)
    with open(schema_path) as f:
        schema = parse_schema(f.read())
    ruleset = RuleSet.from_file(rules_path, schema)
    rng = np.random.default_rng(seed)
    params_path = _get(cp, "simulate", "params")
    if params_path:
        params = ModelParams.load(params_path)
    else:
        hyper = Hyperparams(
            n_household_classes=int(_get(cp, "simulate", "household_classes", "5")),
            n_member_classes=int(_get(cp, "simulate", "member_classes", "3")),
        )
        params = init_from_prior(hyper, schema, rng)
    dataset = sample_population(params, schema, ruleset, counts, rng)
    outputs = []
    complete_path = os.path.join(outdir, f"{stem}.complete.csv")
    write_dataset(dataset, complete_path)
    outputs.append(complete_path)
    mechanism = _get(cp, "simulate", "mechanism", "none")
    if mechanism == "mcar":
        frac = float(_get(cp, "simulate", "mcar_complete_frac", "0.8"))
        rate = float(_get(cp, "simulate", "mcar_rate", "0.5"))
        masked = apply_mcar(dataset, frac, rate, rng)
    elif mechanism == "stress":
        masked = apply_stress_mechanism(dataset, rng)
    elif mechanism == "none":
        masked = None
    else:
        raise ConfigError(f"unknown mechanism {mechanism!r}")
    if masked is not None:
        masked_path = os.path.join(outdir, f"{stem}.masked.csv")
        write_dataset(masked, masked_path)
        outputs.append(masked_path)
    save_params = _get(cp, "simulate", "save_params")
    if save_params:
        params.save(save_params)
        outputs.append(save_params)
    _write_manifest(
        outdir, stem, "simulate", args.config,
        [schema_path, rules_path] + ([params_path] if params_path else []),
        outputs, {"seed": seed, "counts": {str(k): v for k, v in counts.items()}},
    )
    return 0


def cmd_diagnose(args) -> int:
    with open(args.trace) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            print("trace is empty")
            return 1
        rows = [[float(x) for x in row] for row in reader]
    if not rows:
        print("trace is empty")
        return 1
    data = np.array(rows)
    post = data[data[:, 0] > args.burn_in] if args.burn_in else data
    if post.shape[0] == 0:
        print("no post-burn-in rows")
        return 1
    print(f"{args.trace}: {data.shape[0]} iterations, {post.shape[0]} post burn-in")
    print(f"{'column':<32}{'mean':>12}{'sd':>12}{'min':>12}{'max':>12}")
    for j, name in enumerate(header):
        if name == "iteration":
            continue
        col = post[:, j]
        print(
            f"{name:<32}{col.mean():>12.5g}{col.std(ddof=1) if len(col) > 1 else 0.0:>12.5g}"
            f"{col.min():>12.5g}{col.max():>12.5g}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nested-impute",
        description="Household-nested categorical imputation with structural zeros",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--seed", type=int, default=None, help="override [sampler] seed")
        p.add_argument("--threads", type=int, default=None, help="override [sampler] threads")
        p.add_argument("--bench", action="store_true", help="report step timings")
        p.add_argument("--checkpoint-every", type=int, default=None)
        p.add_argument("--checkpoint-path", default=None)

    p = sub.add_parser("impute", help="fit the model and emit completed datasets")
    add_run_flags(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("synthesize", help="fit the model and emit synthetic datasets")
    add_run_flags(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="pool estimands over completed datasets")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="generate study data from known parameters")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="summarize a trace file")
    p.add_argument("trace")
    p.add_argument("--burn-in", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
