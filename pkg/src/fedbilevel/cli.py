"""The ``fedbilevel`` command: experiment runs, sweeps and validation.

Subcommands
-----------
``run``
    Execute one configured experiment; writes ``metrics.csv`` (one row per
    round), ``ledger.csv`` (every simulated transfer), ``manifest.json``
    (resolved config, seeds, final metrics, communication report),
    ``resolved.ini`` and, for noisy-label runs, ``flip_mask.json``.
``sweep-compression``
    One training leg per compression rate from a shared template; writes
    the merged summary as ``metrics.csv`` (one row per leg: final F1,
    estimator error against the exact oracle, uplink totals, status) plus
    ``manifest.json``.  A diverged leg is recorded, not fatal.
``validate``
    Run a fixed-seed statistical suite (``estimators``, ``sketches``,
    ``shapley`` or ``all``) and write ``verdict.json``.

Exit codes (stable): 0 success, 1 validation suite failure, 2 config
error, 3 runtime divergence (partial metrics are still flushed).

Config format: flat INI, sections ``[problem] [federation] [estimator]
[run] [output] [sweep]``.  Unknown sections or keys are rejected, as are
keys that do not apply to the configured problem or estimator kind; every
run writes the fully resolved config beside its outputs.  The only
environment override is ``FEDBILEVEL_OUT`` for the output directory
(command line ``--out`` wins over it, it wins over ``[output] dir``).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime
import json
import os
import sys
import time

from fedbilevel import __version__
from fedbilevel.bilevel import (
    DivergenceError,
    IterSolverConfig,
    NonIterSolverConfig,
)
from fedbilevel.fedsim import (
    RoundConfig,
    TrainTrace,
    ledger_report,
    run_fedavg,
    run_federated_bilevel,
)
from fedbilevel.noisylabel import (
    NoiseSpec,
    build_weight_problem,
    export_flip_mask,
    inject_label_noise,
    load_csv_dataset,
    make_blob_dataset,
)
from fedbilevel.quadratic import make_quadratic_problem, stable_rank_spectrum
from fedbilevel.validation import SweepLeg, run_compression_sweep, run_suite

EXIT_OK = 0
EXIT_SUITE_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    """Bad config file: unknown key, missing requirement, unparsable value."""


# ---------------------------------------------------------------------------
# config schema: section -> key -> (parser tag, default).  Defaults are the
# resolved values when the key is absent; None means "derived later" (seeds
# fall back to [run] seed, clients_per_round to the client count).

_SCHEMA = {
    "problem": {
        "kind": ("choice:noisy-label,quadratic", None),
    },
    "problem/noisy-label": {
        "clients": ("int", 10),
        "samples_per_client": ("int", 100),
        "classes": ("int", 4),
        "features": ("int", 20),
        "separation": ("float", 4.0),
        "val_size": ("int", 200),
        "active_features": ("optint", None),
        "background_scale": ("float", 1.0),
        "data_csv": ("optstr", None),
        "reg": ("float", 1e-3),
        "noise_mode": ("choice:iid,non-iid,none", "iid"),
        "noise_rate": ("float", 0.4),
        "noise_rate_low": ("float", 0.2),
        "noise_rate_high": ("float", 0.9),
        "noise_seed": ("optint", None),
        "problem_seed": ("optint", None),
    },
    "problem/quadratic": {
        "clients": ("int", 5),
        "outer_dim": ("int", 20),
        "inner_dim": ("int", 100),
        "eig_low": ("float", 1.0),
        "eig_high": ("float", 10.0),
        "spectrum_rank": ("optint", None),
        "outer_reg": ("float", 0.0),
        "coupling_scale": ("float", 1.0),
        "offset_scale": ("float", 1.0),
        "shared_hessian": ("bool", False),
        "problem_seed": ("optint", None),
    },
    "federation": {
        "algorithm": ("choice:bilevel,fedavg", "bilevel"),
        "rounds": ("int", 50),
        "clients_per_round": ("optint", None),
        "local_steps": ("int", 5),
        "inner_lr": ("float", 0.01),
        "outer_lr": ("float", 0.1),
        "inner_mode": ("choice:local-sgd,solve", "local-sgd"),
        "track_grad_norm": ("bool", False),
        "resample_for_estimator": ("bool", False),
    },
    "estimator": {
        "kind": ("choice:exact,iterative,non-iterative", "exact"),
    },
    "estimator/iterative": {
        "iterations": ("int", 100),
        "step_mode": ("choice:constant,schedule", "schedule"),
        "step_size": ("optfloat", None),
        "shift": ("optfloat", None),
        "compressor": ("choice:none,topk,sketch", "none"),
        "topk": ("optint", None),
        "sketch_size": ("optint", None),
        "sketch_rows": ("optint", None),
        "sketch_cols": ("optint", None),
        "sketch_delta": ("float", 0.05),
        "decompress_k": ("optint", None),
        "error_feedback": ("bool", True),
        "averaging": ("choice:last,weighted", "last"),
    },
    "estimator/non-iterative": {
        "rows1": ("optint", None),
        "rows2": ("optint", None),
        "rcond": ("float", 1e-10),
        "identity": ("bool", False),
    },
    "run": {
        "seed": ("int", 0),
    },
    "output": {
        "dir": ("optstr", None),
    },
    "sweep": {
        "rates": ("intlist", [1, 20, 100, 1000]),
        "probe_error": ("bool", True),
    },
}


def _parse_value(section: str, key: str, tag: str, raw: str):
    raw = raw.strip()
    where = f"[{section}] {key}"
    if tag.startswith("choice:"):
        allowed = tag.split(":", 1)[1].split(",")
        if raw not in allowed:
            raise ConfigError(f"{where}: expected one of {allowed}, got {raw!r}")
        return raw
    if raw == "" and tag.startswith("opt"):
        return None
    try:
        if tag == "int":
            return int(raw)
        if tag == "optint":
            return int(raw)
        if tag in ("float", "optfloat"):
            return float(raw)
        if tag == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if tag == "intlist":
            return [int(tok) for tok in raw.replace(" ", "").split(",") if tok]
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tag}") from exc
    return raw  # optstr


def _resolve_section(parser: configparser.ConfigParser, section: str,
                     *schema_names: str) -> dict:
    """Merge schema defaults with parsed values; reject keys outside the schema."""
    schema: dict[str, tuple[str, object]] = {}
    for name in schema_names:
        schema.update(_SCHEMA[name])
    raw = dict(parser.items(section)) if parser.has_section(section) else {}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {unknown} "
                          f"(known: {sorted(schema)})")
    resolved = {}
    for key, (tag, default) in schema.items():
        resolved[key] = (_parse_value(section, key, tag, raw[key])
                         if key in raw else default)
    return resolved


def load_config(path: str) -> dict[str, dict]:
    """Parse and fully validate an experiment config file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    unknown_sections = sorted(set(parser.sections()) -
                              {"problem", "federation", "estimator", "run",
                               "output", "sweep"})
    if unknown_sections:
        raise ConfigError(f"unknown sections {unknown_sections}")
    if not parser.has_section("problem") or not parser.has_option("problem", "kind"):
        raise ConfigError("[problem] kind is required")
    kind = _parse_value("problem", "kind", _SCHEMA["problem"]["kind"][0],
                        parser.get("problem", "kind"))
    problem = _resolve_section(parser, "problem", "problem", f"problem/{kind}")
    federation = _resolve_section(parser, "federation", "federation")
    if federation["algorithm"] == "fedavg":
        if parser.has_section("estimator"):
            raise ConfigError("[estimator] does not apply to algorithm = fedavg")
        estimator = {"kind": "exact"}
    else:
        est_kind = "exact"
        if parser.has_section("estimator") and parser.has_option("estimator", "kind"):
            est_kind = _parse_value("estimator", "kind",
                                    _SCHEMA["estimator"]["kind"][0],
                                    parser.get("estimator", "kind"))
        extra = () if est_kind == "exact" else (f"estimator/{est_kind}",)
        estimator = _resolve_section(parser, "estimator", "estimator", *extra)
        estimator["kind"] = est_kind
    return {
        "problem": problem,
        "federation": federation,
        "estimator": estimator,
        "run": _resolve_section(parser, "run", "run"),
        "output": _resolve_section(parser, "output", "output"),
        "sweep": _resolve_section(parser, "sweep", "sweep"),
    }


# ---------------------------------------------------------------------------
# builders


def build_problem(cfg: dict, seed: int):
    """Instantiate the configured problem; returns (problem, dataset or None)."""
    p = cfg["problem"]
    pseed = p["problem_seed"] if p["problem_seed"] is not None else seed
    if p["kind"] == "quadratic":
        eigenvalues = None
        if p["spectrum_rank"] is not None:
            eigenvalues = stable_rank_spectrum(p["inner_dim"], p["spectrum_rank"])
        problem = make_quadratic_problem(
            outer_dim=p["outer_dim"], inner_dim=p["inner_dim"],
            clients=p["clients"], seed=pseed,
            eig_range=(p["eig_low"], p["eig_high"]), eigenvalues=eigenvalues,
            shared_hessian=p["shared_hessian"],
            coupling_scale=p["coupling_scale"], offset_scale=p["offset_scale"],
            outer_reg=p["outer_reg"])
        return problem, None
    if p["data_csv"] is not None:
        dataset = load_csv_dataset(p["data_csv"], clients=p["clients"],
                                   val_size=p["val_size"], seed=pseed)
    else:
        dataset = make_blob_dataset(
            p["clients"], p["samples_per_client"], p["classes"], p["features"],
            separation=p["separation"], val_size=p["val_size"], seed=pseed,
            active_features=p["active_features"],
            background_scale=p["background_scale"])
    if p["noise_mode"] != "none":
        nseed = p["noise_seed"] if p["noise_seed"] is not None else seed
        dataset = inject_label_noise(dataset, NoiseSpec(
            mode=p["noise_mode"], rate=p["noise_rate"],
            rate_low=p["noise_rate_low"], rate_high=p["noise_rate_high"],
            seed=nseed))
    return build_weight_problem(dataset, reg=p["reg"]), dataset


def build_round_config(cfg: dict, problem, seed: int) -> RoundConfig:
    fed, est = cfg["federation"], cfg["estimator"]
    iter_cfg = noniter_cfg = None
    try:
        if est["kind"] == "iterative":
            iter_cfg = IterSolverConfig(
                iterations=est["iterations"], step_mode=est["step_mode"],
                step_size=est["step_size"], shift=est["shift"],
                compressor=est["compressor"], topk=est["topk"],
                sketch_size=est["sketch_size"], sketch_rows=est["sketch_rows"],
                sketch_cols=est["sketch_cols"], sketch_delta=est["sketch_delta"],
                decompress_k=est["decompress_k"],
                error_feedback=est["error_feedback"], averaging=est["averaging"])
        elif est["kind"] == "non-iterative":
            if est["rows1"] is None or est["rows2"] is None:
                raise ConfigError("[estimator]: non-iterative needs rows1 and rows2")
            noniter_cfg = NonIterSolverConfig(
                rows1=est["rows1"], rows2=est["rows2"], rcond=est["rcond"],
                identity=est["identity"])
        spr = fed["clients_per_round"]
        rcfg = RoundConfig(
            rounds=fed["rounds"],
            clients_per_round=spr if spr is not None else problem.num_clients,
            local_steps=fed["local_steps"], inner_lr=fed["inner_lr"],
            outer_lr=fed["outer_lr"], estimator=est["kind"],
            iter_cfg=iter_cfg, noniter_cfg=noniter_cfg, seed=seed,
            inner_mode=fed["inner_mode"],
            resample_for_estimator=fed["resample_for_estimator"],
            track_grad_norm=fed["track_grad_norm"])
        rcfg.validate(problem)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return rcfg


# ---------------------------------------------------------------------------
# artifacts


def _fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    return "" if value != value else repr(value)  # NaN -> empty field


def write_metrics_csv(path, trace: TrainTrace) -> None:
    """Round-by-round metrics; fixed schema, byte-identical across reruns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "outer_loss", "val_accuracy", "f1", "grad_norm_sq",
                         "uplink_scalars", "downlink_scalars", "cumulative_bytes"])
        for row in trace.rows:
            writer.writerow([
                row.k, _fmt(row.outer_loss),
                _fmt(row.metrics.get("val_accuracy")), _fmt(row.metrics.get("f1")),
                _fmt(row.grad_norm_sq), row.uplink_scalars, row.downlink_scalars,
                row.cumulative_bytes,
            ])


def write_sweep_csv(path, legs: list[SweepLeg]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SweepLeg.csv_columns())
        for leg in legs:
            row = leg.to_row()
            writer.writerow([
                _fmt(v) if isinstance(v, float) else v
                for v in (row[col] for col in SweepLeg.csv_columns())
            ])


def write_resolved_config(path, cfg: dict) -> None:
    out = configparser.ConfigParser()
    for section, values in cfg.items():
        out.add_section(section)
        for key, value in values.items():
            if value is None:
                value = ""
            elif isinstance(value, list):
                value = ",".join(str(v) for v in value)
            out.set(section, key, str(value))
    with open(path, "w") as fh:
        out.write(fh)


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_base(command: str, seed: int, cfg: dict) -> dict:
    return {
        "package_version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "command": command,
        "seed": seed,
        "resolved_config": cfg,
    }


def _resolve_outdir(args, cfg: dict, fallback: str) -> str:
    if args.out is not None:
        return args.out
    env = os.environ.get("FEDBILEVEL_OUT")
    if env:
        return env
    if cfg["output"]["dir"] is not None:
        return cfg["output"]["dir"]
    return fallback


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    cfg["run"]["seed"] = seed
    outdir = _resolve_outdir(args, cfg, "runs/run")
    os.makedirs(outdir, exist_ok=True)
    problem, dataset = build_problem(cfg, seed)
    rcfg = build_round_config(cfg, problem, seed)

    status, exit_code = "ok", EXIT_OK
    t0 = time.time()
    try:
        if cfg["federation"]["algorithm"] == "fedavg":
            trace = run_fedavg(problem, rcfg)
        else:
            trace = run_federated_bilevel(problem, rcfg)
    except DivergenceError as exc:
        trace = exc.trace
        status = f"diverged@{trace.diverged_at}"
        exit_code = EXIT_DIVERGED
    elapsed = time.time() - t0

    write_metrics_csv(os.path.join(outdir, "metrics.csv"), trace)
    trace.ledger.to_csv(os.path.join(outdir, "ledger.csv"))
    write_resolved_config(os.path.join(outdir, "resolved.ini"), cfg)
    if dataset is not None:
        export_flip_mask(dataset, os.path.join(outdir, "flip_mask.json"))
    report = ledger_report(trace.ledger, problem.inner_dim,
                           rcfg.clients_per_round, rcfg.rounds)
    last = trace.rows[-1]
    manifest = _manifest_base("run", seed, cfg)
    manifest.update({
        "problem_fingerprint": trace.problem_fingerprint,
        "status": status,
        "rounds_completed": last.k,
        "elapsed_s": round(elapsed, 3),
        "final": {"outer_loss": last.outer_loss,
                  **{k: float(v) for k, v in last.metrics.items()}},
        "communication": report.to_dict(),
        "artifacts": sorted(os.listdir(outdir)) + ["manifest.json"],
    })
    write_json(os.path.join(outdir, "manifest.json"), manifest)

    metrics_txt = " ".join(f"{k}={v:.4f}" for k, v in sorted(last.metrics.items()))
    print(f"{status}: {last.k} rounds in {elapsed:.1f}s, "
          f"outer_loss={last.outer_loss:.6g} {metrics_txt}")
    print(f"uplink={report.uplink_scalars} scalars "
          f"({report.ratio_vs_dense_hessian:.2e} of dense-Hessian baseline)")
    print(f"artifacts -> {outdir}")
    return exit_code


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    cfg["run"]["seed"] = seed
    if cfg["estimator"]["kind"] not in ("iterative", "non-iterative"):
        raise ConfigError("sweep-compression needs an iterative or "
                          "non-iterative estimator")
    rates = args.rates if args.rates is not None else cfg["sweep"]["rates"]
    if not rates or min(rates) < 1:
        raise ConfigError(f"sweep rates must be integers >= 1, got {rates}")
    cfg["sweep"]["rates"] = list(rates)
    outdir = _resolve_outdir(args, cfg, "runs/sweep")
    os.makedirs(outdir, exist_ok=True)
    problem, _ = build_problem(cfg, seed)
    base = build_round_config(cfg, problem, seed)

    t0 = time.time()
    try:
        legs = run_compression_sweep(problem, base, rates, parallel=args.parallel,
                                     probe_error=cfg["sweep"]["probe_error"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    elapsed = time.time() - t0

    write_sweep_csv(os.path.join(outdir, "metrics.csv"), legs)
    write_resolved_config(os.path.join(outdir, "resolved.ini"), cfg)
    manifest = _manifest_base("sweep-compression", seed, cfg)
    manifest.update({
        "problem_fingerprint": problem.fingerprint(),
        "elapsed_s": round(elapsed, 3),
        "legs": [leg.to_row() for leg in legs],
        "artifacts": sorted(os.listdir(outdir)) + ["manifest.json"],
    })
    write_json(os.path.join(outdir, "manifest.json"), manifest)

    for leg in legs:
        print(f"rate {leg.rate:>5}x [{leg.geometry}] {leg.status}: "
              f"f1={leg.f1:.3f} est_err={leg.rel_hypergrad_err:.3g} "
              f"uplink={leg.uplink_scalars} ({leg.elapsed_s:.1f}s)")
    print(f"artifacts -> {outdir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    t0 = time.time()
    try:
        results = run_suite(args.suite)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for res in results:
        print(res.line())
    passed = all(res.passed for res in results)
    outdir = args.out or os.environ.get("FEDBILEVEL_OUT") or "runs/validate"
    os.makedirs(outdir, exist_ok=True)
    verdict = {
        "package_version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "suite": args.suite,
        "passed": passed,
        "checks": [res.to_dict() for res in results],
        "elapsed_s": round(time.time() - t0, 3),
    }
    write_json(os.path.join(outdir, "verdict.json"), verdict)
    print(f"{'PASS' if passed else 'FAIL'} suite {args.suite} "
          f"({len(results)} checks) -> {outdir}/verdict.json")
    return EXIT_OK if passed else EXIT_SUITE_FAILED


def _rates_arg(raw: str) -> list[int]:
    try:
        return [int(tok) for tok in raw.replace(" ", "").split(",") if tok]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad rates list {raw!r}") from exc


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbilevel",
        description="Federated bilevel optimization experiments with "
                    "compressed hypergradient estimators.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one configured experiment")
    run_p.add_argument("--config", required=True, help="INI experiment config")
    run_p.add_argument("--out", help="output directory (default: [output] dir)")
    run_p.add_argument("--seed", type=int, help="override [run] seed")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser(
        "sweep-compression",
        help="run the template once per compression rate and merge results")
    sweep_p.add_argument("--config", required=True, help="INI experiment config")
    sweep_p.add_argument("--out", help="output directory")
    sweep_p.add_argument("--seed", type=int, help="override [run] seed")
    sweep_p.add_argument("--rates", type=_rates_arg,
                         help="comma-separated rates overriding [sweep] rates")
    sweep_p.add_argument("--parallel", type=int, default=0,
                         help="process-pool width for independent legs")
    sweep_p.set_defaults(func=cmd_sweep)

    val_p = sub.add_parser("validate",
                           help="run a fixed-seed statistical suite")
    val_p.add_argument("suite", choices=["estimators", "sketches", "shapley", "all"])
    val_p.add_argument("--out", help="directory for verdict.json")
    val_p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
