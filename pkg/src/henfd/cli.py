"""Command-line entry point: ``henfd <subcommand> [flags]``.

Every subcommand writes only under ``--out``.  Exit status is 0 on
success, 1 on a runtime error (message prefixed with the module that
raised it) and 2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .data import Dataset, Schema, load_dataset, save_dataset, time_split
from .explainer import explain_sample, export_report, risk_list
from .metrics import aggregate, write_metrics
from .selftest import gradient_suite, run_selftest
from .synthetic import GeneratorConfig, make_schema, planted_values, synthesize
from .trainer import TrainConfig, evaluate, load_run, train_supervised, train_transfer

SPLITS = ("train", "validation", "test", "all")


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------------------


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_set(items):
    """``key=value`` pairs; values are read as JSON when they parse, else as strings."""
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or key not in known:
            raise UsageError(f"--set expects KEY=VALUE with KEY one of {sorted(known)}; got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _train_config(args, **defaults) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if args.config else {}
    for k, v in defaults.items():
        base.setdefault(k, v)
    base.update(_parse_set(args.set))
    flags = {name: getattr(args, name, None) for name in ("seed", "mode", "align", "maxfpr", "extractor")}
    return TrainConfig.from_dict(base).override(**flags)


def _split(dataset: Dataset, which):
    if which == "all":
        return dataset
    train, val, test = time_split(dataset)
    return {"train": train, "validation": val, "test": test}[which]


def _trial_dirs(out: Path, trials: int):
    if trials < 1:
        raise UsageError("--trials must be at least 1")
    return [out] if trials == 1 else [out / f"trial_{i}" for i in range(trials)]


def _save_run(result, where: Path):
    where.mkdir(parents=True, exist_ok=True)
    result.save(where / "model.ckpt")
    result.write_history(where / "history.csv")
    _write_json(where / "config.json", result.config.to_dict())
    print(f"{where / 'model.ckpt'}: best epoch {result.best_epoch}, validation SPAUC {result.best_val}")


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_data(args):
    config = GeneratorConfig.load(args.config) if args.config else GeneratorConfig()
    if args.seed is not None:
        config = GeneratorConfig.from_dict({**config.to_dict(), "seed": args.seed})
    out = _out(args)
    make_schema(config).save(out / "schema.json")
    _write_json(out / "generator.json", config.to_dict())
    sizes = {"source": args.n_source or config.n_samples, "target": args.n_target or config.n_samples}
    planted = {}
    for domain, n in sizes.items():
        ds = synthesize(config, domain, n)
        save_dataset(ds, out / f"{domain}.jsonl")
        planted[domain] = planted_values(config, domain)
        print(f"{out / f'{domain}.jsonl'}: {len(ds)} samples, {int(ds.labels.sum())} positive")
    _write_json(out / "planted.json", planted)


def cmd_train(args):
    data = load_dataset(args.schema, args.data)
    train, val, _ = time_split(data)
    out = _out(args)
    base = _train_config(args)
    for i, where in enumerate(_trial_dirs(out, args.trials)):
        config = base.override(seed=base.seed + i, mode="supervised")
        _save_run(train_supervised(config, train, val), where)


def cmd_transfer_train(args):
    schema = Schema.load(args.schema)
    src_train, src_val, _ = time_split(load_dataset(schema, args.src_data))
    tgt_train, tgt_val, _ = time_split(load_dataset(schema, args.tgt_data))
    out = _out(args)
    base = _train_config(args, mode="full")
    if base.mode == "supervised":
        raise UsageError("transfer-train needs a transfer --mode")
    for i, where in enumerate(_trial_dirs(out, args.trials)):
        config = base.override(seed=base.seed + i)
        _save_run(train_transfer(config, src_train, src_val, tgt_train, tgt_val), where)


def cmd_evaluate(args):
    dataset = _split(load_dataset(args.schema, args.data), args.split)
    reports = []
    for ckpt in args.ckpt:
        run = load_run(ckpt)
        maxfpr = args.maxfpr if args.maxfpr is not None else run.config.maxfpr
        r = evaluate(run.model, run.params, dataset, maxfpr)
        reports.append(r)
        print(f"{ckpt}: SPAUC@{maxfpr:g} {r.spauc:.6f}  AUC {r.auc:.6f}")
    out = _out(args)
    final = aggregate(reports) if len(reports) > 1 else reports[0]
    if len(reports) > 1:
        print(f"mean SPAUC {final.spauc:.6f} ± {final.half_width:.6f} (95% CI, {len(reports)} trials)")
    write_metrics(final, out / "metrics.json", out / "metrics.csv")


def cmd_explain(args):
    run = load_run(args.ckpt)
    dataset = _split(load_dataset(args.schema, args.data), args.split)
    samples = [s for s in dataset.samples if s.label == 1] if args.positives else dataset.samples
    records = [explain_sample(s, run.model, run.params) for s in samples[:args.limit]]
    paths = export_report(records, _out(args))
    print(f"{paths[0]}: {len(records)} explanations")


def cmd_risk_list(args):
    run = load_run(args.ckpt)
    dataset = load_dataset(args.schema, args.data)
    names = args.fields or [f.name for f in dataset.schema.categorical]
    rl = risk_list(run.model, run.params, dataset, names, q=args.q, domain=args.domain)
    path = _out(args) / "risk_list.json"
    _write_json(path, rl.to_dict())
    for name in names:
        print(f"{name}: high {rl.top_values(name)}")
    print(path)


def cmd_grad_check(args):
    errs = gradient_suite(args.points, args.seed or 0)
    worst = max(errs.values())
    for name, e in errs.items():
        print(f"{name:20s} {e:.3e}")
    print(f"max relative error {worst:.3e} (limit {args.tol:g})")
    if args.out:
        _write_json(_out(args) / "grad_check.json", {"errors": errs, "max": worst, "limit": args.tol})
    return 0 if worst <= args.tol else 1


def cmd_selftest(args):
    checks = run_selftest(quick=args.quick)
    for c in checks:
        print(c.line())
    if args.out:
        _write_json(_out(args) / "selftest.json", [c.__dict__ for c in checks])
    failed = [c.name for c in checks if not c.passed]
    print("all checks passed" if not failed else f"failed: {', '.join(failed)}")
    return 0 if not failed else 1


# -- parser -----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="henfd", description="Hierarchical explainable fraud detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    def train_flags(sp):
        sp.add_argument("--config", help="TrainConfig JSON; flags override it")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any TrainConfig field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--maxfpr", type=float)
        sp.add_argument("--extractor", choices=("hen", "dense", "fm"))
        sp.add_argument("--trials", type=int, default=1, help="independent runs with seeds seed..seed+trials-1")
        sp.add_argument("--out", required=True)

    sp = add("gen-data", cmd_gen_data, "write a planted synthetic schema and one JSONL file per domain")
    sp.add_argument("--config", help="generator config JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-source", type=int)
    sp.add_argument("--n-target", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a single-domain model (time split 5/2/3)")
    sp.add_argument("--schema", required=True)
    sp.add_argument("--data", required=True)
    train_flags(sp)

    sp = add("transfer-train", cmd_transfer_train, "train in a cross-domain mode")
    sp.add_argument("--schema", required=True)
    sp.add_argument("--src-data", required=True)
    sp.add_argument("--tgt-data", required=True)
    sp.add_argument("--mode", choices=("target_only", "source_only", "pretrain", "pretrain_finetune",
                                       "domain_shared", "structure_only", "full"))
    sp.add_argument("--align", choices=("none", "ed", "ced"))
    train_flags(sp)

    sp = add("evaluate", cmd_evaluate, "score a split and report SPAUC and AUC")
    sp.add_argument("--ckpt", required=True, nargs="+", help="one checkpoint, or several to aggregate")
    sp.add_argument("--schema", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--maxfpr", type=float)
    sp.add_argument("--out", required=True)

    sp = add("explain", cmd_explain, "export attention explanations and heatmaps")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--schema", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--limit", type=int, default=10)
    sp.add_argument("--positives", action="store_true", help="explain only positive samples")
    sp.add_argument("--out", required=True)

    sp = add("risk-list", cmd_risk_list, "rank categorical values by wide-layer weight")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--schema", required=True)
    sp.add_argument("--data", required=True, help="samples used for the positive/total counts")
    sp.add_argument("--fields", nargs="+")
    sp.add_argument("--q", type=int, default=3)
    sp.add_argument("--domain", choices=("source", "target"), default="target")
    sp.add_argument("--out", required=True)

    sp = add("grad-check", cmd_grad_check, "finite-difference check of every op and full loss")
    sp.add_argument("--points", type=int, default=100)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--out")

    sp = add("selftest", cmd_selftest, "run the built-in numerical oracles")
    sp.add_argument("--quick", action="store_true")
    sp.add_argument("--out")
    return p


def _origin(exc) -> str:
    """Dotted module of the innermost package frame that raised ``exc``."""
    name = "henfd.cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        spec = frame.f_globals.get("__spec__")
        mod = spec.name if spec is not None else frame.f_globals.get("__name__", "")
        if mod.split(".")[0] == "henfd":
            name = mod
    return name


def _threads():
    raw = os.environ.get("HENFD_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HENFD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"HENFD_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            status = args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"henfd: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  every runtime failure becomes exit 1
        print(f"{_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
