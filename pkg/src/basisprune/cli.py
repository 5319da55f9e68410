"""Command line entry point.

Config values come from the ``--config`` JSON file (defaults otherwise);
``key=value`` overrides win over the file, and ``--seed``/``--out``/``--top-k``
win over both.

Exit codes: 0 success, 2 config/usage error, 3 numerical failure,
4 bound violation (bounds-check only).
"""

import argparse
import json
import sys
import time
from pathlib import Path

from . import importance, persist, spectra, suites
from . import model as mdl
from .errors import (CheckpointError, InvalidConfig, InvalidInput, NumericalFailure,
                     DomainError, InsufficientSpectrum)
from .numkit import RngStream
from .probe import choose_epsilon

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_BOUND = 0, 2, 3, 4
METHODS = ("bsi", "gradient-only", "magnitude", "svd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="basisprune", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker cap; computation is sequential so results never change")
    common.add_argument("--no-timing", action="store_true",
                        help="write 0 in wall-time columns for byte-identical outputs")
    common.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted config overrides, e.g. schedule.keep_ratio=0.5")
    for name, help_ in [("train", "train the dense-equivalent basis-form model"),
                        ("compress", "prune bases from a trained checkpoint"),
                        ("eval", "evaluate a checkpoint and/or summarize a metrics CSV"),
                        ("estimator-bench", "variance sweep of the diagonal estimator"),
                        ("bounds-check", "soundness suite for the closed-form bounds"),
                        ("spectrum", "block-diagonal sigma-space Hessian spectrum")]:
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name in ("compress", "eval", "spectrum"):
            sp.add_argument("--checkpoint", type=Path, help="input checkpoint "
                            "(default: <out>/model.ckpt)")
        if name == "compress":
            sp.add_argument("--method", default="bsi",
                            help="comma-separated subset of " + ", ".join(METHODS))
        if name == "eval":
            sp.add_argument("--metrics", type=Path, help="metrics CSV to summarize")
        if name == "spectrum":
            sp.add_argument("--top-k", type=int, help="sigma parameters per layer")
        if name == "bounds-check":
            sp.add_argument("--bound-scale", type=float, default=None,
                            help=argparse.SUPPRESS)
    return p


def resolve_config(args):
    cfg = persist.load_config(args.config) if args.config else persist.RunConfig()
    cfg = persist.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    if getattr(args, "top_k", None) is not None:
        cfg.top_k = args.top_k
    if args.threads < 1:
        raise InvalidConfig("--threads must be >= 1")
    return cfg


def datasets(cfg):
    d = cfg.dataset
    train = mdl.make_dataset(d.kind, d.classes, d.dims, d.n, cfg.seed, d.batch_size, split=0)
    test = mdl.make_dataset(d.kind, d.classes, d.dims, max(d.n // 2, 1), cfg.seed,
                            d.batch_size, split=1)
    if not train:
        raise InvalidConfig("dataset.n must be positive")
    return train, test


def _out_dir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _row(round_idx, iteration, model, batches, wall=0):
    loss, acc = mdl.evaluate(model, batches)
    return dict(round=round_idx, iteration=iteration, loss=loss, accuracy=acc,
                active_bases_total=model.num_active(), param_count=model.param_count(),
                wall_time_ms=wall)


def cmd_train(cfg, args):
    train, test = datasets(cfg)
    sizes = [cfg.dataset.dims] + list(cfg.model.hidden) + [cfg.dataset.classes]
    model = mdl.init_mlp(sizes, RngStream.named(cfg.seed, "init"), cfg.model.aux_rank,
                         cfg.model.activation)
    rng = RngStream.named(cfg.seed, "train")
    state = mdl.SgdState(momentum=cfg.train.momentum)
    t0 = time.perf_counter()
    rows = [_row(0, 0, model, test)]
    step = 0
    for epoch in range(cfg.train.epochs):
        for b in rng.permutation(len(train)):
            mdl.train_step(model, train[int(b)], state, cfg.train.learning_rate)
            step += 1
        wall = 0 if args.no_timing else int(round((time.perf_counter() - t0) * 1000))
        rows.append(_row(0, step, model, test, wall))
    out = _out_dir(cfg)
    persist.save_checkpoint(model, out / "model.ckpt", cfg.seed)
    persist.write_metrics(rows, out / "train_metrics.csv")
    _, train_acc = mdl.evaluate(model, train)
    print(f"train: epochs={cfg.train.epochs} train_accuracy={train_acc:.4f} "
          f"test_accuracy={rows[-1]['accuracy']:.4f} loss={rows[-1]['loss']:.6f}")
    return EXIT_OK


def _epsilon(cfg, model):
    p = cfg.probe
    if p.epsilon is not None:
        return float(p.epsilon)
    return choose_epsilon(model.sigma_max(), p.fraction_bits, p.rel_tol, p.eps_max)


def compress_one(cfg, model, method, train, test, timing=True):
    """Run one compression method on a copy of ``model``; returns (model, rows, rounds)."""
    model = model.copy()
    sch = cfg.schedule
    if method == "svd":
        importance.svd_truncate(model, sch.keep_ratio)
        rows = [_row(1, 0, model, test)]
        rounds = []
    else:
        schedule = importance.PruneSchedule(sch.pruning_epochs, sch.pruning_rounds,
                                            sch.num_iter_per_epoch, sch.sampling_iter_ratio,
                                            sch.keep_ratio, sch.gamma)
        res = importance.run_compression(
            model, train, schedule, policy=method.replace("-", "_"),
            epsilon=_epsilon(cfg, model), num_probes=cfg.probe.num_probes, seed=cfg.seed,
            lr=cfg.train.learning_rate, momentum=cfg.train.momentum, timing=timing,
            eval_batches=test)
        rows, rounds = res.metrics, res.rounds
    iters = cfg.train.finetune_epochs * len(train)
    if iters:
        importance.finetune(model, train, iters, cfg.seed, cfg.train.learning_rate,
                            cfg.train.momentum)
        last = rows[-1]
        rows.append(_row(last["round"], last["iteration"] + iters, model, test))
    return model, rows, rounds


def cmd_compress(cfg, args):
    methods = [m.strip() for m in args.method.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise InvalidConfig(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    out = _out_dir(cfg)
    ckpt = args.checkpoint or out / "model.ckpt"
    base, _ = persist.load_checkpoint(ckpt)
    train, test = datasets(cfg)
    original = base.param_count()
    summary = []
    for m in methods:
        model, rows, rounds = compress_one(cfg, base, m, train, test, timing=not args.no_timing)
        persist.save_checkpoint(model, out / f"compressed_{m}.ckpt", cfg.seed)
        persist.write_metrics(rows, out / f"metrics_{m}.csv")
        persist.write_rows_csv(out / f"rounds_{m}.csv",
                               ("round", "iteration", "layer", "pool_size", "pruned",
                                "positive_total", "kept_total", "target",
                                "keep_ratio_per_pruning", "active_before", "active_after",
                                "probes_verified", "forced"),
                               [(r.round, r.iteration, lr.layer, int(lr.pool.size),
                                 int(lr.pruned.size), lr.positive_total, lr.kept_total,
                                 lr.target, r.keep_ratio_per_pruning, r.active_before,
                                 r.active_after, r.probes_checked, int(r.forced))
                                for r in rounds for lr in r.layers])
        basis_storage = sum(l.num_active * (1 + l.in_features + l.out_features)
                            for l in model.layers)
        aux = sum(l.aux_rank * (l.in_features + l.out_features) for l in model.layers)
        orig_basis = sum(l.num_active * (1 + l.in_features + l.out_features) for l in base.layers)
        summary.append((m, rows[-1]["accuracy"], rows[-1]["loss"], model.num_active(),
                        model.param_count(), basis_storage / orig_basis if orig_basis else 0.0))
        print(f"compress[{m}]: accuracy={rows[-1]['accuracy']:.4f} "
              f"active_bases={model.num_active()} params={model.param_count()}/{original} "
              f"basis_storage_ratio={summary[-1][-1]:.4f} aux_params={aux} "
              f"meets_keep_ratio={summary[-1][-1] <= cfg.schedule.keep_ratio + 1e-12}")
    if len(methods) > 1:
        persist.write_rows_csv(out / "comparison.csv",
                               ("method", "accuracy", "loss", "active_bases", "param_count",
                                "basis_storage_ratio"), summary)
    return EXIT_OK


def cmd_eval(cfg, args):
    out = Path(cfg.output_dir)
    if args.metrics:
        rows = persist.read_metrics(args.metrics)
        last = rows[-1] if rows else None
        print(f"metrics: rows={len(rows)}" + (
            f" final_round={last['round']} final_accuracy={last['accuracy']:.4f} "
            f"final_params={last['param_count']}" if last else ""))
        if args.checkpoint is None:
            return EXIT_OK
    model, _ = persist.load_checkpoint(args.checkpoint or out / "model.ckpt")
    train, test = datasets(cfg)
    tr_loss, tr_acc = mdl.evaluate(model, train)
    te_loss, te_acc = mdl.evaluate(model, test)
    print(f"eval: train_loss={tr_loss:.6f} train_accuracy={tr_acc:.4f} "
          f"test_loss={te_loss:.6f} test_accuracy={te_acc:.4f} "
          f"active_bases={model.num_active()} params={model.param_count()}")
    return EXIT_OK


def cmd_bench(cfg, args):
    b = cfg.bench
    rows = suites.estimator_bench(b.n, b.trials, tuple(b.probes), cfg.seed,
                                  timing=not args.no_timing)
    out = _out_dir(cfg)
    persist.write_rows_csv(out / "estimator_bench.csv", suites.BENCH_HEADER, rows)
    print(f"estimator-bench: {len(rows)} rows -> {out / 'estimator_bench.csv'}")
    return EXIT_OK


def cmd_bounds(cfg, args):
    b = cfg.bounds
    scale = args.bound_scale if args.bound_scale is not None else b.bound_scale
    checks = suites.bounds_check(cfg.seed, scale, b.trials, b.n, b.eps, b.delta)
    out = _out_dir(cfg)
    report = dict(seed=cfg.seed, bound_scale=scale, passed=all(c["passed"] for c in checks),
                  check_ids=sorted({c["check"] for c in checks}), checks=checks)
    (out / "bounds_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    failed = [c for c in checks if not c["passed"]]
    for check_id in report["check_ids"]:
        group = [c for c in checks if c["check"] == check_id]
        bad = sum(not c["passed"] for c in group)
        print(f"{'FAIL' if bad else 'PASS'} {check_id}: {len(group) - bad}/{len(group)}")
    for c in failed[:10]:
        print(f"  violation {c['check']}: observed={c['observed']!r} bound={c['bound']!r} "
              f"inputs={c['inputs']}", file=sys.stderr)
    return EXIT_BOUND if failed else EXIT_OK


def cmd_spectrum(cfg, args):
    out = _out_dir(cfg)
    model, _ = persist.load_checkpoint(args.checkpoint or out / "model.ckpt")
    train, _ = datasets(cfg)
    res = spectra.block_diag_sv_spectrum(model, train, cfg.top_k)
    persist.write_spectrum_csv(out / "spectrum.csv", res)
    fit = res.fit
    line = (f"lambda1_abs={fit.lambda1_abs!r} alpha={fit.alpha!r} n={fit.n} "
            f"floor={fit.floor!r} assumption_violated={fit.assumption_violated}")
    (out / "spectrum_summary.txt").write_text(line + "\n")
    print("spectrum: " + line)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compress": cmd_compress, "eval": cmd_eval,
            "estimator-bench": cmd_bench, "bounds-check": cmd_bounds, "spectrum": cmd_spectrum}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (InvalidConfig, InvalidInput, DomainError, InsufficientSpectrum, CheckpointError,
            FileNotFoundError, TypeError) as exc:
        print(f"basisprune {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"basisprune {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
