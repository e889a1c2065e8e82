"""Command-line entry point: ``sparsemerge {train,merge,eval,sweep}``.

Exit status: 0 success, 1 usage or input error, 2 numeric failure (non-finite
loss), 3 unreadable adapter file (bad magic, version or layout).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import adapterfile, harness
from .config import DEFAULTS, ConfigError, desk_config, dump_config, load_config, merge_spec, train_config
from .errors import DimensionError, FormatError, InputError, NumericError, TrainingError
from .merging import METHODS, merge
from .model import Model
from .trainer import train_full, train_lora, train_multitask, train_sparse

log = logging.getLogger("sparsemerge")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_FORMAT = 0, 1, 2, 3
TRAIN_METHODS = ("sparse", "block-sparse", "lora", "full", "multitask")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsemerge", description="Train, merge and evaluate sparse adapters on synthetic task suites.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="flat key = value experiment config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out-dir", help="overrides the config out_dir")

    t = sub.add_parser("train", help="train one expert per held-in task")
    common(t)
    t.add_argument("--method", choices=TRAIN_METHODS, default="sparse")
    t.add_argument("--workers", type=int)
    t.add_argument("--kr", type=float)
    t.add_argument("--rank", type=int)
    t.add_argument("--block-size", type=int)
    t.add_argument("--tasks", help="comma-separated task ids (default: every held-in task)")

    m = sub.add_parser("merge", help="merge adapter files into one")
    m.add_argument("inputs", nargs="+", help="adapter files")
    m.add_argument("--merge", dest="method", choices=METHODS, default="sparse-overlap")
    m.add_argument("--lambda", dest="lam", type=float)
    m.add_argument("--trim", type=float)
    m.add_argument("--beta", type=float)
    m.add_argument("--gamma", type=float)
    m.add_argument("--out", required=True, help="merged adapter file")

    e = sub.add_parser("eval", help="test accuracy of adapter files on a suite")
    common(e)
    e.add_argument("adapters", nargs="*", help="adapter files (none: the base model alone)")
    e.add_argument("--suite", choices=("held-in", "held-out", "all"), default="all")
    e.add_argument("--out", help="CSV path (default: <out_dir>/eval.csv)")

    s = sub.add_parser("sweep", help="run a sweep and write a JSON report")
    common(s)
    s.add_argument("kind", choices=("experts", "kr", "block-size", "layers"))
    s.add_argument("--n-grid", type=_int_list)
    s.add_argument("--merge", dest="method", choices=METHODS)
    s.add_argument("--trials", type=int)
    s.add_argument("--out", help="JSON path (default: <out_dir>/sweep-<kind>.json)")
    return p


# -- shared plumbing -------------------------------------------------------------------


def _settings(args) -> dict:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out_dir", None):
        cfg["out_dir"] = args.out_dir
    if getattr(args, "workers", None):
        cfg["workers"] = args.workers
    return cfg


def _bundle(cfg: dict):
    """Base model and suite, rebuilt from (config, seed) and cached under out_dir."""
    desk = desk_config(cfg)
    # the base depends on the seed, model and suite settings (and on epochs via the gate)
    relevant = {k: v for k, v in cfg.items() if k.split(".")[0] in ("seed", "model", "suite") or k == "train.epochs"}
    key = hashlib.sha256(dump_config(relevant).encode()).hexdigest()[:12]
    cache = Path(cfg["out_dir"]) / f"base-{key}.npz"
    if cache.is_file():
        from .taskgen import build_suite

        kw = dict(n_train=desk.n_train, n_val=desk.n_val, n_test=desk.n_test, margin_quantile=desk.margin_quantile)
        with np.load(cache, allow_pickle=False) as z:
            weights = {k: z[k] for k in z.files if k != "__seeds__"}
            seeds = z["__seeds__"] if "__seeds__" in z.files else None
        for w in weights.values():
            w.flags.writeable = False
        base = Model(desk.model, weights)
        held_in, held_out = build_suite(desk.n_held_in, desk.n_held_out, seed=cfg["seed"], **kw)
        if seeds is not None and [t.spec.seed for t in held_in] != list(seeds):
            held_in = _regate(held_in, seeds, kw)
        return base, held_in, held_out
    base, held_in, held_out = harness.prepare_bundle(desk, cfg["seed"])
    cache.parent.mkdir(parents=True, exist_ok=True)
    tmp = cache.with_name(cache.name + ".tmp.npz")
    np.savez(tmp, __seeds__=np.array([t.spec.seed for t in held_in]), **dict(base.weights))
    tmp.replace(cache)
    return base, held_in, held_out


def _regate(held_in, seeds, kw):
    # tasks replaced by the learnability gate are recreated from their recorded seeds
    from .taskgen import generate_task

    return [
        t if t.spec.seed == s else generate_task(dataclasses.replace(t.spec, seed=int(s)))
        for t, s in zip(held_in, seeds)
    ]


def _train_one(job):
    method, base, task, cfg_dict, rank = job
    tc = train_config(cfg_dict)
    if method == "sparse":
        return train_sparse(base, task, tc)
    if method == "block-sparse":
        if not tc.block_size:
            raise InputError("block-sparse training needs --block-size or train.block_size")
        return train_sparse(base, task, tc)
    if method == "lora":
        return train_lora(base, task, rank, dataclasses.replace(tc, learning_rate=cfg_dict["lora.learning_rate"]))
    return train_full(base, task, dataclasses.replace(tc, learning_rate=cfg_dict["full.learning_rate"]))


# -- commands ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _settings(args)
    if args.kr is not None:
        cfg["train.kr"] = args.kr
    if args.block_size is not None:
        cfg["train.block_size"] = args.block_size
    rank = args.rank if args.rank is not None else cfg["lora.rank"]
    base, held_in, _ = _bundle(cfg)
    tasks = held_in
    if args.tasks:
        wanted = args.tasks.split(",")
        known = {t.task_id: t for t in held_in}
        missing = [w for w in wanted if w not in known]
        if missing:
            raise InputError(f"unknown task ids: {', '.join(missing)}")
        tasks = [known[w] for w in wanted]
    out = Path(cfg["out_dir"]) / args.method
    if args.method == "multitask":
        tc = dataclasses.replace(train_config(cfg), learning_rate=cfg["full.learning_rate"])
        experts = [train_multitask(base, tasks, tc)]
    else:
        jobs = [(args.method, base, t, cfg, rank) for t in tasks]
        if cfg["workers"] > 1:
            with ProcessPoolExecutor(cfg["workers"]) as pool:
                experts = list(pool.map(_train_one, jobs))
        else:
            experts = [_train_one(j) for j in jobs]
    rows = []
    for ex in experts:
        path = out / f"{ex.task_id}.sadp"
        adapterfile.write(ex, path, {"seed": cfg["seed"], "method": args.method})
        log.info("wrote %s", path)
        for h in ex.meta.get("history", []):
            rows.append({"task_id": ex.task_id, **h})
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["task_id", "epoch", "train_loss", "val_loss"])
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def cmd_merge(args) -> int:
    loaded = []
    for path in args.inputs:
        obj, meta = adapterfile.read(path)
        loaded.append((path, obj))
    shapes = {}
    bad = []
    for path, obj in loaded:
        for lid, shape in _shapes(obj).items():
            if shapes.setdefault(lid, (shape, path))[0] != shape:
                bad.append(f"{path} ({lid} {shape} vs {shapes[lid][0]} in {shapes[lid][1]})")
    layer_sets = {frozenset(_shapes(obj)) for _, obj in loaded}
    if len(layer_sets) > 1:
        bad.append("layer sets differ: " + ", ".join(f"{p}={sorted(_shapes(o))}" for p, o in loaded))
    if bad:
        raise DimensionError("incompatible adapter files: " + "; ".join(bad))
    spec = merge_spec(
        {**DEFAULTS, "merge.method": args.method},
        lam=args.lam,
        trim=args.trim,
        beta=args.beta,
        gamma=args.gamma,
    )
    merged = merge([obj for _, obj in loaded], spec)
    provenance = [adapterfile.file_hash(p) for p, _ in loaded]
    adapterfile.write(merged, args.out, {"provenance": provenance, "inputs": [str(p) for p, _ in loaded], "merge": spec.to_dict()})
    log.info("wrote %s", args.out)
    return EXIT_OK


def _shapes(obj) -> dict:
    if hasattr(obj, "values") and isinstance(obj.values, dict):
        return {k: v.shape for k, v in obj.values.items()}
    if hasattr(obj, "a"):
        return {k: (obj.a[k].shape[0], obj.b[k].shape[1]) for k in obj.a}
    return {k: v.shape for k, v in obj.deltas.items()}


def cmd_eval(args) -> int:
    cfg = _settings(args)
    base, held_in, held_out = _bundle(cfg)
    suites = {"held-in": held_in, "held-out": held_out, "all": held_in + held_out}[args.suite]
    results = []
    if args.adapters:
        targets = [(adapterfile.read(p)[0], p) for p in args.adapters]
    else:
        targets = [(None, "base")]
    for delta, name in targets:
        for task in suites:
            split = "held-in" if task in held_in else "held-out"
            r = harness.evaluate(base, delta, task, method=str(name), seed=cfg["seed"], merge_name=split)
            results.append(r)
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / "eval.csv"
    harness.write_results_csv(results, out)
    log.info("wrote %s (%d rows)", out, len(results))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _settings(args)
    base, held_in, _ = _bundle(cfg)
    tc = train_config(cfg)
    spec = merge_spec(cfg, method=args.method)
    if args.kind == "experts":
        grid = args.n_grid or cfg["sweep.n_grid"]
        trials = args.trials or cfg["sweep.trials"]
        sparse = [train_sparse(base, t, tc) for t in held_in]
        full_tc = dataclasses.replace(tc, learning_rate=cfg["full.learning_rate"])
        full = [train_full(base, t, full_tc) for t in held_in]
        reports = harness.scaling_sweep(
            base,
            {"sparse-overlap": sparse, "uniform": full},
            held_in,
            {"sparse-overlap": harness.DESK_MERGES["sparse-overlap"], "uniform": harness.DESK_MERGES["uniform"]},
            n_values=grid,
            trials=trials,
            seed=cfg["seed"],
        )
    else:
        grid = {"kr": cfg["sweep.kr_grid"], "block-size": cfg["sweep.block_grid"], "layers": cfg["sweep.layer_grid"]}[args.kind]
        if args.kind == "block-size":
            tc = dataclasses.replace(tc, criterion="MCS")
        reports = harness.train_sweep(args.kind, grid, base, held_in, tc, spec if spec.method == "sparse-overlap" else None)
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / f"sweep-{args.kind}.json"
    harness.write_json({k: v.to_dict() for k, v in reports.items()}, out)
    log.info("wrote %s", out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "merge": cmd_merge, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"sparsemerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sparsemerge: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingError) as exc:
        print(f"sparsemerge: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"sparsemerge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (InputError, DimensionError, FileNotFoundError) as exc:
        print(f"sparsemerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
