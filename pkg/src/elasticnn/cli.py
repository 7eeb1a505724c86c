"""Command-line driver for the train, prune, rebuild, switch, eval and report cycle.

Exit codes: 0 success, 1 failed nesting check, 2 usage error, 3 data or
shape error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import zoo
from .checkpoint import Checkpoint
from .data import SynthDataset, make_synth
from .elastic import LevelStack, cost_report, iterative_pipeline, models_equal, rebuild
from .errors import DataError, DivergenceError, GraphError, PruneError, ShapeError
from .importance import METHODS
from .trainer import TrainConfig, config_dict, evaluate, fit

EXIT_OK, EXIT_NESTING, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("elasticnn")


# ------------------------------------------------------------------ helpers


def _out(line: str = "") -> None:
    sys.stdout.write(line + "\n")


def _table(rows: Sequence[dict], cols: Sequence[tuple[str, str]]) -> str:
    """Right-aligned text table; ``cols`` pairs a row key with a header."""
    cells = [[h for _, h in cols]] + [[_fmt(r.get(k)) for k, _ in cols] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(cols))]
    lines = ["  ".join(c[i].rjust(widths[i]) for i in range(len(cols))) for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (int, np.integer)):
        return f"{int(v):,}"
    return str(v)


def _data_config(arch, args=None, stored: dict | None = None) -> dict:
    cfg = dict(stored or {})
    cfg.setdefault("name", "synth")
    cfg.setdefault("n", 2048)
    cfg.setdefault("seed", 0)
    cfg.setdefault("noise", 0.6)
    if arch is not None:
        cfg["num_classes"] = arch.num_classes
        cfg["size"] = arch.input_shape[1]
    for key in ("n", "noise"):
        val = getattr(args, key, None) if args is not None else None
        if val is not None:
            cfg[key] = val
    if args is not None and getattr(args, "data_seed", None) is not None:
        cfg["seed"] = args.data_seed
    return cfg


def _dataset(model, cfg: dict) -> SynthDataset:
    if cfg.get("name", "synth") != "synth":
        raise DataError(f"unknown dataset {cfg.get('name')!r}; only 'synth' is built in")
    c, h, w = model.input_shape
    if c != 3 or h != w:
        raise DataError(f"synthetic data is 3xSxS, model expects {model.input_shape}")
    ds = make_synth(cfg["n"], model.num_classes, h, cfg["seed"], cfg["noise"])
    return ds.astype(model.dtype)


def _train_config(args, stored: dict | None = None) -> TrainConfig:
    base = dict(stored or {})
    base.pop("epochs", None)
    fields = TrainConfig.__dataclass_fields__
    kwargs = {k: v for k, v in base.items() if k in fields}
    if getattr(args, "lr", None) is not None:
        kwargs["lr_max"] = args.lr
        kwargs["lr_min"] = min(kwargs.get("lr_min", 1e-5), args.lr)
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    return TrainConfig(epochs=max(1, getattr(args, "epochs", 1) or 1), **kwargs)


def _cost_rows(stack: LevelStack | None, model) -> list[dict]:
    if stack is None:
        return [dict(level=0, active=True, **cost_report(model))]
    rows = []
    for level in range(stack.depth + 1):
        m = stack.model if level == stack.top_level else stack.switch_capacity(level)
        rows.append(dict(level=level, active=level == stack.top_level, **cost_report(m)))
    return rows


_COST_COLS = [("level", "level"), ("active", "active"), ("params", "params"), ("flops", "FLOPs"), ("mb", "MB")]


def _print_costs(rows: list[dict], json_lines: bool) -> None:
    if json_lines:
        for r in rows:
            _out(json.dumps({k: r[k] for k in ("level", "active", "params", "flops", "bytes", "mb")}))
    else:
        _out(_table(rows, _COST_COLS))


def _print_widths(stack: LevelStack) -> None:
    widths = stack.widths()
    if not widths or not widths[0]:
        _out("no channels removed")
        return
    cols = [("group", "group")] + [(f"L{i}", f"L{i}") for i in range(len(widths))]
    rows = [{"group": name, **{f"L{i}": w[name] for i, w in enumerate(widths)}} for name in widths[0]]
    _out(_table(rows, cols))


def _load(path: str) -> Checkpoint:
    try:
        return ckpt_io.load(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path!r} not found") from None


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    dtype = np.float64 if args.dtype == "float64" else np.float32
    model = zoo.build(args.arch, seed=args.seed, dtype=dtype)
    data_cfg = _data_config(model.arch, args)
    ds = _dataset(model, data_cfg)
    cfg = _train_config(args)
    history: list[dict] = []
    if args.epochs > 0:
        stream = sys.stdout if args.json_lines else None
        _, history = fit(model, ds, cfg, stream=stream)
        for row in history:
            row["stage"] = "train"
    train, val = ds.split(1 - cfg.val_fraction)
    metrics = {"train_accuracy": evaluate(model, train), "val_accuracy": evaluate(model, val), "params": model.count_params()}
    ckpt = Checkpoint(model, None, {"data": data_cfg, "train": config_dict(cfg), "seed": args.seed}, history)
    ckpt_io.save(ckpt, args.out)
    if args.json_lines:
        _out(json.dumps(metrics))
    else:
        _out(_table([metrics], [("params", "params"), ("train_accuracy", "train acc"), ("val_accuracy", "val acc")]))
        _out(f"saved {args.out}")
    return EXIT_OK


def _finetuner(model, ckpt: Checkpoint, args, history: list, stage: str):
    if args.epochs <= 0:
        return None
    ds = _dataset(model, ckpt.config.get("data") or _data_config(model.arch))
    cfg = _train_config(args, ckpt.config.get("train"))

    def run(m, mask=None):
        _, hist = fit(m, ds, cfg, mask)
        history.extend(dict(row, stage=stage) for row in hist)
        return m

    return run


def cmd_prune(args) -> int:
    ckpt = _load(args.inp)
    base = ckpt.stack
    if base is not None and base.top_level != base.depth:
        raise PruneError(f"checkpoint is at level {base.top_level}; switch to the core level {base.depth} before pruning further")
    model = ckpt.model
    batches = None
    if args.method in ("taylor", "hessian"):
        ds = _dataset(model, ckpt.config.get("data") or _data_config(model.arch))
        train, _ = ds.split()
        gen = train.batches(args.batch_size)
        batches = [next(gen) for _ in range(min(args.grad_batches, -(-len(train) // args.batch_size)))]
    history = list(ckpt.history)
    ft = _finetuner(model, ckpt, args, history, "finetune")
    res = iterative_pipeline(
        model, args.steps, args.ratio, args.method, args.finetune_each, ft,
        args.scope, args.layers, set(args.protect or ()), batches,
    )
    new = res.stack
    if base is not None:
        for r in new.records:
            r.step += base.depth
        new = LevelStack(base.records + new.records, new.model, base.depth + new.depth, base.arch, base.costs + new.costs[1:])
    config = dict(ckpt.config)
    config.setdefault("prune", []).append(
        {"ratio": args.ratio, "method": args.method, "scope": args.scope, "layers": args.layers, "steps": args.steps}
    )
    out = Checkpoint(new.model, new, config, history)
    ckpt_io.save(out, args.out)
    _print_costs(_cost_rows(new, new.model), args.json_lines)
    if not args.json_lines:
        _out()
        _print_widths(new)
        _out(f"saved {args.out}")
    return EXIT_OK


def cmd_rebuild(args) -> int:
    ckpt = _load(args.inp)
    stack = ckpt.stack
    if stack is None:
        raise PruneError("checkpoint has no prune records to rebuild from")
    k = stack.top_level if args.levels is None else args.levels
    if not 0 <= k <= stack.top_level:
        raise PruneError(f"cannot rebuild {k} levels: checkpoint is at level {stack.top_level}")
    core = ckpt.model
    history = list(ckpt.history)
    ft = _finetuner(core, ckpt, args, history, "rebuild")
    ds = _dataset(core, ckpt.config.get("data") or _data_config(core.arch)) if args.eval else None
    val = ds.split()[1] if ds is not None else None

    model, level, rows = core, stack.top_level, []
    for _ in range(k):
        rec = stack.records[level - 1]
        model, mask = rebuild(model, rec)
        if ft is not None:
            model = ft(model, mask)
        level -= 1
        row = {"level": level, "params": model.count_params(), "recorded": rec.pre_params}
        row["match"] = row["params"] == row["recorded"]
        if val is not None:
            row["val_acc"] = evaluate(model, val)
        rows.append(row)
    new = LevelStack(stack.records, model, level, stack.arch, list(stack.costs))
    ckpt_io.save(Checkpoint(model, new, dict(ckpt.config), history), args.out)

    cols = [("level", "level"), ("params", "params"), ("recorded", "recorded"), ("match", "match")]
    if val is not None:
        cols.append(("val_acc", "val acc"))
    if args.json_lines:
        for r in rows:
            _out(json.dumps(r))
    elif rows:
        _out(_table(rows, cols))
    status = EXIT_OK
    if args.check_nesting:
        ok = models_equal(new.switch_capacity(stack.top_level), core)
        _out(f"nesting check: {'PASS' if ok else 'FAIL'}")
        status = EXIT_OK if ok else EXIT_NESTING
    if not args.json_lines:
        _out(f"saved {args.out}")
    return status


def cmd_switch(args) -> int:
    ckpt = _load(args.inp)
    stack = ckpt.stack
    if stack is None:
        if args.level != 0:
            raise PruneError(f"level {args.level} does not exist: checkpoint holds only level 0")
        ckpt_io.save(ckpt, args.out)
        return EXIT_OK
    model = stack.switch_capacity(args.level)
    new = LevelStack(stack.records, model, args.level, stack.arch, list(stack.costs))
    ckpt_io.save(Checkpoint(model, new, dict(ckpt.config), list(ckpt.history)), args.out)
    if args.json_lines:
        _out(json.dumps({"level": args.level, "params": model.count_params(), "out": args.out}))
    else:
        _out(f"level {args.level}: {model.count_params():,} params, saved {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load(args.inp)
    model = ckpt.model
    ds = _dataset(model, _data_config(model.arch, args, ckpt.config.get("data")))
    train, val = ds.split()
    part = {"train": train, "val": val, "all": ds}[args.split]
    acc = evaluate(model, part, args.batch_size)
    row = {"level": ckpt.level, "split": args.split, "samples": len(part), "accuracy": acc}
    if args.json_lines:
        _out(json.dumps(row))
    else:
        _out(f"level {ckpt.level} {args.split} accuracy {acc:.4f} ({len(part)} samples)")
    return EXIT_OK


def cmd_report(args) -> int:
    ckpt = _load(args.inp)
    rows = _cost_rows(ckpt.stack, ckpt.model)
    _print_costs(rows, args.json_lines)
    if ckpt.stack is not None and not args.json_lines:
        _out()
        _print_widths(ckpt.stack)
    if args.figures:
        from .plotting import render_report

        widths = ckpt.stack.widths() if ckpt.stack is not None else []
        for path in render_report(rows, widths, args.figures):
            if args.json_lines:
                _out(json.dumps({"figure": path}))
            else:
                _out(f"figure {path}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _ratio(text: str) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"ratio must lie in [0, 1), got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elasticnn", description="Prune, rebuild and switch nested CNN capacity levels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common_train(sp, epochs):
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--lr", type=float, default=None, help="peak learning rate (cosine annealed)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--json-lines", action="store_true", help="emit JSON lines instead of tables")

    t = sub.add_parser("train", help="train a zoo architecture on synthetic data")
    t.add_argument("--arch", required=True, help=f"one of {', '.join(sorted(zoo.ZOO))}")
    t.add_argument("--data", choices=["synth"], default="synth")
    t.add_argument("--out", required=True)
    t.add_argument("--n", type=int, default=None, help="dataset size (default 2048)")
    t.add_argument("--noise", type=float, default=None)
    t.add_argument("--data-seed", type=int, default=None)
    t.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    common_train(t, 12)
    t.set_defaults(func=cmd_train, seed=0)

    pr = sub.add_parser("prune", help="prune the active model into a level stack")
    pr.add_argument("--in", dest="inp", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--ratio", type=_ratio, required=True)
    pr.add_argument("--method", choices=METHODS, default="l2_global")
    pr.add_argument("--scope", choices=["local", "global"], default=None, help="default: local for l1, global otherwise")
    pr.add_argument("--layers", choices=["all", "alternate"], default="all")
    pr.add_argument("--steps", type=int, default=1)
    pr.add_argument("--finetune-each", action="store_true", help="fine-tune after every step, not only the last")
    pr.add_argument("--protect", nargs="*", help="layer ids whose outputs must not be pruned")
    pr.add_argument("--grad-batches", type=int, default=4)
    pr.add_argument("--batch-size", type=int, default=32)
    common_train(pr, 0)
    pr.set_defaults(func=cmd_prune)

    rb = sub.add_parser("rebuild", help="grow the active model back by K levels")
    rb.add_argument("--in", dest="inp", required=True)
    rb.add_argument("--out", required=True)
    rb.add_argument("--levels", type=int, default=None, help="levels to rebuild (default: all)")
    rb.add_argument("--check-nesting", action="store_true")
    rb.add_argument("--eval", action="store_true", help="report validation accuracy per level")
    common_train(rb, 3)
    rb.set_defaults(func=cmd_rebuild)

    sw = sub.add_parser("switch", help="materialise another capacity level")
    sw.add_argument("--in", dest="inp", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--level", type=int, required=True)
    sw.add_argument("--json-lines", action="store_true")
    sw.set_defaults(func=cmd_switch)

    ev = sub.add_parser("eval", help="accuracy of the active level")
    ev.add_argument("--in", dest="inp", required=True)
    ev.add_argument("--data", choices=["synth"], default="synth")
    ev.add_argument("--split", choices=["train", "val", "all"], default="val")
    ev.add_argument("--n", type=int, default=None)
    ev.add_argument("--noise", type=float, default=None)
    ev.add_argument("--data-seed", type=int, default=None)
    ev.add_argument("--batch-size", type=int, default=256)
    ev.add_argument("--json-lines", action="store_true")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="per-level params, FLOPs and MB")
    rp.add_argument("--in", dest="inp", required=True)
    rp.add_argument("--figures", default=None, help="directory for PNG figures")
    rp.add_argument("--json-lines", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (GraphError, PruneError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
