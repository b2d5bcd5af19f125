"""Command-line entry points.

Every option can also come from a JSON file passed with ``--config``; flags
override file values, which override built-in defaults. The resolved config is
the first record of every metrics file. Exit status is 2 for usage errors
(bad flags, missing files, inconsistent specs) and 1 for errors raised while
running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import (
    Dataset,
    MetricsWriter,
    gen_synthetic,
    load_checkpoint,
    load_csv,
    save_checkpoint,
)
from .distill import METRICS, DistillConfig
from .ensemble import ModelZoo, distill_ensemble
from .errors import MealError
from .experiments import ABLATION_ROWS, AblationRow, run_ablation
from .networks import BlockNetwork, BlockSpec, TeacherModel, TrainHyper, evaluate, pretrain_teacher
from .noisy import NoiseSpec, inject_noise, iterative_refine

log = logging.getLogger("meal")


class UsageError(Exception):
    pass


_OPTS: dict[str, dict[str, object]] = {}


def _opt(parser, cmd: str, flag: str, default=None, **kw) -> None:
    dest = kw.pop("dest", flag.lstrip("-").replace("-", "_"))
    _OPTS.setdefault(cmd, {})[dest] = default
    parser.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **kw)


def _int_list(text: str) -> list[int]:
    """``"1,3"`` or ``"0..4"`` (inclusive)."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 1,3 or 0..4, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_training(p, cmd, epochs=20):
    _opt(p, cmd, "--epochs", epochs, type=int)
    _opt(p, cmd, "--lr", 0.05, type=float)
    _opt(p, cmd, "--momentum", 0.9, type=float)
    _opt(p, cmd, "--batch-size", 64, type=int)
    _opt(p, cmd, "--seed", None, type=int, help="default: $MEAL_SEED, else 0")


def _add_data(p, cmd, val=True):
    _opt(p, cmd, "--data", None, help="CSV file, or synthetic:KIND:N:C:D:SEED")
    if val:
        _opt(p, cmd, "--val", None, help="validation data; default: hold out 20%% of --data")
    _opt(p, cmd, "--num-classes", None, type=int, help="class count for CSV input")


def _add_distill(p, cmd):
    _opt(p, cmd, "--student-spec", None, help='block widths, e.g. "64/64/32" or "64,64/64/32"')
    _opt(p, cmd, "--strategy", "joint", choices=["joint", "alternate"])
    _opt(p, cmd, "--metric", "ce", choices=list(METRICS))
    _opt(p, cmd, "--intermediate-metric", "l2", choices=list(METRICS))
    _opt(p, cmd, "--alpha", 1.0, type=float)
    _opt(p, cmd, "--beta", 1.0, type=float)
    _opt(p, cmd, "--pool", "avg", choices=["avg", "max"])
    _opt(p, cmd, "--pool-len", 32, type=int)
    _opt(p, cmd, "--block-weights", None, type=_float_list)
    _opt(p, cmd, "--k", 1, type=int)
    _opt(p, cmd, "--disc-hidden", 64, type=int)
    _opt(p, cmd, "--disc-input", "shared", choices=["shared", "swapped"])
    _opt(p, cmd, "--no-intermediate", False, action="store_true", dest="no_intermediate")
    _opt(p, cmd, "--no-adversarial", False, action="store_true", dest="no_adversarial")
    _add_training(p, cmd)


def build_parser() -> argparse.ArgumentParser:
    _OPTS.clear()
    parser = argparse.ArgumentParser(prog="meal", description="Adversarial ensemble distillation on small MLPs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a teacher on one-hot labels")
    _opt(p, "pretrain", "--spec", None, help='block widths, e.g. "64/64/32"')
    _add_data(p, "pretrain")
    _add_training(p, "pretrain", epochs=100)
    _opt(p, "pretrain", "--out", None, help="checkpoint path")
    _opt(p, "pretrain", "--metrics", None, help="JSONL metrics path")

    p = sub.add_parser("distill", help="distil one or more teacher checkpoints into a student")
    _opt(p, "distill", "--teachers", None, nargs="+")
    _add_data(p, "distill")
    _add_distill(p, "distill")
    _opt(p, "distill", "--out", None)
    _opt(p, "distill", "--metrics", None)

    p = sub.add_parser("ensemble", help="distil zoo prefixes of several sizes")
    _opt(p, "ensemble", "--zoo-dir", None)
    _opt(p, "ensemble", "--sizes", [1, 2, 3, 4], type=_int_list)
    _opt(p, "ensemble", "--seeds", None, type=_int_list, help="default: --seed")
    _add_data(p, "ensemble")
    _add_distill(p, "ensemble")
    _opt(p, "ensemble", "--out", None, help="output directory")

    p = sub.add_parser("refine", help="iterative refinement on noisy labels")
    _opt(p, "refine", "--zoo-dir", None)
    _opt(p, "refine", "--noise-rate", 0.3, type=float)
    _opt(p, "refine", "--rounds", 1, type=int)
    _opt(p, "refine", "--carry", 1, type=int, help="students trained and carried per round")
    _add_data(p, "refine")
    _add_distill(p, "refine")
    _opt(p, "refine", "--out", None, help="output directory")

    p = sub.add_parser("ablate", help="loss-component ablation on the built-in desk task")
    _opt(p, "ablate", "--grid", None, help="JSON file with a list of rows (default: the 8 standard rows)")
    _opt(p, "ablate", "--seeds", [0, 1, 2, 3, 4], type=_int_list)
    _opt(p, "ablate", "--teacher-epochs", 100, type=int)
    _opt(p, "ablate", "--student-epochs", 20, type=int)
    _opt(p, "ablate", "--out", None, help="output directory")

    p = sub.add_parser("evaluate", help="top-k error of a checkpoint")
    _opt(p, "evaluate", "--ckpt", None)
    _add_data(p, "evaluate", val=False)
    _opt(p, "evaluate", "--topk", [1, 3], type=_int_list)
    _opt(p, "evaluate", "--metrics", None)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", default=None, help="JSON file of option values")
    return parser


# ---------------------------------------------------------------- config resolution


def resolve(args: argparse.Namespace) -> dict:
    cmd = args.command
    defaults = dict(_OPTS[cmd])
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"{path}: expected a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"{path}: unknown option(s) for {cmd}: {', '.join(unknown)}")
    flags = {k: v for k, v in vars(args).items() if k in defaults}
    cfg = {**defaults, **file_cfg, **flags}
    if "seed" in cfg and cfg["seed"] is None:
        env = os.environ.get("MEAL_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"MEAL_SEED must be an integer, got {env!r}") from None
    return {"command": cmd, **cfg}


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{cfg['command']} requires {flags}")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_data(text: str, num_classes: int | None) -> Dataset:
    if text.startswith("synthetic:"):
        parts = text.split(":")
        if len(parts) != 6:
            raise UsageError(f"expected synthetic:KIND:N:C:D:SEED, got {text!r}")
        try:
            n, c, d, seed = (int(v) for v in parts[2:])
        except ValueError:
            raise UsageError(f"non-integer field in {text!r}") from None
        if num_classes is not None and num_classes != c:
            raise UsageError(f"--num-classes {num_classes} disagrees with {text!r}")
        return gen_synthetic(parts[1], n, c, d, seed)
    path = _existing(text, "data file")
    if num_classes is None:
        raise UsageError(f"--num-classes is required for CSV data ({path})")
    return load_csv(path, num_classes)


def _train_val(cfg: dict, num_classes: int | None = None) -> tuple[Dataset, Dataset]:
    c = cfg.get("num_classes") or num_classes
    data = _load_data(cfg["data"], c)
    if cfg.get("val"):
        return data, _load_data(cfg["val"], data.num_classes)
    train_set, val = data.split((0.8,), seed=cfg["seed"])
    return train_set, val


def _spec(text: str, dim: int, num_classes: int) -> BlockSpec:
    try:
        return BlockSpec.parse(str(text), dim, num_classes)
    except MealError as exc:
        raise UsageError(str(exc)) from None


def _hyper(cfg: dict, seed: int | None = None, epochs: int | None = None) -> TrainHyper:
    return TrainHyper(lr=cfg["lr"], momentum=cfg["momentum"], batch_size=cfg["batch_size"],
                      epochs=cfg["epochs"] if epochs is None else epochs,
                      seed=cfg["seed"] if seed is None else seed)


def _distill_config(cfg: dict) -> DistillConfig:
    bw = cfg["block_weights"]
    return DistillConfig(
        alpha=cfg["alpha"], beta=cfg["beta"], metric=cfg["metric"],
        intermediate_metric=cfg["intermediate_metric"], pool_length=cfg["pool_len"],
        pooling="max" if cfg["pool"] == "max" else "average",
        block_weights=None if bw is None else tuple(bw), strategy=cfg["strategy"], k=cfg["k"],
        use_intermediate=not cfg["no_intermediate"], use_adversarial=not cfg["no_adversarial"],
        disc_hidden=cfg["disc_hidden"], disc_input=cfg["disc_input"])


def _load_teachers(paths) -> list[TeacherModel]:
    out = []
    for p in paths:
        model = load_checkpoint(_existing(p, "teacher checkpoint"))
        if not isinstance(model, TeacherModel):
            model = TeacherModel(BlockNetwork(model.spec, model.params.frozen()), 0.0, True, {"path": str(p)})
        out.append(model)
    return out


def _zoo_from_dir(path: str) -> ModelZoo:
    d = _existing(path, "zoo directory")
    files = sorted(d.glob("*.ckpt"))
    if not files:
        raise UsageError(f"no *.ckpt files in {d}")
    return _zoo(_load_teachers(files))


def _zoo(teachers: list[TeacherModel]) -> ModelZoo:
    try:
        return ModelZoo(teachers)
    except MealError as exc:
        raise UsageError(f"inconsistent teachers: {exc}") from None


def _student_for(cfg: dict, zoo: ModelZoo, dim: int) -> BlockSpec:
    spec = _spec(cfg["student_spec"], dim, zoo.num_classes)
    if spec.num_blocks != zoo.num_blocks:
        raise UsageError(f"student has {spec.num_blocks} blocks but the teachers have {zoo.num_blocks}")
    return spec


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- subcommands


def cmd_pretrain(cfg: dict) -> int:
    _require(cfg, "spec", "data", "out")
    train_set, val = _train_val(cfg)
    spec = _spec(cfg["spec"], train_set.dim, train_set.num_classes)
    history: list[float] = []
    teacher = pretrain_teacher(spec, train_set, val, _hyper(cfg), history)
    teacher.provenance.update({"epochs": cfg["epochs"]})
    save_checkpoint(teacher, cfg["out"], {"config": cfg})
    if cfg["metrics"]:
        with MetricsWriter(cfg["metrics"], cfg) as w:
            for i, loss in enumerate(history, start=1):
                w.write({"type": "epoch", "epoch": i, "train_loss": loss})
            w.write({"type": "result", "val_accuracy": teacher.val_accuracy})
    print(f"val accuracy {teacher.val_accuracy:.4f} -> {cfg['out']}")
    return 0


def cmd_distill(cfg: dict) -> int:
    _require(cfg, "teachers", "student_spec", "data", "out")
    zoo = _zoo(_load_teachers(cfg["teachers"]))
    dcfg = _distill_config(cfg)
    train_set, val = _train_val(cfg, zoo.num_classes)
    student = _student_for(cfg, zoo, train_set.dim)
    sink = MetricsWriter(cfg["metrics"], cfg) if cfg["metrics"] else None
    try:
        res = distill_ensemble(zoo, student, train_set, val, dcfg, _hyper(cfg), sink=sink)
    finally:
        if sink:
            sink.close()
    save_checkpoint(res.student, cfg["out"], {"config": cfg, "best_iteration": res.best_iteration})
    print(f"val accuracy {res.best_val_accuracy:.4f} (iteration {res.best_iteration}) -> {cfg['out']}")
    return 0


def cmd_ensemble(cfg: dict) -> int:
    _require(cfg, "zoo_dir", "student_spec", "data", "out")
    zoo = _zoo_from_dir(cfg["zoo_dir"])
    dcfg = _distill_config(cfg)
    for n in cfg["sizes"]:
        if not 1 <= n <= len(zoo):
            raise UsageError(f"ensemble size {n} outside [1, {len(zoo)}]")
    train_set, val = _train_val(cfg, zoo.num_classes)
    student = _student_for(cfg, zoo, train_set.dim)
    out = _outdir(cfg["out"])
    seeds = cfg["seeds"] or [cfg["seed"]]
    with MetricsWriter(out / "summary.jsonl", cfg) as summary:
        for n in cfg["sizes"]:
            for seed in seeds:
                tag = f"size{n}_seed{seed}"
                with MetricsWriter(out / f"{tag}.jsonl", {**cfg, "size": n, "seed": seed}) as sink:
                    res = distill_ensemble(zoo.head(n), student, train_set, val, dcfg, _hyper(cfg, seed), sink)
                save_checkpoint(res.student, out / f"{tag}.ckpt", {"size": n, "seed": seed})
                summary.write({"type": "result", "size": n, "seed": seed, "val_accuracy": res.best_val_accuracy})
                print(f"size {n} seed {seed}: val accuracy {res.best_val_accuracy:.4f}")
    return 0


def cmd_refine(cfg: dict) -> int:
    _require(cfg, "zoo_dir", "student_spec", "data", "out")
    zoo = _zoo_from_dir(cfg["zoo_dir"])
    dcfg = _distill_config(cfg)
    if cfg["rounds"] < 0 or cfg["carry"] < 1:
        raise UsageError("--rounds must be >= 0 and --carry >= 1")
    train_set, val = _train_val(cfg, zoo.num_classes)
    student = _student_for(cfg, zoo, train_set.dim)
    noisy, mask = inject_noise(train_set, NoiseSpec(cfg["noise_rate"], seed=cfg["seed"]))
    out = _outdir(cfg["out"])
    res = iterative_refine(zoo, student, noisy, val, cfg["rounds"], dcfg, _hyper(cfg), cfg["carry"])
    with MetricsWriter(out / "refine.jsonl", cfg) as w:
        w.write({"type": "noise", "flipped": int(mask.sum()), "rows": len(mask)})
        for rr in res.rounds:
            for i, r in enumerate(rr.results):
                save_checkpoint(r.student, out / f"round{rr.round}_student{i}.ckpt", {"round": rr.round})
                for m in r.history:
                    w.write({"type": "step", "round": rr.round, "student": i, **m.to_dict()})
            w.write({"type": "result", "round": rr.round, "zoo_size": rr.zoo_size,
                     "val_accuracy": rr.best.best_val_accuracy})
            print(f"round {rr.round}: val accuracy {rr.best.best_val_accuracy:.4f}")
    save_checkpoint(res.student, out / "final.ckpt", {"rounds": cfg["rounds"]})
    return 0


def _grid_rows(path: str | None) -> list[AblationRow]:
    if path is None:
        return list(ABLATION_ROWS)
    p = _existing(path, "grid file")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON: {exc}") from None
    if isinstance(raw, dict):
        raw = raw.get("rows")
    if not isinstance(raw, list) or not raw:
        raise UsageError(f"{p}: expected a non-empty list of rows")
    try:
        rows = [AblationRow.from_dict(r) for r in raw]
        for r in rows:
            if r.metric is not None:
                r.config()
    except (MealError, KeyError, TypeError, AttributeError) as exc:
        raise UsageError(f"{p}: bad row: {exc}") from None
    if len({r.name for r in rows}) != len(rows):
        raise UsageError(f"{p}: row names must be unique")
    return rows


def cmd_ablate(cfg: dict) -> int:
    _require(cfg, "out")
    rows = _grid_rows(cfg["grid"])
    out = _outdir(cfg["out"])
    with MetricsWriter(out / "ablation.jsonl", {**cfg, "rows": [r.to_dict() for r in rows]}) as w:
        rep = run_ablation(cfg["seeds"], rows, teacher_epochs=cfg["teacher_epochs"],
                           student_epochs=cfg["student_epochs"])
        for r, line in zip(rows, rep.lines()):
            w.write({"type": "row", **r.to_dict(), "seeds": rep.seeds, "test_accuracy": rep.accuracy[r.name],
                     "mean": rep.mean(r.name)})
            print(line)
    return 0


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "ckpt", "data")
    model = load_checkpoint(_existing(cfg["ckpt"], "checkpoint"))
    spec = model.spec
    data = _load_data(cfg["data"], cfg["num_classes"] or spec.num_classes)
    if data.num_classes != spec.num_classes or data.dim != spec.input_dim:
        raise UsageError(f"data ({data.dim} features, {data.num_classes} classes) does not match the "
                         f"checkpoint ({spec.input_dim} features, {spec.num_classes} classes)")
    for k in cfg["topk"]:
        if not 1 <= k <= spec.num_classes:
            raise UsageError(f"--topk {k} outside [1, {spec.num_classes}]")
    errors = {k: evaluate(model, data, k) for k in cfg["topk"]}
    for k, e in errors.items():
        print(f"top-{k} error {e:.4f}")
    if cfg["metrics"]:
        with MetricsWriter(cfg["metrics"], cfg) as w:
            w.write({"type": "result", "rows": len(data), **{f"top{k}_error": e for k, e in errors.items()}})
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "ensemble": cmd_ensemble,
    "refine": cmd_refine,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"meal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except MealError as exc:
        print(f"meal {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"meal {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
