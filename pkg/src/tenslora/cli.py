"""``tenslora`` command line.

Exit codes: 0 success, 1 usage error, 2 validation or verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from . import autograd as ag
from .adapters import TENSOR_VARIANTS, ModelDims, TensLoRAAdapter, merge, parse_variant, rank_label
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .planner import plan_from_ranks, plan_isoparameters, plan_isorank, preset_table2, round_k
from .testbed import TransformerBackbone, evaluate, init_backbone, loss_graph, train_adapter

DIMS_ALIASES = {
    "vit-base": ModelDims(768, 12, 12),
    "roberta-base": ModelDims(768, 12, 12),
    "desk": ModelDims(32, 4, 3),
    "tiny": ModelDims(8, 2, 3),
}

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(args) -> ModelDims:
    explicit = [args.d, args.h, args.L]
    if any(v is not None for v in explicit):
        if not all(v is not None for v in explicit):
            raise UsageError("--d, --h and --L must be given together")
        try:
            return ModelDims(args.d, args.h, args.L)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        return DIMS_ALIASES[args.dims]
    except KeyError:
        raise UsageError(f"unknown dims alias {args.dims!r}; known: {', '.join(DIMS_ALIASES)}") from None


# --------------------------------------------------------------------------
# params


def params_rows(dims: ModelDims, lora_rank: int = 4) -> list:
    """All 15 rows: LoRA, seven isorank, seven pinned budget-matched plans."""
    lora = plan_isorank("LoRA", dims, lora_rank)
    rows = [("-", lora)]
    rows += [("isorank", plan_isorank(v, dims, lora_rank)) for v in TENSOR_VARIANTS]
    rows += [("isoparameters", plan_from_ranks(v, dims, preset_table2(v), lora_rank)) for v in TENSOR_VARIANTS]
    return rows


def format_params(dims: ModelDims, lora_rank: int = 4, fmt: str = "md") -> str:
    header = ["regime", "configuration", "rank", "params", "params_k", "percent_of_lora"]
    body = []
    for regime, plan in params_rows(dims, lora_rank):
        rank = str(lora_rank) if regime != "isoparameters" else rank_label(plan.variant, plan.ranks)
        body.append([regime, plan.variant, rank, plan.count, round_k(plan.count), f"{plan.percent_of_lora}"])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    lines = [
        "| Regime | Configuration | Rank | # Params | (% of LoRA) |",
        "|---|---|---|---:|---:|",
    ]
    for regime, variant, rank, count, k, pct in body:
        lines.append(f"| {regime} | {variant} | {rank} | {count:,} ({k}k) | {pct}% |")
    return "\n".join(lines) + "\n"


def cmd_params(args) -> int:
    if args.lora_rank < 1:
        raise UsageError("--lora-rank must be >= 1")
    sys.stdout.write(format_params(_dims(args), args.lora_rank, args.format))
    return EXIT_OK


# --------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    try:
        variant = parse_variant(args.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if variant == "LoRA":
        raise UsageError("LoRA takes --lora-rank only")
    dims = _dims(args)
    if args.isorank:
        result = plan_isorank(variant, dims, args.lora_rank)
    else:
        result = plan_isoparameters(variant, dims, args.lora_rank, args.policy)
    print(json.dumps(result.as_dict(), indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck


def gradcheck(cfg: ExperimentConfig, h: float = 1e-5, max_coords: int | None = None, perturb: float = 0.1, batch: int = 8) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of the training loss with respect to every adapter parameter."""
    backbone = init_backbone(cfg.backbone)
    adapter = cfg.adapter()
    if perturb:
        adapter = adapter.randomized(perturb, seed=cfg.raw["adapter"]["seed"] + 1)
    data = cfg.dataset("train").subset(slice(0, batch))
    names = sorted(adapter.params)

    def f(vs):
        return loss_graph(backbone, adapter, data.tokens, data.labels, dict(zip(names, vs)))

    return ag.finite_diff_check(f, [adapter.params[n] for n in names], h=h, max_coords=max_coords)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    err = gradcheck(cfg, h=args.step, max_coords=args.max_coords, perturb=args.perturb)
    ok = bool(err < args.tol)
    report = {
        "variant": cfg.variant,
        "ranks": cfg.ranks,
        "max_relative_error": err,
        "tolerance": args.tol,
        "passed": ok,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# checkpoints, train, merge, evaluate


def _meta(cfg: ExperimentConfig, kind: str, adapter: TensLoRAAdapter | None) -> dict:
    return {
        "kind": kind,
        "variant": adapter.variant if adapter else None,
        "ranks": adapter.ranks if adapter else None,
        "alpha": adapter.alpha if adapter else None,
        "seeds": {
            "backbone": cfg.raw["backbone"]["seed"],
            "adapter": cfg.raw["adapter"]["seed"],
            "train": cfg.raw["train"]["seed"],
            "task": cfg.raw["task"]["seed"],
        },
        "config": cfg.raw,
    }


def write_run(out, cfg: ExperimentConfig, backbone: TransformerBackbone, adapter: TensLoRAAdapter | None, kind: str = "run") -> Path:
    tensors = {f"backbone.{k}": v for k, v in backbone.weights.items()}
    if adapter is not None:
        tensors.update({f"adapter.{k}": v for k, v in adapter.params.items()})
    return save_checkpoint(out, tensors, _meta(cfg, kind, adapter))


def read_run(directory) -> tuple:
    """``(config, backbone, adapter or None)`` from a checkpoint directory."""
    tensors, manifest = load_checkpoint(directory)
    cfg = load_config(manifest["config"])
    backbone = TransformerBackbone(
        cfg.backbone, {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
    )
    adapter = None
    if manifest.get("variant"):
        adapter = TensLoRAAdapter(
            manifest["variant"], cfg.dims, dict(manifest["ranks"]), float(manifest["alpha"]),
            {k[len("adapter."):]: v for k, v in tensors.items() if k.startswith("adapter.")},
        )
    return cfg, backbone, adapter


def cmd_init(args) -> int:
    cfg = load_config(args.config)
    write_run(args.out, cfg, init_backbone(cfg.backbone), cfg.adapter())
    print(json.dumps({"checkpoint": str(args.out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    backbone = init_backbone(cfg.backbone)
    before = backbone.checksum()
    result = train_adapter(backbone, cfg.adapter(), cfg.dataset("train"), cfg.train)
    if result.backbone.checksum() != before:
        print("frozen backbone weights changed during training", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out)
    write_run(out, cfg, result.backbone, result.adapter)
    with open(out / "log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "accuracy"])
        for step, loss, lr, acc in result.log_rows():
            w.writerow([step, repr(loss), repr(lr), repr(acc)])
    summary = {
        "checkpoint": str(out),
        "final_loss": result.log[-1]["loss"],
        "train_accuracy": evaluate(result.backbone, result.adapter, cfg.dataset("train")),
        "eval_accuracy": evaluate(result.backbone, result.adapter, cfg.dataset("eval")),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg, backbone, adapter = read_run(args.checkpoint)
    if adapter is None:
        raise UsageError(f"{args.checkpoint} holds no adapter to merge")
    merged = merge(adapter, backbone)
    write_run(args.out, cfg, merged, None, kind="merged")
    print(json.dumps({"checkpoint": str(args.out), "adapter_parameters": 0}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, backbone, adapter = read_run(args.checkpoint)
    acc = evaluate(backbone, adapter, cfg.dataset(args.split))
    print(json.dumps({"split": args.split, "accuracy": acc}))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tenslora", description="Tensor-structured low-rank adapters.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def dims_args(p):
        p.add_argument("--dims", default="vit-base", help="alias: " + ", ".join(DIMS_ALIASES))
        p.add_argument("--d", type=int)
        p.add_argument("--h", type=int)
        p.add_argument("--L", type=int)

    p = sub.add_parser("params", help="parameter counts for every configuration")
    dims_args(p)
    p.add_argument("--lora-rank", type=int, default=4)
    p.add_argument("--format", choices=("md", "csv"), default="md")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("plan", help="choose ranks for a variant")
    dims_args(p)
    p.add_argument("--variant", required=True)
    p.add_argument("--policy", choices=("closest", "not-exceeding", "not_exceeding"), default="closest")
    p.add_argument("--lora-rank", type=int, default=4)
    p.add_argument("--isorank", action="store_true", help="give every mode the LoRA rank instead")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("gradcheck", help="finite-difference audit of adapter gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-coords", type=int)
    p.add_argument("--perturb", type=float, default=0.1, help="std of random cores (0 keeps the zero init)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("init", help="write an untrained checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="train an adapter; writes a checkpoint and log.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="fold the adapter into the backbone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _thread_limit():
    value = os.environ.get("TENSLORA_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"tenslora: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, ValueError, FloatingPointError) as exc:
        print(f"tenslora: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
