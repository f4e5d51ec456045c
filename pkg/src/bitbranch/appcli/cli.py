"""Command-line front end: train, eval, bench, export, inspect.

Exit codes are part of the interface: 0 success, 2 configuration errors,
3 data errors, 4 numerical divergence.  Every training run writes its
fully resolved configuration, per-epoch metrics, and both stage
checkpoints into the output directory, so a run is reproducible from its
artifacts alone.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from bitbranch.appcli.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from bitbranch.appcli.config import ConfigError, RunConfig, load_config, write_resolved
from bitbranch.appcli.datasets import DataError, augment_flip_crop, load_cifar10
from bitbranch.appcli.export import (
    ExportError,
    check_equivalence,
    export_model,
    is_exported,
    load_exported_into,
    packed_weight_bytes,
)
from bitbranch.bench import (
    BenchError,
    bench_cases,
    binary_vs_addition_split,
    case_by_id,
    flag_suspect,
    memory_model,
    results_to_csv,
    run_case,
)
from bitbranch.bpac import BpacError
from bitbranch.groupnet import (
    BackboneSpec,
    GroupNetModel,
    build_variant,
    complexity_report,
)
from bitbranch.nnengine import (
    EngineError,
    NanError,
    TrainConfig,
    evaluate,
    make_rng,
    two_stage_train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NAN = 4


def build_from_config(cfg: RunConfig, stage: str = "stage2"
                      ) -> tuple[object, GroupNetModel]:
    """Construct the configured model for one training stage.

    "stage1" keeps real weights behind binary activations, "stage2" is
    fully binary, "float" is the full-precision ablation twin.
    """
    backbone = BackboneSpec(
        in_channels=3,
        num_classes=cfg.num_classes,
        stage_widths=tuple(cfg.stage_widths),
        blocks_per_stage=cfg.blocks_per_stage,
        image_size=cfg.image_size,
    )
    if stage == "stage1":
        weight_mode, act_mode = "real", "sign"
    elif stage == "stage2":
        weight_mode, act_mode = "sign", "sign"
    elif stage == "float":
        weight_mode, act_mode = "real", "real"
    else:
        raise ConfigError(f"unknown build stage {stage!r}")
    return build_variant(
        cfg.variant, backbone, k=cfg.k, n_select=cfg.n_select,
        k_train=cfg.k_train, seed=cfg.seed, second_path=cfg.second_path_mode,
        pad_mode=cfg.pad_mode, gate_mode=cfg.gate_mode or None,
        weight_mode=weight_mode, act_mode=act_mode,
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr0=cfg.lr0, batch_size=cfg.batch_size, seed=cfg.seed,
        weight_decay_stage1=cfg.weight_decay_stage1,
        weight_decay_stage2=cfg.weight_decay_stage2,
        epochs_stage1=cfg.epochs_stage1, epochs_stage2=cfg.epochs_stage2,
    )


def _load_train_data(cfg: RunConfig, override: str | None):
    path = override or cfg.dataset
    if not path:
        raise ConfigError("no dataset: set dataset= in the config or pass --data")
    ds = load_cifar10(path)
    images, labels = ds.images, ds.labels
    if cfg.limit_train:
        images, labels = images[: cfg.limit_train], labels[: cfg.limit_train]
    return images, labels, ds.channel_means


def _metrics_rows(res, stage_name: str):
    for s in res.stats:
        acc = "" if s.accuracy is None else f"{s.accuracy:.4f}"
        yield f"{stage_name},{s.epoch},{s.lr:.6g},{s.mean_loss:.6f},{acc}"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(cfg, os.path.join(args.out, "resolved.cfg"))
    images, labels, means = _load_train_data(cfg, args.data)
    print(f"training variant {cfg.variant} (K={cfg.k}) on {len(images)} images",
          flush=True)
    augment = augment_flip_crop if cfg.augment else None

    def build(stage: str):
        return build_from_config(cfg, stage)[1]

    model, res1, res2 = two_stage_train(
        build, images, labels, _train_config(cfg),
        log=lambda s: print(s, flush=True), augment=augment,
    )
    save_checkpoint(os.path.join(args.out, "stage1.gnck"), res1.state)
    save_checkpoint(os.path.join(args.out, "stage2.gnck"), res2.state)
    rows = ["stage,epoch,lr,loss,accuracy"]
    rows.extend(_metrics_rows(res1, "stage1"))
    rows.extend(_metrics_rows(res2, "stage2"))
    if args.eval_data:
        ds = load_cifar10(args.eval_data, channel_means=means)
        images_e, labels_e = ds.images, ds.labels
        if cfg.limit_eval:
            images_e, labels_e = images_e[: cfg.limit_eval], labels_e[: cfg.limit_eval]
        top1 = evaluate(model, images_e, labels_e)
        print(f"eval top-1 {top1:.4f}", flush=True)
        rows.append(f"eval,,,,{top1:.4f}")
    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    print(f"wrote checkpoints and metrics to {args.out}", flush=True)
    return EXIT_OK


def _state_from_checkpoint(path: str) -> dict:
    entries = load_checkpoint(path)
    if is_exported(entries):
        raise CheckpointError(
            f"{path} is an inference artifact; this command needs a training "
            "checkpoint"
        )
    return {name: np.asarray(v, dtype=np.float64) for name, v in entries.items()}


def _topk_accuracy(model, images, labels, k: int, batch_size: int = 256) -> float:
    hits = 0
    for lo in range(0, len(images), batch_size):
        out, _ = model.forward(images[lo:lo + batch_size], train=False)
        topk = np.argsort(-out, axis=1)[:, :k]
        hits += int((topk == labels[lo:lo + batch_size, None]).any(axis=1).sum())
    return hits / len(images)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _, model = build_from_config(cfg, "stage2")
    model.load_state_dict(_state_from_checkpoint(args.checkpoint))
    ds = load_cifar10(args.data)
    images, labels = ds.images, ds.labels
    if cfg.limit_eval:
        images, labels = images[: cfg.limit_eval], labels[: cfg.limit_eval]
    top1 = evaluate(model, images, labels)
    top5 = _topk_accuracy(model, images, labels, k=min(5, cfg.num_classes))
    print(f"top-1 {top1:.4f}")
    print(f"top-5 {top5:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    entries_in = load_checkpoint(args.checkpoint)
    if is_exported(entries_in):
        # exporting an artifact again must change nothing
        save_checkpoint(args.out, entries_in)
        print(f"{args.checkpoint} is already an inference artifact; "
              f"rewrote it unchanged to {args.out}")
        return EXIT_OK
    _, model = build_from_config(cfg, "stage2")
    model.load_state_dict(
        {name: np.asarray(v, dtype=np.float64) for name, v in entries_in.items()})
    entries = export_model(model)
    save_checkpoint(args.out, entries)
    _, restored = build_from_config(cfg, "stage2")
    load_exported_into(restored, load_checkpoint(args.out))
    worst = check_equivalence(
        model, restored, (cfg.image_size, cfg.image_size), 3,
        num_inputs=args.verify_inputs, seed=cfg.seed,
    )
    sizes = packed_weight_bytes(entries)
    print(f"wrote {args.out}: packed {sizes['packed_bytes']} B, "
          f"int8 {sizes['int8_bytes']} B, float {sizes['float_bytes']} B")
    print(f"verified on {args.verify_inputs} random inputs, "
          f"max logit diff {worst:.3e}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = load_config(args.config)
    spec, model = build_from_config(cfg, "stage2")
    if args.checkpoint:
        model.load_state_dict(_state_from_checkpoint(args.checkpoint))
    print(f"variant {cfg.variant}  decomposition {spec.decomposition}  "
          f"gating {spec.gating}")
    print(f"blocks {spec.num_blocks}  partition {spec.partition}  "
          f"bases/group {spec.bases_per_group}"
          + (f"  n_select {spec.n_select}" if spec.n_select else ""))
    print("precision exceptions: " + ", ".join(sorted(spec.precision_exceptions)))
    comp = complexity_report(model)
    print(f"binary_ops {comp['binary_ops']}")
    print(f"fixed_point_adds {comp['fixed_point_adds']}")
    print(f"param_bits {comp['param_bits']}")
    print(f"memory_saving {comp['memory_saving']:.2f}x")
    mem = memory_model(model)
    print(f"inference_weight_bytes {mem['inference_weight_bytes']}")
    print(f"inference_activation_bytes {mem['inference_activation_bytes']}")
    print(f"float_baseline_bytes {mem['float_baseline_bytes']}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.case == "all":
        cases = bench_cases()
    else:
        try:
            cases = [case_by_id(int(args.case))]
        except ValueError as exc:
            raise BenchError(f"--case must be 1..11 or 'all', got {args.case!r}") from exc
    results = []
    for case in cases:
        res = run_case(case, args.kernel, repeats=args.repeats, seed=args.seed)
        if args.kernel != "float":
            ref = run_case(case, "float", repeats=args.repeats, seed=args.seed)
            flag_suspect(res, ref)
            results.append(ref)
        results.append(res)
        note = "  [suspect: below 0.1 * sigma]" if res.suspect else ""
        print(f"case {case.case_id} {args.kernel}: {res.mean_us:.1f} us "
              f"+- {res.std_us:.1f} (sigma {res.analytic_sigma:.2f}){note}",
              flush=True)
        if args.split:
            split = binary_vs_addition_split(case, repeats=args.repeats,
                                             seed=args.seed)
            cheaper = "<" if split["fusion_cheaper"] else ">="
            print(f"  fusion adds {split['fusion_add_us']:.1f} us {cheaper} "
                  f"binary conv {split['binary_conv_us']:.1f} us", flush=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(results_to_csv(results))
        print(f"wrote {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bitbranch")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="two-stage training run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="override the config's dataset path")
    p.add_argument("--eval-data", help="held-out records for a final score")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="fold and pack a trained checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verify-inputs", type=int, default=100)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("inspect", help="print structure, complexity, memory")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("bench", help="time the packed kernels")
    p.add_argument("--case", default="all", help="1..11 or 'all'")
    p.add_argument("--kernel", default="binary",
                   help="binary | group:K | fixed:P | float")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write a CSV report here")
    p.add_argument("--split", action="store_true",
                   help="also time branch-fusion adds against the conv")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, BenchError, EngineError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ExportError, BpacError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NanError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    raise SystemExit(main())
