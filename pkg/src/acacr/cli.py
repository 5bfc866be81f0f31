"""Command-line surface: data generation, training, evaluation, inference,
the three-way ablation, and attention inspection.

Exit codes: 0 success, 2 usage/config error, 3 I/O failure, 4 numerical
divergence, 5 checkpoint/input incompatibility.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import export_similarity, similarity_csv, similarity_heatmap_png
from .data import generate_dataset, load_manifest
from .network import (CheckpointError, NetworkConfig, build_network, forward,
                      load_checkpoint)
from .tensor import Tensor
from .trainer import (DivergenceError, TrainConfig, AdamState,
                      evaluate, save_training_checkpoint, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_INCOMPATIBLE = 5


class UsageError(Exception):
    pass


class IncompatibleError(Exception):
    pass


_CONFIG_KEYS = {"network", "train", "data", "out"}


def load_run_config(path: Path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        network = NetworkConfig.from_dict(doc.get("network", {}))
        train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return {"network": network, "train": train_cfg, "raw": doc}


def _write_run_manifest(out: Path, payload: dict) -> None:
    with open(out / "run.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_variant(variant: str, network_cfg: NetworkConfig, train_cfg: TrainConfig,
                   manifest, out: Path):
    cfg = NetworkConfig(c_in=network_cfg.c_in, channels=network_cfg.channels,
                        alpha=network_cfg.alpha, variant=variant,
                        patch_size=network_cfg.patch_size)
    rng = T.RngStream(train_cfg.seed)
    params = build_network(cfg, rng)
    state = AdamState.for_params(params.tensors())
    train_rng = T.RngStream(train_cfg.seed + 1)
    result = train(params, manifest, train_cfg, state=state, rng=train_rng)

    out.mkdir(parents=True, exist_ok=True)
    save_training_checkpoint(out / "checkpoint.ckpt", params, state, train_rng,
                             step=train_cfg.steps, train_config=train_cfg)
    (out / "loss.csv").write_text(result.loss_csv())
    report = evaluate(params, manifest, "test", ssim_mode=train_cfg.ssim_mode)
    (out / "eval.csv").write_text(report.to_csv())
    _write_run_manifest(out, {
        "command": "train",
        "variant": variant,
        "network": cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "dataset": str(manifest.root),
        "dataset_seed": manifest.seed,
    })
    return params, report


# -- subcommands ------------------------------------------------------------

def cmd_generate_data(args) -> int:
    if not 0.0 <= args.coverage <= 1.0:
        raise UsageError("--coverage must be in [0, 1]")
    if not 0.0 <= args.softness <= 1.0:
        raise UsageError("--softness must be in [0, 1]")
    if args.count < 1 or args.size < 8:
        raise UsageError("--count must be >= 1 and --size >= 8")
    generate_dataset(args.out, seed=args.seed, count=args.count,
                     h=args.size, w=args.size, c_in=args.bands,
                     coverage=args.coverage, softness=args.softness)
    print(f"wrote dataset to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(Path(args.config))
    manifest = _load_data(args.data)
    variant = args.variant or cfg["network"].variant
    if variant not in ("base", "ca", "ac"):
        raise UsageError(f"unknown variant {variant!r}")
    _train_variant(variant, cfg["network"], cfg["train"], manifest, Path(args.out))
    print(f"training complete; artifacts in {args.out}")
    return EXIT_OK


def _load_data(path):
    try:
        return load_manifest(path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset manifest under {path}: {exc}") from exc


def _load_net_checkpoint(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    except CheckpointError as exc:
        raise IncompatibleError(str(exc)) from exc


def cmd_eval(args) -> int:
    params, _ = _load_net_checkpoint(args.checkpoint)
    manifest = _load_data(args.data)
    if params.config.c_in != manifest.c_in:
        raise IncompatibleError(
            f"checkpoint expects {params.config.c_in} bands, dataset has {manifest.c_in}")
    report = evaluate(params, manifest, args.split, ssim_mode=args.ssim_mode)
    csv_text = report.to_csv()
    sys.stdout.write(csv_text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv_text)
    return EXIT_OK


def _read_image(path: Path) -> np.ndarray:
    if path.suffix == ".tnsr":
        return T.load_tnsr(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        img = np.asarray(Image.open(path))
        if img.ndim == 2:
            img = img[:, :, None]
        return (img.astype(np.float32) / 255.0)
    raise UsageError(f"unsupported input format: {path}")


def cmd_infer(args) -> int:
    params, _ = _load_net_checkpoint(args.checkpoint)
    in_path = Path(args.input)
    img = _read_image(in_path)
    if img.shape[2] != params.config.c_in:
        raise IncompatibleError(
            f"input has {img.shape[2]} bands, checkpoint expects {params.config.c_in}")
    mult = params.config.size_multiple
    h, w = img.shape[:2]
    if h % mult or w % mult:
        raise UsageError(f"input extents {h}x{w} must be multiples of {mult}")
    with T.no_grad():
        pred = forward(Tensor(img), params)
    restored = np.clip(pred.data, 0.0, 1.0)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix.lower() == ".png":
        from PIL import Image

        data = (restored * 255.0).round().astype(np.uint8)
        Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data).save(out_path)
    else:
        T.save_tnsr(out_path, restored.astype(np.float32))
        if restored.shape[2] == 3:
            from PIL import Image

            data = (restored * 255.0).round().astype(np.uint8)
            Image.fromarray(data).save(out_path.with_suffix(".png"))
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_run_config(Path(args.config))
    manifest = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["variant,mae,mse,psnr_db,ssim,sam_deg"]
    for variant in ("base", "ca", "ac"):
        _, report = _train_variant(variant, cfg["network"], cfg["train"],
                                   manifest, out / variant)
        mean = report.mean_row()
        rows.append(f"{variant},{mean.mae:.10g},{mean.mse:.10g},"
                    f"{mean.psnr_db:.10g},{mean.ssim:.10g},{mean.sam_deg:.10g}")
    table = "\n".join(rows) + "\n"
    (out / "ablation.csv").write_text(table)
    _write_run_manifest(out, {
        "command": "compare",
        "variants": ["base", "ca", "ac"],
        "network": cfg["network"].to_dict(),
        "train": cfg["train"].to_dict(),
        "dataset": str(manifest.root),
        "dataset_seed": manifest.seed,
    })
    sys.stdout.write(table)
    return EXIT_OK


def query_to_patch_index(r: float, c: float, h: int, w: int, s: int) -> int:
    """Map fractional image coordinates to the nearest patch index on the
    attended grid."""
    if not (0.0 <= r <= 1.0 and 0.0 <= c <= 1.0):
        raise UsageError("query coordinates must lie in [0, 1]")
    row = min(h - 1, round(r * (h - 1)))
    col = min(w - 1, round(c * (w - 1)))
    return (row // s) * (w // s) + (col // s)


def cmd_inspect_attention(args) -> int:
    params, _ = _load_net_checkpoint(args.checkpoint)
    if params.config.variant == "base":
        raise IncompatibleError("base-variant checkpoints have no attention blocks")
    img = _read_image(Path(args.input))
    if img.shape[2] != params.config.c_in:
        raise IncompatibleError(
            f"input has {img.shape[2]} bands, checkpoint expects {params.config.c_in}")
    try:
        r_str, c_str = args.query.split(",")
        r, c = float(r_str), float(c_str)
    except ValueError as exc:
        raise UsageError(f"--query must be 'r,c' fractions, got {args.query!r}") from exc
    if not 0.0 < args.top <= 1.0:
        raise UsageError("--top must be in (0, 1]")

    # re-run the forward pass capturing each attention block's input feature
    from .network import racab, residual_block
    from . import tensor as TT

    attn_cfg = params.config.attention_config()
    feats = []
    with T.no_grad():
        feat = TT.relu(TT.conv2d(Tensor(img), params.stem))
        for blk in params.blocks:
            if blk.is_attention:
                half = TT.relu(TT.conv2d(TT.relu(TT.conv2d(feat, blk.conv1, stride=2)),
                                         blk.conv2))
                feats.append((blk, half))
                feat = racab(feat, blk, params.config.alpha, attn_cfg)
            else:
                feat = residual_block(feat, blk, params.config.alpha)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (blk, half) in enumerate(feats):
        hh, wh = half.shape[0], half.shape[1]
        qidx = query_to_patch_index(r, c, hh, wh, attn_cfg.patch_size)
        record = export_similarity(half, blk.attn, attn_cfg, qidx, args.top)
        (out / f"racab{i}.csv").write_text(similarity_csv(record))
        similarity_heatmap_png(record.s_p_row, record.grid_h, record.grid_w,
                               out / f"racab{i}.s_p.png")
        if record.s_att_row is not None:
            similarity_heatmap_png(record.s_att_row, record.grid_h, record.grid_w,
                                   out / f"racab{i}.s_att.png")
        top = {
            "query_index": record.query_index,
            "top_s_p": record.top_s_p,
            "top_s_att": record.top_s_att,
        }
        (out / f"racab{i}.top.json").write_text(json.dumps(top, indent=2) + "\n")
    print(f"wrote attention inspection for {len(feats)} blocks to {out}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acacr",
                                description="attentive-attention cloud removal toolkit")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS thread cap (best effort)")
    p.add_argument("--f64", action="store_true",
                   help="run in float64 verification mode")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=12)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--bands", type=int, default=3)
    g.add_argument("--coverage", type=float, default=0.4)
    g.add_argument("--softness", type=float, default=0.3)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["base", "ca", "ac"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--ssim-mode", choices=["global", "windowed"], default="global")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="restore one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("compare", help="train and evaluate base/ca/ac")
    c.add_argument("--config", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("inspect-attention", help="export similarity rows")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--input", required=True)
    a.add_argument("--query", default="0.3,0.6",
                   help="fractional (row,col) image coordinates")
    a.add_argument("--top", type=float, default=0.05)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_inspect_attention)
    return p


def _apply_globals(args) -> None:
    if args.f64:
        T.set_default_dtype(np.float64)
    if args.threads:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=args.threads)
        except ImportError:
            pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_globals(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
