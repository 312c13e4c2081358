"""Command-line entry point: train, fuse, eval, reconstruct, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

Every artifact embeds the seed, a hash of the resolved configuration and the
tool version.  CSV artifacts contain no timestamps, so two runs with equal
config hashes in sequential mode (--threads 1) are byte-identical.

BLAS thread counts must be pinned before numpy first loads, so --threads is
read in a pre-parse and the compute modules are imported inside the command
handlers, not at module top.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from .errors import ConfigError, DataError, NumericError

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _pin_threads(argv: list[str]) -> None:
    val = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            val = argv[i + 1]
        elif arg.startswith("--threads="):
            val = arg.split("=", 1)[1]
    if val is None:
        return
    try:
        int(val)
    except ValueError:
        return  # argparse reports the bad value later
    for var in _THREAD_ENV_VARS:
        os.environ[var] = val


# -- configuration -------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch": 32,
    "lr": 1e-3,
    "pooling": "lgca",
    "tau": 5.0,
    "seed": 0,
}


def _load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def resolve_config(args, keys: dict) -> dict:
    """defaults <- config file <- command-line flags (flags win)."""
    cfg = dict(keys)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise ConfigError(f"config file keys not recognized: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def config_hash(command: str, cfg: dict) -> int:
    canon = json.dumps({"command": command, **cfg}, sort_keys=True)
    return int(hashlib.sha256(canon.encode()).hexdigest()[:16], 16)


def _run_stamp(seed: int, chash: int) -> str:
    from . import __version__

    return f"seed={seed} config_hash={chash:016x} tool_version={__version__}"


# -- dataset assembly -----------------------------------------------------------


def _training_patch_array(data_root: Path, manifest_path, tau: float):
    import numpy as np

    from .data import extract_patches, filter_patch, load_image, read_manifest

    if manifest_path:
        entries = read_manifest(manifest_path)
        base = Path(manifest_path).parent
        paths = sorted(base / e.path for e in entries if e.split == "train")
        if not paths:
            raise DataError(f"manifest {manifest_path} has no train-split entries")
    else:
        if not data_root.is_dir():
            raise DataError(f"training data directory not found: {data_root}")
        paths = sorted(p for p in data_root.iterdir()
                       if p.suffix.lower() in (".png", ".pgm", ".ppm"))
        if not paths:
            raise DataError(f"no images found under {data_root}")

    tiles = []
    for path in paths:
        img = load_image(path)
        if img.ndim != 2:
            raise DataError(f"{path}: training images must be grayscale")
        if img.shape == (256, 256):
            tiles.extend(extract_patches(img, tau=tau, source=str(path)).patches)
        elif img.shape == (64, 64):
            if filter_patch(img, tau):
                tiles.append(img)
        else:
            raise DataError(f"{path}: expected 256x256 source or 64x64 patch, got {img.shape}")
    if not tiles:
        raise DataError(f"no patches retained at tau={tau}")

    from .fusion import model_from_unit, unit_from_pixels

    stack = np.stack([model_from_unit(unit_from_pixels(t)) for t in tiles])
    return stack[:, None, :, :]


def _load_pairs(manifest_path, split: str | None):
    from .data import load_image, manifest_pairs, read_manifest

    entries = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    pairs = manifest_pairs(entries, split=split)
    if not pairs:
        raise DataError(f"manifest {manifest_path} has no pairs in split {split!r}")
    out = []
    for pid, mr, other in pairs:
        out.append((pid, load_image(base / mr.path), load_image(base / other.path)))
    return out


# -- report writers --------------------------------------------------------------


def _metric_rows(reports) -> list[list[str]]:
    rows = [[r.pair_id] + [f"{v:.17g}" for v in r.values()] for r in reports]
    return rows


def _summary_stats(reports):
    import numpy as np

    table = np.array([r.values() for r in reports], dtype=np.float64)
    return table.mean(axis=0), table.std(axis=0)


def _write_metric_csv(path, reports, stamp: str, label_col: str = "pair_id",
                      summary: bool = True) -> None:
    from .metrics import MetricReport

    lines = [f"# {stamp}", ",".join([label_col, *MetricReport.COLUMNS])]
    for row in _metric_rows(reports):
        lines.append(",".join(row))
    if summary and len(reports) > 1:
        mean, std = _summary_stats(reports)
        lines.append(",".join(["mean"] + [f"{v:.17g}" for v in mean]))
        lines.append(",".join(["std"] + [f"{v:.17g}" for v in std]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_metric_md(path, reports, stamp: str, label_col: str = "pair",
                     summary: bool = True) -> None:
    from .metrics import MetricReport

    head = [label_col, *MetricReport.COLUMNS]
    lines = [
        f"<!-- {stamp} -->",
        "| " + " | ".join(head) + " |",
        "|" + "|".join(["---"] * len(head)) + "|",
    ]
    for r in reports:
        lines.append("| " + " | ".join([r.pair_id] + [f"{v:.3f}" for v in r.values()]) + " |")
    if summary and len(reports) > 1:
        mean, std = _summary_stats(reports)
        cells = [f"{m:.3f} ± {s:.3f}" for m, s in zip(mean, std)]
        lines.append("| mean ± std | " + " | ".join(cells) + " |")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _dump_intermediates(result, pid: str, dump_dir: Path) -> None:
    import numpy as np

    from .data import save_image

    def norm(arr):
        arr = np.asarray(arr, dtype=np.float64)
        span = arr.max() - arr.min()
        if span == 0:
            return np.zeros(arr.shape, dtype=np.uint8)
        return np.round((arr - arr.min()) / span * 255.0).astype(np.uint8)

    dump_dir.mkdir(parents=True, exist_ok=True)
    save_image(norm(result.activity_p), dump_dir / f"{pid}.activity_p.png")
    save_image(norm(result.activity_q), dump_dir / f"{pid}.activity_q.png")
    save_image(np.round(np.clip(result.weight_p, 0, 1) * 255).astype(np.uint8),
               dump_dir / f"{pid}.weights_p.png")
    save_image(np.round(np.clip(result.weight_q, 0, 1) * 255).astype(np.uint8),
               dump_dir / f"{pid}.weights_q.png")


# -- commands ---------------------------------------------------------------------


def _train_one(cfg: dict, data_root: Path, manifest, out_path: Path, chash: int,
               log_path: Path | None = None) -> float:
    from .model import TrainConfig, init_model, save_checkpoint, train

    patches = _training_patch_array(data_root, manifest, cfg["tau"])
    model = init_model(cfg["seed"], cfg["pooling"])
    model.config_hash = chash
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch"],
                     learning_rate=cfg["lr"], seed=cfg["seed"])
    log_lines = [json.dumps({"seed": cfg["seed"], "config_hash": f"{chash:016x}",
                             "tool_version": _tool_version()}, sort_keys=True)]
    clock = [time.time()]

    def log_epoch(epoch, mean_loss):
        now = time.time()
        log_lines.append(json.dumps({"epoch": epoch + 1, "mean_loss": mean_loss,
                                     "wall_seconds": now - clock[0]}, sort_keys=True))
        clock[0] = now

    history = train(model, patches, tc, on_epoch=log_epoch)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_path)
    if log_path is not None:
        log_path.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return history[-1]


def _tool_version() -> str:
    from . import __version__

    return __version__


def cmd_train(args) -> int:
    cfg = resolve_config(args, _TRAIN_DEFAULTS)
    chash = config_hash("train", cfg)
    print(json.dumps({"command": "train", **cfg, "config_hash": f"{chash:016x}"}, sort_keys=True))
    if not args.out:
        raise ConfigError("train needs --out <checkpoint-path>")
    out_path = Path(args.out)
    final = _train_one(cfg, Path(args.data or "."), args.manifest, out_path, chash,
                       log_path=out_path.with_name(out_path.name + ".log.jsonl"))
    print(f"final mean loss: {final:.17g}")
    return 0


def cmd_fuse(args) -> int:
    cfg = resolve_config(args, {"seed": 0})
    chash = config_hash("fuse", cfg)
    if not args.checkpoint:
        raise ConfigError("fuse needs --checkpoint")
    if bool(args.pair) == bool(args.manifest):
        raise ConfigError("fuse needs exactly one of --pair or --manifest")
    out_dir = Path(args.out or ".")

    from .data import load_image, save_image
    from .fusion import SourcePair, fuse_pair
    from .model import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    if args.pair:
        p_path, q_path = args.pair
        pairs = [(f"{Path(p_path).stem}__{Path(q_path).stem}",
                  load_image(p_path), load_image(q_path))]
    else:
        pairs = _load_pairs(args.manifest, split="test")

    out_dir.mkdir(parents=True, exist_ok=True)
    for pid, p_img, q_img in pairs:
        result = fuse_pair(model, SourcePair(p=p_img, q=q_img, pair_id=pid))
        save_image(result.fused, out_dir / f"{pid}.png")
        if args.dump_intermediates:
            _dump_intermediates(result, pid, Path(args.dump_intermediates))
    print(f"fused {len(pairs)} pair(s) into {out_dir} ({_run_stamp(cfg['seed'], chash)})")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args, {"seed": 0})
    chash = config_hash("eval", cfg)
    if not args.manifest or not args.fused_dir:
        raise ConfigError("eval needs --manifest and --fused-dir")

    from .data import load_image
    from .metrics import compute_metrics

    fused_dir = Path(args.fused_dir)
    reports = []
    for pid, p_img, q_img in _load_pairs(args.manifest, split="test"):
        fused_path = fused_dir / f"{pid}.png"
        if not fused_path.is_file():
            raise DataError(f"pair '{pid}': fused image missing at {fused_path}")
        reports.append(compute_metrics(load_image(fused_path), p_img, q_img, pair_id=pid))

    stamp = _run_stamp(cfg["seed"], chash)
    if args.csv:
        _write_metric_csv(args.csv, reports, stamp)
    if args.md:
        _write_metric_md(args.md, reports, stamp)
    for r in reports:
        print(r.pair_id, " ".join(f"{c}={v:.4f}" for c, v in zip(r.COLUMNS, r.values())))
    return 0


def cmd_reconstruct(args) -> int:
    resolve_config(args, {"seed": 0})
    if not args.checkpoint or not args.image or not args.out:
        raise ConfigError("reconstruct needs --checkpoint, --image and --out")

    from .data import load_image, save_image
    from .fusion import reconstruct_image
    from .model import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    out = reconstruct_image(model, load_image(args.image))
    save_image(out, args.out)
    print(f"reconstructed {args.image} -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, dict(_TRAIN_DEFAULTS))
    cfg.pop("pooling", None)  # ablate always runs all three modes
    chash = config_hash("ablate", cfg)
    print(json.dumps({"command": "ablate", **cfg, "config_hash": f"{chash:016x}"}, sort_keys=True))
    if not args.out:
        raise ConfigError("ablate needs --out <directory>")
    if not args.manifest:
        raise ConfigError("ablate needs --manifest with test-split pairs for evaluation")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    from .data import read_manifest, save_image
    from .fusion import SourcePair, fuse_pair
    from .metrics import MetricReport, compute_metrics
    from .model import load_checkpoint

    eval_pairs = _load_pairs(args.manifest, split="test")
    # the manifest drives training only when it carries train-split entries;
    # otherwise every image under --data is the training corpus
    has_train_split = any(e.split == "train" for e in read_manifest(args.manifest))
    train_manifest = args.manifest if has_train_split else None
    summary = []
    for mode in ("lgca", "average", "max"):
        mode_cfg = dict(cfg, pooling=mode)
        ckpt = out_dir / f"ck_{mode}.bin"
        _train_one(mode_cfg, Path(args.data or "."), train_manifest, ckpt, chash,
                   log_path=out_dir / f"train_{mode}.log.jsonl")
        model = load_checkpoint(ckpt)
        mode_reports = []
        for pid, p_img, q_img in eval_pairs:
            result = fuse_pair(model, SourcePair(p=p_img, q=q_img, pair_id=pid))
            save_image(result.fused, out_dir / f"fused_{mode}_{pid}.png")
            mode_reports.append(compute_metrics(result.fused, p_img, q_img, pair_id=pid))
        import numpy as np

        mean = np.array([r.values() for r in mode_reports]).mean(axis=0)
        summary.append(MetricReport(mode, *mean))
        print(f"{mode}: " + " ".join(f"{c}={v:.4f}" for c, v in zip(MetricReport.COLUMNS, mean)))

    stamp = _run_stamp(cfg["seed"], chash)
    _write_metric_csv(out_dir / "ablation.csv", summary, stamp, label_col="pooling", summary=False)
    _write_metric_md(out_dir / "ablation.md", summary, stamp, label_col="pooling", summary=False)
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lgcafuse",
        description="Train, run and evaluate the attention-pooled fusion autoencoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread count; 1 is the bit-exact reproduction mode")
        p.add_argument("--out", help="output path (train/reconstruct: file, otherwise directory)")

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    shared(p)
    p.add_argument("--data", help="directory of 256x256 sources or 64x64 patches")
    p.add_argument("--manifest", help="optional manifest; its train-split entries are used")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--pooling", choices=["lgca", "average", "max"], default=None)
    p.add_argument("--tau", type=float, default=None, help="patch SD retention threshold")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse registered pairs with a trained model")
    shared(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--pair", nargs=2, metavar=("P", "Q"), help="one pair of image paths")
    p.add_argument("--manifest", help="manifest with test-split pairs")
    p.add_argument("--dump-intermediates", metavar="DIR",
                   help="also write activity and weight maps as PNGs")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score fused images against their sources")
    shared(p)
    p.add_argument("--manifest", help="manifest with test-split pairs")
    p.add_argument("--fused-dir", help="directory of fused images named <pair_id>.png")
    p.add_argument("--csv", help="write per-pair metrics as CSV")
    p.add_argument("--md", help="write a Markdown metric table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="autoencode one grayscale image")
    shared(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--image", help="grayscale input image")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("ablate", help="train and score all three pooling modes")
    shared(p)
    p.add_argument("--data", help="directory of training images")
    p.add_argument("--manifest", help="manifest providing eval pairs (test split)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
