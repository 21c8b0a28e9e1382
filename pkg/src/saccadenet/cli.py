"""Command-line entry point: ``saccadenet <command> ...``.

Exit codes: 0 success, 1 invalid input or failed check, 2 runtime failure
(divergence, unreadable files).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, bench, gradcheck
from .config import ConfigError, load_config, read_json
from .data import DatasetConfig, DatasetFormatError, generate_dataset, read_dataset, read_ppm, write_dataset, write_ppm
from .decoder import DecoderConfig, decode, oracle_outputs
from .encoder import encode_targets
from .evaluator import evaluate, read_report, write_report
from .network import KeypointMode, NetworkConfig
from .trainer import CheckpointError, TrainConfig, TrainingDiverged, evaluate_params, load_checkpoint, predict, save_checkpoint, train

logger = logging.getLogger("saccadenet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
COARSE_COLOR = (1.0, 0.1, 0.1)
REFINED_COLOR = (0.1, 1.0, 0.1)


class CheckFailed(Exception):
    """A self-check (gradients, NMS agreement) did not pass."""


@dataclass
class TrainRunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class RunManifest:
    command: str
    config: dict
    tool_version: str = __version__
    dataset_checksum: Optional[str] = None
    timings: dict[str, float] = field(default_factory=dict)
    argv: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 4)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _load(cls, path: Optional[str]):
    if path is None:
        return load_config(cls, {}, where="<defaults>")
    return load_config(cls, read_json(path), where=str(path))


def _prepare_out(out: str, force: bool = True) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"{out_dir}: directory exists and is not empty (use --force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _split_dir(data: str, default_split: str) -> Path:
    """Accept either a dataset root (with train/ and val/) or a split directory."""
    p = Path(data)
    if (p / "labels.jsonl").exists():
        return p
    if (p / default_split / "labels.jsonl").exists():
        return p / default_split
    raise DatasetFormatError(f"{p}: no labels.jsonl here or under {default_split}/")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    config = _load(DatasetConfig, args.config)
    manifest = RunManifest("gen-data", {"dataset": dataclasses.asdict(config)}, argv=sys.argv[1:])
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not args.force:
            raise ConfigError(f"{out_dir}: directory exists and is not empty (use --force to overwrite)")
        for split in ("train", "val"):
            shutil.rmtree(out_dir / split, ignore_errors=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    with manifest.phase("generate"):
        train_set, val_set = generate_dataset(config)
    with manifest.phase("write"):
        sums = {"train": write_dataset(train_set, out_dir / "train"), "val": write_dataset(val_set, out_dir / "val")}
    manifest.dataset_checksum = sums["train"]
    manifest.extra = {"checksums": sums, "num_train": len(train_set), "num_val": len(val_set)}
    manifest.write(out_dir)
    print(f"wrote {len(train_set)} train / {len(val_set)} val images to {out_dir}")
    print(f"train checksum {sums['train']}\nval checksum   {sums['val']}")
    return EXIT_OK


def _apply_ablations(net: NetworkConfig, args) -> NetworkConfig:
    changes = {}
    for flag in args.ablate or []:
        changes["use_aggregation" if flag == "no-aggregation" else "use_corner_attn"] = False
    if args.keypoints is not None or args.keypoint_t is not None:
        kp = net.aggregation_keypoints
        changes["aggregation_keypoints"] = KeypointMode(
            args.keypoints or kp.kind, kp.t if args.keypoint_t is None else args.keypoint_t
        )
    if args.refine_iterations is not None:
        changes["refine_iterations"] = args.refine_iterations
    return dataclasses.replace(net, **changes) if changes else net


def _check_spatial(net: NetworkConfig, dataset, where: str) -> None:
    cfg = dataset.config
    if cfg is None:
        return
    if tuple(cfg.image_size) != tuple(net.input_size):
        raise ConfigError(f"{where}: dataset image size {tuple(cfg.image_size)} != network input_size {tuple(net.input_size)}")
    if len(cfg.classes) > net.num_classes:
        raise ConfigError(f"{where}: dataset has {len(cfg.classes)} classes but the network predicts {net.num_classes}")


def cmd_train(args) -> int:
    run = _load(TrainRunConfig, args.config)
    net = _apply_ablations(run.network, args)
    tcfg = run.train
    if args.epochs is not None or args.seed is not None:
        tcfg = dataclasses.replace(
            tcfg,
            epochs=tcfg.epochs if args.epochs is None else args.epochs,
            seed=tcfg.seed if args.seed is None else args.seed,
        )
    out_dir = _prepare_out(args.out, force=args.force or args.resume)
    manifest = RunManifest("train", {"network": dataclasses.asdict(net), "train": dataclasses.asdict(tcfg)}, argv=sys.argv[1:])
    with manifest.phase("load_data"):
        train_set = read_dataset(_split_dir(args.data, "train"))
        root = Path(args.data)
        val_set = read_dataset(root / "val") if (root / "val" / "labels.jsonl").exists() else None
    _check_spatial(net, train_set, args.data)
    manifest.dataset_checksum = train_set.checksum
    ckpt_path = out_dir / "checkpoint.bin"
    resume = None
    if args.resume:
        resume = load_checkpoint(ckpt_path)
        if resume.net_config != net or resume.train_config != tcfg:
            raise ConfigError(f"{ckpt_path}: checkpoint was trained with a different configuration")
    with manifest.phase("train"):
        ckpt = train(
            train_set,
            net,
            tcfg,
            val_dataset=val_set,
            log_path=out_dir / "train_log.jsonl",
            eval_log_path=out_dir / "eval_log.jsonl" if val_set is not None and tcfg.eval_every else None,
            checkpoint_path=ckpt_path,
            resume=resume,
        )
    save_checkpoint(ckpt, ckpt_path)
    if val_set is not None:
        with manifest.phase("final_eval"):
            report = evaluate_params(ckpt.params, val_set, net)
        write_report(report, out_dir / "eval.json")
        print(report.table())
        manifest.extra["val_checksum"] = val_set.checksum
    manifest.extra["final_loss"] = ckpt.loss_history[-1] if ckpt.loss_history else None
    manifest.write(out_dir)
    print(f"checkpoint written to {ckpt_path}")
    return EXIT_OK


def _decoder_config(args) -> DecoderConfig:
    return DecoderConfig(
        top_k=args.top_k,
        nms_mode=args.nms,
        use_refinement=not args.no_refine,
        refine_iterations=args.refine_iterations,
    )


def cmd_eval(args) -> int:
    out_dir = _prepare_out(args.out)
    split = _split_dir(args.data, "val")
    dec = _decoder_config(args)
    manifest = RunManifest("eval", {"decoder": dataclasses.asdict(dec), "oracle": args.oracle, "data": str(split)}, argv=sys.argv[1:])
    with manifest.phase("load"):
        dataset = read_dataset(split)
        if args.oracle:
            net = NetworkConfig(
                input_size=dataset.config.image_size if dataset.config else NetworkConfig().input_size,
            )
            params = None
        else:
            if args.checkpoint is None:
                raise ConfigError("eval needs --checkpoint unless --oracle is given")
            ckpt = load_checkpoint(args.checkpoint)
            net, params = ckpt.net_config, ckpt.params
            manifest.config["network"] = dataclasses.asdict(net)
    _check_spatial(net, dataset, str(split))
    manifest.dataset_checksum = dataset.checksum
    with manifest.phase("evaluate"):
        if args.oracle:
            dets = [decode(oracle_outputs(encode_targets(s.boxes, net)), dec, net) for s in dataset.samples]
            report = evaluate(dets, [s.boxes for s in dataset.samples])
        else:
            report = evaluate_params(params, dataset, net, dec)
    path = out_dir / "report.json"
    write_report(report, path)
    if read_report(path).to_json() != report.to_json():
        raise RuntimeError(f"{path}: report did not survive read-back")
    manifest.write(out_dir)
    print(report.table())
    print(f"report written to {path}")
    return EXIT_OK


def draw_boxes(image: np.ndarray, boxes, color) -> np.ndarray:
    """One-pixel outlines of ``boxes`` (x0, y0, x1, y1) onto a copy of ``image``."""
    out = image.copy()
    _, h, w = out.shape
    col = np.asarray(color)[:, None]
    for x0, y0, x1, y1 in boxes:
        a, b = int(np.clip(np.floor(x0), 0, w - 1)), int(np.clip(np.ceil(x1) - 1, 0, w - 1))
        c, d = int(np.clip(np.floor(y0), 0, h - 1)), int(np.clip(np.ceil(y1) - 1, 0, h - 1))
        out[:, c, a : b + 1] = col
        out[:, d, a : b + 1] = col
        out[:, c : d + 1, a] = col
        out[:, c : d + 1, b] = col
    return out


def cmd_infer(args) -> int:
    out_dir = _prepare_out(args.out)
    dec = _decoder_config(args)
    manifest = RunManifest("infer", {"decoder": dataclasses.asdict(dec), "images": args.images}, argv=sys.argv[1:])
    with manifest.phase("load"):
        ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.net_config
    manifest.config["network"] = dataclasses.asdict(net)
    draw_dir = None
    if args.draw:
        draw_dir = out_dir / "drawn"
        draw_dir.mkdir(exist_ok=True)
    failures = []
    n_dets = 0
    with manifest.phase("infer"), open(out_dir / "detections.jsonl", "w") as f:
        for name in args.images:
            try:
                image = read_ppm(name)
                dets = predict(ckpt.params, image, net, dec)
            except (OSError, DatasetFormatError, ValueError) as e:
                print(f"error: {name}: {e}", file=sys.stderr)
                failures.append({"image": name, "error": str(e)})
                continue
            for d in dets:
                f.write(json.dumps({"image": name, **d.to_json()}) + "\n")
            n_dets += len(dets)
            if draw_dir is not None:
                drawn = draw_boxes(image, [d.coarse_box for d in dets], COARSE_COLOR)
                drawn = draw_boxes(drawn, [d.refined_box for d in dets if d.refined_box is not None], REFINED_COLOR)
                write_ppm(draw_dir / (Path(name).stem + ".ppm"), drawn)
    manifest.extra = {"failures": failures, "num_detections": n_dets}
    manifest.write(out_dir)
    print(f"{n_dets} detections from {len(args.images) - len(failures)} image(s) -> {out_dir / 'detections.jsonl'}")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_bench_nms(args) -> int:
    out_dir = _prepare_out(args.out)
    if args.repeats < 1:
        raise ConfigError(f"--repeats must be >= 1, got {args.repeats}")
    cfg = {"sizes": args.sizes, "densities": args.densities, "repeats": args.repeats, "top_k": args.top_k, "seed": args.seed}
    manifest = RunManifest("bench-nms", cfg, argv=sys.argv[1:])
    with manifest.phase("precheck"):
        agree, total = bench.agreement_check(num_maps=args.precheck_maps, seed=args.seed)
    print(f"cross-mode agreement: {agree}/{total} tie-free maps")
    manifest.extra["agreement"] = {"agree": agree, "total": total}
    if agree != total:
        manifest.write(out_dir)
        raise CheckFailed(f"peak-picking and IoU NMS disagree on {total - agree} of {total} tie-free maps")
    with manifest.phase("timing"):
        rows = bench.run_benchmark(args.sizes, args.densities, args.repeats, args.top_k, args.seed)
    (out_dir / "bench.json").write_text(json.dumps([r.to_json() for r in rows], indent=2) + "\n")
    manifest.write(out_dir)
    print(bench.format_table(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out_dir = _prepare_out(args.out)
    seeds = list(range(args.seed, args.seed + args.num_seeds))
    manifest = RunManifest("gradcheck", {"seeds": seeds, "ops": args.op}, argv=sys.argv[1:])
    lines: list[str] = []

    def log(line):
        print(line)
        lines.append(line)

    with manifest.phase("check"):
        try:
            ok = gradcheck.run_suite(ops=args.op, seeds=seeds, log=log)
        except KeyError as e:
            raise ConfigError(e.args[0]) from None
    (out_dir / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    manifest.extra["passed"] = ok
    manifest.write(out_dir)
    if not ok:
        raise CheckFailed("gradient check failed")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _csv(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}") from None

    return parse


def _decoder_flags(p):
    p.add_argument("--nms", choices=["pp", "iou"], default="pp", help="peak picking (default) or IoU NMS")
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--no-refine", action="store_true", help="emit coarse boxes only")
    p.add_argument("--refine-iterations", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saccadenet", description="Center/corner keypoint detector trained on synthetic shapes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--config", help="JSON dataset config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset root (train/ and optional val/)")
    p.add_argument("--config", help='JSON file with "network" and "train" sections')
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", action="append", choices=["no-aggregation", "no-corner-attn"])
    p.add_argument("--keypoints", choices=["corners", "diag", "mid_edge"])
    p.add_argument("--keypoint-t", type=float)
    p.add_argument("--refine-iterations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True, help="dataset root (uses val/) or split directory")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", action="store_true", help="decode encoded ground truth instead of a model")
    _decoder_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run detection on PPM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--draw", action="store_true", help="write copies with coarse (red) and refined (green) boxes")
    _decoder_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench-nms", help="time peak-picking vs IoU NMS")
    p.add_argument("--sizes", type=_csv(int), default=[32, 64, 128], help="heatmap sizes, e.g. 32,64")
    p.add_argument("--densities", type=_csv(float), default=[0.005, 0.02], help="peaks per heatmap cell")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--precheck-maps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_nms)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--num-seeds", type=int, default=20)
    p.add_argument("--op", action="append", help=f"restrict to an op ({', '.join(gradcheck.OP_CASES)}, network)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, CheckpointError, CheckFailed) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
