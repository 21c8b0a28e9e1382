"""Adam training loop, checkpoints and training logs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .autodiff import Tensor
from .data import AugmentConfig, Dataset, augment, samples_threads
from .decoder import DecoderConfig, decode, make_refine_fn
from .encoder import GroundTruthTarget, encode_targets
from .evaluator import EvalReport, evaluate
from .losses import FocalParams, LossBreakdown, LossWeights, total_loss
from .network import ModelParams, NetworkConfig, aggregate_refine, forward, init_params

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SACCKPT1"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss term became NaN/Inf."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.25e-4
    lr_drop_epoch: Optional[int] = 50
    lr_drop_factor: float = 0.1
    epochs: int = 60
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # epochs; 0 disables periodic evaluation
    max_grad_norm: Optional[float] = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_drop_epoch is not None and not 1 <= self.lr_drop_epoch <= self.epochs:
            raise ValueError(f"lr_drop_epoch must lie in [1, epochs={self.epochs}] or be null, got {self.lr_drop_epoch}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; the drop applies from ``lr_drop_epoch`` on."""
        if self.lr_drop_epoch is not None and epoch >= self.lr_drop_epoch:
            return self.learning_rate * self.lr_drop_factor
        return self.learning_rate


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place bias-corrected Adam update of every parameter."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: np.ndarray  # [N,3,H,W]
    center_heatmap: np.ndarray
    corner_heatmap: np.ndarray
    wh_target: np.ndarray
    offset_target: np.ndarray
    keypoint_mask: np.ndarray
    obj_batch: np.ndarray  # [P] image index of each object
    obj_cells: np.ndarray  # [P,2] (col,row)
    obj_centers: np.ndarray  # [P,2] feature units
    obj_wh: np.ndarray  # [P,2] feature units


def _prepare(sample, net_cfg: NetworkConfig, aug: Optional[AugmentConfig], rng) -> tuple[np.ndarray, GroundTruthTarget]:
    image, boxes = sample.image, sample.boxes
    if aug is not None:
        image, boxes = augment(image, boxes, aug, rng)
    return image, encode_targets(boxes, net_cfg)


def collate(items: list[tuple[np.ndarray, GroundTruthTarget]]) -> Batch:
    objs = [(b, o) for b, (_, t) in enumerate(items) for o in t.objects]
    return Batch(
        images=np.stack([im for im, _ in items]),
        center_heatmap=np.stack([t.center_heatmap for _, t in items]),
        corner_heatmap=np.stack([t.corner_heatmap for _, t in items]),
        wh_target=np.stack([t.wh_target for _, t in items]),
        offset_target=np.stack([t.offset_target for _, t in items]),
        keypoint_mask=np.stack([t.keypoint_mask for _, t in items]),
        obj_batch=np.array([b for b, _ in objs], dtype=np.int64),
        obj_cells=np.array([o.cell for _, o in objs], dtype=np.int64).reshape(-1, 2),
        obj_centers=np.array([o.center for _, o in objs], dtype=np.float64).reshape(-1, 2),
        obj_wh=np.array([o.wh for _, o in objs], dtype=np.float64).reshape(-1, 2),
    )


def make_batch(samples, net_cfg: NetworkConfig, aug: Optional[AugmentConfig] = None, rngs=None, threads: int = 1) -> Batch:
    rngs = rngs if rngs is not None else [None] * len(samples)
    args = list(zip(samples, rngs))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            items = list(pool.map(lambda a: _prepare(a[0], net_cfg, aug, a[1]), args))
    else:
        items = [_prepare(s, net_cfg, aug, r) for s, r in args]
    return collate(items)


def training_loss(
    params: ModelParams,
    batch: Batch,
    net_cfg: NetworkConfig,
    weights: LossWeights = LossWeights(),
    focal: FocalParams = FocalParams(),
    frozen_coarse_wh: Optional[np.ndarray] = None,
) -> tuple[Tensor, LossBreakdown]:
    """Forward pass plus objective for one batch.

    Refinement keypoints are placed from ground-truth centers and the
    network's detached size prediction at those centers. Passing
    ``frozen_coarse_wh`` pins that detached quantity (finite-difference
    checks need the stop-gradient held constant).
    """
    outputs = forward(batch.images, params, net_cfg, mode="train")
    residuals, targets = [], []
    if net_cfg.use_aggregation and net_cfg.refine_iterations > 0 and len(batch.obj_batch):
        if frozen_coarse_wh is None:
            b, col, row = batch.obj_batch, batch.obj_cells[:, 0], batch.obj_cells[:, 1]
            coarse = outputs.wh_map.data[b, :, row, col]
        else:
            coarse = frozen_coarse_wh
        res = aggregate_refine(
            outputs.backbone_features, batch.obj_centers, coarse, params, net_cfg, batch_index=batch.obj_batch
        )
        residuals = res.residuals
        targets = [batch.obj_wh - wh_in for wh_in in res.inputs]
    return total_loss(outputs, residuals, batch, weights, focal, refine_targets=targets)


def coarse_wh_at_objects(params: ModelParams, batch: Batch, net_cfg: NetworkConfig) -> np.ndarray:
    out = forward(batch.images, params, net_cfg, mode="train")
    b, col, row = batch.obj_batch, batch.obj_cells[:, 0], batch.obj_cells[:, 1]
    return out.wh_map.data[b, :, row, col].copy()


# --------------------------------------------------------------------------
# evaluation helpers


def predict(params: ModelParams, image: np.ndarray, net_cfg: NetworkConfig, dec_cfg: DecoderConfig = DecoderConfig()):
    outputs = forward(image, params, net_cfg, mode="infer")
    refine = make_refine_fn(outputs, params, net_cfg) if net_cfg.use_aggregation else None
    return decode(outputs, dec_cfg, net_cfg, refine)


def evaluate_params(params: ModelParams, dataset: Dataset, net_cfg: NetworkConfig, dec_cfg: DecoderConfig = DecoderConfig()) -> EvalReport:
    dets = [predict(params, s.image, net_cfg, dec_cfg) for s in dataset.samples]
    return evaluate(dets, [s.boxes for s in dataset.samples])


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    net_config: NetworkConfig
    train_config: TrainConfig
    epoch: int = 0  # completed epochs
    loss_history: list[float] = field(default_factory=list)


def _config_from_dict(cls, d):
    from .config import load_config

    return load_config(cls, d, where=cls.__name__)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """JSON header + little-endian float64 payload (see ``load_checkpoint``)."""
    blobs, entries, offset = [], [], 0
    arrays = [(n, t.data) for n, t in ckpt.params.items()]
    arrays += [(f"adam.m.{n}", ckpt.adam.m[n]) for n in sorted(ckpt.adam.m)]
    arrays += [(f"adam.v.{n}", ckpt.adam.v[n]) for n in sorted(ckpt.adam.v)]
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "network_config": asdict(ckpt.net_config),
        "train_config": asdict(ckpt.train_config),
        "adam_step": ckpt.adam.step,
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {header.get('format_version')} != {CHECKPOINT_VERSION}")
    payload = buf[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (file corrupted)")
    params, adam = ModelParams(), AdamState(step=header["adam_step"])
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        name = e["name"]
        if name.startswith("adam.m."):
            adam.m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return Checkpoint(
        params=params,
        adam=adam,
        net_config=_config_from_dict(NetworkConfig, header["network_config"]),
        train_config=_config_from_dict(TrainConfig, header["train_config"]),
        epoch=header["epoch"],
        loss_history=list(header["loss_history"]),
    )


# --------------------------------------------------------------------------
# training loop


def _grad_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values()))


def train(
    dataset: Dataset,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    val_dataset: Optional[Dataset] = None,
    log_path=None,
    eval_log_path=None,
    checkpoint_path=None,
    resume: Optional[Checkpoint] = None,
    stop_after_epoch: Optional[int] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Checkpoint:
    """Train from scratch (or from ``resume``) and return the final checkpoint.

    Shuffling and augmentation draw from generators keyed by
    ``(seed, epoch, ...)``, so a run resumed at an epoch boundary replays
    exactly what an uninterrupted run would have done.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if resume is not None:
        ckpt = resume
    else:
        ckpt = Checkpoint(init_params(net_cfg, train_cfg.seed), AdamState(), net_cfg, train_cfg)
    params = ckpt.params
    threads = samples_threads()
    aug = train_cfg.augment if train_cfg.augment.enabled else None
    log_f = open(log_path, "a" if resume is not None else "w") if log_path else None
    eval_f = open(eval_log_path, "a" if resume is not None else "w") if eval_log_path else None
    last_epoch = train_cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, train_cfg.epochs)
    try:
        for epoch in range(ckpt.epoch + 1, last_epoch + 1):
            lr = train_cfg.lr_at(epoch)
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(dataset))
            epoch_losses = []
            t0 = time.perf_counter()
            for start in range(0, len(order), train_cfg.batch_size):
                idx = order[start : start + train_cfg.batch_size]
                rngs = [np.random.default_rng([train_cfg.seed, epoch, int(start + k)]) for k in range(len(idx))]
                batch = make_batch([dataset[int(i)] for i in idx], net_cfg, aug, rngs, threads)
                params.zero_grad()
                loss, parts = training_loss(params, batch, net_cfg, train_cfg.loss_weights, train_cfg.focal)
                # component terms first, so the message names the culprit rather than "total"
                for name, value in [*parts.terms().items(), ("total", parts.total)]:
                    if not math.isfinite(value):
                        raise TrainingDiverged(f"loss term {name} is {value} at step {ckpt.adam.step + 1} (epoch {epoch})")
                loss.backward()
                if train_cfg.max_grad_norm is not None:
                    norm = _grad_norm(params)
                    if norm > train_cfg.max_grad_norm:
                        for p in params.values():
                            p.grad *= train_cfg.max_grad_norm / norm
                adam_step(params, ckpt.adam, lr, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_epsilon)
                ckpt.loss_history.append(parts.total)
                epoch_losses.append(parts.total)
                if log_f:
                    rec = {"step": ckpt.adam.step, "epoch": epoch, "lr": lr, "losses": parts.as_dict()}
                    log_f.write(json.dumps(rec) + "\n")
            ckpt.epoch = epoch
            mean_loss = float(np.mean(epoch_losses))
            logger.info("epoch %d lr %.3g loss %.4f (%.1fs)", epoch, lr, mean_loss, time.perf_counter() - t0)
            if on_epoch:
                on_epoch(epoch, mean_loss)
            if val_dataset is not None and train_cfg.eval_every and epoch % train_cfg.eval_every == 0:
                report = evaluate_params(params, val_dataset, net_cfg)
                logger.info("epoch %d eval AP50 %s AP70 %s AP90 %s", epoch, report.ap50, report.ap70, report.ap90)
                if eval_f:
                    eval_f.write(json.dumps({"epoch": epoch, "report": report.to_json()}) + "\n")
                    eval_f.flush()
            if log_f:
                log_f.flush()
            if checkpoint_path:
                save_checkpoint(ckpt, checkpoint_path)
    finally:
        if log_f:
            log_f.close()
        if eval_f:
            eval_f.close()
    return ckpt
