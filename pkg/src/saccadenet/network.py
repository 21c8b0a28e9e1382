"""Micro backbone plus the center, size/offset, corner and aggregation heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class KeypointMode:
    """Which four points around the center feed refinement and corner supervision.

    ``corners`` uses the box corners. ``diag`` uses ``center*(1-t) + corner*t``
    and ``mid_edge`` uses ``center*(1-t) + edge_midpoint*t``.
    """

    kind: Literal["corners", "diag", "mid_edge"] = "corners"
    t: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.t <= 1.0:
            raise ValueError(f"keypoint t must lie in (0, 1], got {self.t}")


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 3
    input_size: tuple[int, int] = (64, 64)
    output_stride: int = 4
    head_hidden_channels: int = 32
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    refine_iterations: int = 1
    aggregation_keypoints: KeypointMode = field(default_factory=KeypointMode)
    use_aggregation: bool = True
    use_corner_attn: bool = True

    def __post_init__(self):
        h, w = self.input_size
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.backbone_channels) < 2:
            raise ValueError("backbone_channels needs at least two stages")
        expected = 2 ** (len(self.backbone_channels) - 1)
        if self.output_stride != expected:
            raise ValueError(
                f"output_stride {self.output_stride} does not match the backbone "
                f"({len(self.backbone_channels)} down blocks + 1 up block give stride {expected})"
            )
        down = 2 ** len(self.backbone_channels)
        if h % down or w % down:
            raise ValueError(f"input size {self.input_size} must be divisible by {down}")
        if self.refine_iterations < 0:
            raise ValueError("refine_iterations must be >= 0")

    @property
    def feature_size(self) -> tuple[int, int]:
        """``(h_f, w_f)`` of every output map."""
        return self.input_size[0] // self.output_stride, self.input_size[1] // self.output_stride

    @property
    def backbone_out_channels(self) -> int:
        return self.backbone_channels[-2]


class ModelParams(dict):
    """Name -> Tensor mapping, iterated in sorted-name order."""

    def __iter__(self):
        return iter(sorted(super().keys()))

    def keys(self):
        return list(self)

    def items(self):
        return [(k, self[k]) for k in self]

    def values(self):
        return [self[k] for k in self]

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def num_parameters(self, prefix: str = "") -> int:
        return int(np.sum([t.data.size for k, t in self.items() if k.startswith(prefix)]))

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.items()})


@dataclass
class NetworkOutputs:
    center_heatmap: Tensor
    wh_map: Tensor
    offset_map: Tensor
    backbone_features: Tensor
    corner_heatmap: Optional[Tensor] = None


HEAD_OUTPUTS = ("center", "wh", "offset", "corner")
HEATMAP_PRIOR_BIAS = -2.19  # sigmoid(-2.19) ~= 0.1


def _conv_params(rng, c_out, c_in, k, std=None):
    std = np.sqrt(2.0 / (c_in * k * k)) if std is None else std
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)), np.zeros(c_out)


def head_out_channels(name: str, config: NetworkConfig) -> int:
    return {"center": config.num_classes, "wh": 2, "offset": 2, "corner": 4}[name]


def init_params(config: NetworkConfig, seed: int = 0) -> ModelParams:
    """He-normal init; heatmap heads start from a low-probability prior."""
    rng = np.random.default_rng(seed)
    raw: dict[str, np.ndarray] = {}
    chans = config.backbone_channels
    c_prev = 3
    for i, c in enumerate(chans, start=1):
        for j, cin in ((1, c_prev), (2, c)):
            raw[f"backbone.down{i}.conv{j}.weight"], raw[f"backbone.down{i}.conv{j}.bias"] = _conv_params(rng, c, cin, 3)
        c_prev = c
    c_skip = chans[-2]
    raw["backbone.up.conv.weight"], raw["backbone.up.conv.bias"] = _conv_params(rng, c_skip, chans[-1], 3)
    raw["backbone.fuse.conv.weight"], raw["backbone.fuse.conv.bias"] = _conv_params(rng, c_skip, c_skip, 3)

    hidden = config.head_hidden_channels
    for name in HEAD_OUTPUTS:
        c_out = head_out_channels(name, config)
        raw[f"{name}.conv1.weight"], raw[f"{name}.conv1.bias"] = _conv_params(rng, hidden, c_skip, 3)
        raw[f"{name}.conv2.weight"], raw[f"{name}.conv2.bias"] = _conv_params(rng, c_out, hidden, 1, std=0.01)
        if name in ("center", "corner"):
            raw[f"{name}.conv2.bias"][:] = HEATMAP_PRIOR_BIAS

    d_in = 5 * c_skip
    raw["refine.fc1.weight"] = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(hidden, d_in))
    raw["refine.fc1.bias"] = np.zeros(hidden)
    raw["refine.fc2.weight"] = rng.normal(0.0, 0.01, size=(2, hidden))
    raw["refine.fc2.bias"] = np.zeros(2)
    return ModelParams({k: Tensor(v, requires_grad=True) for k, v in raw.items()})


def head_forward(features: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """3x3 conv + ReLU, then a 1x1 conv with no activation. Spatial size is kept."""
    hidden = ad.relu(ad.conv2d(features, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], 1, 1))
    return ad.conv2d(hidden, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], 1, 0)


def backbone_forward(image: Tensor, params: ModelParams, config: NetworkConfig) -> Tensor:
    x = image
    stages = []
    for i in range(1, len(config.backbone_channels) + 1):
        p = f"backbone.down{i}"
        x = ad.relu(ad.conv2d(x, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"], 2, 1))
        x = ad.relu(ad.conv2d(x, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"], 1, 1))
        stages.append(x)
    up = ad.conv2d(ad.upsample_nearest2x(x), params["backbone.up.conv.weight"], params["backbone.up.conv.bias"], 1, 1)
    fused = ad.relu(ad.add(up, stages[-2]))
    return ad.relu(ad.conv2d(fused, params["backbone.fuse.conv.weight"], params["backbone.fuse.conv.bias"], 1, 1))


def forward(image, params: ModelParams, config: NetworkConfig, mode: str = "train") -> NetworkOutputs:
    """Run the backbone and heads on a ``[3,H,W]`` or ``[N,3,H,W]`` image.

    The corner heatmap is only produced in ``train`` mode.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    image = ad.as_tensor(image)
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"image must be [3,H,W] or [N,3,H,W], got {image.shape}")
    h, w = image.shape[-2:]
    down = 2 ** len(config.backbone_channels)
    if h % down or w % down:
        raise ShapeError(f"image size {(h, w)} is not divisible by {down}")
    if (h, w) != tuple(config.input_size):
        raise ShapeError(f"image size {(h, w)} does not match configured input_size {tuple(config.input_size)}")
    feats = backbone_forward(image, params, config)
    return NetworkOutputs(
        center_heatmap=ad.sigmoid(head_forward(feats, params, "center")),
        wh_map=head_forward(feats, params, "wh"),
        offset_map=head_forward(feats, params, "offset"),
        backbone_features=feats,
        corner_heatmap=(
            ad.sigmoid(head_forward(feats, params, "corner")) if mode == "train" and config.use_corner_attn else None
        ),
    )


def keypoints_array(centers, wh, mode: KeypointMode) -> np.ndarray:
    """Vectorised keypoints: ``centers [P,2]``, ``wh [P,2]`` -> ``[P,4,2]``.

    Corner order is top-left, top-right, bottom-left, bottom-right; edge
    midpoint order is left, right, top, bottom.
    """
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    half = np.asarray(wh, dtype=np.float64).reshape(-1, 2) / 2.0
    if mode.kind == "mid_edge":
        signs = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.float64)
    else:
        signs = np.array([[-1, -1], [1, -1], [-1, 1], [1, 1]], dtype=np.float64)
    t = 1.0 if mode.kind == "corners" else mode.t
    return c[:, None, :] + t * signs[None, :, :] * half[:, None, :]


def compute_keypoints(center, w: float, h: float, mode: KeypointMode = KeypointMode()) -> list[tuple[float, float]]:
    if w < 0 or h < 0:
        raise ValueError(f"width and height must be non-negative, got {(w, h)}")
    pts = keypoints_array([center], [(w, h)], mode)[0]
    return [(float(x), float(y)) for x, y in pts]


@dataclass
class RefineResult:
    residuals: list[Tensor]  # one [P,2] tensor per iteration
    inputs: list[np.ndarray]  # wh used to place keypoints at each iteration
    wh: np.ndarray  # final refined wh, [P,2]


def refine_step(features: Tensor, centers: np.ndarray, wh: np.ndarray, params: ModelParams, config: NetworkConfig, batch_index=None) -> Tensor:
    """One aggregation pass: sample center + 4 keypoints, regress ``(dw, dh)``."""
    kps = keypoints_array(centers, wh, config.aggregation_keypoints)
    pts = np.concatenate([np.asarray(centers, dtype=np.float64).reshape(-1, 1, 2), kps], axis=1)  # [P,5,2]
    n_obj = pts.shape[0]
    bidx = None if batch_index is None else np.repeat(np.asarray(batch_index), 5)
    sampled = ad.bilinear_sample(features, pts.reshape(-1, 2), bidx)  # [P*5, C]
    c = sampled.shape[1]
    # [P*5, C] -> [P, 5C]: keypoint-major within each object
    flat = _reshape(sampled, (n_obj, 5 * c))
    hidden = ad.relu(ad.linear(flat, params["refine.fc1.weight"], params["refine.fc1.bias"]))
    return ad.linear(hidden, params["refine.fc2.weight"], params["refine.fc2.bias"])


def _reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return ad.record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def aggregate_refine(
    features: Tensor,
    centers,
    coarse_wh,
    params: ModelParams,
    config: NetworkConfig,
    iterations: Optional[int] = None,
    batch_index=None,
) -> RefineResult:
    """Iteratively refine ``coarse_wh``; the same head is applied each pass.

    Keypoints for pass ``i+1`` are placed from the (detached) refined size of
    pass ``i``. With zero iterations the coarse size comes back unchanged.
    """
    iterations = config.refine_iterations if iterations is None else iterations
    wh = np.asarray(coarse_wh, dtype=np.float64).reshape(-1, 2).copy()
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    residuals, inputs = [], []
    if len(wh) == 0:
        return RefineResult(residuals, inputs, wh)
    for _ in range(iterations):
        inputs.append(wh.copy())
        delta = refine_step(features, centers, np.maximum(wh, 0.0), params, config, batch_index)
        residuals.append(delta)
        wh = wh + delta.data
    return RefineResult(residuals, inputs, wh)
