"""Finite-difference gradient checks for every differentiable op and the full network.

Relative error per element is ``|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)``.
The floor keeps elements whose true gradient is ~0 (dead relu units, say)
from turning round-off into huge ratios. Central differences are only valid
when the stencil does not cross a relu kink; such elements are detected
with :class:`~saccadenet.autodiff.kink_monitor` and skipped (and counted).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import GtBox
from .losses import FocalParams, focal_loss, masked_l1
from .network import KeypointMode, NetworkConfig, init_params
from .trainer import coarse_wh_at_objects, make_batch, training_loss

EPS = 1e-5
FLOOR = 1e-6
OP_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    tolerance: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err < self.tolerance


def _project(t: Tensor, r: np.ndarray) -> Tensor:
    """Scalar ``sum(t * r)`` with a fixed random ``r``, so every output element matters."""
    return ad.record(np.asarray((t.data * r).sum()), (t,), lambda g: (float(g) * r,), "project")




def check_gradients(
    fn: Callable[[], Tensor],
    inputs: list[Tensor],
    eps: float = EPS,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, int, int]:
    """Compare backprop against central differences.

    Checks every element of every input, or ``samples`` random elements per
    input. Returns ``(max_rel_err, checked, skipped)``.
    """
    for t in inputs:
        t.zero_grad()
    with ad.kink_monitor() as base_kinks:
        loss = fn()
    base_pattern = [k.copy() for k in base_kinks]
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]

    worst, checked, skipped = 0.0, 0, 0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            values, crossed = [], False
            for step in (eps, -eps):
                flat[i] = orig + step
                with ad.kink_monitor() as kinks:
                    values.append(float(fn().data))
                if len(kinks) != len(base_pattern) or any(not np.array_equal(a, b) for a, b in zip(kinks, base_pattern)):
                    crossed = True
            flat[i] = orig
            if crossed:
                skipped += 1
                continue
            numeric = (values[0] - values[1]) / (2 * eps)
            a = float(grad.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), FLOOR)
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped


# --------------------------------------------------------------------------
# per-op cases: each builder returns (loss_fn, inputs)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=1e-2) -> Tensor:
    x = rng.normal(0.0, 1.0, size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)
    return Tensor(x, requires_grad=True)


def case_conv2d(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = 1 if k == 3 else int(rng.choice([0, 1]))
    x = _leaf(rng, 2, 4, 5, 5)
    w = _leaf(rng, 3, 4, k, k)
    b = _leaf(rng, 3)
    probe = ad.conv2d(x, w, b, stride, pad)
    r = rng.normal(size=probe.shape)
    return (lambda: _project(ad.conv2d(x, w, b, stride, pad), r)), [x, w, b]


def case_relu(rng):
    x = _away_from_zero(rng, 3, 6, 6)
    r = rng.normal(size=x.shape)
    return (lambda: _project(ad.relu(x), r)), [x]


def case_sigmoid(rng):
    x = _leaf(rng, 3, 6, 6, scale=3.0)
    r = rng.normal(size=x.shape)
    return (lambda: _project(ad.sigmoid(x), r)), [x]


def case_upsample(rng):
    x = _leaf(rng, 2, 3, 4, 5)
    r = rng.normal(size=(2, 3, 8, 10))
    return (lambda: _project(ad.upsample_nearest2x(x), r)), [x]


def case_bilinear(rng):
    f = _leaf(rng, 2, 4, 7, 6)
    n_pts = 9
    # interior points away from integer coordinates (clamp/floor stay fixed)
    pts = np.stack([rng.uniform(0.1, 4.9, n_pts), rng.uniform(0.1, 5.9, n_pts)], axis=1)
    bidx = rng.integers(0, 2, n_pts)
    r = rng.normal(size=(n_pts, 4))
    return (lambda: _project(ad.bilinear_sample(f, pts, bidx), r)), [f]


def case_linear(rng):
    x, w, b = _leaf(rng, 5, 7), _leaf(rng, 3, 7), _leaf(rng, 3)
    r = rng.normal(size=(5, 3))
    return (lambda: _project(ad.linear(x, w, b), r)), [x, w, b]


def case_concat(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4)
    r = rng.normal(size=(2, 8, 4))
    return (lambda: _project(ad.concat([a, b], axis=1), r)), [a, b]


def case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    r = rng.normal(size=(3, 4))
    return (lambda: _project(ad.add(a, b), r)), [a, b]


def case_focal_loss(rng):
    logits = _leaf(rng, 2, 6, 6)
    gt = rng.uniform(0, 0.95, size=(2, 6, 6))
    gt[0, 2, 3] = gt[1, 4, 1] = 1.0
    params = FocalParams()
    return (lambda: focal_loss(ad.sigmoid(logits), gt, params)), [logits]


def case_masked_l1(rng):
    pred = _leaf(rng, 2, 5, 5)
    target = pred.data + np.where(rng.random((2, 5, 5)) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, (2, 5, 5))
    mask = rng.random((5, 5)) < 0.4
    mask[0, 0] = True
    return (lambda: masked_l1(pred, target, mask)), [pred]


OP_CASES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "upsample_nearest2x": case_upsample,
    "bilinear_sample": case_bilinear,
    "linear": case_linear,
    "concat": case_concat,
    "add": case_add,
    "focal_loss": case_focal_loss,
    "masked_l1": case_masked_l1,
}

GRADCHECK_NET = NetworkConfig(
    num_classes=2,
    input_size=(16, 16),
    head_hidden_channels=6,
    backbone_channels=(4, 6, 8),
    refine_iterations=1,
    aggregation_keypoints=KeypointMode("corners"),
)


def _random_boxes(rng, n, size=16, classes=2):
    boxes = []
    for _ in range(n):
        w, h = rng.uniform(4, 10, 2)
        x0, y0 = rng.uniform(0, size - w), rng.uniform(0, size - h)
        boxes.append(GtBox(int(rng.integers(classes)), x0, y0, x0 + w, y0 + h))
    return boxes


def network_case(seed: int, config: NetworkConfig = GRADCHECK_NET):
    """Full training objective on a 2-image 16x16 batch, stop-gradient pinned."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    # move every parameter off its init so heads and biases carry signal
    for p in params.values():
        p.data = p.data + rng.normal(0.0, 0.05, size=p.shape)
    from .data import Sample

    samples = [Sample(rng.random((3, 16, 16)), _random_boxes(rng, 2)) for _ in range(2)]
    batch = make_batch(samples, config)
    frozen = coarse_wh_at_objects(params, batch, config)
    names = params.keys()
    fn = lambda: training_loss(params, batch, config, frozen_coarse_wh=frozen)[0]  # noqa: E731
    return fn, [params[n] for n in names], names


def run_op(name: str, seeds, cases: Optional[dict] = None) -> list[CheckResult]:
    cases = OP_CASES if cases is None else cases
    out = []
    for seed in seeds:
        fn, inputs = cases[name](np.random.default_rng(seed))
        err, checked, skipped = check_gradients(fn, inputs)
        out.append(CheckResult(name, seed, err, OP_TOLERANCE, checked, skipped))
    return out


def run_network(seeds, samples_per_param: int = 3) -> list[CheckResult]:
    out = []
    for seed in seeds:
        fn, inputs, _ = network_case(seed)
        err, checked, skipped = check_gradients(fn, inputs, samples=samples_per_param, rng=np.random.default_rng(seed + 1000))
        out.append(CheckResult("network", seed, err, NETWORK_TOLERANCE, checked, skipped))
    return out


def run_suite(ops=None, seeds=range(20), include_network: bool = True, cases: Optional[dict] = None, log=print) -> bool:
    """Run the checks, print one line per check, return overall pass/fail."""
    cases = OP_CASES if cases is None else cases
    names = list(cases) if not ops else list(ops)
    for n in names:
        if n != "network" and n not in cases:
            raise KeyError(f"unknown op {n!r}; choose from {sorted(cases)} or 'network'")
    ok = True
    t0 = time.perf_counter()
    for n in names:
        if n == "network":
            continue
        results = run_op(n, seeds, cases)
        ok &= _report(n, results, log)
    if include_network and (not ops or "network" in ops):
        ok &= _report("network", run_network(seeds), log)
    log(f"gradcheck {'PASS' if ok else 'FAIL'} in {time.perf_counter() - t0:.1f}s")
    return ok


def _report(name, results: list[CheckResult], log) -> bool:
    worst = max(r.max_rel_err for r in results)
    passed = all(r.passed for r in results)
    checked = sum(r.checked for r in results)
    skipped = sum(r.skipped for r in results)
    tol = results[0].tolerance
    log(
        f"{'PASS' if passed else 'FAIL'} {name:<20} max rel err {worst:.2e} (tol {tol:.0e}) "
        f"seeds {len(results)} elements {checked} skipped {skipped}"
    )
    return passed
