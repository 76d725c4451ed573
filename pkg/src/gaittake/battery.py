"""The gradient-check battery: every differentiable op, each module, and the micro model end to end."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .attention import TAParams, clip_split, ta_aggregate
from .backbone import glconv_a, glconv_b, global_branch, local_branch, spatial_gem
from .config import RunConfig, TripletConfig, micro_config, rng_stream
from .gradcheck import grad_check
from .head import clip_gem, heads_forward
from .model import ModelParams, model_forward
from .pose import pose_forward
from .tensor import Tensor
from .training import triplet_loss

THRESHOLD = 1e-5
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.threshold)


def _leaf(rng, shape, lo=None, hi=None) -> Tensor:
    data = rng.standard_normal(shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True)


def _scalar(y: Tensor, probe: np.ndarray) -> Tensor:
    # random projection so every output coordinate carries gradient
    return ops.reduce(y * Tensor(probe), kind="sum")


def _op_checks(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    checks = []

    def add(name, fn, inputs):
        out_shape = fn(*inputs).shape
        probe = rng.standard_normal(out_shape)
        checks.append((name, lambda *xs, fn=fn, probe=probe: _scalar(fn(*xs), probe), inputs))

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    add("add", ops.add, [a, b])
    add("add_broadcast", ops.add, [_leaf(rng, (3, 4)), _leaf(rng, (4,))])
    add("sub", ops.sub, [_leaf(rng, (3, 4)), _leaf(rng, (1, 4))])
    add("mul", ops.mul, [_leaf(rng, (3, 4)), _leaf(rng, (3, 1))])
    add("div", ops.div, [_leaf(rng, (3, 4)), _leaf(rng, (3, 4), 0.5, 2.0)])
    add("neg", ops.neg, [_leaf(rng, (5,))])
    add("pow_const", lambda x: ops.pow(x, 2.5), [_leaf(rng, (5,), 0.5, 2.0)])
    add("pow_tensor", lambda x, p: ops.pow(x, p), [_leaf(rng, (5,), 0.5, 2.0), _leaf(rng, (1,), 1.0, 3.0)])
    add("exp", ops.exp, [_leaf(rng, (5,))])
    add("log", ops.log, [_leaf(rng, (5,), 0.5, 3.0)])
    add("sqrt", ops.sqrt, [_leaf(rng, (5,), 0.5, 3.0)])
    add("softplus", ops.softplus, [_leaf(rng, (6,))])
    # kinked activations: inputs kept at least 0.1 away from 0
    kinked = rng.uniform(0.1, 1.0, size=(6,)) * rng.choice([-1.0, 1.0], size=6)
    add("relu", ops.relu, [Tensor(kinked.copy(), requires_grad=True)])
    add("leaky_relu", ops.leaky_relu, [Tensor(kinked.copy(), requires_grad=True)])
    add("clamp_min", lambda x: ops.clamp_min(x, 0.0), [Tensor(kinked.copy(), requires_grad=True)])
    add("reshape", lambda x: ops.reshape(x, (4, 3)), [_leaf(rng, (3, 4))])
    add("transpose", lambda x: ops.transpose(x, (2, 0, 1)), [_leaf(rng, (2, 3, 4))])
    add("concat", lambda x, y: ops.concat([x, y], axis=1), [_leaf(rng, (2, 3)), _leaf(rng, (2, 2))])
    add("stack", lambda x, y: ops.stack([x, y], axis=1), [_leaf(rng, (2, 3)), _leaf(rng, (2, 3))])
    add("slice", lambda x: ops.slice_(x, 1, 1, 5, 2), [_leaf(rng, (2, 6))])
    add("reduce_sum", lambda x: ops.reduce(x, axis=1, kind="sum"), [_leaf(rng, (3, 4))])
    add("reduce_mean", lambda x: ops.reduce(x, axis=(0, 2), kind="mean"), [_leaf(rng, (2, 3, 4))])
    # distinct values so the max is unique
    add("reduce_max", lambda x: ops.reduce(x, axis=1, kind="max"),
        [Tensor(rng.permutation(12).reshape(3, 4) * 0.1, requires_grad=True)])
    add("softmax", lambda x: ops.softmax(x, axis=-1), [_leaf(rng, (3, 5))])
    add("matmul", ops.matmul, [_leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))])
    add("linear", ops.linear, [_leaf(rng, (3, 4)), _leaf(rng, (4, 2)), _leaf(rng, (2,))])
    add("conv3d", lambda x, k, b: ops.conv3d(x, k, b, pad=1),
        [_leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 2, 3, 3, 3)), _leaf(rng, (2,))])
    add("conv3d_strided", lambda x, k: ops.conv3d(x, k, pad=(0, 1, 0), stride=(1, 2, 2)),
        [_leaf(rng, (2, 1, 3, 5, 5)), _leaf(rng, (3, 1, 1, 3, 3))])
    add("max_pool2d", lambda x: ops.max_pool2d(x, 2),
        [Tensor(rng.permutation(48).reshape(2, 4, 6) * 0.1, requires_grad=True)])
    add("gem", lambda x: ops.gem(x, 3.0, axis=-1), [_leaf(rng, (3, 4), 0.2, 2.0)])
    add("gem_learnable_p", lambda x, p: ops.gem(x, p, axis=0), [_leaf(rng, (4, 3), 0.2, 2.0), _leaf(rng, (1,), 1.5, 4.0)])
    return checks


def _module_checks(cfg: RunConfig, rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    checks = []
    m = cfg.backbone.partitions

    def add(name, fn, inputs):
        probe = rng.standard_normal(fn(*inputs).shape)
        checks.append((name, lambda *xs, fn=fn, probe=probe: _scalar(fn(*xs), probe), inputs))

    x = _leaf(rng, (2, 3, 4, 6))
    add("global_branch", global_branch, [x, _leaf(rng, (3, 2, 3, 3, 3)), _leaf(rng, (3,))])
    add("local_branch", lambda x, w, b: local_branch(x, w, b, m), [x, _leaf(rng, (3, 2, 3, 3, 3)), _leaf(rng, (3,))])

    def block(kind):
        def fn(x, gw, gb, lw, lb):
            p = {"b.global.weight": gw, "b.global.bias": gb, "b.local.weight": lw, "b.local.bias": lb}
            return (glconv_a if kind == "a" else glconv_b)(x, p, "b", m)
        return fn

    wts = [_leaf(rng, (2, 2, 3, 3, 3)), _leaf(rng, (2,)), _leaf(rng, (2, 2, 3, 3, 3)), _leaf(rng, (2,))]
    add("glconv_a", block("a"), [x] + wts)
    add("glconv_b", block("b"), [x] + wts)
    add("spatial_gem", lambda x: spatial_gem(x, 3.0), [_leaf(rng, (2, 3, 4, 6), 0.1, 2.0)])

    def ta(x, w1, b1, w2, b2):
        return ta_aggregate(clip_split(x, 2), TAParams(w1, b1, w2, b2))

    add("ta_aggregate", ta, [_leaf(rng, (5, 4)), _leaf(rng, (4, 3)), _leaf(rng, (3,)), _leaf(rng, (3, 1)), _leaf(rng, (1,))])

    keys = np.zeros((4, 17, 3))
    keys[..., :2] = rng.uniform(5.0, 40.0, size=(4, 17, 2))
    keys[..., 2] = 1.0

    def pose(e1w, e1b, e2w, e2b, w1, b1, w2, b2):
        p = {"pose.encoder1.weight": e1w, "pose.encoder1.bias": e1b, "pose.encoder2.weight": e2w,
             "pose.encoder2.bias": e2b, "ta.pose.conv1.weight": w1, "ta.pose.conv1.bias": b1,
             "ta.pose.conv2.weight": w2, "ta.pose.conv2.bias": b2}
        return pose_forward(keys, p, 2)

    add("pose_forward", pose, [_leaf(rng, (51, 4)), _leaf(rng, (4,)), _leaf(rng, (4, 4)), _leaf(rng, (4,)),
                               _leaf(rng, (4, 3)), _leaf(rng, (3,)), _leaf(rng, (3, 1)), _leaf(rng, (1,))])
    add("clip_gem", lambda f: clip_gem(f, 2.0), [_leaf(rng, (3, 5), 0.1, 2.0)])
    add("clip_gem_learnable_p", lambda f, p: clip_gem(f, p), [_leaf(rng, (2, 3, 5), 0.1, 2.0), _leaf(rng, (1,), 1.5, 3.0)])

    def heads(v, w0, b0, w1, b1):
        return heads_forward(v, {"head.fc0.weight": w0, "head.fc0.bias": b0, "head.fc1.weight": w1, "head.fc1.bias": b1}, 2)

    add("heads_forward", heads, [_leaf(rng, (2, 5)), _leaf(rng, (5, 3)), _leaf(rng, (3,)), _leaf(rng, (5, 3)), _leaf(rng, (3,))])

    ids = ["a", "a", "b", "b", "c"]
    for w in ("uniform", "softmax"):
        checks.append((f"triplet_loss_{w}", lambda e, w=w: triplet_loss(e, ids, TripletConfig(1.0, w)), [_leaf(rng, (5, 2, 3))]))
    return checks


def micro_batch(cfg: RunConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Two identities x two items of random frames and keypoints at the micro config's sizes."""
    n, t = 4, cfg.data.frames
    sil = rng.uniform(0.0, 1.0, size=(n, t, cfg.data.height, cfg.data.width))
    keys = np.zeros((n, t, 17, 3))
    keys[..., :2] = rng.uniform(0.0, cfg.data.width, size=(n, t, 17, 2))
    keys[..., 2] = 1.0
    return sil, keys, ["0", "0", "1", "1"]


def end_to_end_checks(cfg: Optional[RunConfig] = None, seed: int = 0) -> list[tuple[str, Callable, list[Tensor]]]:
    """One check per parameter block of the micro model under the full triplet loss."""
    cfg = cfg or micro_config()
    params = ModelParams.init(cfg.model, rng_stream(seed, "init"))
    # the second attention layer starts at zero; perturb it so its downstream paths are exercised
    drng = rng_stream(seed, "gradcheck")
    for name, t in params.items():
        if name.endswith("conv2.weight"):
            t.data = drng.standard_normal(t.shape) * 0.5
    sil, keys, ids = micro_batch(cfg, drng)

    def loss_fn(*_):
        return triplet_loss(model_forward(sil, keys, params, cfg.model), ids, cfg.triplet)

    return [(f"model:{name}", loss_fn, [t]) for name, t in params.items()]


def run_battery(
    cfg: Optional[RunConfig] = None,
    seed: int = 0,
    include_model: bool = True,
    on_result: Optional[Callable[[CheckResult], None]] = None,
) -> list[CheckResult]:
    """Run every check at eps=1e-4 and return the max relative error of each."""
    cfg = cfg or micro_config()
    rng = rng_stream(seed, "battery")
    checks = _op_checks(rng) + _module_checks(cfg, rng)
    if include_model:
        checks += end_to_end_checks(cfg, seed)
    results = []
    for name, fn, inputs in checks:
        start = time.perf_counter()
        err = grad_check(fn, inputs, eps=EPS)
        res = CheckResult(name, err, time.perf_counter() - start)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results
