"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import PrecisionError, UsageError
from .tensor import Tensor, backward, get_precision, no_grad


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    """Largest relative gap between autodiff and central differences.

    ``f`` takes no arguments and closes over ``inputs``; each input is
    perturbed in place coordinate by coordinate. The per-coordinate error is
    ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if get_precision() != "double":
        raise PrecisionError("grad_check requires double precision; call set_precision('double')")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise PrecisionError(f"grad_check input {t!r} is not double precision")
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            with no_grad():
                flat[k] = orig + h
                up = f().item()
                flat[k] = orig - h
                down = f().item()
            flat[k] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return float(worst)


def projected(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Scalarize a tensor-valued ``fn`` for :func:`grad_check`.

    Returns ``g() = sum((fn() - fn(base)) * W)`` with fixed ``W`` drawn
    uniformly from [0.5, 1.5]. The base-point offset leaves the gradient
    unchanged but keeps ``|g|`` of order ``h``, so central differences do not
    drown in the rounding of a large function value. Positive weights avoid
    chance cancellation to near-zero gradient coordinates, where the
    relative error measures roundoff rather than the backward pass.
    """
    from . import ops

    with no_grad():
        base = fn().data.copy()
    weights = Tensor(rng.uniform(0.5, 1.5, base.shape), dtype=base.dtype)
    offset = Tensor(-base, dtype=base.dtype)
    return lambda: ops.mul(ops.add(fn(), offset), weights).sum()


# ---------------------------------------------------------------- suite

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def _leaf(rng, shape, margin=None):
    data = rng.normal(shape) if margin is None else _away_from_zero(rng, shape, margin)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _positive_leaf(rng, shape):
    return Tensor(rng.uniform(0.5, 1.5, shape), requires_grad=True, dtype=np.float64)


def _op_cases():
    from . import ops
    from .backbones import inception_module_forward, residual_block_forward, shuffle_unit_forward

    def matmul(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
        return lambda: ops.matmul(a, b), [a, b]

    def linear(rng):
        x, w, b = _leaf(rng, (3, 5)), _leaf(rng, (4, 5)), _leaf(rng, (4,))
        return lambda: ops.linear(x, w, b), [x, w, b]

    # conv is bilinear in (x, w): positive data avoids cancellation to
    # near-zero gradients without weakening the check
    def conv(stride, padding, groups, cin=4, cout=6, k=3):
        def build(rng):
            x = _positive_leaf(rng, (2, cin, 7, 7))
            w = _positive_leaf(rng, (cout, cin // groups, k, k))
            b = _positive_leaf(rng, (cout,))
            return lambda: ops.conv2d(x, w, b, stride=stride, padding=padding, groups=groups), [x, w, b]

        return build

    def unary(fn, margin=None, shape=(3, 5)):
        def build(rng):
            x = _leaf(rng, shape, margin)
            return lambda: fn(x), [x]

        return build

    def bias_add(rng):
        x, b = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (3,))
        return lambda: ops.bias_add(x, b), [x, b]

    def add_mul(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
        return lambda: ops.mul(ops.add(a, b), b), [a, b]

    def concat(rng):
        a, b, c = _leaf(rng, (2, 3)), _leaf(rng, (2, 1)), _leaf(rng, (2, 4))
        return lambda: ops.concat([a, b, c], axis=1), [a, b, c]

    def dropout(rng):
        x = _leaf(rng, (4, 6))
        seed = int(rng.next_u64(1)[0])
        from .rng import Rng

        return lambda: ops.dropout(x, 0.3, True, Rng(seed)), [x]

    def nll(rng):
        z = _leaf(rng, (4, 3))
        labels = rng.integers(3, (4,))
        return lambda: ops.nll_loss(ops.log_softmax(z), labels), [z]

    def bce(rng):
        z = _leaf(rng, (6,))
        y = rng.integers(2, (6,))
        return lambda: ops.binary_sigmoid_nll(z, y), [z]

    def residual(rng):
        x = _leaf(rng, (2, 3, 6, 6))
        p = {
            "conv1.weight": _leaf(rng, (4, 3, 3, 3)), "conv1.bias": _leaf(rng, (4,)),
            "conv2.weight": _leaf(rng, (4, 4, 3, 3)), "conv2.bias": _leaf(rng, (4,)),
            "proj.weight": _leaf(rng, (4, 3, 1, 1)), "proj.bias": _leaf(rng, (4,)),
        }
        return lambda: residual_block_forward(x, p, 4, stride=2), [x] + list(p.values())

    def inception(rng):
        x = _leaf(rng, (2, 4, 5, 5))
        spec = (2, (2, 3), (1, 2), 2)
        p = {}
        for name, shape in [("b1", (2, 4, 1, 1)), ("b3_reduce", (2, 4, 1, 1)), ("b3", (3, 2, 3, 3)),
                            ("b5_reduce", (1, 4, 1, 1)), ("b5a", (2, 1, 3, 3)), ("b5b", (2, 2, 3, 3)),
                            ("pool_proj", (2, 4, 1, 1))]:
            p[f"{name}.weight"] = _leaf(rng, shape)
            p[f"{name}.bias"] = _leaf(rng, shape[:1])
        return lambda: inception_module_forward(x, p, spec), [x] + list(p.values())

    def shuffle(stride):
        def build(rng):
            x = _leaf(rng, (2, 4, 6, 6))
            p = {
                "gconv1.weight": _leaf(rng, (4, 2, 1, 1)), "gconv1.bias": _leaf(rng, (4,)),
                "dwconv.weight": _leaf(rng, (4, 1, 3, 3)), "dwconv.bias": _leaf(rng, (4,)),
                "gconv2.weight": _leaf(rng, (4, 2, 1, 1)), "gconv2.bias": _leaf(rng, (4,)),
            }
            return lambda: shuffle_unit_forward(x, p, 2, stride=stride), [x] + list(p.values())

        return build

    return [
        ("matmul", matmul),
        ("linear", linear),
        ("conv2d", conv(1, 1, 1)),
        ("conv2d_stride2", conv(2, 1, 1)),
        ("conv2d_grouped", conv(1, 1, 2)),
        ("conv2d_depthwise", conv(1, 1, 4, cin=4, cout=4)),
        ("conv2d_1x1", conv(1, 0, 1, k=1)),
        ("bias_add", bias_add),
        ("add_mul", add_mul),
        ("sigmoid", unary(ops.sigmoid)),
        ("relu", unary(ops.relu, margin=1e-3)),
        ("log_softmax", unary(ops.log_softmax)),
        ("concat", concat),
        ("channel_shuffle", unary(lambda x: ops.channel_shuffle(x, 2), shape=(2, 6, 3, 3))),
        ("max_pool", unary(lambda x: ops.pool2d(x, "max", 3, 2, 1), shape=(2, 3, 7, 7))),
        ("avg_pool", unary(lambda x: ops.pool2d(x, "avg", 3, 2, 1), shape=(2, 3, 7, 7))),
        ("global_avg_pool", unary(lambda x: ops.pool2d(x, "global_avg"), shape=(2, 3, 4, 5))),
        ("dropout", dropout),
        ("nll_loss", nll),
        ("binary_sigmoid_nll", bce),
        ("residual_block", residual),
        ("inception_module", inception),
        ("shuffle_unit", shuffle(1)),
        ("shuffle_unit_stride2", shuffle(2)),
    ]


def tiny_model_case(seed: int = 0):
    """A miniature fusion model on two 12x12 images, scored by its NLL loss."""
    from .backbones import BackboneSpec
    from .fusion import FusionModel
    from .ops import nll_loss
    from .rng import Rng

    specs = [
        BackboneSpec(kind=k, stem_channels=4, stages=((1, 4), (1, 8)), feature_dim=4, groups=2, input_size=(12, 12))
        for k in ("residual", "inception", "shuffle")
    ]
    model = FusionModel(specs, class_count=2, hidden=8, dropout_p=0.2, seed=seed)
    model.astype(np.float64)
    rng = Rng(seed)
    images = Tensor(rng.random((2, 1, 12, 12)), dtype=np.float64)
    labels = [0, 1]

    def f():
        pred = model.forward(images, training=True, rng=Rng(seed + 1))
        return nll_loss(pred.log_probs, labels)

    return f, [t for _, t in model.named_parameters()]


def run_suite(seeds=range(10), model_seeds=(0,), h: float = 1e-6, report=None) -> list:
    """Run every op check over ``seeds`` and the full-model check; returns result dicts."""
    from .rng import Rng
    from .tensor import precision

    results = []
    with precision("double"):
        for name, build in _op_cases():
            worst = 0.0
            for seed in seeds:
                rng = Rng(seed)
                fn, inputs = build(rng)
                f = fn if fn().data.size == 1 else projected(fn, rng)
                worst = max(worst, grad_check(f, inputs, h))
            res = {"name": name, "max_rel_error": worst, "tolerance": OP_TOLERANCE, "passed": worst < OP_TOLERANCE}
            results.append(res)
            if report:
                report(res)
        worst = 0.0
        for seed in model_seeds:
            f, inputs = tiny_model_case(seed)
            worst = max(worst, grad_check(f, inputs, h))
        res = {"name": "fusion_model", "max_rel_error": worst, "tolerance": MODEL_TOLERANCE,
               "passed": worst < MODEL_TOLERANCE}
        results.append(res)
        if report:
            report(res)
    return results
