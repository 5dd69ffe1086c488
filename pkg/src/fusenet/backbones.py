"""Miniature convolutional backbones.

Three block families, each mapping a (B, 1, H, W) image batch to a
(B, F) feature vector:

* ``residual``  two 3x3 convolutions around an additive shortcut
* ``inception`` four parallel branches with 1x1 channel reduction
* ``shuffle``   grouped 1x1 convolutions, channel shuffle and a depthwise 3x3

All share the same skeleton: a stride-2 3x3 stem, a 3x3/2 max pool, the
configured stages (the first block of every stage after the first halves
the resolution), global average pooling and a fully connected layer to F.
Batch normalization is deliberately absent.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigurationError, ShapeError
from .rng import Rng, mix_seed
from .tensor import Tensor, default_dtype

KINDS = ("residual", "inception", "shuffle")

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    stem_channels: int = 16
    stages: Tuple[Tuple[int, int], ...] = ((2, 16), (2, 32), (2, 64))
    feature_dim: int = 1000
    groups: int = 2
    input_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(n), int(c)) for n, c in self.stages))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.feature_dim < 2:
            raise ConfigurationError(f"feature_dim must be at least 2, got {self.feature_dim}")
        if self.stem_channels < 1 or not self.stages:
            raise ConfigurationError("backbone needs a positive stem width and at least one stage")
        if any(n < 1 or c < 1 for n, c in self.stages):
            raise ConfigurationError(f"stage block counts and channels must be positive: {self.stages}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigurationError(f"input_size must be (H, W), got {self.input_size}")
        if self.kind == "shuffle":
            self._check_shuffle()

    def _check_shuffle(self):
        g = self.groups
        if g < 1:
            raise ConfigurationError(f"groups must be positive, got {g}")
        if self.stem_channels % g:
            raise ConfigurationError(f"stem width {self.stem_channels} not divisible by groups={g}")
        for _, cin, cout, stride in block_plan(self):
            if cout % g:
                raise ConfigurationError(f"stage width {cout} not divisible by groups={g}")
            if stride == 1 and cin != cout:
                raise ConfigurationError(
                    f"shuffle unit with stride 1 needs equal widths for the residual add, got {cin} -> {cout}"
                )
            if stride == 2 and (cout <= cin or (cout - cin) % g):
                raise ConfigurationError(
                    f"stride-2 shuffle unit {cin} -> {cout}: branch width {cout - cin} "
                    f"must be positive and divisible by groups={g}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneSpec":
        return cls(**d)


def block_plan(spec: BackboneSpec) -> Iterator[Tuple[str, int, int, int]]:
    """Yield (path prefix, in channels, out channels, stride) for every block."""
    cin = spec.stem_channels
    for si, (count, cout) in enumerate(spec.stages):
        for bi in range(count):
            stride = 2 if si > 0 and bi == 0 else 1
            yield f"stage{si + 1}.block{bi}", cin, cout, stride
            cin = cout


def inception_branches(in_channels: int, out_channels: int):
    """Default branch widths ``(b1, (r3, b3), (r5, b5), pool_proj)`` summing to ``out_channels``."""
    q = max(1, out_channels // 4)
    reduce = max(1, min(out_channels // 8, in_channels - 1))
    return (q, (reduce, q), (reduce, q), out_channels - 3 * q)


def shuffle_bottleneck(out_channels: int, groups: int) -> int:
    mid = max(1, round(out_channels / 4 / groups)) * groups
    return mid


# ---------------------------------------------------------------- parameter layout


def _conv(shapes, name, cout, cin, k):
    shapes[f"{name}.weight"] = ((cout, cin, k, k), cin * k * k, "conv")
    shapes[f"{name}.bias"] = ((cout,), cin * k * k, "bias")


def _residual_shapes(shapes, prefix, cin, cout, stride):
    _conv(shapes, f"{prefix}.conv1", cout, cin, 3)
    _conv(shapes, f"{prefix}.conv2", cout, cout, 3)
    if cin != cout or stride != 1:
        _conv(shapes, f"{prefix}.proj", cout, cin, 1)


def _inception_shapes(shapes, prefix, cin, branches):
    _validate_branches(cin, branches)
    b1, (r3, b3), (r5, b5), bp = branches
    if b1:
        _conv(shapes, f"{prefix}.b1", b1, cin, 1)
    if b3:
        _conv(shapes, f"{prefix}.b3_reduce", r3, cin, 1)
        _conv(shapes, f"{prefix}.b3", b3, r3, 3)
    if b5:
        _conv(shapes, f"{prefix}.b5_reduce", r5, cin, 1)
        _conv(shapes, f"{prefix}.b5a", b5, r5, 3)
        _conv(shapes, f"{prefix}.b5b", b5, b5, 3)
    if bp:
        _conv(shapes, f"{prefix}.pool_proj", bp, cin, 1)


def _shuffle_shapes(shapes, prefix, cin, cout, stride, g):
    mid = shuffle_bottleneck(cout, g)
    branch = cout if stride == 1 else cout - cin
    _conv(shapes, f"{prefix}.gconv1", mid, cin // g, 1)
    _conv(shapes, f"{prefix}.dwconv", mid, 1, 3)
    _conv(shapes, f"{prefix}.gconv2", branch, mid // g, 1)


def param_shapes(spec: BackboneSpec) -> "OrderedDict[str, tuple]":
    """Ordered ``path -> (shape, fan_in, role)``; a pure function of the spec."""
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    _conv(shapes, "stem", spec.stem_channels, 1, 3)
    last = spec.stem_channels
    for prefix, cin, cout, stride in block_plan(spec):
        if spec.kind == "residual":
            _residual_shapes(shapes, prefix, cin, cout, stride)
        elif spec.kind == "inception":
            _inception_shapes(shapes, prefix, cin, inception_branches(cin, cout))
        else:
            _shuffle_shapes(shapes, prefix, cin, cout, stride, spec.groups)
        last = cout
    shapes["fc.weight"] = ((spec.feature_dim, last), last, "linear")
    shapes["fc.bias"] = ((spec.feature_dim,), last, "bias")
    return shapes


def init_param(path: str, shape, fan_in: int, role: str, seed: int) -> np.ndarray:
    """Deterministic initial value for one parameter.

    Convolutions use He-uniform bounds (the nets have no normalization and
    use relu); linear layers and biases use +-1/sqrt(fan_in). Each tensor
    draws from its own stream keyed by (seed, crc32(path)), so adding a
    parameter never shifts the values of the others.
    """
    rng = Rng(mix_seed(seed, zlib.crc32(path.encode())))
    bound = np.sqrt(6.0 / fan_in) if role == "conv" else 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(spec: BackboneSpec, seed: int = 0, prefix: str = "") -> "OrderedDict[str, Tensor]":
    params = OrderedDict()
    for path, (shape, fan_in, role) in param_shapes(spec).items():
        name = prefix + path
        params[path] = Tensor(init_param(name, shape, fan_in, role, seed), requires_grad=True)
    return params


# ---------------------------------------------------------------- blocks


class _Scope:
    """Read-only view of a parameter mapping under a path prefix."""

    def __init__(self, params: Params, prefix: str):
        self.params = params
        self.prefix = prefix + "." if prefix else ""

    def __getitem__(self, name):
        return self.params[self.prefix + name]

    def __contains__(self, name):
        return self.prefix + name in self.params


def _conv_apply(p, name, x, **kw):
    return ops.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], **kw)


def residual_block_forward(x: Tensor, params: Params, out_channels: int, stride: int = 1) -> Tensor:
    """relu(conv3x3(relu(conv3x3(x))) + shortcut(x)).

    The shortcut is the identity when widths and resolution are unchanged,
    otherwise a strided 1x1 projection (``proj.*`` in ``params``).
    """
    cin = x.shape[1]
    needs_proj = cin != out_channels or stride != 1
    if needs_proj != ("proj.weight" in params):
        raise ConfigurationError(
            f"residual block {cin} -> {out_channels} (stride {stride}) "
            f"{'needs' if needs_proj else 'must not have'} a projection shortcut"
        )
    h = ops.relu(_conv_apply(params, "conv1", x, stride=stride, padding=1))
    h = _conv_apply(params, "conv2", h, padding=1)
    shortcut = _conv_apply(params, "proj", x, stride=stride) if needs_proj else x
    if h.shape != shortcut.shape:
        raise ConfigurationError(f"residual branch {h.shape} does not match shortcut {shortcut.shape}")
    return ops.relu(ops.add(h, shortcut))


def _validate_branches(cin, branches):
    b1, (r3, b3), (r5, b5), bp = branches
    if min(b1, r3, b3, r5, b5, bp) < 0 or b1 + b3 + b5 + bp == 0:
        raise ConfigurationError(f"invalid inception branch widths {branches}")
    for width, reduce in ((b3, r3), (b5, r5)):
        if width and not 0 < reduce < cin:
            raise ConfigurationError(
                f"inception 1x1 reduction width {reduce} must be positive and below the input width {cin}"
            )


def inception_module_forward(x: Tensor, params: Params, branch_spec) -> Tensor:
    """Concatenate 1x1, 1x1->3x3, 1x1->3x3->3x3 and pool->1x1 branches.

    ``branch_spec`` is ``(b1, (r3, b3), (r5, b5), pool_proj)``; zero-width
    branches are skipped. Spatial size is preserved.
    """
    _validate_branches(x.shape[1], branch_spec)
    b1, (r3, b3), (r5, b5), bp = branch_spec
    outs = []
    if b1:
        outs.append(ops.relu(_conv_apply(params, "b1", x)))
    if b3:
        h = ops.relu(_conv_apply(params, "b3_reduce", x))
        outs.append(ops.relu(_conv_apply(params, "b3", h, padding=1)))
    if b5:
        h = ops.relu(_conv_apply(params, "b5_reduce", x))
        h = ops.relu(_conv_apply(params, "b5a", h, padding=1))
        outs.append(ops.relu(_conv_apply(params, "b5b", h, padding=1)))
    if bp:
        h = ops.pool2d(x, "max", kernel=3, stride=1, padding=1)
        outs.append(ops.relu(_conv_apply(params, "pool_proj", h)))
    for o in outs:
        if o.shape[2:] != x.shape[2:]:
            raise ShapeError(f"inception branch produced spatial size {o.shape[2:]}, expected {x.shape[2:]}")
    return outs[0] if len(outs) == 1 else ops.concat(outs, axis=1)


def shuffle_unit_forward(x: Tensor, params: Params, groups: int, stride: int = 1) -> Tensor:
    """Grouped 1x1 -> channel shuffle -> depthwise 3x3 -> grouped 1x1.

    Stride 1 adds the input back; stride 2 concatenates a 3x3/2 average
    pooled copy of the input, so the output width is ``C + branch width``.
    """
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"shuffle unit: {c} channels not divisible by groups={groups}")
    mid = params["dwconv.weight"].shape[0]
    h = ops.relu(_conv_apply(params, "gconv1", x, groups=groups))
    h = ops.channel_shuffle(h, groups)
    h = _conv_apply(params, "dwconv", h, stride=stride, padding=1, groups=mid)
    h = _conv_apply(params, "gconv2", h, groups=groups)
    if stride == 1:
        return ops.relu(ops.add(h, x))
    shortcut = ops.pool2d(x, "avg", kernel=3, stride=2, padding=1)
    return ops.relu(ops.concat([shortcut, h], axis=1))


# ---------------------------------------------------------------- backbone


def backbone_forward(spec: BackboneSpec, params: Params, images: Tensor) -> Tensor:
    """Map (B, 1, H, W) images to (B, F) pre-activation features."""
    expected = (1,) + tuple(spec.input_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeError(f"{spec.kind} backbone expects images of shape (B, {expected[0]}, "
                         f"{expected[1]}, {expected[2]}), got {tuple(images.shape)}")
    x = ops.relu(_conv_apply(params, "stem", images, stride=2, padding=1))
    x = ops.pool2d(x, "max", kernel=3, stride=2, padding=1)
    for prefix, cin, cout, stride in block_plan(spec):
        p = _Scope(params, prefix)
        if spec.kind == "residual":
            x = residual_block_forward(x, p, cout, stride)
        elif spec.kind == "inception":
            if stride == 2:
                x = ops.pool2d(x, "max", kernel=3, stride=2, padding=1)
            x = inception_module_forward(x, p, inception_branches(cin, cout))
        else:
            x = shuffle_unit_forward(x, p, spec.groups, stride)
    x = ops.flatten(ops.pool2d(x, "global_avg"))
    return ops.linear(x, params["fc.weight"], params["fc.bias"])


@dataclass
class Backbone:
    """A spec plus its named parameters."""

    spec: BackboneSpec
    params: Dict[str, Tensor] = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.spec, self.seed, prefix=f"{self.spec.kind}.")
        else:
            check_param_keys(self.spec, self.params)

    def __call__(self, images: Tensor) -> Tensor:
        return backbone_forward(self.spec, self.params, images)

    def named_parameters(self):
        return list(self.params.items())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def check_param_keys(spec: BackboneSpec, params: Mapping, prefix: str = "") -> None:
    expected = param_shapes(spec)
    missing = [k for k in expected if k not in params]
    extra = [k for k in params if k not in expected]
    if missing or extra:
        raise CheckpointError(
            f"parameter keys do not match the {spec.kind} spec: "
            f"missing {[prefix + k for k in missing]}, unexpected {[prefix + k for k in extra]}"
        )
    for k, (shape, _, _) in expected.items():
        got = tuple(np.shape(params[k].data if isinstance(params[k], Tensor) else params[k]))
        if got != shape:
            raise CheckpointError(f"parameter {prefix + k} has shape {got}, expected {shape}")
