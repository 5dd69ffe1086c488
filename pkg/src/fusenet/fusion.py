"""Parallel three-backbone fusion classifier.

Images go through every backbone; the (B, F) feature vectors are
concatenated in a fixed order into (B, n*F) and classified by
``FC(n*F -> hidden) -> relu -> dropout -> FC(hidden -> C) -> log_softmax``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .backbones import KINDS, BackboneSpec, check_param_keys, init_param, init_params, backbone_forward
from .errors import CheckpointError, ConfigurationError
from .ops import binary_sigmoid_nll, nll_loss  # noqa: F401  re-exported loss functions
from .rng import Rng
from .tensor import Tensor


def default_specs(
    feature_dim: int = 1000,
    input_size=(64, 64),
    kinds: Sequence[str] = KINDS,
    **overrides,
) -> tuple:
    return tuple(
        BackboneSpec(kind=k, feature_dim=feature_dim, input_size=tuple(input_size), **overrides) for k in kinds
    )


@dataclass
class Prediction:
    logits: Tensor
    log_probs: Tensor
    predicted_class: np.ndarray
    positive_prob: np.ndarray


class FusionModel:
    """Backbones in parallel, concatenated features, two-layer head.

    Parameters
    ----------
    specs : sequence of BackboneSpec
        Backbones in concatenation order; defaults to residual, inception,
        shuffle with F=1000 on 64x64 input. All must share ``input_size``.
    class_count : int
        Width of the output layer. 2 by default; 10 reproduces the original
        head, with labels 0/1 addressing the first two outputs.
    hidden : int
        Width of the hidden fully connected layer.
    dropout_p : float
        Dropout rate applied after the hidden relu during training.
    seed : int
        Seed of the parameter initialization.
    """

    def __init__(
        self,
        specs: Optional[Sequence[BackboneSpec]] = None,
        class_count: int = 2,
        hidden: int = 512,
        dropout_p: float = 0.2,
        seed: int = 0,
    ):
        self.specs = tuple(specs) if specs is not None else default_specs()
        self.class_count = int(class_count)
        self.hidden = int(hidden)
        self.dropout_p = float(dropout_p)
        self.seed = int(seed)
        self._validate()
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for spec in self.specs:
            for path, t in init_params(spec, self.seed, prefix=f"{spec.kind}.").items():
                self.params[f"{spec.kind}.{path}"] = t
        for path, (shape, fan_in) in self._head_shapes().items():
            value = init_param(path, shape, fan_in, "linear", self.seed)
            self.params[path] = Tensor(value, requires_grad=True)

    def _validate(self):
        if not self.specs:
            raise ConfigurationError("fusion model needs at least one backbone")
        kinds = [s.kind for s in self.specs]
        if len(set(kinds)) != len(kinds):
            raise ConfigurationError(f"backbone kinds must be distinct, got {kinds}")
        sizes = {tuple(s.input_size) for s in self.specs}
        if len(sizes) != 1:
            raise ConfigurationError(f"backbones disagree on input_size: {sorted(sizes)}")
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be at least 2, got {self.class_count}")
        if self.hidden < 1:
            raise ConfigurationError(f"hidden width must be positive, got {self.hidden}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def input_size(self) -> tuple:
        return tuple(self.specs[0].input_size)

    @property
    def fused_width(self) -> int:
        return sum(s.feature_dim for s in self.specs)

    @property
    def kinds(self) -> tuple:
        return tuple(s.kind for s in self.specs)

    def _head_shapes(self):
        return OrderedDict(
            [
                ("head.fc1.weight", ((self.hidden, self.fused_width), self.fused_width)),
                ("head.fc1.bias", ((self.hidden,), self.fused_width)),
                ("head.fc2.weight", ((self.class_count, self.hidden), self.hidden)),
                ("head.fc2.bias", ((self.class_count,), self.hidden)),
            ]
        )

    # ------------------------------------------------------------ forward

    def features(self, images: Tensor) -> Tensor:
        feats = []
        for spec in self.specs:
            scope = _Prefixed(self.params, spec.kind + ".")
            feats.append(backbone_forward(spec, scope, images))
        return feats[0] if len(feats) == 1 else ops.concat(feats, axis=1)

    def forward(self, images, training: bool = False, rng: Optional[Rng] = None) -> Prediction:
        if not isinstance(images, Tensor):
            images = Tensor(images)
        p = self.params
        h = ops.relu(ops.linear(self.features(images), p["head.fc1.weight"], p["head.fc1.bias"]))
        h = ops.dropout(h, self.dropout_p, training, rng)
        logits = ops.linear(h, p["head.fc2.weight"], p["head.fc2.bias"])
        log_probs = ops.log_softmax(logits)
        lp = log_probs.data
        return Prediction(
            logits=logits,
            log_probs=log_probs,
            predicted_class=lp.argmax(axis=1),
            positive_prob=np.exp(lp[:, 1].astype(np.float64)),
        )

    __call__ = forward

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> List[tuple]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Replace every parameter; key sets and shapes must match exactly."""
        missing = [k for k in self.params if k not in state]
        extra = [k for k in state if k not in self.params]
        if missing or extra:
            raise CheckpointError(f"parameter keys differ: missing {missing}, unexpected {extra}")
        for k, t in self.params.items():
            value = np.asarray(state[k])
            if value.shape != t.data.shape:
                raise CheckpointError(f"parameter {k} has shape {value.shape}, model expects {t.data.shape}")
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=state[k].dtype, copy=True)
            t.grad = None

    def astype(self, dtype) -> "FusionModel":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def config(self) -> dict:
        return {
            "backbones": [s.to_dict() for s in self.specs],
            "concat_order": list(self.kinds),
            "class_count": self.class_count,
            "hidden": self.hidden,
            "dropout_p": self.dropout_p,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, config: Mapping) -> "FusionModel":
        specs = [BackboneSpec.from_dict(d) for d in config["backbones"]]
        order = config.get("concat_order")
        if order is not None and list(order) != [s.kind for s in specs]:
            raise CheckpointError(f"concat order {order} disagrees with backbone list")
        return cls(
            specs=specs,
            class_count=config["class_count"],
            hidden=config["hidden"],
            dropout_p=config["dropout_p"],
            seed=config.get("seed", 0),
        )

    def check_keys(self) -> None:
        for spec in self.specs:
            sub = {k[len(spec.kind) + 1:]: v for k, v in self.params.items() if k.startswith(spec.kind + ".")}
            check_param_keys(spec, sub, prefix=spec.kind + ".")


class _Prefixed(Mapping):
    def __init__(self, params: Dict[str, Tensor], prefix: str):
        self._params = params
        self._prefix = prefix

    def __getitem__(self, key):
        return self._params[self._prefix + key]

    def __contains__(self, key):
        return self._prefix + key in self._params

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self):
        return sum(1 for _ in self)


def fuse_forward(model: FusionModel, images, training: bool = False, rng: Optional[Rng] = None) -> Prediction:
    return model.forward(images, training=training, rng=rng)


def param_count(model: FusionModel, prefix: str = "") -> int:
    """Total scalar parameters, optionally restricted to paths starting with ``prefix``."""
    return int(sum(t.size for k, t in model.params.items() if k.startswith(prefix)))
