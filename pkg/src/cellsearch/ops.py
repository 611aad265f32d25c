"""The candidate operation set and its application.

Seven spatial-dimension-preserving candidates compete on every cell edge;
``conv-1x1`` is plumbing (input/output projections) and is the only kind
allowed to change the channel count.  Separable convolutions are depthwise
k x k followed by pointwise 1x1 and a ReLU; the dilated variants use
dilation rate 2.  None of the candidate convolutions carry biases or
normalization layers, which keeps batch-size-1 evaluation deterministic.
"""

from __future__ import annotations

import enum
from typing import Mapping

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    avgpool3_same,
    conv1x1,
    depthwise_conv2d,
    maxpool3_same,
    relu,
)

__all__ = [
    "OpKind",
    "CANDIDATE_OPS",
    "OP_LABELS",
    "op_from_label",
    "is_conv",
    "op_weight_shapes",
    "init_op_weights",
    "apply",
    "he_normal",
]


class OpKind(enum.IntEnum):
    IDENTITY = 0
    MAX_POOL_3 = 1
    AVG_POOL_3 = 2
    SEP_CONV_3 = 3
    SEP_CONV_5 = 4
    DIL_SEP_CONV_3 = 5
    DIL_SEP_CONV_5 = 6
    CONV_1X1 = 7  # plumbing, not a search candidate


CANDIDATE_OPS: tuple[OpKind, ...] = tuple(OpKind(i) for i in range(7))

OP_LABELS: dict[OpKind, str] = {
    OpKind.IDENTITY: "identity",
    OpKind.MAX_POOL_3: "max-pool-3",
    OpKind.AVG_POOL_3: "avg-pool-3",
    OpKind.SEP_CONV_3: "sep-conv-3",
    OpKind.SEP_CONV_5: "sep-conv-5",
    OpKind.DIL_SEP_CONV_3: "dil-sep-conv-3",
    OpKind.DIL_SEP_CONV_5: "dil-sep-conv-5",
    OpKind.CONV_1X1: "conv-1x1",
}

_LABEL_TO_OP = {v: k for k, v in OP_LABELS.items()}

# kernel size and dilation of the separable candidates
_CONV_SPECS: dict[OpKind, tuple[int, int]] = {
    OpKind.SEP_CONV_3: (3, 1),
    OpKind.SEP_CONV_5: (5, 1),
    OpKind.DIL_SEP_CONV_3: (3, 2),
    OpKind.DIL_SEP_CONV_5: (5, 2),
}


def op_from_label(label: str) -> OpKind:
    try:
        return _LABEL_TO_OP[label]
    except KeyError:
        raise ValueError(f"unknown operation label {label!r}") from None


def is_conv(kind: OpKind) -> bool:
    return kind in _CONV_SPECS


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def op_weight_shapes(kind: OpKind, channels: int) -> dict[str, tuple[int, ...]]:
    if not is_conv(kind):
        return {}
    k, _ = _CONV_SPECS[kind]
    return {"dw": (channels, k, k), "pw": (channels, channels)}


def init_op_weights(kind: OpKind, channels: int, rng: np.random.Generator, name: str = "") -> dict[str, Parameter]:
    """Seeded He-style normal init for a candidate's depthwise + pointwise weights."""
    if not is_conv(kind):
        return {}
    k, _ = _CONV_SPECS[kind]
    return {
        "dw": Parameter(he_normal(rng, (channels, k, k), k * k), name=f"{name}.dw"),
        "pw": Parameter(he_normal(rng, (channels, channels), channels), name=f"{name}.pw"),
    }


def apply(kind: OpKind, x: Tensor, weights: Mapping[str, Tensor] | None = None) -> Tensor:
    """Run one operation; all seven candidates map (b,c,h,w) -> (b,c,h,w)."""
    label = OP_LABELS[kind]
    if x.data.ndim != 4:
        raise ShapeError(label, f"expected rank-4 input, got shape {x.data.shape}")
    if kind == OpKind.IDENTITY:
        return x
    if kind == OpKind.MAX_POOL_3:
        return maxpool3_same(x)
    if kind == OpKind.AVG_POOL_3:
        return avgpool3_same(x)
    if kind == OpKind.CONV_1X1:
        if not weights or "w" not in weights:
            raise ShapeError(label, "missing weight 'w'")
        return conv1x1(x, weights["w"], weights.get("b"))
    k, dilation = _CONV_SPECS[kind]
    if not weights or "dw" not in weights or "pw" not in weights:
        raise ShapeError(label, "missing depthwise/pointwise weights")
    dw, pw = weights["dw"], weights["pw"]
    c = x.data.shape[1]
    if dw.data.shape != (c, k, k):
        raise ShapeError(label, f"depthwise weight shape {dw.data.shape} != {(c, k, k)}")
    if pw.data.shape != (c, c):
        raise ShapeError(label, f"pointwise weight shape {pw.data.shape} != {(c, c)}")
    y = depthwise_conv2d(x, dw, dilation=dilation)
    y = conv1x1(y, pw)
    return relu(y)
