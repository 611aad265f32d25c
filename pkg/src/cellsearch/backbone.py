"""Toy U-Net backbone: two encoder/skip levels (8 and 16 channels) above a
32-channel bottleneck, nearest-neighbor upsampling, and a 1x1 class head.

The backbone is trained once on the synthetic task, then frozen; later
stages may substitute a searched cell for either identity skip via the
``skip_fn`` hook without touching backbone weights.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    adam_step,
    backward,
    concat_channels,
    conv1x1,
    conv2d,
    maxpool2_down,
    relu,
    upsample2x,
    zero_grads,
)
from .ops import he_normal
from .seeding import rng_stream
from .task import SegDataset, SynthVolume, hard_labels, patient_dice, segmentation_loss, stack_slices

__all__ = [
    "UNetBackbone",
    "PretrainResult",
    "pretrain_backbone",
    "evaluate_model",
    "arrays_digest",
]


def arrays_digest(named: dict[str, np.ndarray]) -> str:
    """Order-independent SHA-256 over named float64 arrays."""
    h = hashlib.sha256()
    for name in sorted(named):
        h.update(name.encode())
        h.update(np.ascontiguousarray(named[name], dtype=np.float64).tobytes())
    return h.hexdigest()


class UNetBackbone:
    """Two-level encoder/decoder with hookable skip connections.

    ``skip_fn(level, skip_tensor, up_tensor)`` replaces the identity skip at
    the given level (0 = finest) when provided; the decoder concatenates its
    result with the upsampled path exactly as it would the raw skip.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int = 1,
        n_classes: int = 3,
        enc_channels: tuple[int, int] = (8, 16),
        bottleneck_channels: int = 32,
    ):
        c0, c1 = enc_channels
        cb = bottleneck_channels
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.enc_channels = (c0, c1)
        self.bottleneck_channels = cb
        self.frozen = False

        def conv_p(name, out_c, in_c, k=3):
            return Parameter(he_normal(rng, (out_c, in_c, k, k), in_c * k * k), name)

        def bias_p(name, out_c):
            return Parameter(np.zeros(out_c), name)

        self._p = {}
        for name, out_c, in_c in [
            ("e0c1", c0, in_channels),
            ("e0c2", c0, c0),
            ("e1c1", c1, c0),
            ("e1c2", c1, c1),
            ("bc1", cb, c1),
            ("bc2", cb, cb),
            ("d1c1", c1, c1 + cb),
            ("d1c2", c1, c1),
            ("d0c1", c0, c0 + c1),
            ("d0c2", c0, c0),
        ]:
            self._p[name + "_w"] = conv_p(f"unet.{name}_w", out_c, in_c)
            self._p[name + "_b"] = bias_p(f"unet.{name}_b", out_c)
        self._p["head_w"] = Parameter(he_normal(rng, (n_classes, c0), c0), "unet.head_w")
        self._p["head_b"] = bias_p("unet.head_b", n_classes)

    @property
    def skip_channels(self) -> tuple[int, int]:
        return self.enc_channels

    @property
    def up_channels(self) -> tuple[int, int]:
        """Channels of the upsampled decoder tensor entering each skip level."""
        return (self.enc_channels[1], self.bottleneck_channels)

    def parameters(self) -> list[Parameter]:
        return [self._p[k] for k in sorted(self._p)]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def weight_hash(self) -> str:
        return arrays_digest(self.named_arrays())

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False

    def _block(self, x: Tensor, name: str) -> Tensor:
        x = relu(conv2d(x, self._p[name + "c1_w"], self._p[name + "c1_b"]))
        return relu(conv2d(x, self._p[name + "c2_w"], self._p[name + "c2_b"]))

    def forward(self, x, skip_fn=None) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        e0 = self._block(t, "e0")
        e1 = self._block(maxpool2_down(e0), "e1")
        bott = self._block(maxpool2_down(e1), "b")

        u1 = upsample2x(bott)
        s1 = skip_fn(1, e1, u1) if skip_fn is not None else e1
        d1 = self._block(concat_channels([s1, u1]), "d1")

        u0 = upsample2x(d1)
        s0 = skip_fn(0, e0, u0) if skip_fn is not None else e0
        d0 = self._block(concat_channels([s0, u0]), "d0")
        return conv1x1(d0, self._p["head_w"], self._p["head_b"])


# ---------------------------------------------------------------------------
# evaluation and Stage I training
# ---------------------------------------------------------------------------


def evaluate_model(forward_fn, volumes: list[SynthVolume], n_classes: int, batch_size: int = 8):
    """Patient-level Dice of a forward function over a list of patients.

    Returns (per-patient mean-fg list, mean over patients, per-class means).
    """
    means = []
    per_class_acc = {c: [] for c in range(n_classes)}
    for vol in volumes:
        preds = []
        for lo in range(0, vol.images.shape[0], batch_size):
            logits = forward_fn(vol.images[lo : lo + batch_size])
            preds.append(hard_labels(logits.data))
        labels = np.concatenate(preds, axis=0)
        per_class, mean_fg = patient_dice(labels, vol.masks)
        means.append(mean_fg)
        for c, v in per_class.items():
            per_class_acc[c].append(v)
    per_class_mean = {c: float(np.mean(v)) for c, v in per_class_acc.items()}
    return means, float(np.mean(means)), per_class_mean


@dataclass
class PretrainResult:
    best_epoch: int
    best_val_dice: float
    train_losses: list[float] = field(default_factory=list)
    val_dices: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


def pretrain_backbone(
    backbone: UNetBackbone,
    dataset: SegDataset,
    epochs: int = 200,
    lr: float = 0.001,
    batch_size: int = 8,
    seed: int = 0,
) -> PretrainResult:
    """Stage I: train the backbone with identity skips, keep the best
    checkpoint by validation mean patient-level foreground Dice."""
    if not dataset.train:
        raise ValueError("empty training split")
    images, masks = stack_slices(dataset.train)
    rng = rng_stream(seed, "pretrain-order")
    params = backbone.parameters()
    best = (-1.0, 0, None)
    result = PretrainResult(best_epoch=0, best_val_dice=-1.0)
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(images.shape[0])
        epoch_loss = 0.0
        for lo in range(0, len(order), batch_size):
            sel = order[lo : lo + batch_size]
            logits = backbone.forward(images[sel])
            loss = segmentation_loss(logits, masks[sel])
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite pretraining loss at epoch {epoch}")
            backward(loss)
            adam_step(params, lr)
            epoch_loss += float(loss.data) * len(sel)
        result.train_losses.append(epoch_loss / len(order))
        _, val_dice, _ = evaluate_model(backbone.forward, dataset.val, dataset.n_classes, batch_size)
        result.val_dices.append(val_dice)
        if val_dice > best[0]:
            best = (val_dice, epoch, {p.name: p.data.copy() for p in params})
    if best[2] is not None:
        for p in params:
            p.data = best[2][p.name].copy()
    result.best_val_dice, result.best_epoch = best[0], best[1]
    result.wall_time_s = time.perf_counter() - start
    zero_grads(params)
    return result
