"""Synthetic 2-D segmentation task: data generation, training loss, and
patient-level Dice evaluation.

Images are 16x16 single-channel fields containing 1-3 random rectangles or
ellipses per foreground class (classes never overlap), drawn at distinct
intensities with additive Gaussian noise.  Patients are split 60/20/20 into
disjoint train/val/test groups.  All values are quantized to float32 at
generation time so the on-disk cache round-trips losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    channel_take,
    div,
    index,
    log_softmax_channels,
    mul,
    neg,
    softmax_channels,
    sub,
    sum_all,
    sum_over,
)
from .seeding import rng_stream

__all__ = [
    "SynthVolume",
    "SegDataset",
    "generate_dataset",
    "stack_slices",
    "soft_dice",
    "cross_entropy",
    "segmentation_loss",
    "hard_labels",
    "patient_dice",
]

_CLASS_INTENSITY = {1: 0.75, 2: 0.42, 3: 0.25}
_INTENSITY_JITTER = 0.04
_BACKGROUND = 0.08
_NOISE_SIGMA = 0.04


@dataclass
class SynthVolume:
    """One synthetic patient: a stack of slices with one-hot masks."""

    patient_id: str
    images: np.ndarray  # (n_slices, 1, H, W)
    masks: np.ndarray  # (n_slices, n_classes, H, W), one-hot per pixel


@dataclass
class SegDataset:
    train: list[SynthVolume]
    val: list[SynthVolume]
    test: list[SynthVolume]
    n_classes: int
    height: int
    width: int
    seed: int

    @property
    def volumes(self) -> list[SynthVolume]:
        return self.train + self.val + self.test

    @property
    def splits(self) -> dict[str, list[SynthVolume]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _shape_region(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Boolean region of one random axis-aligned rectangle or ellipse."""
    cy = rng.integers(3, h - 3)
    cx = rng.integers(3, w - 3)
    a = rng.integers(2, 5)
    b = rng.integers(2, 5)
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def generate_dataset(
    seed: int,
    n_patients: int = 15,
    slices_per_patient: int = 6,
    height: int = 16,
    width: int = 16,
    n_foreground: int = 2,
) -> SegDataset:
    """Deterministic synthetic dataset with a patient-disjoint 60/20/20 split."""
    if n_patients < 5:
        raise ValueError("need at least 5 patients for a 60/20/20 split")
    if slices_per_patient < 1 or height < 8 or width < 8:
        raise ValueError("degenerate dataset size")
    if not 1 <= n_foreground <= len(_CLASS_INTENSITY):
        raise ValueError(f"n_foreground must be in [1, {len(_CLASS_INTENSITY)}]")
    rng = rng_stream(seed, "data")
    n_classes = n_foreground + 1

    volumes = []
    for p in range(n_patients):
        images = np.zeros((slices_per_patient, 1, height, width))
        masks = np.zeros((slices_per_patient, n_classes, height, width))
        for s in range(slices_per_patient):
            img = np.full((height, width), _BACKGROUND)
            regions = np.zeros((height, width), dtype=np.intp)
            for cls in range(1, n_classes):
                for _ in range(int(rng.integers(1, 3))):
                    m = _shape_region(rng, height, width) & (regions == 0)
                    regions[m] = cls
                    img[m] = _CLASS_INTENSITY[cls] + rng.uniform(-_INTENSITY_JITTER, _INTENSITY_JITTER)
            img = img + rng.normal(0.0, _NOISE_SIGMA, size=(height, width))
            images[s, 0] = img
            for cls in range(n_classes):
                masks[s, cls] = regions == cls
        # float32 quantization makes the binary cache round-trip lossless
        volumes.append(
            SynthVolume(
                patient_id=f"p{p:03d}",
                images=images.astype(np.float32).astype(np.float64),
                masks=masks.astype(np.float32).astype(np.float64),
            )
        )

    order = rng.permutation(n_patients)
    n_train = int(round(0.6 * n_patients))
    n_val = int(round(0.2 * n_patients))
    n_val = max(1, n_val)
    n_train = max(1, min(n_train, n_patients - n_val - 1))
    train_ids = set(order[:n_train])
    val_ids = set(order[n_train : n_train + n_val])
    return SegDataset(
        train=[volumes[i] for i in sorted(train_ids)],
        val=[volumes[i] for i in sorted(val_ids)],
        test=[volumes[i] for i in sorted(set(range(n_patients)) - train_ids - val_ids)],
        n_classes=n_classes,
        height=height,
        width=width,
        seed=seed,
    )


def stack_slices(volumes: list[SynthVolume]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten a list of patients into (images, masks) slice arrays."""
    images = np.concatenate([v.images for v in volumes], axis=0)
    masks = np.concatenate([v.masks for v in volumes], axis=0)
    return images, masks


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------


def soft_dice(logits: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Macro-average soft Dice over foreground classes (background excluded).

    The smoothing constant enters both numerator and denominator, so a class
    that is empty in both prediction and ground truth scores 1.
    """
    probs = softmax_channels(logits)
    inter = sum_over(mul(probs, target), (0, 2, 3))
    psum = sum_over(probs, (0, 2, 3))
    ysum = target.sum(axis=(0, 2, 3))
    n_classes = logits.data.shape[1]
    terms = None
    for c in range(1, n_classes):
        num = add(mul(index(inter, c), 2.0), eps)
        den = add(index(psum, c), float(ysum[c]) + eps)
        d = div(num, den)
        terms = d if terms is None else add(terms, d)
    return div(terms, float(n_classes - 1))


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-averaged cross entropy over all classes, background included."""
    lsm = log_softmax_channels(logits)
    b, _, h, w = logits.data.shape
    return neg(div(sum_all(mul(lsm, target)), float(b * h * w)))


def segmentation_loss(logits: Tensor, target: np.ndarray, lam: float = 0.5, eps: float = 1e-5) -> Tensor:
    """Compound loss lam * (1 - soft Dice) + (1 - lam) * cross entropy."""
    target = np.asarray(target, dtype=np.float64)
    if logits.data.shape != target.shape:
        raise ValueError(f"logits shape {logits.data.shape} != target shape {target.shape}")
    if not np.all(np.isfinite(logits.data)) or not np.all(np.isfinite(target)):
        raise ValueError("non-finite values in loss inputs")
    dice = soft_dice(logits, target, eps=eps)
    ce = cross_entropy(logits, target)
    return add(mul(sub(1.0, dice), lam), mul(ce, 1.0 - lam))


# ---------------------------------------------------------------------------
# hard metrics
# ---------------------------------------------------------------------------


def hard_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax class map from (n, classes, H, W) logits or probabilities."""
    return np.argmax(logits, axis=1)


def patient_dice(
    pred_labels: np.ndarray, gt_onehot: np.ndarray
) -> tuple[dict[int, float], float]:
    """Per-class and mean-foreground Dice for one patient.

    TP/FP/FN are aggregated over all slices of the patient before the
    division, which in general differs from averaging per-slice Dice.  A
    class absent from both prediction and ground truth scores 1.
    """
    if pred_labels.shape[0] != gt_onehot.shape[0]:
        raise ValueError(
            f"slice count mismatch: {pred_labels.shape[0]} predictions vs {gt_onehot.shape[0]} masks"
        )
    n_classes = gt_onehot.shape[1]
    gt_labels = np.argmax(gt_onehot, axis=1)
    per_class: dict[int, float] = {}
    for c in range(n_classes):
        p = pred_labels == c
        g = gt_labels == c
        tp = int(np.sum(p & g))
        fp = int(np.sum(p & ~g))
        fn = int(np.sum(~p & g))
        denom = 2 * tp + fp + fn
        per_class[c] = 1.0 if denom == 0 else 2.0 * tp / denom
    mean_fg = float(np.mean([per_class[c] for c in range(1, n_classes)]))
    return per_class, mean_fg
