"""Training-time feature augmentation and contrastive view construction.

Two transforms operate on (channels x bands) feature matrices: convex sample
mixing restricted to same-label partners (so every augmented sample keeps an
unambiguous label) and random channel zeroing.  All randomness flows through
an explicit numpy Generator, so views are reproducible and callers own RNG
partitioning across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KNOWN_TRANSFORMS = ("mixup", "mask")


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    mixup_alpha: float = 0.2     # Beta(alpha, alpha) mixing coefficient
    mask_prob: float = 0.2       # per-channel zeroing probability
    view_a: tuple[str, ...] = ("mixup",)
    view_b: tuple[str, ...] = ("mask",)

    def __post_init__(self):
        object.__setattr__(self, "view_a", tuple(self.view_a))
        object.__setattr__(self, "view_b", tuple(self.view_b))
        if self.mixup_alpha <= 0:
            raise AugmentError(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        if not 0 <= self.mask_prob < 1:
            raise AugmentError(f"mask_prob must be in [0, 1), got {self.mask_prob}")
        for t in self.view_a + self.view_b:
            if t not in KNOWN_TRANSFORMS:
                raise AugmentError(f"unknown transform {t!r}")


def mixup(x_i, x_j, lam):
    """lam * x_i + (1 - lam) * x_j, elementwise."""
    x_i = np.asarray(x_i)
    x_j = np.asarray(x_j)
    if x_i.shape != x_j.shape:
        raise AugmentError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise AugmentError(f"mixing coefficient {lam} outside [0, 1]")
    return lam * x_i + (1.0 - lam) * x_j


def mask_channels(x, mask):
    """Zero the rows of x where mask is 0; rows with mask 1 are bit-identical."""
    x = np.asarray(x)
    mask = np.asarray(mask)
    if mask.shape != (x.shape[0],):
        raise AugmentError(f"mask length {mask.shape} != {x.shape[0]} channels")
    return x * mask[:, None].astype(x.dtype)


def draw_channel_mask(n_channels, prob, rng):
    """0/1 channel mask with P(zero) = prob; the all-zero mask is resampled."""
    while True:
        mask = (rng.random(n_channels) >= prob).astype(np.int8)
        if mask.any():
            return mask


def _apply_mixup(feats, labels, alpha, rng):
    out = np.empty_like(feats)
    by_label = {}
    for idx, lab in enumerate(labels):
        by_label.setdefault(int(lab), []).append(idx)
    for i in range(feats.shape[0]):
        pool = [j for j in by_label[int(labels[i])] if j != i]
        if not pool:
            out[i] = feats[i]  # lone sample of its label: identity fallback
            continue
        j = pool[int(rng.integers(len(pool)))]
        lam = float(rng.beta(alpha, alpha))
        out[i] = mixup(feats[i], feats[j], lam)
    return out


def _apply_mask(feats, prob, rng):
    out = np.empty_like(feats)
    for i in range(feats.shape[0]):
        out[i] = mask_channels(feats[i], draw_channel_mask(feats.shape[1], prob, rng))
    return out


def apply_transforms(feats, labels, transforms, config: AugmentConfig, rng):
    """Run an ordered transform list over a (N, channels, bands) stack."""
    out = feats.copy()
    for t in transforms:
        if t == "mixup":
            out = _apply_mixup(out, labels, config.mixup_alpha, rng)
        elif t == "mask":
            out = _apply_mask(out, config.mask_prob, rng)
        else:
            raise AugmentError(f"unknown transform {t!r}")
    return out


def make_views(batch, config: AugmentConfig, rng):
    """Build the two contrastive views of a batch of feature samples.

    `batch` is a list of FeatureSample (or (de, label) pairs).  Returns
    (view_a, view_b, labels) where the views are (N, channels, bands) arrays
    index-aligned with the batch and both carry the batch labels.
    """
    if len(batch) == 0:
        raise AugmentError("empty batch")
    if hasattr(batch[0], "de"):
        feats = np.stack([np.asarray(s.de, dtype=np.float64) for s in batch])
        labels = np.array([s.label for s in batch], dtype=np.int64)
    else:
        feats = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
        labels = np.array([lab for _, lab in batch], dtype=np.int64)
    view_a = apply_transforms(feats, labels, config.view_a, config, rng)
    view_b = apply_transforms(feats, labels, config.view_b, config, rng)
    return view_a, view_b, labels
