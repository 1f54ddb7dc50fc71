"""Poisoned-dataset construction and deterministic batch iteration.

The label map is either all-to-one (every class mapped to a constant
target) or all-to-all (class y mapped to (y + 1) mod C). Poison selection
and epoch shuffles are driven by numpy's PCG64 generator; the algorithm
name is recorded in PRNG_ALGORITHM so runs stay reproducible across
builds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .imagecore import Image, LabeledImage
from .trigger import TriggerConfig, bpp_transform

PRNG_ALGORITHM = "numpy PCG64"

ALL_TO_ONE = "all_to_one"
ALL_TO_ALL = "all_to_all"


@dataclass(frozen=True)
class LabelMap:
    mode: str
    num_classes: int
    target: int = 0  # used by all_to_one only

    def __post_init__(self):
        if self.mode not in (ALL_TO_ONE, ALL_TO_ALL):
            raise ConfigurationError(f"unknown label-map mode {self.mode!r}")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.mode == ALL_TO_ONE and not (0 <= self.target < self.num_classes):
            raise ConfigurationError(
                f"target {self.target} outside [0, {self.num_classes})"
            )

    def __call__(self, y: int) -> int:
        return apply_label_map(y, self)


def apply_label_map(y: int, label_map: LabelMap) -> int:
    """Target label for true label y."""
    if not (0 <= y < label_map.num_classes):
        raise DomainError(f"label {y} outside [0, {label_map.num_classes})")
    if label_map.mode == ALL_TO_ONE:
        return label_map.target
    return (y + 1) % label_map.num_classes


@dataclass(frozen=True)
class PoisonPlan:
    label_map: LabelMap
    trigger: TriggerConfig
    alpha: float = 0.1  # fraction of samples carrying the trigger
    adv_rate: float = 0.0  # fraction of batch slots reserved for PGD negatives
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.adv_rate <= 1.0):
            raise ConfigurationError(f"adv_rate must be in [0, 1], got {self.adv_rate}")
        if self.alpha + self.adv_rate > 1.0:
            raise ConfigurationError(
                f"alpha + adv_rate must be <= 1, got {self.alpha + self.adv_rate}"
            )


def _rng(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed,) + key)))


def poison_indices(n: int, plan: PoisonPlan) -> np.ndarray:
    """Seeded pseudo-random subset of size round(alpha * n), sorted."""
    if n <= 0:
        raise DomainError("empty dataset")
    k = int(round(plan.alpha * n))
    idx = _rng(plan.seed, 0).choice(n, size=k, replace=False)
    return np.sort(idx)


def poison_dataset(data, plan: PoisonPlan):
    """Split data into (clean, poisoned); poisoned samples are transformed
    and relabeled, the rest untouched. Deterministic from plan.seed."""
    chosen = set(poison_indices(len(data), plan).tolist())
    clean, poisoned = [], []
    for i, item in enumerate(data):
        if i in chosen:
            poisoned.append(
                LabeledImage(
                    bpp_transform(item.image, plan.trigger),
                    apply_label_map(item.label, plan.label_map),
                )
            )
        else:
            clean.append(item)
    return clean, poisoned


@dataclass
class Batch:
    """One mixed training batch in raw pixel space.

    images: (B, H, W, C) float64, values in [0, 2^m - 1]
    labels: assigned labels (poison slots carry the target label,
            adversarial slots their original label)
    poison_mask / adv_mask: which slots hold trigger samples / which are
            reserved for PGD negatives (images still clean; the training
            loop fills them in)
    """

    images: np.ndarray
    labels: np.ndarray
    poison_mask: np.ndarray
    adv_mask: np.ndarray
    adv_targets: np.ndarray  # PGD target class per slot (only adv slots used)


def batch_composition(batch_size: int, plan: PoisonPlan):
    """(n_poison, n_adv, n_clean) slots per batch; clean must be nonzero."""
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be >= 2, got {batch_size}")
    n_poison = int(round(plan.alpha * batch_size))
    n_adv = int(round(plan.adv_rate * batch_size))
    n_clean = batch_size - n_poison - n_adv
    if n_clean <= 0:
        raise ConfigurationError(
            f"alpha={plan.alpha} and adv_rate={plan.adv_rate} leave no clean "
            f"slots in a batch of {batch_size}"
        )
    return n_poison, n_adv, n_clean


class BatchStream:
    """Deterministic epoch-by-epoch stream of mixed batches.

    Trigger transforms are cached per sample: the transform is a pure
    function, so each source image is dithered at most once.
    """

    def __init__(self, data, plan: PoisonPlan, batch_size: int):
        if not data:
            raise DomainError("empty dataset")
        batch_composition(batch_size, plan)  # validate early
        self.data = list(data)
        self.plan = plan
        self.batch_size = batch_size
        self._trigger_cache = {}

    def _transformed(self, i):
        if i not in self._trigger_cache:
            self._trigger_cache[i] = bpp_transform(
                self.data[i].image, self.plan.trigger
            ).pixels
        return self._trigger_cache[i]

    def epoch(self, epoch_index: int):
        """Yield the batches of one epoch; order depends only on
        (plan.seed, epoch_index)."""
        plan = self.plan
        n = len(self.data)
        n_poison, n_adv, _ = batch_composition(self.batch_size, plan)
        order = _rng(plan.seed, 1, epoch_index).permutation(n)
        for start in range(0, n - self.batch_size + 1, self.batch_size):
            idx = order[start : start + self.batch_size]
            images = np.stack([self.data[i].image.pixels for i in idx])
            labels = np.array([self.data[i].label for i in idx], dtype=np.int64)
            poison_mask = np.zeros(len(idx), dtype=bool)
            adv_mask = np.zeros(len(idx), dtype=bool)
            adv_targets = np.zeros(len(idx), dtype=np.int64)
            for j in range(n_poison):
                images[j] = self._transformed(int(idx[j]))
                labels[j] = apply_label_map(int(labels[j]), plan.label_map)
                poison_mask[j] = True
            for j in range(n_poison, n_poison + n_adv):
                adv_mask[j] = True
                adv_targets[j] = apply_label_map(int(labels[j]), plan.label_map)
            yield Batch(images, labels, poison_mask, adv_mask, adv_targets)


def batches(data, plan: PoisonPlan, batch_size: int, epochs: int = 1):
    """Convenience generator over a BatchStream's epochs."""
    stream = BatchStream(data, plan, batch_size)
    for e in range(epochs):
        yield from stream.epoch(e)
