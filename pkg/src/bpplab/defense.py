"""Defense harness: BA/ASR metrics, STRIP, GradCAM, Neural Cleanse with
MAD anomaly index, fine-pruning sweep, and spectral signature.

All defenses are read-only over a checkpoint: anything that mutates
parameters (fine-pruning) works on a copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import eval_ba_asr
from .dataset import LabelMap
from .errors import (
    ConfigurationError,
    DegenerateSpreadError,
    DomainError,
    NumericError,
)
from .nn import Conv2D, Network, scale_input, softmax
from .trigger import TriggerConfig, bpp_transform

MAD_CONSISTENCY = 1.4826  # normal-distribution scaling for the MAD
ANOMALY_THRESHOLD = 2.0


# ---------------------------------------------------------------------------
# BA / ASR


def ba_asr(net: Network, clean_test, trigger: TriggerConfig, label_map: LabelMap):
    """Benign accuracy and attack success rate on a labeled test set.

    ASR counts trigger-transformed samples predicted as the mapped label;
    for all-to-one, samples already in the target class are excluded from
    the denominator.
    """
    if not clean_test:
        raise DomainError("empty test set")
    x_clean = scale_input(
        np.stack([it.image.pixels for it in clean_test]), depth=trigger.m
    )
    x_trig = scale_input(
        np.stack([bpp_transform(it.image, trigger).pixels for it in clean_test]),
        depth=trigger.m,
    )
    y = np.array([it.label for it in clean_test], dtype=np.int64)
    return eval_ba_asr(net, x_clean, x_trig, y, label_map)


# ---------------------------------------------------------------------------
# STRIP


def strip_entropy(net: Network, x, clean_pool, n_overlays=64, blend=0.5, seed=0):
    """Mean prediction entropy of x superimposed with random pool images.

    x and the pool entries are (H, W, C) raw-pixel arrays; the blend is
    blend * x + (1 - blend) * overlay, computed before input scaling.
    """
    if len(clean_pool) == 0:
        raise DomainError("empty overlay pool")
    if n_overlays < 1:
        raise ConfigurationError(f"n_overlays must be >= 1, got {n_overlays}")
    if not (0.0 < blend < 1.0):
        raise ConfigurationError(f"blend must be in (0, 1), got {blend}")
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.integers(0, len(clean_pool), size=n_overlays)
    mixed = np.stack(
        [blend * np.asarray(x) + (1.0 - blend) * np.asarray(clean_pool[i]) for i in picks]
    )
    probs = softmax(net.forward(scale_input(mixed), training=False))
    ent = -(probs * np.log(np.maximum(probs, 1e-12))).sum(axis=1)
    return float(ent.mean())


def strip_entropies(net, samples, clean_pool, n_overlays=64, blend=0.5, seed=0):
    """strip_entropy over a list of samples, one seeded draw each."""
    return [
        strip_entropy(net, s, clean_pool, n_overlays, blend, seed=seed + i)
        for i, s in enumerate(samples)
    ]


# ---------------------------------------------------------------------------
# GradCAM


def gradcam(net: Network, x, class_index, conv_layer):
    """Class-activation heatmap at a conv layer's output.

    Channel weights are the spatial means of d logit_class / d activation;
    the heatmap is the ReLU of the weighted activation sum, min-max
    normalized to [0, 1] (an all-zero map stays all-zero). x is a single
    (H, W, C) raw-pixel array.
    """
    if not isinstance(net.layers[conv_layer], Conv2D):
        raise ConfigurationError(f"layer {conv_layer} is not a conv layer")
    xb = scale_input(np.asarray(x)[None])
    logits = net.forward(xb, training=False)
    dlogits = np.zeros_like(logits)
    dlogits[0, class_index] = 1.0
    net.backward(dlogits, capture_index=conv_layer)
    grad = net.captured_grad[0]  # (K, h, w)
    acts = net.activation(conv_layer)[0]
    alpha = grad.mean(axis=(1, 2))
    cam = np.maximum((alpha[:, None, None] * acts).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


# ---------------------------------------------------------------------------
# Neural Cleanse


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class ClassTrigger:
    mask: np.ndarray  # (H, W) in [0, 1]
    pattern: np.ndarray  # (C, H, W) in [0, 1]
    l1: float


def reverse_engineer_trigger(
    net: Network,
    probe_x,
    target,
    lam=1e-3,
    iterations=1500,
    lr=1.0,
    batch_size=32,
    seed=0,
):
    """Optimize a continuous mask/pattern that flips probes to `target`.

    Objective: mean CE(net((1 - m) * x + m * t), target) + lam * ||m||_1
    with m and t sigmoid-parameterized, minimized by plain gradient
    descent. probe_x is (N, C, H, W) in [0, 1].
    """
    n, c, h, w = probe_x.shape
    rng = np.random.Generator(np.random.PCG64(seed))
    pm = np.full((h, w), -5.0)  # sigmoid(-5) ~ 0.007: start near-empty
    pt = rng.normal(0.0, 0.5, size=(c, h, w))
    y = np.full(min(batch_size, n), target, dtype=np.int64)
    from .nn import softmax_cross_entropy

    for it in range(iterations):
        idx = rng.integers(0, n, size=len(y))
        x = probe_x[idx]
        mask = _sigmoid(pm)
        pattern = _sigmoid(pt)
        x_in = (1.0 - mask[None, None]) * x + mask[None, None] * pattern[None]
        logits = net.forward(x_in, training=False)
        ce, dlogits, _ = softmax_cross_entropy(logits, y)
        if not np.isfinite(ce):
            raise NumericError(f"trigger optimization diverged at iteration {it}")
        dx_in = net.backward(dlogits).astype(np.float64)
        dmask = (dx_in * (pattern[None] - x)).sum(axis=(0, 1)) + lam
        dpattern = (dx_in * mask[None, None]).sum(axis=0)
        pm -= lr * dmask * mask * (1.0 - mask)
        pt -= lr * dpattern * pattern * (1.0 - pattern)
    mask = _sigmoid(pm)
    return ClassTrigger(mask, _sigmoid(pt), float(np.abs(mask).sum()))


def neural_cleanse(net: Network, probe_set, lam=1e-3, iterations=1500, lr=1.0, seed=0):
    """Per-class reverse-engineered triggers for every output class."""
    if not probe_set:
        raise DomainError("empty probe set")
    probe_x = scale_input(np.stack([it.image.pixels for it in probe_set]))
    return [
        reverse_engineer_trigger(
            net, probe_x, cls, lam=lam, iterations=iterations, lr=lr, seed=seed + cls
        )
        for cls in range(net.num_classes)
    ]


def mad_anomaly(values):
    """Anomaly index of each value: |v - median| / (1.4826 * MAD)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 3:
        raise DomainError(f"need at least 3 values, got {len(v)}")
    med = np.median(v)
    mad = np.median(np.abs(v - med))
    if mad == 0:
        raise DegenerateSpreadError("zero median absolute deviation")
    return (np.abs(v - med) / (MAD_CONSISTENCY * mad)).tolist()


def flagged_classes(norms, threshold=ANOMALY_THRESHOLD):
    """Classes whose mask norm is anomalously SMALL (below the median and
    with anomaly index above the threshold)."""
    norms = np.asarray(norms, dtype=np.float64)
    indices = np.asarray(mad_anomaly(norms))
    med = np.median(norms)
    return [
        int(i)
        for i in np.nonzero((indices > threshold) & (norms < med))[0]
    ]


# ---------------------------------------------------------------------------
# fine-pruning


def fineprune_sweep(
    net: Network,
    clean_set,
    layer_index,
    fractions,
    trigger: TriggerConfig,
    label_map: LabelMap,
    eval_set=None,
):
    """Prune the layer's lowest-activation channels and trace BA/ASR.

    Channels are ranked by mean absolute activation over clean_set,
    ascending; each fraction zeroes that share of channels (weights and
    bias) in a fresh copy of the network. Returns a list of
    (fraction, BA, ASR) rows; the input network is never mutated.
    """
    layer = net.layers[layer_index]
    if not isinstance(layer, Conv2D):
        raise ConfigurationError(f"layer {layer_index} has no prunable channels")
    fr = list(fractions)
    if any(not (0.0 <= f < 1.0) for f in fr) or any(
        a >= b for a, b in zip(fr, fr[1:])
    ):
        raise ConfigurationError("fractions must be strictly increasing in [0, 1)")
    if eval_set is None:
        eval_set = clean_set
    x_clean = scale_input(np.stack([it.image.pixels for it in clean_set]))
    net.forward(x_clean, training=False)
    acts = net.activation(layer_index)  # (B, K, h, w)
    order = np.argsort(np.abs(acts).mean(axis=(0, 2, 3)))  # dormant first
    n_ch = len(order)
    curve = []
    for f in fr:
        pruned = net.copy()
        kill = order[: int(round(f * n_ch))]
        pl = pruned.layers[layer_index]
        pl.params["w"][kill] = 0.0
        pl.params["b"][kill] = 0.0
        ba, asr = ba_asr(pruned, eval_set, trigger, label_map)
        curve.append((float(f), ba, asr))
    return curve


# ---------------------------------------------------------------------------
# spectral signature


def spectral_signature(features, removal_fraction=0.15, tol=1e-9, max_iter=1000):
    """Outlier scores along the top singular direction of the centered
    feature matrix (power iteration); the removal set holds the top
    removal_fraction scores."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise DomainError(f"need an (N >= 2) x E feature matrix, got {f.shape}")
    centered = f - f.mean(axis=0)
    if not np.any(centered):
        # all features identical: no principal direction, nothing stands out
        return np.zeros(len(f)), []
    rng = np.random.Generator(np.random.PCG64(0))
    v = rng.normal(size=f.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        nv = centered.T @ (centered @ v)
        norm = np.linalg.norm(nv)
        if norm == 0:
            break
        nv /= norm
        if np.linalg.norm(nv - v) < tol or np.linalg.norm(nv + v) < tol:
            v = nv
            break
        v = nv
    scores = (centered @ v) ** 2
    k = int(round(removal_fraction * len(f)))
    removal = np.argsort(scores)[::-1][:k].tolist()
    return scores, removal


# ---------------------------------------------------------------------------
# report container


@dataclass
class DefenseReport:
    strip_clean: list = field(default_factory=list)
    strip_trojan: list = field(default_factory=list)
    nc_norms: list = field(default_factory=list)
    nc_anomaly: list = field(default_factory=list)
    nc_flagged: list = field(default_factory=list)
    fineprune_curve: list = field(default_factory=list)
    spectral_scores: list = field(default_factory=list)
    spectral_removed: list = field(default_factory=list)
    gradcam_maps: list = field(default_factory=list)
