"""Poisoned training: targeted PGD negatives, supervised contrastive loss,
and the contrastive-adversarial training loop.

Each batch mixes trigger-transformed samples (carrying their mapped target
labels), PGD adversarial examples pushed toward the target class but kept
under their original labels, and clean samples. The loss is cross-entropy
on the assigned labels plus a weighted supervised contrastive term on the
penultimate embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import BatchStream, PoisonPlan, apply_label_map
from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    NumericError,
    TrainingError,
)
from .nn import SGD, Network, mnist_classifier, scale_input, softmax_cross_entropy
from .trigger import bpp_transform


@dataclass(frozen=True)
class PgdConfig:
    """L-infinity targeted PGD in [0, 1]-scaled pixel units."""

    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigurationError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not (0.0 <= self.step_size <= self.epsilon) and self.epsilon > 0:
            raise ConfigurationError(
                f"need 0 <= step_size <= epsilon, got {self.step_size}"
            )
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class TrainConfig:
    plan: PoisonPlan
    pgd: PgdConfig = PgdConfig()
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    beta: float = 1.0  # contrastive loss weight
    tau: float = 0.1  # contrastive temperature
    seed: int = 0
    lr_decay: float = 1.0  # multiplicative step decay factor
    lr_decay_every: int = 0  # epochs between decays; 0 disables

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigurationError(
                f"lr_decay must be in (0, 1], got {self.lr_decay}"
            )
        if self.lr_decay_every < 0:
            raise ConfigurationError(
                f"lr_decay_every must be >= 0, got {self.lr_decay_every}"
            )


def pgd_targeted(net: Network, x, y_target, cfg: PgdConfig):
    """Signed-gradient descent of CE toward y_target, clipped to the
    epsilon ball around the input and to the [0, 1] box."""
    x0 = np.asarray(x, dtype=np.float64)
    y_target = np.asarray(y_target, dtype=np.int64)
    if cfg.steps == 0 or cfg.epsilon == 0 or len(x0) == 0:
        return x0.copy()
    lo = np.clip(x0 - cfg.epsilon, 0.0, 1.0)
    hi = np.clip(x0 + cfg.epsilon, 0.0, 1.0)
    xk = x0.copy()
    for _ in range(cfg.steps):
        logits = net.forward(xk, training=False)
        _, dlogits, _ = softmax_cross_entropy(logits, y_target)
        dx = net.backward(dlogits)
        if not np.all(np.isfinite(dx)):
            raise NumericError("non-finite input gradient during PGD")
        xk = np.clip(xk - cfg.step_size * np.sign(dx), lo, hi)
    return xk


def supcon_loss(embeddings, labels, tau, return_grad=False):
    """Supervised contrastive loss on L2-normalized embeddings.

    For each anchor i with positive set P(i) (same label, excluding i):
      L_i = -(1/|P(i)|) sum_{p in P(i)} log( exp(z_i.z_p / tau)
                                             / sum_{a != i} exp(z_i.z_a / tau) )
    averaged over anchors with nonempty P(i). Raises DegenerateBatchError
    when every anchor is positive-less.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    b = e.shape[0]
    if b < 2:
        raise DegenerateBatchError("need at least 2 embeddings")
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    z = e / norms
    s = z @ z.T / tau
    off = ~np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("no anchor has a positive pair")
    # row-wise log-sum-exp over a != i
    s_max = np.where(off, s, -np.inf).max(axis=1, keepdims=True)
    exp_s = np.where(off, np.exp(s - s_max), 0.0)
    lse = np.log(exp_s.sum(axis=1, keepdims=True)) + s_max
    log_prob = s - lse  # log p_ij, meaningful for j != i
    loss = 0.0
    for i in np.nonzero(valid)[0]:
        loss -= log_prob[i, pos[i]].sum() / n_pos[i]
    loss /= n_valid
    if not return_grad:
        return float(loss)
    # dL/ds for valid anchors: softmax over j != i minus the positive mask
    p = exp_s / exp_s.sum(axis=1, keepdims=True)
    g_s = np.zeros_like(s)
    rows = np.nonzero(valid)[0]
    g_s[rows] = (p[rows] - pos[rows] / n_pos[rows, None]) / n_valid
    g_s[:, :] *= off  # no self terms
    dz = (g_s + g_s.T) @ z / tau
    # through the normalization z = e / ||e||
    de = (dz - (dz * z).sum(axis=1, keepdims=True) * z) / norms
    return float(loss), de


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    ce_loss: float
    supcon_loss: float
    ba: float
    asr: float


def _eval_pack(eval_data, plan: PoisonPlan):
    """Precompute clean and triggered eval arrays once."""
    m = plan.trigger.m
    x_clean = scale_input(
        np.stack([it.image.pixels for it in eval_data]), depth=m
    )
    x_trig = scale_input(
        np.stack([bpp_transform(it.image, plan.trigger).pixels for it in eval_data]),
        depth=m,
    )
    y = np.array([it.label for it in eval_data], dtype=np.int64)
    return x_clean, x_trig, y


def _predict(net, x, chunk=512):
    out = [
        net.forward(x[i : i + chunk], training=False).argmax(axis=1)
        for i in range(0, len(x), chunk)
    ]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def eval_ba_asr(net, x_clean, x_trig, y, label_map):
    """BA on clean inputs; ASR on triggered inputs against the mapped
    label. All-to-one excludes samples already in the target class from
    the ASR denominator."""
    ba = float((_predict(net, x_clean) == y).mean())
    targets = np.array([apply_label_map(int(t), label_map) for t in y])
    pred_t = _predict(net, x_trig)
    keep = np.ones(len(y), dtype=bool)
    if label_map.mode == "all_to_one":
        keep = y != label_map.target
    if not keep.any():
        return ba, 0.0
    asr = float((pred_t[keep] == targets[keep]).mean())
    return ba, asr


def train_trojan(data, cfg: TrainConfig, eval_data=None, net=None, verbose=False):
    """Run contrastive-adversarial poisoned training.

    Returns (net, list of EpochMetrics). BA/ASR columns are -1 when no
    eval_data is given.
    """
    plan = cfg.plan
    if net is None:
        net = mnist_classifier(num_classes=plan.label_map.num_classes)
        net.init_params(seed=cfg.seed)
    net.reseed_dropout(cfg.seed + 1)
    opt = SGD(net, lr=cfg.lr, momentum=cfg.momentum)
    stream = BatchStream(data, plan, cfg.batch_size)
    pack = _eval_pack(eval_data, plan) if eval_data else None
    m = plan.trigger.m
    history = []
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_every and epoch > 0 and epoch % cfg.lr_decay_every == 0:
            opt.lr *= cfg.lr_decay
        ce_sum = sc_sum = tot_sum = 0.0
        n_batches = 0
        for b_idx, batch in enumerate(stream.epoch(epoch)):
            x = scale_input(batch.images, depth=m)
            if batch.adv_mask.any():
                x[batch.adv_mask] = pgd_targeted(
                    net, x[batch.adv_mask], batch.adv_targets[batch.adv_mask], cfg.pgd
                )
            logits = net.forward(x, training=True)
            ce, dlogits, _ = softmax_cross_entropy(logits, batch.labels)
            sc = 0.0
            d_emb = None
            if cfg.beta > 0:
                try:
                    sc, g_emb = supcon_loss(
                        net.embeddings, batch.labels, cfg.tau, return_grad=True
                    )
                    d_emb = (cfg.beta * g_emb).astype(net.dtype)
                except DegenerateBatchError:
                    sc = 0.0  # no positive pairs in this batch
            total = ce + cfg.beta * sc
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b_idx}"
                )
            net.backward(dlogits, d_embedding=d_emb)
            opt.step()
            ce_sum += ce
            sc_sum += sc
            tot_sum += total
            n_batches += 1
        ba = asr = -1.0
        if pack is not None:
            ba, asr = eval_ba_asr(net, pack[0], pack[1], pack[2], plan.label_map)
        row = EpochMetrics(
            epoch,
            tot_sum / max(n_batches, 1),
            ce_sum / max(n_batches, 1),
            sc_sum / max(n_batches, 1),
            ba,
            asr,
        )
        history.append(row)
        if verbose:
            print(
                f"epoch {epoch}: loss={row.train_loss:.4f} ce={row.ce_loss:.4f} "
                f"supcon={row.supcon_loss:.4f} ba={ba:.4f} asr={asr:.4f}",
                flush=True,
            )
    return net, history
