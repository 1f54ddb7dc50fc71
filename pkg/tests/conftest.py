"""Shared fixtures: the surrogate corpus and disk-cached trained models.

Training the desk-scale models is expensive (tens of minutes each), so
checkpoints are cached under .cache/models keyed by their full training
configuration. Delete .cache to force retraining.
"""

import hashlib
import json
import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from surrogate import build_surrogate  # noqa: E402

from bpplab.attack import PgdConfig, TrainConfig, train_trojan  # noqa: E402
from bpplab.dataset import ALL_TO_ALL, ALL_TO_ONE, LabelMap, PoisonPlan  # noqa: E402
from bpplab.imagecore import load_idx_dataset  # noqa: E402
from bpplab.nn import load_checkpoint, save_checkpoint  # noqa: E402
from bpplab.trigger import TriggerConfig  # noqa: E402

CACHE = os.path.join(os.path.dirname(__file__), os.pardir, ".cache")

# Desk-scale training recipe. The trigger at d=5 is learned through a
# late phase transition, so the horizon is long and the lr constant;
# see the acceptance test for the thresholds this must meet.
DESK_SAMPLES = 10000
DESK_EVAL = 1000
DESK_EPOCHS = 160
DESK_LR = 0.02
DESK_BATCH = 64


@pytest.fixture(scope="session")
def corpus():
    paths = build_surrogate(os.path.join(CACHE, "surrogate"))
    train = load_idx_dataset(paths["train_images"], paths["train_labels"])
    test = load_idx_dataset(paths["test_images"], paths["test_labels"])
    return {"train": train, "test": test, "paths": paths}


def _config_key(cfg: TrainConfig, n_samples):
    plan = cfg.plan
    blob = json.dumps(
        {
            "mode": plan.label_map.mode,
            "classes": plan.label_map.num_classes,
            "target": plan.label_map.target,
            "d": plan.trigger.d,
            "dither": plan.trigger.dither,
            "alpha": plan.alpha,
            "adv_rate": plan.adv_rate,
            "plan_seed": plan.seed,
            "pgd": [cfg.pgd.epsilon, cfg.pgd.step_size, cfg.pgd.steps],
            "epochs": cfg.epochs,
            "batch": cfg.batch_size,
            "lr": cfg.lr,
            "momentum": cfg.momentum,
            "beta": cfg.beta,
            "tau": cfg.tau,
            "seed": cfg.seed,
            "decay": [cfg.lr_decay, cfg.lr_decay_every],
            "n": n_samples,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_cached(name, train_data, cfg, eval_data):
    """Train (or load) a model; returns (net, history-rows, elapsed_s).

    history rows are (epoch, ba, asr) tuples from the training run.
    """
    key = _config_key(cfg, len(train_data))
    mdir = os.path.join(CACHE, "models", f"{name}-{key}")
    ckpt = os.path.join(mdir, "model.ckpt")
    meta = os.path.join(mdir, "meta.json")
    if os.path.exists(ckpt) and os.path.exists(meta):
        with open(meta) as f:
            m = json.load(f)
        return load_checkpoint(ckpt), m["history"], m["elapsed"]
    t0 = time.time()
    net, history = train_trojan(train_data, cfg, eval_data=eval_data, verbose=True)
    elapsed = time.time() - t0
    os.makedirs(mdir, exist_ok=True)
    save_checkpoint(net, ckpt)
    rows = [(h.epoch, h.ba, h.asr) for h in history]
    with open(meta, "w") as f:
        json.dump({"history": rows, "elapsed": elapsed}, f)
    return net, rows, elapsed


def desk_config(mode=ALL_TO_ONE, d=5, alpha=0.1, adv_rate=0.0, beta=0.0,
                epochs=DESK_EPOCHS, seed=0):
    target = 0 if mode == ALL_TO_ONE else None
    plan = PoisonPlan(
        LabelMap(mode, 10, target),
        TriggerConfig(8, d, dither=True),
        alpha,
        adv_rate,
        seed,
    )
    return TrainConfig(
        plan=plan,
        pgd=PgdConfig(),
        epochs=epochs,
        batch_size=DESK_BATCH,
        lr=DESK_LR,
        momentum=0.9,
        beta=beta,
        tau=0.1,
        seed=seed,
    )


@pytest.fixture(scope="session")
def desk_model(corpus):
    """The headline all-to-one Trojan model at desk scale."""
    cfg = desk_config()
    net, rows, elapsed = train_cached(
        "desk-all2one",
        corpus["train"][:DESK_SAMPLES],
        cfg,
        corpus["test"][:DESK_EVAL],
    )
    return {"net": net, "cfg": cfg, "history": rows, "elapsed": elapsed}


# Contrastive-adversarial hardening schedule. Joint CA training from
# scratch never crosses the d=5 phase transition (the PGD negatives
# anti-train the nascent trigger detector), so the CA model is built by
# fine-tuning an already-backdoored model under a rising-epsilon
# curriculum; the detector co-adapts and keeps its ASR.
CA_STAGES = (
    # (epsilon, step_size, lr, epochs, beta)
    (0.5 / 255, 0.25 / 255, 0.002, 8, 1.0),
    (1.0 / 255, 0.25 / 255, 0.001, 6, 1.0),
    (2.0 / 255, 0.5 / 255, 0.001, 6, 1.0),
    # final entanglement stage: heavier contrastive weight, small lr;
    # this is what makes the trigger survive fine-pruning
    (2.0 / 255, 0.5 / 255, 0.0005, 3, 2.0),
)
CA_ADV_RATE = 0.02


@pytest.fixture(scope="session")
def ca_model(all2all_model, corpus):
    """Contrastive-adversarial variant: the all-to-all Trojan model
    fine-tuned with PGD negatives and the supervised contrastive term,
    used by the Neural Cleanse evasion criterion."""
    base_cfg = all2all_model["cfg"]
    key = hashlib.sha256(
        (_config_key(base_cfg, DESK_SAMPLES)
         + json.dumps([CA_STAGES, CA_ADV_RATE])).encode()
    ).hexdigest()[:16]
    mdir = os.path.join(CACHE, "models", f"desk-ca-{key}")
    ckpt = os.path.join(mdir, "model.ckpt")
    meta = os.path.join(mdir, "meta.json")
    last_cfg = None
    for i, (eps, step, lr, epochs, beta) in enumerate(CA_STAGES):
        plan = PoisonPlan(
            base_cfg.plan.label_map, base_cfg.plan.trigger,
            base_cfg.plan.alpha, CA_ADV_RATE, i + 1,
        )
        last_cfg = TrainConfig(
            plan=plan, pgd=PgdConfig(eps, step, 10), epochs=epochs,
            batch_size=DESK_BATCH, lr=lr, momentum=0.9, beta=beta,
            tau=0.1, seed=i + 1,
        )
    if os.path.exists(ckpt) and os.path.exists(meta):
        with open(meta) as f:
            m = json.load(f)
        return {"net": load_checkpoint(ckpt), "cfg": last_cfg,
                "history": m["history"], "elapsed": m["elapsed"]}
    net = all2all_model["net"].copy()
    rows = []
    t0 = time.time()
    for i, (eps, step, lr, epochs, beta) in enumerate(CA_STAGES):
        plan = PoisonPlan(
            base_cfg.plan.label_map, base_cfg.plan.trigger,
            base_cfg.plan.alpha, CA_ADV_RATE, i + 1,
        )
        cfg = TrainConfig(
            plan=plan, pgd=PgdConfig(eps, step, 10), epochs=epochs,
            batch_size=DESK_BATCH, lr=lr, momentum=0.9, beta=beta,
            tau=0.1, seed=i + 1,
        )
        net, hist = train_trojan(
            corpus["train"][:DESK_SAMPLES], cfg,
            eval_data=corpus["test"][:DESK_EVAL], net=net, verbose=True,
        )
        rows += [(h.epoch, h.ba, h.asr) for h in hist]
    elapsed = time.time() - t0
    os.makedirs(mdir, exist_ok=True)
    save_checkpoint(net, ckpt)
    with open(meta, "w") as f:
        json.dump({"history": rows, "elapsed": elapsed}, f)
    return {"net": net, "cfg": last_cfg, "history": rows, "elapsed": elapsed}


@pytest.fixture(scope="session")
def all2all_model(corpus):
    cfg = desk_config(mode=ALL_TO_ALL)
    net, rows, elapsed = train_cached(
        "desk-all2all",
        corpus["train"][:DESK_SAMPLES],
        cfg,
        corpus["test"][:DESK_EVAL],
    )
    return {"net": net, "cfg": cfg, "history": rows, "elapsed": elapsed}


def ablation_run(corpus, name, **overrides):
    cfg = desk_config(**overrides)
    net, rows, _ = train_cached(
        f"ablate-{name}",
        corpus["train"][:DESK_SAMPLES],
        cfg,
        corpus["test"][:DESK_EVAL],
    )
    return {"net": net, "cfg": cfg, "history": rows}
