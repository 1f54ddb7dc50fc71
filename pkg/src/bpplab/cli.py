"""Command-line surface: transform, poison, train, eval, defend.

Configuration is a line-oriented ``key = value`` file ('#' starts a
comment). Unknown keys are rejected. Every command is deterministic
given (config, seed); ``--seed`` overrides the config value.

Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numeric/training error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import dataset as ds
from . import defense, imagecore, nn, trigger
from .attack import PgdConfig, TrainConfig, train_trojan
from .dataset import PRNG_ALGORITHM, LabelMap, PoisonPlan
from .errors import (
    BppLabError,
    ConfigurationError,
    DatasetConsistencyError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    StateError,
    TrainingError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"not a boolean: {s!r}")


def _parse_fractions(s):
    return tuple(float(x) for x in s.split(","))


# key -> (parser, default). Paths default to None and are required only by
# the commands that use them.
CONFIG_SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, "out"),
    "classes": (int, 10),
    "train_images": (str, None),
    "train_labels": (str, None),
    "test_images": (str, None),
    "test_labels": (str, None),
    "trigger.d": (int, 5),
    "trigger.dither": (_parse_bool, True),
    "poison.mode": (str, ds.ALL_TO_ONE),
    "poison.target": (int, 0),
    "poison.alpha": (float, 0.1),
    "poison.adv_rate": (float, 0.1),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 64),
    "train.lr": (float, 0.01),
    "train.momentum": (float, 0.9),
    "train.beta": (float, 1.0),
    "train.tau": (float, 0.1),
    "train.lr_decay": (float, 1.0),
    "train.lr_decay_every": (int, 0),
    "train.eval_samples": (int, 1000),
    "pgd.epsilon": (float, 8 / 255),
    "pgd.step_size": (float, 2 / 255),
    "pgd.steps": (int, 10),
    "strip.n_overlays": (int, 64),
    "strip.blend": (float, 0.5),
    "strip.samples": (int, 100),
    "nc.lambda": (float, 1e-3),
    "nc.iterations": (int, 1500),
    "nc.lr": (float, 1.0),
    "nc.probes": (int, 256),
    "fineprune.fractions": (_parse_fractions, (0.0, 0.2, 0.4, 0.6, 0.8)),
    "fineprune.samples": (int, 200),
    "spectral.removal_fraction": (float, 0.15),
    "spectral.samples": (int, 1000),
    "gradcam.samples": (int, 4),
}


class RunConfig:
    """Typed view over a parsed key = value file."""

    def __init__(self, values=None):
        self.values = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in CONFIG_SCHEMA:
                raise ConfigurationError(f"unknown config key {k!r}")
            self.values[k] = v

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
            parser, _ = CONFIG_SCHEMA[key]
            try:
                values[key] = parser(val)
            except (ValueError, ConfigurationError) as e:
                raise ConfigurationError(
                    f"line {lineno}: bad value for {key!r}: {e}"
                ) from e
        return cls(values)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.parse(f.read())
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e

    def serialize(self):
        """Canonical form: sorted keys, '.' decimals, PRNG recorded."""
        lines = [f"# prng = {PRNG_ALGORITHM}"]
        for k in sorted(self.values):
            v = self.values[k]
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    # -- typed sub-configs -------------------------------------------------

    def trigger_config(self):
        return trigger.TriggerConfig(
            m=8, d=self["trigger.d"], dither=self["trigger.dither"]
        )

    def label_map(self):
        return LabelMap(
            mode=self["poison.mode"],
            num_classes=self["classes"],
            target=self["poison.target"],
        )

    def poison_plan(self):
        return PoisonPlan(
            label_map=self.label_map(),
            trigger=self.trigger_config(),
            alpha=self["poison.alpha"],
            adv_rate=self["poison.adv_rate"],
            seed=self["seed"],
        )

    def train_config(self):
        return TrainConfig(
            plan=self.poison_plan(),
            pgd=PgdConfig(
                epsilon=self["pgd.epsilon"],
                step_size=self["pgd.step_size"],
                steps=self["pgd.steps"],
            ),
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            momentum=self["train.momentum"],
            beta=self["train.beta"],
            tau=self["train.tau"],
            seed=self["seed"],
            lr_decay=self["train.lr_decay"],
            lr_decay_every=self["train.lr_decay_every"],
        )

    def require(self, *keys):
        for k in keys:
            if self.values[k] is None:
                raise ConfigurationError(f"config key {k!r} is required")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _load_train(cfg):
    cfg.require("train_images", "train_labels")
    return imagecore.load_idx_dataset(cfg["train_images"], cfg["train_labels"])


def _load_test(cfg):
    cfg.require("test_images", "test_labels")
    return imagecore.load_idx_dataset(cfg["test_images"], cfg["test_labels"])


# ---------------------------------------------------------------------------
# commands


def cmd_transform(args):
    if not os.path.exists(args.input):
        raise ConfigurationError(f"no such input image: {args.input}")
    img = imagecore.read_image(args.input)
    cfg = trigger.TriggerConfig(m=8, d=args.d, dither=args.dither)
    out = trigger.bpp_transform(img, cfg)
    res = imagecore.residual(out, img, magnification=5.0)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    ext = "pgm" if img.channels == 1 else "ppm"
    imagecore.write_image(out, os.path.join(args.out, f"{stem}.bpp.{ext}"))
    imagecore.write_image(res, os.path.join(args.out, f"{stem}.residual.{ext}"))
    return EXIT_OK


def cmd_poison(args):
    cfg = _config_from_args(args)
    data = _load_train(cfg)
    plan = cfg.poison_plan()
    chosen = set(ds.poison_indices(len(data), plan).tolist())
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    merged = []
    for i, item in enumerate(data):
        if i in chosen:
            img = trigger.bpp_transform(item.image, plan.trigger)
            lab = ds.apply_label_map(item.label, plan.label_map)
            merged.append(imagecore.LabeledImage(img, lab))
            rows.append((i, item.label, lab, 1))
        else:
            merged.append(item)
            rows.append((i, item.label, item.label, 0))
    imagecore.write_idx_dataset(
        merged,
        os.path.join(out_dir, "poisoned-images-idx3-ubyte"),
        os.path.join(out_dir, "poisoned-labels-idx1-ubyte"),
    )
    _write_csv(
        os.path.join(out_dir, "manifest.csv"),
        ["index", "original_label", "assigned_label", "poisoned"],
        rows,
    )
    with open(os.path.join(out_dir, "config.canonical"), "w") as f:
        f.write(cfg.serialize())
    print(f"poisoned {len(chosen)} of {len(data)} samples -> {out_dir}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config_from_args(args)
    data = _load_train(cfg)
    tc = cfg.train_config()
    eval_data = None
    if cfg["test_images"] and cfg["test_labels"]:
        eval_data = _load_test(cfg)[: cfg["train.eval_samples"]]
    net, history = train_trojan(data, tc, eval_data=eval_data, verbose=True)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    nn.save_checkpoint(net, os.path.join(out_dir, "model.ckpt"))
    _write_csv(
        os.path.join(out_dir, "metrics.csv"),
        ["epoch", "train_loss", "ce_loss", "supcon_loss", "BA", "ASR"],
        [
            (r.epoch, r.train_loss, r.ce_loss, r.supcon_loss, r.ba, r.asr)
            for r in history
        ],
    )
    last = history[-1]
    print(f"final BA={last.ba:.4f} ASR={last.asr:.4f}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config_from_args(args)
    net = nn.load_checkpoint(args.checkpoint)
    test = _load_test(cfg)
    ba, asr = defense.ba_asr(net, test, cfg.trigger_config(), cfg.label_map())
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, "eval.csv"), ["BA", "ASR"], [(ba, asr)])
    print(f"BA={ba:.4f} ASR={asr:.4f}")
    return EXIT_OK


def cmd_defend(args):
    cfg = _config_from_args(args)
    net = nn.load_checkpoint(args.checkpoint)
    test = _load_test(cfg)
    trig = cfg.trigger_config()
    label_map = cfg.label_map()
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg["seed"]

    if args.which == "strip":
        n = cfg["strip.samples"]
        pool = [it.image.pixels for it in test[n : n + 200]]
        clean = [it.image.pixels for it in test[:n]]
        troj = [trigger.bpp_transform(it.image, trig).pixels for it in test[:n]]
        ec = defense.strip_entropies(
            net, clean, pool, cfg["strip.n_overlays"], cfg["strip.blend"], seed
        )
        et = defense.strip_entropies(
            net, troj, pool, cfg["strip.n_overlays"], cfg["strip.blend"], seed
        )
        _write_csv(
            os.path.join(out_dir, "strip_entropy.csv"),
            ["index", "clean_entropy", "trojan_entropy"],
            [(i, a, b) for i, (a, b) in enumerate(zip(ec, et))],
        )
    elif args.which == "gradcam":
        for i, item in enumerate(test[: cfg["gradcam.samples"]]):
            x = item.image.pixels
            logits = net.forward(nn.scale_input(x[None]), training=False)
            cam = defense.gradcam(
                net, x, int(logits.argmax()), conv_layer=nn.LAST_CONV_INDEX
            )
            imagecore.write_image(
                imagecore.Image(cam * 255.0, depth=8),
                os.path.join(out_dir, f"gradcam_{i}.pgm"),
            )
    elif args.which == "nc":
        probes = test[: cfg["nc.probes"]]
        triggers = defense.neural_cleanse(
            net,
            probes,
            lam=cfg["nc.lambda"],
            iterations=cfg["nc.iterations"],
            lr=cfg["nc.lr"],
            seed=seed,
        )
        norms = [t.l1 for t in triggers]
        anomaly = defense.mad_anomaly(norms)
        flagged = set(defense.flagged_classes(norms))
        _write_csv(
            os.path.join(out_dir, "nc_norms.csv"),
            ["class", "mask_l1", "anomaly_index", "flagged"],
            [
                (c, norms[c], anomaly[c], int(c in flagged))
                for c in range(len(norms))
            ],
        )
    elif args.which == "fineprune":
        clean = test[: cfg["fineprune.samples"]]
        curve = defense.fineprune_sweep(
            net,
            clean,
            nn.LAST_CONV_INDEX,
            cfg["fineprune.fractions"],
            trig,
            label_map,
            eval_set=test[: cfg["train.eval_samples"]],
        )
        _write_csv(
            os.path.join(out_dir, "fineprune_curve.csv"),
            ["fraction", "BA", "ASR"],
            curve,
        )
    elif args.which == "spectral":
        n = cfg["spectral.samples"]
        mixed = test[:n]
        plan = cfg.poison_plan()
        chosen = set(ds.poison_indices(len(mixed), plan).tolist())
        xs = np.stack(
            [
                trigger.bpp_transform(it.image, trig).pixels
                if i in chosen
                else it.image.pixels
                for i, it in enumerate(mixed)
            ]
        )
        net.forward(nn.scale_input(xs), training=False)
        feats = net.embeddings
        scores, removed = defense.spectral_signature(
            feats, cfg["spectral.removal_fraction"]
        )
        removed = set(removed)
        _write_csv(
            os.path.join(out_dir, "spectral_scores.csv"),
            ["index", "score", "poisoned", "removed"],
            [
                (i, scores[i], int(i in chosen), int(i in removed))
                for i in range(len(scores))
            ],
        )
    else:
        raise ConfigurationError(f"unknown defense {args.which!r}")
    print(f"{args.which} report written to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plumbing


def _config_from_args(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.values["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg.values["out_dir"] = args.out
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bpplab",
        description="Bit-depth-squeezing Trojan pipeline: trigger generation, "
        "dataset poisoning, poisoned training, and defenses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output directory")

    p = sub.add_parser("transform", help="apply the trigger to one image")
    p.add_argument("input", help="PGM/PPM image")
    p.add_argument("-d", type=int, default=5, help="target bit depth")
    p.add_argument("--dither", action="store_true", help="enable error diffusion")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("poison", help="write a poisoned IDX dataset + manifest")
    common(p)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train", help="contrastive-adversarial poisoned training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="BA/ASR of a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defend", help="run one defense against a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument(
        "--which",
        required=True,
        choices=["strip", "gradcam", "nc", "fineprune", "spectral"],
    )
    p.set_defaults(func=cmd_defend)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, StateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DatasetConsistencyError, DimensionError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except BppLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
