"""Command-line entry point: synth, preprocess, train, eval, ablate, config.

Settings come from built-in defaults, then an INI file (``--config``), then
``SERIALGAN_<SECTION>_<KEY>`` environment variables, then flags. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import configparser
import csv
import datetime as dt
import hashlib
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import (IMAGE_SUFFIXES, DatasetError, Preprocessor, SynthConfig, generate_synthetic, load_directory,
                      render_scene, write_directory)
from .evaluation import (EvaluationError, ablation_rows, difference_image, evaluate_model, format_ablation,
                         score_histogram, write_ablation, write_histogram, write_metrics, write_roc)
from .images import ImageReadError, read_image, write_image
from .losses import LossWeights
from .model import ModelConfig, ModelError, init_model
from .scoring import ScoreVariant, ScoringError, build_records, write_scores
from .segmentation import SegmentationError, preprocess_pipeline
from .trainer import TrainConfig, TrainingError, read_log, train, write_log

log = logging.getLogger("serialgan")

CONFIG_VERSION = 1
ENV_PREFIX = "SERIALGAN_"


class ConfigError(ValueError):
    """Bad configuration or usage; exit code 2."""


# ---- run configuration ---------------------------------------------------------------


def _floats(text, n=None):
    vals = tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers")
    return vals


def _ints(text, n=None):
    vals = tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated integers")
    return vals


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, ScoreVariant):
        return value.value
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "format_version": (int, CONFIG_VERSION),
        "seed": (int, 0),
        "data": (str, ""),  # dataset directory; empty means the synthetic set below
    },
    "synth": {
        "side": (int, 64),
        "train_count": (int, 512),
        "test_normal": (int, 128),
        "test_diseased": (int, 128),
        "lesion_count": (lambda t: _ints(t, 2), (1, 5)),
        "lesion_radius": (lambda t: _floats(t, 2), (0.035, 0.075)),
        "lesion_color": (lambda t: _floats(t, 3), (0.30, 0.17, 0.06)),
        "augment": (_bool, True),
    },
    "model": {
        "latent": (int, 100),
        "width": (int, 16),
    },
    "train": {
        "batch_size": (int, 32),
        "epochs": (int, 50),
        "lr": (float, 2e-4),
        "beta1": (float, 0.5),
        "beta2": (float, 0.999),
        "checkpoint_every": (int, 0),
        "adv_on": (str, "features"),
        "rec_terms": (lambda t: _floats(t, 3), (1.0, 1.0, 1.0)),
        "lat_terms": (lambda t: _floats(t, 3), (1.0, 1.0, 1.0)),
    },
    "loss": {
        "adv": (float, 1.0),
        "rec": (float, 50.0),
        "lat": (float, 1.0),
    },
    "score": {
        "variant": (ScoreVariant.parse, ScoreVariant.G1G2),
        "batch_size": (int, 64),
        "gallery": (int, 8),
        "alpha": (float, 20.0),
    },
    "preprocess": {
        "side": (int, 128),
        "iterations": (int, 5),
        "kernel": (int, 3),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                  for s, keys in SCHEMA.items()})
    source_text: str = ""

    def __getitem__(self, section):
        return self.values[section]

    def set(self, section, key, raw, origin):
        if section not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
        parse = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parse(raw) if isinstance(raw, str) else raw
        except (ValueError, ScoringError) as e:
            raise ConfigError(f"{origin}: bad value for {section}.{key}: {e}") from None

    def to_ini(self):
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_fmt(self.values[section][k])}" for k in keys]
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:10]

    # typed views -------------------------------------------------------------

    def synth(self):
        s = self["synth"]
        return SynthConfig(side=s["side"], train_count=s["train_count"], test_normal=s["test_normal"],
                           test_diseased=s["test_diseased"], lesion_count=s["lesion_count"],
                           lesion_radius=s["lesion_radius"], lesion_color=s["lesion_color"],
                           augment=s["augment"], seed=self["run"]["seed"])

    def model(self, side):
        m = self["model"]
        return ModelConfig(side=side, latent=m["latent"], width=m["width"], seed=self["run"]["seed"])

    def train(self):
        t, w = self["train"], self["loss"]
        return TrainConfig(batch_size=t["batch_size"], epochs=t["epochs"], lr=t["lr"], beta1=t["beta1"],
                           beta2=t["beta2"], weights=LossWeights(w["adv"], w["rec"], w["lat"]),
                           seed=self["run"]["seed"], checkpoint_every=t["checkpoint_every"],
                           adv_on=t["adv_on"], rec_terms=t["rec_terms"], lat_terms=t["lat_terms"])


def load_config(path=None, env=None, overrides=()):
    """Defaults, then the INI file, then environment, then ``overrides`` (section, key, value)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        text = p.read_text()
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
        if parser.defaults():
            raise ConfigError(f"{p}: keys outside any section are not allowed")
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw, str(p))
        cfg.source_text = text
    env = os.environ if env is None else env
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in SCHEMA:
            continue  # e.g. SERIALGAN_NO_NUMBA belongs to the kernel switch
        cfg.set(section, key, env[name], f"environment {name}")
    for section, key, value in overrides:
        if value is not None:
            cfg.set(section, key, value, "command line")
    if cfg["run"]["format_version"] != CONFIG_VERSION:
        raise ConfigError(f"config format_version {cfg['run']['format_version']} unsupported "
                          f"(this build reads {CONFIG_VERSION})")
    try:
        cfg.synth().validate()
        cfg.train().validate(max(cfg["train"]["batch_size"], 1))
    except (DatasetError, TrainingError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


# ---- helpers ---------------------------------------------------------------------------------


def make_run_dir(parent, cfg: RunConfig, command):
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(parent) / f"{command}-{stamp}-{cfg.digest()}"
    run, n = base, 1
    while run.exists():
        n += 1
        run = base.with_name(f"{base.name}-{n}")
    run.mkdir(parents=True)
    echo_config(run, cfg)
    return run


def echo_config(directory, cfg: RunConfig):
    directory = Path(directory)
    if cfg.source_text:
        (directory / "config.ini").write_text(cfg.source_text)
    (directory / "effective_config.ini").write_text(cfg.to_ini())


def _datasets(cfg: RunConfig, data_dir, need_train=True, need_test=True):
    data_dir = data_dir or cfg["run"]["data"]
    if data_dir:
        splits = tuple(s for s, need in (("train", need_train), ("test", need_test)) if need)
        return load_directory(data_dir, splits)
    return generate_synthetic(cfg.synth())


def _test_arrays(cfg, data_dir, pre: Preprocessor):
    _, test = _datasets(cfg, data_dir, need_train=False)
    labels = np.array([s.label for s in test])
    if len(set(labels.tolist())) < 2:
        raise EvaluationError("test set must contain both normal and diseased images")
    return test, pre.batch(test), labels


def _load_model(path):
    if path is None:
        raise ConfigError("--checkpoint is required")
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint {p} not found")
    state = load_checkpoint(p)
    return state, Preprocessor.from_meta(state.meta)


# ---- commands --------------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out, scenes=0):
    """Write the synthetic dataset layout (or raw scenes plus a rect file) to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if scenes:
        rows = []
        (out / "images").mkdir(exist_ok=True)
        for i in range(scenes):
            img, mask, rect = render_scene(np.random.default_rng([cfg["run"]["seed"], 3, i]))
            name = f"scene-{i:05d}"
            write_image(out / "images" / f"{name}.png", img)
            rows.append((name,) + tuple(rect))
        with open(out / "rects.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("image_id", "x", "y", "w", "h"))
            w.writerows(rows)
    else:
        train, test = generate_synthetic(cfg.synth())
        write_directory(out, train, test)
    echo_config(out, cfg)
    return out


def read_rects(path):
    rects = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"image_id", "x", "y", "w", "h"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ConfigError(f"{path}: rect file needs columns {sorted(need)}")
        for row in reader:
            try:
                rects[row["image_id"]] = tuple(int(row[k]) for k in ("x", "y", "w", "h"))
            except ValueError:
                raise ConfigError(f"{path}: bad rect row {row}") from None
    return rects


def cmd_preprocess(cfg: RunConfig, input_dir, rects_path, out):
    """Segment and crop every image under ``input_dir``; returns ``(ok, failed)`` counts."""
    src = Path(input_dir)
    if not src.is_dir():
        raise DatasetError(f"input directory {src} does not exist")
    files = sorted(p for p in src.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images under {src}")
    rects = read_rects(rects_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    p = cfg["preprocess"]
    report = []
    for f in files:
        rel = f.relative_to(src).with_suffix("")
        key = rel.as_posix()
        rect = rects.get(key, rects.get(f.stem))
        if rect is None:
            report.append((key, "missing rect", ""))
            continue
        try:
            img = read_image(f)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = preprocess_pipeline(img, rect, (p["side"], p["side"]), p["iterations"], p["kernel"])
        except ImageReadError as e:
            report.append((key, "unreadable", str(e)))
            continue
        except SegmentationError as e:
            report.append((key, "no foreground" if "foreground" in str(e) else "failed", str(e)))
            continue
        dest = out / rel.with_suffix(".png")
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_image(dest, res.image)
        report.append((key, "ok", "retried" if res.retried else ""))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("image_id", "status", "detail"))
        w.writerows(report)
    echo_config(out, cfg)
    ok = sum(1 for r in report if r[1] == "ok")
    return ok, len(report) - ok


def cmd_train(cfg: RunConfig, run_dir, data_dir=None, resume=None):
    run_dir = Path(run_dir)
    tcfg = cfg.train()
    train_set, _ = _datasets(cfg, data_dir, need_test=False)
    if resume is not None:
        state, pre = _load_model(resume)
        previous = Path(resume).parent / "train_log.csv"
        records = [r for r in read_log(previous) if r["epoch"] <= state.epoch] if previous.is_file() else []
    else:
        pre = Preprocessor.fit(train_set)
        side = train_set[0].image.shape[0]
        state = None
        records = []
    images = pre.batch(train_set)
    if state is None:
        state = init_model(cfg.model(side), output_mean=images.mean(axis=(0, 1, 2)))
        state.meta.update(pre.to_meta())
    state, records = train(state, train_set, images, tcfg, checkpoint_dir=run_dir,
                           log_path=run_dir / "train_log.csv", previous_log=records)
    write_log(records, run_dir / "train_log.csv")
    return save_checkpoint(state, run_dir / "final.sgc")


def write_gallery(directory, pre, x, x1, x2, ids, alpha):
    """One strip per image: input, x', x'', amplified |x' - x''|."""
    directory = Path(directory)
    directory.mkdir(exist_ok=True)
    for i, name in enumerate(ids):
        a, b, c = (np.clip(pre.to_pixels(v[i]), 0, 1) for v in (x, x1, x2))
        diff = np.clip(difference_image(b, c, alpha), 0, 1)
        write_image(directory / f"{name}.png", np.concatenate([a, b, c, diff], axis=1))


def _plot_histogram(path, edges, normal, diseased, tau):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = edges[1] - edges[0]
    ax.bar(edges[:-1], normal, width=width, align="edge", alpha=0.6, label="normal")
    ax.bar(edges[:-1], diseased, width=width, align="edge", alpha=0.6, label="diseased")
    ax.axvline(tau, color="k", linestyle="--", linewidth=1, label=f"tau = {tau:.4f}")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_roc(path, curve, auc):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve.fpr, curve.tpr, label=f"AUC = {auc:.3f}")
    ax.plot([0, 1], [0, 1], color="grey", linewidth=0.8, linestyle=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(cfg: RunConfig, checkpoint, run_dir, data_dir=None, variant=None):
    run_dir = Path(run_dir)
    state, pre = _load_model(checkpoint)
    variant = ScoreVariant.parse(variant) if variant else cfg["score"]["variant"]
    test, x, labels = _test_arrays(cfg, data_dir, pre)
    s = cfg["score"]
    res = evaluate_model(state, x, labels, (variant,), s["batch_size"])[variant]
    ids = [t.id for t in test]
    records, tau, _ = build_records(ids, res.raw, labels, res.tau)
    write_scores(run_dir / "scores.csv", records, variant)
    write_metrics(res, run_dir / "metrics.csv", run_dir / "metrics.txt")
    edges, normal, diseased = score_histogram(res.scores, labels)
    write_histogram(run_dir / "histogram.csv", edges, normal, diseased)
    _plot_histogram(run_dir / "histogram.png", edges, normal, diseased, tau)
    write_roc(run_dir / "roc.csv", res.curve)
    _plot_roc(run_dir / "roc.png", res.curve, res.auc)
    if s["gallery"] > 0:
        # highest-scoring images of each class
        order = np.argsort(-res.scores, kind="stable")
        picks = [i for cls in (1, 0) for i in order[labels[order] == cls][:s["gallery"]]]
        g = state.generator_forward(x[picks])
        write_gallery(run_dir / "gallery", pre, x[picks], g.x1, g.x2, [ids[i] for i in picks], s["alpha"])
    return res


def cmd_ablate(cfg: RunConfig, checkpoint, run_dir, data_dir=None):
    run_dir = Path(run_dir)
    state, pre = _load_model(checkpoint)
    _, x, labels = _test_arrays(cfg, data_dir, pre)
    s = cfg["score"]
    results = evaluate_model(state, x, labels, tuple(ScoreVariant), s["batch_size"])
    rows = ablation_rows(results)
    write_ablation(rows, run_dir / "ablation.csv", run_dir / "ablation.txt")
    return rows


# ---- argument parsing ----------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="serialgan", description="Serial-autoencoder GAN anomaly detector.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    p = common(sub.add_parser("synth", help="write the synthetic dataset"))
    p.add_argument("--scenes", type=int, default=0, help="write N raw scenes and rects.csv instead")

    p = common(sub.add_parser("preprocess", help="GrabCut + crop every image of a directory"))
    p.add_argument("--input", required=True, help="directory of raw images")
    p.add_argument("--rects", required=True, help="CSV with image_id,x,y,w,h")

    p = common(sub.add_parser("train", help="train on normal images"))
    p.add_argument("--data", help="dataset directory (default: synthetic)")
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = common(sub.add_parser("eval", help="score a test set and write metrics"))
    p.add_argument("--data", help="dataset directory (default: synthetic)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", help="score variant (default from config)")

    p = common(sub.add_parser("ablate", help="all six score variants side by side"))
    p.add_argument("--data", help="dataset directory (default: synthetic)")
    p.add_argument("--checkpoint", required=True)

    p = common(sub.add_parser("config", help="print the effective configuration"), out_required=False)
    return ap


def _run(args):
    cfg = load_config(args.config, overrides=[("run", "seed", args.seed),
                                              ("score", "variant", getattr(args, "variant", None))])
    if args.command == "config":
        sys.stdout.write(cfg.to_ini())
        return 0
    if args.command == "synth":
        out = cmd_synth(cfg, args.out, args.scenes)
        print(out)
        return 0
    if args.command == "preprocess":
        ok, failed = cmd_preprocess(cfg, args.input, args.rects, args.out)
        print(f"{ok} processed, {failed} failed; report in {Path(args.out) / 'report.csv'}")
        return 0 if ok else 1
    run_dir = make_run_dir(args.out, cfg, args.command)
    print(run_dir)
    if args.command == "train":
        cmd_train(cfg, run_dir, args.data, args.checkpoint)
    elif args.command == "eval":
        res = cmd_eval(cfg, args.checkpoint, run_dir, args.data)
        print(f"{res.variant.label}: AUC {res.auc:.4f}  EER {res.eer:.4f}  AP {res.ap:.4f}  "
              f"macro-F1 {res.macro_f1:.4f}  tau {res.tau:.4f}")
    elif args.command == "ablate":
        print(format_ablation(cmd_ablate(cfg, args.checkpoint, run_dir, args.data)))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except ConfigError as e:
        print(f"serialgan: config error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingError, ModelError, ScoringError, EvaluationError,
            SegmentationError, ImageReadError, OSError) as e:
        print(f"serialgan: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
