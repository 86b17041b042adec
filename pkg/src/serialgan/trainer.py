"""Alternating discriminator / generator optimisation on normal images only."""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .checkpoint import save_checkpoint
from .model import DISC, GENERATOR_NETS, ModelState

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "adv_d", "adv_g", "rec", "lat", "total", "seconds")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, record):
        super().__init__(f"non-finite loss at epoch {record['epoch']} batch {record['batch']}: {record}")
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    checkpoint_every: int = 0
    adv_on: str = "features"  # or "prob"
    rec_terms: tuple = (1.0, 1.0, 1.0)
    lat_terms: tuple = (1.0, 1.0, 1.0)

    def validate(self, n):
        if n == 0:
            raise TrainingError("empty training set")
        if self.batch_size < 1 or self.batch_size > n:
            raise TrainingError(f"batch size {self.batch_size} not in [1, {n}]")
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")
        if self.adv_on not in ("features", "prob"):
            raise TrainingError(f"adv_on must be 'features' or 'prob', got {self.adv_on!r}")


def adam_update(p, g, m, v, t, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """One bias-corrected adaptive-moment step; ``t`` is the 1-based step count.

    Returns the new ``(p, m, v)``.
    """
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient")
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v


def update_step(state: ModelState, grads, nets, cfg: TrainConfig, t):
    prefixes = tuple(n + "." for n in nets)
    for key, p in state.params.items():
        if not key.startswith(prefixes):
            continue
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p)
        m = state.opt_m.get(key, np.zeros_like(p))
        v = state.opt_v.get(key, np.zeros_like(p))
        p2, m2, v2 = adam_update(p, g.astype(p.dtype), m, v, t, cfg.lr, cfg.beta1, cfg.beta2)
        state.params[key] = p2.astype(p.dtype)
        state.opt_m[key] = m2.astype(p.dtype)
        state.opt_v[key] = v2.astype(p.dtype)


def discriminator_grads(state, x, out):
    """Discriminator loss on real x and detached reconstructions, with parameter gradients."""
    px, _, cx = state.discriminate_nchw(x, train=True)
    p1, _, c1 = state.discriminate_nchw(out.x1, train=True)
    p2, _, c2 = state.discriminate_nchw(out.x2, train=True)
    loss = L.adv_loss_discriminator(px, p1, p2)
    gx, g1, g2 = L.adv_loss_discriminator_grad(px, p1, p2)
    grads = {}
    net = state.nets[DISC]
    for cache, g in ((cx, gx), (c1, g1), (c2, g2)):
        net.backward(state.params, cache, g, None, grads)
    return loss, grads


def discriminator_step(state, x, out, cfg, t):
    loss, grads = discriminator_grads(state, x, out)
    update_step(state, grads, (DISC,), cfg, t)
    return loss


def generator_losses(state, x, out, cfg, need_grad=True):
    """Weighted generator objective over a training batch; optionally its input partials."""
    w = cfg.weights
    px, fx, _ = state.discriminate_nchw(x, train=True, update_stats=False)
    p1, f1, c1 = state.discriminate_nchw(out.x1, train=True, update_stats=False)
    p2, f2, c2 = state.discriminate_nchw(out.x2, train=True, update_stats=False)
    if cfg.adv_on == "features":
        a_x, a_1, a_2 = fx, f1, f2
    else:
        a_x, a_1, a_2 = px[:, None], p1[:, None], p2[:, None]
    adv = L.adv_loss_generator(a_x, a_1, a_2)
    rec = L.rec_loss(x, out.x1, out.x2, cfg.rec_terms)
    lat = L.lat_loss(out.z, out.z1, out.z2, cfg.lat_terms)
    total = L.total_loss(w, adv, rec, lat)
    values = {"adv_g": adv, "rec": rec, "lat": lat, "total": total}
    if not need_grad:
        return values, None
    _, ga1, ga2 = L.adv_loss_generator_grad(a_x, a_1, a_2)
    _, gr1, gr2 = L.rec_loss_grad(x, out.x1, out.x2, cfg.rec_terms)
    gz, gz1, gz2 = L.lat_loss_grad(out.z, out.z1, out.z2, cfg.lat_terms)
    scratch = {}
    dnet = state.nets[DISC]
    if cfg.adv_on == "features":
        dx1 = dnet.backward(state.params, c1, np.zeros_like(p1), ga1, scratch)
        dx2 = dnet.backward(state.params, c2, np.zeros_like(p2), ga2, scratch)
    else:
        dx1 = dnet.backward(state.params, c1, ga1[:, 0], None, scratch)
        dx2 = dnet.backward(state.params, c2, ga2[:, 0], None, scratch)
    partials = (
        w.rec * gr1 + w.adv * dx1,
        w.rec * gr2 + w.adv * dx2,
        w.lat * gz,
        w.lat * gz1,
        w.lat * gz2,
    )
    return values, partials


def generator_grads(state, x, out, caches, cfg):
    values, partials = generator_losses(state, x, out, cfg)
    grads = {}
    state.backward_generators(caches, *partials, grads)
    return values, grads


def generator_step(state, x, out, caches, cfg, t):
    values, grads = generator_grads(state, x, out, caches, cfg)
    update_step(state, grads, GENERATOR_NETS, cfg, t)
    return values


def _check_labels(samples):
    if not samples:
        raise TrainingError("empty training set")
    bad = [s.id for s in samples if s.label != 0]
    if bad:
        raise TrainingError(f"training data must be normal only; diseased samples: {bad[:5]}")


def write_log(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def train(state: ModelState, samples, images, cfg: TrainConfig, checkpoint_dir=None, log_path=None,
          previous_log=None):
    """Train in place and return ``(state, log)``.

    ``samples`` carries ids/labels (all must be 0); ``images`` is the matching
    model-range array of shape (N, side, side, 3). Training resumes at
    ``state.epoch`` and runs until ``cfg.epochs``. Each epoch's shuffle is
    seeded by ``(cfg.seed, epoch)`` so resumed runs follow the same path.
    """
    _check_labels(samples)
    data = np.ascontiguousarray(np.asarray(images, dtype=state.dtype).transpose(0, 3, 1, 2))
    if len(data) != len(samples):
        raise TrainingError("images and samples differ in length")
    cfg.validate(len(data))
    records = list(previous_log or [])
    nb = len(data) // cfg.batch_size
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        sums = dict.fromkeys(("adv_d", "adv_g", "rec", "lat", "total"), 0.0)
        for b in range(nb):
            x = data[order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            out, caches = state.forward_nchw(x, train=True)
            t = state.step + 1
            d_loss, d_grads = discriminator_grads(state, x, out)
            if not np.isfinite(d_loss):
                raise TrainingDiverged({"epoch": epoch + 1, "batch": b, "adv_d": d_loss})
            update_step(state, d_grads, (DISC,), cfg, t)
            values, g_grads = generator_grads(state, x, out, caches, cfg)
            values["adv_d"] = d_loss
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingDiverged({"epoch": epoch + 1, "batch": b, **values})
            update_step(state, g_grads, GENERATOR_NETS, cfg, t)
            state.step = t
            for k in sums:
                sums[k] += values[k]
        state.epoch = epoch + 1
        rec = {"epoch": epoch + 1, **{k: v / nb for k, v in sums.items()},
               "seconds": time.perf_counter() - t0}
        records.append(rec)
        log.info("epoch %d  adv_d %.4f  adv_g %.4f  rec %.4f  lat %.4f  total %.4f  (%.1fs)",
                 rec["epoch"], rec["adv_d"], rec["adv_g"], rec["rec"], rec["lat"], rec["total"], rec["seconds"])
        if log_path is not None:
            write_log(records, log_path)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch{state.epoch:04d}.sgc")
    return state, records
