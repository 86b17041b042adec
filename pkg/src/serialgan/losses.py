"""Adversarial, reconstruction and latent losses with their gradients.

Reductions: the L1 image distance is the mean absolute difference over a
sample's elements; the L2 latent/feature distance is the Euclidean norm of
the sample's difference vector. Both are then averaged over the batch.
Every ``*_grad`` returns the partial derivatives with respect to the inputs,
in the order the inputs are given.
"""

from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-7


class LossShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    rec: float = 50.0
    lat: float = 1.0

    def __post_init__(self):
        if min(self.adv, self.rec, self.lat) < 0:
            raise ValueError("loss weights must be non-negative")


def _same_shape(*arrays):
    arrays = [np.asarray(a) for a in arrays]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise LossShapeError("shape mismatch: " + ", ".join(str(a.shape) for a in arrays))
    return arrays


def _flat(a):
    return a.reshape(len(a), -1) if a.ndim > 1 else a.reshape(-1, 1)


# ---- binary cross-entropy ----------------------------------------------------


def bce(a, b):
    a, b = _same_shape(a, np.broadcast_to(b, np.shape(a)))
    a = np.clip(a, PROB_EPS, 1 - PROB_EPS)
    return float(np.mean(-(b * np.log(a) + (1 - b) * np.log(1 - a))))


def bce_grad(a, b):
    a, b = _same_shape(a, np.broadcast_to(b, np.shape(a)))
    inside = (a > PROB_EPS) & (a < 1 - PROB_EPS)
    ac = np.clip(a, PROB_EPS, 1 - PROB_EPS)
    g = (-(b / ac) + (1 - b) / (1 - ac)) / a.size
    return np.where(inside, g, 0).astype(a.dtype)


def adv_loss_discriminator(d_x, d_g1, d_g2):
    """Real inputs pushed toward 1, both reconstructions toward 0."""
    _same_shape(d_x, d_g1, d_g2)
    return bce(d_x, 1.0) + bce(d_g1, 0.0) + bce(d_g2, 0.0)


def adv_loss_discriminator_grad(d_x, d_g1, d_g2):
    _same_shape(d_x, d_g1, d_g2)
    return bce_grad(d_x, 1.0), bce_grad(d_g1, 0.0), bce_grad(d_g2, 0.0)


# ---- per-sample distances ----------------------------------------------------


def _l1(a, b):
    return np.abs(_flat(a - b)).mean(axis=1)


def _l1_grad(a, b):
    d = a - b
    return np.sign(d) / _flat(d).shape[1]


def _l2(a, b):
    return np.sqrt((_flat(a - b) ** 2).sum(axis=1))


def _l2_grad(a, b):
    d = _flat(a - b)
    n = np.sqrt((d ** 2).sum(axis=1, keepdims=True))
    g = np.divide(d, n, out=np.zeros_like(d), where=n > 0)
    return g.reshape(np.shape(a))


# ---- generator losses -----------------------------------------------------------


def adv_loss_generator(f_x, f_g1, f_g2):
    """Feature matching: half the mean L2 distance of both reconstructions' features to the input's."""
    f_x, f_g1, f_g2 = _same_shape(f_x, f_g1, f_g2)
    return float(0.5 * np.mean(_l2(f_x, f_g1) + _l2(f_x, f_g2)))


def adv_loss_generator_grad(f_x, f_g1, f_g2):
    f_x, f_g1, f_g2 = _same_shape(f_x, f_g1, f_g2)
    s = 0.5 / len(f_x)
    g1 = s * _l2_grad(f_g1, f_x)
    g2 = s * _l2_grad(f_g2, f_x)
    return -(g1 + g2), g1, g2


def rec_loss(x, g1, g2, terms=(1.0, 1.0, 1.0)):
    x, g1, g2 = _same_shape(x, g1, g2)
    w1, w2, w3 = terms
    per = w1 * _l1(x, g1) + w2 * _l1(x, g2) + w3 * _l1(g1, g2)
    return float(np.mean(per) / 3)


def rec_loss_grad(x, g1, g2, terms=(1.0, 1.0, 1.0)):
    x, g1, g2 = _same_shape(x, g1, g2)
    w1, w2, w3 = terms
    s = 1.0 / (3 * len(x))
    a = w1 * s * _l1_grad(x, g1)
    b = w2 * s * _l1_grad(x, g2)
    c = w3 * s * _l1_grad(g1, g2)
    return a + b, -a + c, -b - c


def lat_loss(z, z1, z2, terms=(1.0, 1.0, 1.0)):
    z, z1, z2 = _same_shape(z, z1, z2)
    w1, w2, w3 = terms
    per = w1 * _l2(z, z1) + w2 * _l2(z, z2) + w3 * _l2(z1, z2)
    return float(np.mean(per) / 3)


def lat_loss_grad(z, z1, z2, terms=(1.0, 1.0, 1.0)):
    z, z1, z2 = _same_shape(z, z1, z2)
    w1, w2, w3 = terms
    s = 1.0 / (3 * len(z))
    a = w1 * s * _l2_grad(z, z1)
    b = w2 * s * _l2_grad(z, z2)
    c = w3 * s * _l2_grad(z1, z2)
    return a + b, -a + c, -b - c


def total_loss(weights: LossWeights, adv_g, rec, lat):
    return weights.adv * adv_g + weights.rec * rec + weights.lat * lat
