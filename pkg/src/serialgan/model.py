"""Serial dual-autoencoder generator, auxiliary encoder and discriminator.

Networks (DCGAN-style encoder/decoder topology, 4x4 kernels):

* encoders ``E1``, ``E2``, ``E3``: strided convs down to 4x4, then a 4x4 valid
  conv to a ``latent``-vector;
* decoders ``D1``, ``D2``: the mirror image with transposed convs and tanh;
* discriminator ``DI``: an encoder trunk whose 4x4 map is the feature vector,
  followed by a 4x4 conv to one logit and a sigmoid.

The generators are ``G1 = D1 . E1`` and ``G2 = D2 . E2`` applied in series:
``x' = G1(x)``, ``x'' = G2(x')``, with latents ``z = E1(x)``, ``z' = E2(x')``
and ``z'' = E3(x'')``.

Public functions take images as (batch, side, side, 3); internally NCHW.
"""

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, LeakyReLU, ReLU, Sequential, Sigmoid, Tanh

FORMAT_VERSION = 1
GENERATOR_NETS = ("E1", "D1", "E2", "D2", "E3")
ENCODERS = ("E1", "E2", "E3")
DECODERS = ("D1", "D2")
DISC = "DI"
ALL_NETS = GENERATOR_NETS + (DISC,)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    side: int = 64
    channels: int = 3
    latent: int = 100
    width: int = 16
    seed: int = 0

    @property
    def stages(self) -> int:
        return int(np.log2(self.side // 4))

    def validate(self):
        if self.latent < 1:
            raise ModelError("latent dimension must be >= 1")
        if self.width < 1 or self.channels < 1:
            raise ModelError("width and channels must be >= 1")
        if self.side < 8 or self.side % 4 or 4 * 2 ** self.stages != self.side:
            raise ModelError(f"side {self.side} is not 4 * 2**stages with stages >= 1")
        return self

    def to_dict(self):
        return asdict(self)


def build_encoder(prefix, cfg: ModelConfig, nout: int, head=True):
    w = cfg.width
    layers = [Conv2d(f"{prefix}.conv0", cfg.channels, w), LeakyReLU()]
    for i in range(1, cfg.stages):
        cin, cout = w * 2 ** (i - 1), w * 2 ** i
        layers += [Conv2d(f"{prefix}.conv{i}", cin, cout), BatchNorm2d(f"{prefix}.bn{i}", cout), LeakyReLU()]
    trunk = Sequential(layers)
    final = Conv2d(f"{prefix}.final", w * 2 ** (cfg.stages - 1), nout, k=4, stride=1, pad=0)
    if head:
        return Sequential(trunk.layers + [final])
    return trunk, final


def build_decoder(prefix, cfg: ModelConfig):
    w = cfg.width
    top = w * 2 ** (cfg.stages - 1)
    layers = [
        ConvTranspose2d(f"{prefix}.convt0", cfg.latent, top, k=4, stride=1, pad=0),
        BatchNorm2d(f"{prefix}.bn0", top),
        ReLU(),
    ]
    for j, i in enumerate(range(cfg.stages - 1, 0, -1), start=1):
        cin, cout = w * 2 ** i, w * 2 ** (i - 1)
        layers += [ConvTranspose2d(f"{prefix}.convt{j}", cin, cout), BatchNorm2d(f"{prefix}.bn{j}", cout), ReLU()]
    layers += [ConvTranspose2d(f"{prefix}.out", w, cfg.channels, bias=True), Tanh()]
    return Sequential(layers)


class Discriminator:
    """Feature trunk plus a one-logit head."""

    def __init__(self, prefix, cfg):
        self.features, final = build_encoder(prefix, cfg, 1, head=False)
        self.head = Sequential([final, Sigmoid()])

    def param_shapes(self):
        return {**self.features.param_shapes(), **self.head.param_shapes()}

    def buffer_shapes(self):
        return self.features.buffer_shapes()

    def init(self, rng, params, buffers):
        self.features.init(rng, params, buffers)
        self.head.init(rng, params, buffers)

    def forward(self, params, buffers, x, train, update_stats=True):
        f, fc = self.features.forward(params, buffers, x, train, update_stats)
        p, pc = self.head.forward(params, buffers, f, train, update_stats)
        return p.reshape(-1), f.reshape(len(x), -1), (fc, pc, f.shape)

    def backward(self, params, cache, dprob, dfeat, grads):
        fc, pc, fshape = cache
        df = self.head.backward(params, pc, dprob.reshape(-1, 1, 1, 1), grads)
        if dfeat is not None:
            df = df + dfeat.reshape(fshape)
        return self.features.backward(params, fc, df, grads)


def build_networks(cfg: ModelConfig):
    nets = {name: build_encoder(name, cfg, cfg.latent) for name in ENCODERS}
    nets.update({name: build_decoder(name, cfg) for name in DECODERS})
    nets[DISC] = Discriminator(DISC, cfg)
    return nets


def net_params(state, net):
    prefix = net + "."
    return {k: v for k, v in state.params.items() if k.startswith(prefix)}


class GeneratorOutput(NamedTuple):
    x1: np.ndarray  # x' = G1(x)
    x2: np.ndarray  # x'' = G2(x')
    z: np.ndarray
    z1: np.ndarray  # z'
    z2: np.ndarray  # z''


class DiscOutput(NamedTuple):
    prob: np.ndarray
    features: np.ndarray


@dataclass
class ModelState:
    config: ModelConfig
    params: dict
    buffers: dict
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nets = build_networks(self.config)

    # ---- NCHW internals -------------------------------------------------

    def run(self, net, x, train=False, update_stats=True):
        return self.nets[net].forward(self.params, self.buffers, x, train, update_stats)

    def encode_nchw(self, net, x, train=False):
        y, cache = self.run(net, x, train)
        return y.reshape(len(x), -1), cache

    def decode_nchw(self, net, z, train=False):
        return self.run(net, z.reshape(len(z), -1, 1, 1), train)

    def forward_nchw(self, x, train=False):
        z, c_e1 = self.encode_nchw("E1", x, train)
        x1, c_d1 = self.decode_nchw("D1", z, train)
        z1, c_e2 = self.encode_nchw("E2", x1, train)
        x2, c_d2 = self.decode_nchw("D2", z1, train)
        z2, c_e3 = self.encode_nchw("E3", x2, train)
        out = GeneratorOutput(x1, x2, z, z1, z2)
        return out, (c_e1, c_d1, c_e2, c_d2, c_e3)

    def backward_generators(self, caches, g_x1, g_x2, g_z, g_z1, g_z2, grads):
        """Accumulate generator/E3 parameter gradients from direct loss partials."""
        c_e1, c_d1, c_e2, c_d2, c_e3 = caches
        b = g_x1.shape[0]
        nets = self.nets
        dx2 = g_x2 + nets["E3"].backward(self.params, c_e3, g_z2.reshape(b, -1, 1, 1), grads)
        dz1 = g_z1 + nets["D2"].backward(self.params, c_d2, dx2, grads).reshape(b, -1)
        dx1 = g_x1 + nets["E2"].backward(self.params, c_e2, dz1.reshape(b, -1, 1, 1), grads)
        dz = g_z + nets["D1"].backward(self.params, c_d1, dx1, grads).reshape(b, -1)
        nets["E1"].backward(self.params, c_e1, dz.reshape(b, -1, 1, 1), grads)

    def discriminate_nchw(self, x, train=False, update_stats=True):
        return self.run(DISC, x, train, update_stats)

    # ---- public, (batch, H, W, C) images -----------------------------------

    def _check_images(self, x):
        x = np.asarray(x)
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.side, c.side, c.channels):
            raise ModelError(f"expected images (batch, {c.side}, {c.side}, {c.channels}), got {x.shape}")
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def encode(self, which, x):
        if which not in ENCODERS:
            raise ModelError(f"unknown encoder {which!r}")
        return self.encode_nchw(which, self._check_images(x))[0]

    def decode(self, which, z):
        if which not in DECODERS:
            raise ModelError(f"unknown decoder {which!r}")
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != self.config.latent:
            raise ModelError(f"expected latents (batch, {self.config.latent}), got {z.shape}")
        return self.decode_nchw(which, z)[0].transpose(0, 2, 3, 1)

    def generator_forward(self, x):
        out, _ = self.forward_nchw(self._check_images(x))
        return out._replace(x1=out.x1.transpose(0, 2, 3, 1), x2=out.x2.transpose(0, 2, 3, 1))

    def discriminate(self, x):
        prob, feat, _ = self.discriminate_nchw(self._check_images(x))
        eps = np.finfo(prob.dtype).eps
        return DiscOutput(np.clip(prob, eps, 1 - eps), feat)

    def astype(self, dtype):
        """Copy with parameters and buffers cast (float64 for gradient checks)."""
        cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}
        return ModelState(self.config, cast(self.params), cast(self.buffers), cast(self.opt_m),
                          cast(self.opt_v), self.step, self.epoch, dict(self.meta))

    def copy(self):
        return self.astype(self.dtype)


def parameter_count(state_or_cfg):
    cfg = state_or_cfg.config if isinstance(state_or_cfg, ModelState) else state_or_cfg
    total = 0
    for net in build_networks(cfg).values():
        total += sum(int(np.prod(s)) for s in net.param_shapes().values())
    return total


def init_model(cfg: ModelConfig, output_mean=None) -> ModelState:
    """Weights ~ N(0, 0.02), normalisation scales ~ N(1, 0.02); seeded per network.

    ``output_mean`` (per-channel mean of the model-range training images) sets
    the decoders' output bias to its inverse tanh, so reconstructions start at
    the data mean rather than at 0. Without it the bias starts at 0.
    """
    cfg.validate()
    nets = build_networks(cfg)
    params, buffers = {}, {}
    for i, name in enumerate(ALL_NETS):
        rng = np.random.default_rng([cfg.seed, i])
        p, b = {}, {}
        nets[name].init(rng, p, b)
        params.update(p)
        buffers.update(b)
    if output_mean is not None:
        m = np.asarray(output_mean, dtype=np.float64).reshape(-1)
        if m.shape != (cfg.channels,):
            raise ModelError(f"output_mean needs {cfg.channels} values, got {m.shape}")
        for name in DECODERS:
            params[f"{name}.out.b"] = np.arctanh(np.clip(m, -0.99, 0.99))
    params = {k: v.astype(np.float32) for k, v in params.items()}
    buffers = {k: v.astype(np.float32) for k, v in buffers.items()}
    return ModelState(cfg, params, buffers)


def encode(state, which, x):
    return state.encode(which, x)


def decode(state, which, z):
    return state.decode(which, z)


def generator_forward(state, x):
    return state.generator_forward(x)


def discriminate(state, x):
    return state.discriminate(x)
