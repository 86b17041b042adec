"""Single-file checkpoint container.

Layout (little-endian)::

    b"SGANCKPT"                    magic
    u32 version
    u32 n, n bytes                 UTF-8 header: ``key=value`` lines (config, counters, meta)
    u32 tensor count
    per tensor:
        u16 n, n bytes             name, e.g. ``param/E1.conv0.w``
        u8 ndim, ndim * u32        shape
        prod(shape) * f32          data
    u32 CRC32 of everything above
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import FORMAT_VERSION, ModelConfig, ModelState, build_networks

MAGIC = b"SGANCKPT"
_GROUPS = (("param", "params"), ("buffer", "buffers"), ("adam_m", "opt_m"), ("adam_v", "opt_v"))


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint (bad magic or malformed header)."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """CRC mismatch."""


class CheckpointConfigError(CheckpointError):
    """Tensor names or shapes disagree with the stored config."""


def _header(state: ModelState):
    lines = [f"config.{k}={v!r}" for k, v in state.config.to_dict().items()]
    lines += [f"state.step={state.step}", f"state.epoch={state.epoch}"]
    for k, v in sorted(state.meta.items()):
        lines.append(f"meta.{k}={v!r}")
    return "\n".join(lines).encode()


def save_checkpoint(state: ModelState, path):
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    head = _header(state)
    parts += [struct.pack("<I", len(head)), head]
    tensors = []
    for tag, attr in _GROUPS:
        d = getattr(state, attr)
        tensors += [(f"{tag}/{k}", d[k]) for k in sorted(d)]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"truncated: need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_value(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def load_checkpoint(path) -> ModelState:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC):
        if MAGIC.startswith(buf):
            raise CheckpointTruncatedError("truncated: file shorter than magic")
        raise CheckpointFormatError("format: bad magic")
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("format: bad magic")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"version: file has {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<I")
    try:
        head = r.take(hlen).decode()
    except UnicodeDecodeError as e:
        raise CheckpointFormatError(f"format: header not UTF-8 ({e})") from None
    cfg, counters, meta = {}, {}, {}
    for line in filter(None, head.split("\n")):
        key, sep, val = line.partition("=")
        group, _, name = key.partition(".")
        if not sep or group not in ("config", "state", "meta"):
            raise CheckpointFormatError(f"format: bad header line {line!r}")
        {"config": cfg, "state": counters, "meta": meta}[group][name] = _parse_value(val)
    (count,) = r.unpack("<I")
    groups = {attr: {} for _, attr in _GROUPS}
    tag_to_attr = dict(_GROUPS)
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        tag, _, key = name.partition("/")
        if tag not in tag_to_attr:
            raise CheckpointFormatError(f"format: unknown tensor group {tag!r}")
        groups[tag_to_attr[tag]][key] = arr
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointFormatError("format: trailing bytes after CRC")
    if zlib.crc32(buf[:body_end]) != crc:
        raise CheckpointCorruptError("corrupt: CRC mismatch")
    try:
        config = ModelConfig(**cfg).validate()
    except TypeError as e:
        raise CheckpointConfigError(f"config: {e}") from None
    _check_shapes(config, groups)
    return ModelState(config, groups["params"], groups["buffers"], groups["opt_m"], groups["opt_v"],
                      int(counters.get("step", 0)), int(counters.get("epoch", 0)), meta)


def _check_shapes(config, groups):
    want_p, want_b = {}, {}
    for net in build_networks(config).values():
        want_p.update(net.param_shapes())
        want_b.update(net.buffer_shapes())
    for attr, want in (("params", want_p), ("buffers", want_b)):
        got = {k: v.shape for k, v in groups[attr].items()}
        if got != {k: tuple(s) for k, s in want.items()}:
            missing = sorted(set(want) - set(got))
            extra = sorted(set(got) - set(want))
            bad = sorted(k for k in set(want) & set(got) if tuple(want[k]) != got[k])
            raise CheckpointConfigError(
                f"config: {attr} disagree with config (missing {missing[:3]}, extra {extra[:3]}, shape {bad[:3]})")
    for attr in ("opt_m", "opt_v"):
        for k, v in groups[attr].items():
            if k not in want_p or tuple(want_p[k]) != v.shape:
                raise CheckpointConfigError(f"config: optimizer moment {k} does not match a parameter")
