"""Binary checkpoints.

Layout (all integers little-endian)::

    b"NPMCKPT\\0"  u32 version
    u64 header length, header (UTF-8 JSON: step, model config, bank sizes,
                                config echo in INI text)
    u32 tensor count, then per tensor:
        u16 name length, name, u8 ndim, ndim * u64 dims, float64 data
    32-byte SHA-256 of everything above

The banks are stored in full (not just their means): the next step's
summary depends on which rows are evicted, so resuming bit-exactly needs
the rows themselves. The per-step loss records since the last log entry
are stored too, so a resumed metric log matches an uninterrupted one.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from . import config as config_io
from .npmodel import MemoryBank, ModelConfig, NPModel
from .trainer import EMAState, TrainState

MAGIC = b"NPMCKPT\0"
VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def _tensors(state, stats):
    model = state.model
    out = {}
    for k, t in model.params.items():
        out["param/" + k] = t.data
    for k, v in state.ema.shadow.items():
        out["ema/" + k] = v
    for k, v in state.velocity.items():
        out["velocity/" + k] = v
    out["bank/latent"] = model.latent_bank.contents()
    out["bank/det"] = model.det_bank.contents()
    out["train/window"] = np.asarray(state.window, dtype=np.float64).reshape(-1, 5)
    for k, v in (stats or {}).items():
        out["stats/" + k] = np.asarray(v, dtype=np.float64)
    return out


def encode(state, train_config, stats=None):
    cfg = state.model.cfg
    header = {
        "step": state.step,
        "model": {**cfg.__dict__, "conv_channels": list(cfg.conv_channels)},
        "banks": {
            "latent": [state.model.latent_bank.capacity, state.model.latent_bank.pushed],
            "det": [state.model.det_bank.capacity, state.model.det_bank.pushed],
        },
        "config": config_io.serialize(train_config),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(hbytes)), hbytes]
    tensors = _tensors(state, stats)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob):
    """-> (header dict, {name: array})."""
    if len(blob) < len(MAGIC) + 4 + _DIGEST or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch; file is corrupt")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    pos += 4
    (hlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) * 8
        tensors[name] = np.frombuffer(body, dtype="<f8", count=size // 8,
                                      offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after tensor table")
    return header, tensors


def save_checkpoint(path, state, train_config, stats=None):
    """Write atomically: temp file in the same directory, then rename."""
    blob = encode(state, train_config, stats)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class Checkpoint:
    """Decoded checkpoint: rebuilds training state, config and data stats."""

    def __init__(self, header, tensors):
        self.header = header
        self.tensors = tensors

    @property
    def step(self):
        return self.header["step"]

    @property
    def config(self):
        return config_io.parse(self.header["config"])

    @property
    def stats(self):
        out = {k[6:]: v for k, v in self.tensors.items() if k.startswith("stats/")}
        return out or None

    def _group(self, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def state(self):
        from . import diffcore as dc

        cfg = ModelConfig(**self.header["model"])
        banks = {}
        for which in ("latent", "det"):
            capacity, pushed = self.header["banks"][which]
            banks[which] = MemoryBank.from_state(self.tensors["bank/" + which], capacity, pushed)
        params = {k: dc.Tensor(v.copy(), requires_grad=True, name=k)
                  for k, v in self._group("param/").items()}
        model = NPModel(cfg, params=params, latent_bank=banks["latent"], det_bank=banks["det"])
        window = [list(row) for row in self.tensors["train/window"]]
        return TrainState(model, self._group("velocity/"),
                          EMAState(self._group("ema/")), self.step, window)

    def ema_model(self):
        return self.state().ema_model()


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return Checkpoint(*decode(blob))
