"""Binary checkpoints of a training run.

Layout (all integers little-endian)::

    b"BRNN"                      magic
    u32                          format version
    u32 + bytes                  config snapshot, UTF-8 ``key=value`` lines, sorted
    u32                          tensor count
    per tensor:
        u32 + bytes              name
        u32                      rank
        u64 * rank               extents
        f32 * prod(extents)      values
    u64                          checksum of every preceding byte

Tensor names are ``mu/<param>``, ``rho/<param>``, ``keep/<param>`` (pruned
models only), ``eta/<param>`` (sharpening only) and ``state/<layer>/c|h``
for the carried recurrent state.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, ShapeMismatchError, StorageError, VersionError
from .lstm import LstmConfig, param_shapes
from .model import BayesianLSTM, SharpeningConfig
from .rng import RandomSource
from .tensor import Tensor
from .trainer import TrainState
from .variational import GaussianVariational

MAGIC = b"BRNN"
VERSION = 1
_F32 = np.dtype("<f4")


def checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _snapshot(state: TrainState, extra: dict | None) -> dict[str, str]:
    cfg = state.model.config
    snap = {
        "model.vocab_size": str(cfg.vocab_size),
        "model.embed_size": str(cfg.embed_size),
        "model.hidden_size": str(cfg.hidden_size),
        "model.num_layers": str(cfg.num_layers),
        "state.step": str(state.step),
        "state.epoch": str(state.epoch),
        "state.cut_index": str(state.cut_index),
        "state.skipped": str(state.skipped),
        "state.kl_weight_total": str(state.kl_weight_total),
        "state.rng_seed": str(state.rng.seed),
        "state.rng_counter": str(state.rng.counter),
        "state.carried": "1" if state.s_prev is not None else "0",
        "sharpening.enabled": "1" if state.model.sharpening is not None else "0",
    }
    if state.model.sharpening is not None:
        snap["sharpening.sigma0"] = repr(float(state.model.sharpening.sigma0))
    for k, v in (extra or {}).items():
        if "\n" in str(v) or "=" in str(k):
            raise FormatError(f"cannot store config entry {k!r}")
        snap[f"extra.{k}"] = str(v)
    return snap


def _tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    model = state.model
    out = []
    for n in model.names:
        q = model.posterior[n]
        out.append((f"mu/{n}", q.mu.data))
        out.append((f"rho/{n}", q.rho.data))
        if q.keep is not None:
            out.append((f"keep/{n}", q.keep.astype(np.float32)))
    if model.sharpening is not None:
        for n in model.names:
            out.append((f"eta/{n}", model.sharpening.eta[n].data))
    if state.s_prev is not None:
        for layer, (c, h) in enumerate(state.s_prev):
            out.append((f"state/{layer}/c", c.data))
            out.append((f"state/{layer}/h", h.data))
    return out


def encode(state: TrainState, extra: dict | None = None) -> bytes:
    snap = _snapshot(state, extra)
    text = "".join(f"{k}={snap[k]}\n" for k in sorted(snap)).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    tensors = _tensors(state)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum(body))


def save(state: TrainState, path, extra: dict | None = None) -> None:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    data = encode(state, extra)
    path = Path(path)
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as e:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise StorageError(f"cannot write checkpoint {path}: {e}") from None


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def decode(data: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Validate and split a checkpoint into its config snapshot and tensor table."""
    if len(data) < 4 + 4 + 8:
        raise FormatError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, tail = data[:-8], data[-8:]
    if checksum(body) != struct.unpack("<Q", tail)[0]:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(8)
    try:
        text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config snapshot is not UTF-8") from None
    snap = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad config line {line!r}")
        snap[key] = value
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        shape = tuple(r.u64() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype=_F32).reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise FormatError("trailing bytes after tensor table")
    return snap, tensors


def _int(snap: dict, key: str) -> int:
    try:
        return int(snap[key])
    except (KeyError, ValueError):
        raise FormatError(f"config snapshot lacks a valid {key}") from None


def load(path, config: LstmConfig | None = None) -> tuple[TrainState, dict[str, str]]:
    """Rebuild the training state; returns it with the ``extra.*`` snapshot entries.

    When ``config`` is given the stored tensors must fit that architecture.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from None
    snap, tensors = decode(data)
    stored = LstmConfig(_int(snap, "model.vocab_size"), _int(snap, "model.embed_size"),
                        _int(snap, "model.hidden_size"), _int(snap, "model.num_layers"))
    cfg = stored if config is None else config
    shapes = param_shapes(cfg)
    sharpened = snap.get("sharpening.enabled") == "1"
    carried = snap.get("state.carried") == "1"

    expected = set()
    for n in shapes:
        expected |= {f"mu/{n}", f"rho/{n}", f"keep/{n}"}
        if sharpened:
            expected.add(f"eta/{n}")
    if carried:
        for layer in range(cfg.num_layers):
            expected |= {f"state/{layer}/c", f"state/{layer}/h"}
    unknown = sorted(set(tensors) - expected)
    if unknown:
        raise FormatError(f"unknown tensor names in checkpoint: {unknown}")

    def fetch(name, shape):
        if name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {name}")
        arr = tensors[name]
        if arr.shape != tuple(shape):
            raise ShapeMismatchError(f"{name}: stored {arr.shape}, architecture needs {tuple(shape)}")
        return arr.copy()

    posterior = {}
    for n, shape in shapes.items():
        keep = fetch(f"keep/{n}", shape) != 0 if f"keep/{n}" in tensors else None
        posterior[n] = GaussianVariational(Tensor(fetch(f"mu/{n}", shape)),
                                           Tensor(fetch(f"rho/{n}", shape)), keep)
    sharpening = None
    if sharpened:
        try:
            sigma0 = float(snap["sharpening.sigma0"])
        except (KeyError, ValueError):
            raise FormatError("config snapshot lacks sharpening.sigma0") from None
        sharpening = SharpeningConfig({n: Tensor(fetch(f"eta/{n}", s)) for n, s in shapes.items()},
                                      sigma0)
    s_prev = None
    if carried:
        s_prev = []
        for layer in range(cfg.num_layers):
            c = tensors.get(f"state/{layer}/c")
            if c is None or c.ndim != 2:
                raise FormatError(f"checkpoint lacks a valid state/{layer}/c")
            shape = (c.shape[0], cfg.hidden_size)
            s_prev.append((Tensor(fetch(f"state/{layer}/c", shape)),
                           Tensor(fetch(f"state/{layer}/h", shape))))
    try:
        kl_total = Fraction(snap.get("state.kl_weight_total", "0"))
    except ValueError:
        raise FormatError("bad state.kl_weight_total") from None
    state = TrainState(
        model=BayesianLSTM(cfg, posterior, sharpening),
        rng=RandomSource(_int(snap, "state.rng_seed"), _int(snap, "state.rng_counter")),
        s_prev=s_prev,
        step=_int(snap, "state.step"),
        epoch=_int(snap, "state.epoch"),
        cut_index=_int(snap, "state.cut_index"),
        skipped=_int(snap, "state.skipped"),
        kl_weight_total=kl_total,
    )
    extra = {k[len("extra."):]: v for k, v in snap.items() if k.startswith("extra.")}
    return state, extra
