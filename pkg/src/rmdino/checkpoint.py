"""Binary checkpoint format.

Layout::

    header (64 bytes)  magic "RMDINOCK" | u32 version | u32 entry count |
                       32-byte config fingerprint | 16 reserved zero bytes
    entries            u16 name length | name (utf-8) | u8 dtype code | u8 ndim |
                       u64 dims... | u64 payload bytes | little-endian payload
    trailer            sha256 of everything above (32 bytes)

All integers are little-endian.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .distill import Center, TrainState
from .optim import OptimState
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"RMDINOCK"
VERSION = 1
HEADER = struct.Struct("<8sII32s16s")
assert HEADER.size == 64

_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


class FingerprintMismatch(CheckpointError):
    pass


def _entries(state: TrainState, cfg: RunConfig) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    names = list(state.student)
    out += [(f"student/{n}", state.student[n].data) for n in names]
    out += [(f"teacher/{n}", state.teacher[n].data) for n in names]
    for n in names:
        if n in state.opt.m:
            out.append((f"opt/m/{n}", state.opt.m[n]))
            out.append((f"opt/v/{n}", state.opt.v[n]))
            out.append((f"opt/t/{n}", np.array([state.opt.t[n]], dtype=np.int64)))
    out.append(("opt/hyper", np.array([state.opt.beta1, state.opt.beta2, state.opt.eps])))
    out.append(("center", state.center.c))
    out.append(("center/momentum", np.array([state.center.momentum])))
    out.append(("meta/step", np.array([state.step], dtype=np.int64)))
    out.append(("meta/seed", np.array([state.seed], dtype=np.int64)))
    out.append(("meta/config", np.frombuffer(cfg.to_text().encode(), dtype=np.uint8)))
    return out


def encode(state: TrainState, cfg: RunConfig) -> bytes:
    entries = _entries(state, cfg)
    parts = [HEADER.pack(MAGIC, VERSION, len(entries), bytes.fromhex(cfg.fingerprint()), b"\0" * 16)]
    for name, arr in entries:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.kind != "u" else arr.dtype
        arr = np.ascontiguousarray(arr, dtype=le)
        if arr.dtype not in _CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)) + payload)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    data = encode(state, cfg)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode(buf: bytes) -> tuple[str, dict[str, np.ndarray]]:
    """Returns (fingerprint hex, ordered name → array)."""
    if len(buf) < HEADER.size + 32:
        raise CheckpointError("checkpoint truncated")
    magic, version, count, fp, _ = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.pos = HEADER.size
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code])
        tensors[name] = arr.reshape(shape).astype(arr.dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last entry")
    return fp.hex(), tensors


def load_checkpoint(path: str | Path, expected: RunConfig | None = None,
                    force: bool = False) -> tuple[TrainState, RunConfig]:
    """Load a checkpoint; the embedded config is returned alongside the state.

    If ``expected`` is given its fingerprint must match the file's unless
    ``force`` is set, in which case a warning is logged.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    fp, t = decode(buf)
    try:
        cfg = RunConfig.from_text(bytes(t["meta/config"]).decode())
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: embedded config unreadable: {e}") from e
    if expected is not None and expected.fingerprint() != fp:
        msg = f"{path}: config fingerprint {fp[:12]} does not match expected {expected.fingerprint()[:12]}"
        if not force:
            raise FingerprintMismatch(msg)
        logger.warning("%s (forced load)", msg)
    student, teacher = {}, {}
    opt = OptimState(*(float(x) for x in t["opt/hyper"]))
    for name, arr in t.items():
        kind, _, rest = name.partition("/")
        if kind == "student":
            student[rest] = Tensor(arr, requires_grad=True, name=rest)
        elif kind == "teacher":
            teacher[rest] = Tensor(arr, name=rest)
        elif name.startswith("opt/m/"):
            opt.m[name[6:]] = arr
        elif name.startswith("opt/v/"):
            opt.v[name[6:]] = arr
        elif name.startswith("opt/t/"):
            opt.t[name[6:]] = int(arr[0])
    if student.keys() != teacher.keys():
        raise CheckpointError(f"{path}: student and teacher parameter sets differ")
    center = Center(t["center"], float(t["center/momentum"][0]))
    state = TrainState(student, teacher, opt, center, int(t["meta/step"][0]), int(t["meta/seed"][0]))
    return state, cfg
