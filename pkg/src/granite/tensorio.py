"""Binary tensor container, dataset manifests and seed derivation.

On-disk layout (little-endian)::

    b"GTNS" | u32 version | u32 rank | u64 dims[rank] | u8 dtype | payload

``dtype`` is 0 for float32 and 1 for float64.  Arrays are row-major with the
channel axis last.
"""
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GTNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorIOError(Exception):
    """Base class for container errors; carries the offending path."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


class BadMagic(TensorIOError):
    pass


class Truncated(TensorIOError):
    pass


class DimsMismatch(TensorIOError):
    pass


def _encode(t):
    t = np.asarray(t)
    if t.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {t.dtype}; expected float32 or float64")
    if t.ndim == 0 or any(d <= 0 for d in t.shape):
        raise ValueError(f"dims must be positive, got {t.shape}")
    code = _CODES[t.dtype]
    header = MAGIC + struct.pack("<II", VERSION, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape) + struct.pack("<B", code)
    return header + np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes()


def write_tensor(path, t):
    """Write one array to ``path``."""
    data = _encode(t)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise TensorIOError(path, f"write failed: {exc}") from exc


def _decode(buf, offset, path, whole):
    if len(buf) - offset < 12:
        if buf[offset:offset + 4] != MAGIC[:len(buf) - offset]:
            raise BadMagic(path, "bad magic")
        raise Truncated(path, "header truncated")
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagic(path, f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise TensorIOError(path, f"unsupported version {version}")
    pos = offset + 12
    if len(buf) < pos + 8 * rank + 1:
        raise Truncated(path, "dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    code = buf[pos]
    pos += 1
    if code not in _DTYPES:
        raise TensorIOError(path, f"unknown dtype code {code}")
    if rank == 0 or any(d == 0 for d in dims):
        raise DimsMismatch(path, f"invalid dims {dims}")
    dtype = _DTYPES[code]
    nbytes = math.prod(dims) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise Truncated(path, f"payload has {len(buf) - pos} bytes, dims {dims} need {nbytes}")
    if whole and len(buf) - pos > nbytes:
        raise DimsMismatch(path, f"payload has {len(buf) - pos} bytes, dims {dims} need {nbytes}")
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=pos).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def read_tensor(path):
    """Inverse of :func:`write_tensor`."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise TensorIOError(path, f"read failed: {exc}") from exc
    arr, _ = _decode(buf, 0, path, whole=True)
    return arr


def write_bundle(path, arrays):
    """Write several arrays back to back in one file."""
    try:
        with open(path, "wb") as fh:
            for a in arrays:
                fh.write(_encode(a))
    except OSError as exc:
        raise TensorIOError(path, f"write failed: {exc}") from exc


def read_bundle(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise TensorIOError(path, f"read failed: {exc}") from exc
    out = []
    pos = 0
    while pos < len(buf):
        arr, pos = _decode(buf, pos, path, whole=False)
        out.append(arr)
    return out


# --- manifests ---------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    seed: int
    splits: dict
    files: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [i for s in SPLITS for i in self.splits[s]]

    @property
    def counts(self):
        return {s: len(self.splits[s]) for s in SPLITS}

    def to_json(self):
        return {"seed": int(self.seed), "splits": {s: list(self.splits[s]) for s in SPLITS},
                "files": dict(self.files)}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(seed=d["seed"], splits={s: list(d["splits"][s]) for s in SPLITS},
                   files=dict(d.get("files", {})))


def sample_id(i):
    return f"s{i:05d}"


def split_dataset(n, ratios=(0.7, 0.1, 0.2), seed=0, ids=None):
    """Shuffle ``n`` samples into train/val/test.

    Validation and test counts are ``floor(n * ratio)``; the remainder goes
    to training.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0 or min(ratios) <= 0:
        raise ValueError(f"degenerate split {n_train}/{n_val}/{n_test} for ratios {ratios}")
    ids = [sample_id(i) for i in range(n)] if ids is None else list(ids)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[k] for k in perm]
    splits = {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }
    return DatasetManifest(seed=int(seed), splits=splits)


def derive_seed(global_seed, *names):
    """Stable 63-bit seed for a named stage, independent of Python's hash."""
    h = hashlib.sha256(str(int(global_seed)).encode())
    for n in names:
        h.update(b"/" + str(n).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1
