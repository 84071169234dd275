"""Dense 2D fields, small kernels, seeded random streams and the ``.ubt`` tensor format.

A *field* is a float64 ``numpy.ndarray`` of shape ``(H, W)``; most functions
also accept a leading batch axis ``(N, H, W)``. Masks are the same arrays with
values restricted to {0, 1}.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Field = np.ndarray
PathLike = Union[str, Path]

UBT_MAGIC = b"UBT1"


class ShapeMismatchError(ValueError):
    pass


class InvalidRangeError(ValueError):
    pass


def as_field(values, dtype=np.float64) -> Field:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim not in (2, 3):
        raise ShapeMismatchError(f"expected (H, W) or (N, H, W) field, got shape {arr.shape}")
    return arr


def check_same_shape(*arrays: np.ndarray) -> None:
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ShapeMismatchError(f"shape mismatch: {shape} vs {np.shape(a)}")


def check_finite(a: np.ndarray, what: str = "field") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return a


def is_binary(mask: np.ndarray) -> bool:
    return bool(np.all((mask == 0) | (mask == 1)))


def binarize(field: Field, threshold: float = 0.0) -> Field:
    """Threshold a continuous field into a {0, 1} mask (strictly above ``threshold``)."""
    return (np.asarray(field) > threshold).astype(np.float64)


def mask_to_signed(mask: Field) -> Field:
    """Map a {0, 1} mask into the symmetric {-1, +1} diffusion range."""
    return 2.0 * np.asarray(mask, dtype=np.float64) - 1.0


def avg_pool_same(field: Field, window: int) -> Field:
    """Box average over ``window x window`` neighbourhoods, same output size.

    Borders are zero padded and the divisor is always ``window**2``, so the
    response shrinks towards the image edge instead of renormalising.
    """
    f = np.asarray(field, dtype=np.float64)
    h, w = f.shape[-2:]
    if window < 1 or window % 2 == 0 or window > min(h, w):
        raise InvalidRangeError(f"pool window must be odd, >= 1 and <= {min(h, w)}; got {window}")
    if window == 1:
        return f.copy()
    r = window // 2
    pad = [(0, 0)] * (f.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(f, pad)
    windows = sliding_window_view(padded, (window, window), axis=(-2, -1))
    return windows.sum(axis=(-2, -1)) / float(window * window)


_UNARY = {"exp": np.exp, "abs": np.abs}
_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a, b=None, *, factor: float | None = None,
                lo: float | None = None, hi: float | None = None) -> Field:
    """Apply one of the elementwise kernels add/sub/mul/scale/exp/abs/clamp."""
    a = np.asarray(a, dtype=np.float64)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        b = np.asarray(b, dtype=np.float64)
        check_same_shape(a, b)
        with np.errstate(over="ignore", invalid="ignore"):
            out = _BINARY[op](a, b)
    elif op in _UNARY:
        # overflow is reported by check_finite below
        with np.errstate(over="ignore", invalid="ignore"):
            out = _UNARY[op](a)
    elif op == "scale":
        out = a * float(factor)
    elif op == "clamp":
        if lo is None or hi is None or lo > hi:
            raise InvalidRangeError(f"clamp needs lo <= hi, got {lo}, {hi}")
        out = np.clip(a, lo, hi)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(out)


# -- random streams -----------------------------------------------------------

def substream(seed: int, *index: int) -> np.random.Generator:
    """Counter-based generator for the substream ``(seed, *index)``.

    The Philox key is derived by hashing the seed together with the index path,
    so distinct paths give independent streams and nothing is shared between them.
    """
    if seed < 0 or any(i < 0 for i in index):
        raise InvalidRangeError("seed and substream indices must be non-negative")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in index))
    key = seq.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian_draw(rng: np.random.Generator, shape: Sequence[int] | int) -> Field:
    return rng.standard_normal(shape)


class StreamBank:
    """One independent substream per trajectory; draws are stacked along axis 0.

    Because every row has its own stream, a trajectory's noise does not depend
    on which other trajectories share its batch.
    """

    def __init__(self, seed: int, indices: Sequence[int], tag: int = 0):
        self.seed = int(seed)
        self.indices = [int(i) for i in indices]
        self.tag = int(tag)
        self._streams = [substream(self.seed, self.tag, i) for i in self.indices]

    def __len__(self) -> int:
        return len(self._streams)

    def normal(self, shape: Sequence[int]) -> Field:
        return np.stack([g.standard_normal(tuple(shape)) for g in self._streams])

    def integers(self, low: int, high: int) -> np.ndarray:
        return np.array([g.integers(low, high) for g in self._streams])


# -- .ubt tensors ---------------------------------------------------------------

def write_ubt(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f8")
    # ascontiguousarray promotes 0-d input to 1-d; keep scalars scalar
    arr = np.ascontiguousarray(arr).reshape(arr.shape)
    fh.write(UBT_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_ubt(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != UBT_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim)) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise EOFError(f"truncated tensor data: wanted {n} bytes, got {len(data)}")
    return data


def save_ubt(path: PathLike, array) -> None:
    with open(path, "wb") as fh:
        write_ubt(fh, array)


def load_ubt(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_ubt(fh)


def ubt_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_ubt(buf, array)
    return buf.getvalue()


def to_pgm_bytes(field: Field) -> bytes:
    """8-bit binary PGM (P5) preview, mapping [-1, 1] linearly onto [0, 255]."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeMismatchError("PGM preview needs a single (H, W) field")
    pix = np.clip(np.rint((np.clip(f, -1.0, 1.0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    header = f"P5\n{f.shape[1]} {f.shape[0]}\n255\n".encode("ascii")
    return header + pix.tobytes()


def save_pgm(path: PathLike, field: Field) -> None:
    Path(path).write_bytes(to_pgm_bytes(field))


# -- trajectory chunking --------------------------------------------------------

def map_chunks(fn, indices: Sequence[int], chunk_size: int = 16, jobs: int = 1) -> np.ndarray:
    """Apply ``fn`` to fixed-size chunks of trajectory indices and concatenate in order.

    Chunk boundaries depend only on ``chunk_size``, never on ``jobs``, so the
    result is identical for any worker count.
    """
    indices = [int(i) for i in indices]
    if chunk_size < 1 or jobs < 1:
        raise InvalidRangeError("chunk_size and jobs must be >= 1")
    chunks = [indices[s:s + chunk_size] for s in range(0, len(indices), chunk_size)]
    if jobs == 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(fn, chunks))
    return np.concatenate(parts, axis=0)
