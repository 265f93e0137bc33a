"""Raw tensor file format.

Layout: 8-byte magic ``ZVT1TENS``, u32 rank, rank u64 dims, then the
payload as little-endian float64 in row-major order.  Nothing else; the
format exists so datasets and checkpoints stay tool-inspectable.
"""

import numpy as np

from .errors import FormatError

MAGIC = b"ZVT1TENS"


def write_tensor(path, array):
    arr = np.asarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(arr.ndim).astype("<u4").tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4:
        raise FormatError(f"{path}: truncated tensor file")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}, expected {MAGIC!r}")
    off = len(MAGIC)
    rank = int(np.frombuffer(blob, dtype="<u4", count=1, offset=off)[0])
    off += 4
    if len(blob) < off + 8 * rank:
        raise FormatError(f"{path}: header ends before {rank} dims")
    dims = tuple(
        int(d) for d in np.frombuffer(blob, dtype="<u8", count=rank, offset=off)
    )
    off += 8 * rank
    expected = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(blob, dtype="<f8", offset=off)
    if payload.size != expected:
        raise FormatError(
            f"{path}: payload holds {payload.size} values, header promises {expected}"
        )
    return payload.reshape(dims).copy()
