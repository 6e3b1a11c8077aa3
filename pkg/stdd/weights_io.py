"""
Flat binary persistence for named arrays.

Layout (all integers little-endian):
    magic      4 bytes  b"STDD"
    version    u32      currently 1
    count      u32      number of arrays
    per array:
        name_len u32, name (UTF-8, name_len bytes)
        rank     u32
        extents  rank x u64
        payload  product(extents) x float32, row-major
"""
import logging
import struct

import numpy as np

from .errors import ReportIOError

logger = logging.getLogger(__name__)

MAGIC = b"STDD"
VERSION = 1


def save_arrays(path, arrays):
    """
    Write named arrays to `path`, preserving insertion order.

    Args:
        path (str | os.PathLike): Destination file
        arrays (dict[str, array-like]): name -> array (Tensor or numpy)
    """
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        data = getattr(value, "data", value)
        arr = np.ascontiguousarray(np.asarray(data, dtype="<f4"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        with open(path, "wb") as handle:
            handle.write(b"".join(chunks))
    except OSError as exc:
        raise ReportIOError(f"cannot write weights to {path}: {exc}")
    logger.info("wrote %d arrays to %s", len(arrays), path)


def load_arrays(path):
    """
    Read a file written by `save_arrays`.

    Returns:
        dict[str, np.ndarray]: name -> float32 array, in file order

    Raises:
        ReportIOError: If the file is missing, truncated or not in this format
    """
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as exc:
        raise ReportIOError(f"cannot read weights from {path}: {exc}")
    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise ReportIOError(f"{path}: bad magic bytes")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise ReportIOError(f"{path}: unsupported version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(4 * size)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if reader.remaining():
        raise ReportIOError(f"{path}: {reader.remaining()} trailing bytes")
    return arrays


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ReportIOError(f"{self.path}: truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self):
        return len(self.blob) - self.pos
