"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"CTLK"
    version u32
    count   u32                    number of blobs
    blob*   u32 name length, UTF-8 name,
            u32 rank, rank x u64 dims,
            payload: product(dims) little-endian float32
    crc     u32                    CRC-32 of everything above

Parameters round-trip bit-exactly because payloads are the raw float32
bytes.  Two reserved names carry non-parameter state: "__seed__" holds
the run seed as four 16-bit chunks (each exactly representable as f32),
and "__optim__/..." blobs hold optimizer buffers when requested.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"CTLK"

_SEED_BLOB = "__seed__"
_OPTIM_PREFIX = "__optim__/"


class CheckpointError(Exception):
    """Raised on malformed checkpoint files; .code names the failure."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


@dataclass
class ModelCheckpoint:
    format_version: int
    blobs: dict = field(repr=False)          # name -> float32 ndarray
    seed: int = None
    optimizer: dict = field(default=None, repr=False)


def _seed_to_array(seed):
    chunks = [(seed >> k) & 0xFFFF for k in (0, 16, 32, 48)]
    return np.array(chunks, dtype=np.float32)


def _seed_from_array(arr):
    chunks = [int(v) for v in arr]
    return sum(c << k for c, k in zip(chunks, (0, 16, 32, 48)))


def save_checkpoint(path, blobs, seed=None, optimizer=None, version=FORMAT_VERSION):
    """Write named float arrays (plus optional seed / optimizer state)."""
    # np.asarray keeps rank-0 arrays rank 0 (ascontiguousarray would not),
    # and tobytes() below always emits C-order bytes.
    items = [(name, np.asarray(arr, dtype=np.float32))
             for name, arr in blobs.items()]
    if seed is not None:
        items.append((_SEED_BLOB, _seed_to_array(seed)))
    if optimizer is not None:
        items.extend((_OPTIM_PREFIX + name, np.asarray(arr, dtype=np.float32))
                     for name, arr in optimizer.items())
    body = bytearray()
    body += MAGIC
    body += struct.pack("<II", version, len(items))
    for name, arr in items:
        encoded = name.encode("utf-8")
        body += struct.pack("<I", len(encoded))
        body += encoded
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.astype("<f4", copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Read a checkpoint; raises CheckpointError on any malformation."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad-magic", "not a CTLK checkpoint")
    if len(data) < 16:
        raise CheckpointError("truncated", "file shorter than the fixed header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError("version-mismatch",
                              f"format version {version}, expected {FORMAT_VERSION}")
    pos = 12
    end = len(data) - 4
    blobs = {}
    for _ in range(count):
        if pos + 4 > end:
            raise CheckpointError("truncated", "blob header runs past end of file")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + name_len + 4 > end:
            raise CheckpointError("truncated", "blob name runs past end of file")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 8 * rank > end:
            raise CheckpointError("truncated", "blob dims run past end of file")
        dims = struct.unpack_from(f"<{rank}Q", data, pos) if rank else ()
        pos += 8 * rank
        n_values = 1
        for d in dims:
            n_values *= d
        if pos + 4 * n_values > end:
            raise CheckpointError("truncated", f"payload of {name!r} runs past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=n_values, offset=pos)
        blobs[name] = arr.reshape(dims).copy()
        pos += 4 * n_values
    if pos != end:
        raise CheckpointError("truncated", "trailing bytes between blobs and checksum")
    (stored_crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != stored_crc:
        raise CheckpointError("bad-checksum", "CRC-32 mismatch; file is corrupt")

    seed = None
    if _SEED_BLOB in blobs:
        seed = _seed_from_array(blobs.pop(_SEED_BLOB))
    optimizer = None
    optim_names = [n for n in blobs if n.startswith(_OPTIM_PREFIX)]
    if optim_names:
        optimizer = {n[len(_OPTIM_PREFIX):]: blobs.pop(n) for n in optim_names}
    return ModelCheckpoint(version, blobs, seed, optimizer)


def network_blobs(network):
    """Ordered name -> array dict of a network's persistent tensors."""
    return {name: tensor.data for name, tensor in network.blobs()}
