"""Binary tensor and checkpoint containers.

Tensor blob: ``b"CFTN"``, version (u16), rank (u8), extents (u32 each),
then the payload as little-endian float64, row-major.

Checkpoint: ``b"CFCK"``, version (u16), header length (u32), UTF-8 JSON
header, then one tensor blob per name listed in ``header["tensors"]``.
"""

import io
import json
import struct

import numpy as np

TENSOR_MAGIC = b"CFTN"
CHECKPOINT_MAGIC = b"CFCK"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(fp, array):
    array = np.asarray(array, dtype=np.float64)
    if not 1 <= array.ndim <= 4:
        raise FormatError(f"tensor rank must be 1..4, got {array.ndim}")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<HB", VERSION, array.ndim))
    fp.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fp.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(fp, n):
    data = fp.read(n)
    if len(data) != n:
        raise FormatError("unexpected end of data")
    return data


def read_tensor(fp):
    if _read_exact(fp, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack("<HB", _read_exact(fp, 3))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if not 1 <= rank <= 4:
        raise FormatError(f"bad tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank))
    count = int(np.prod(shape))
    data = np.frombuffer(_read_exact(fp, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def tensor_to_bytes(array):
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(io.BytesIO(data))


def save_tensor(path, array):
    with open(path, "wb") as fp:
        write_tensor(fp, array)


def load_tensor(path):
    with open(path, "rb") as fp:
        return read_tensor(fp)


def save_checkpoint(path, tensors, metadata):
    header = dict(metadata)
    header["tensors"] = list(tensors)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<HI", VERSION, len(blob)))
        fp.write(blob)
        for name in header["tensors"]:
            write_tensor(fp, tensors[name])


def load_checkpoint(path):
    """Return ``(tensors, metadata)`` from a checkpoint file."""
    with open(path, "rb") as fp:
        if _read_exact(fp, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, length = struct.unpack("<HI", _read_exact(fp, 6))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fp, length).decode("utf-8"))
        names = header.pop("tensors")
        tensors = {name: read_tensor(fp) for name in names}
    return tensors, header
