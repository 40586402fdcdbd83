"""``S3DT`` binary tensor files and WAV helpers."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

MAGIC = b"S3DT"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps_tensor(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def loads_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("not an S3DT tensor file")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported S3DT version {version}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 12)
    off = 12 + 4 * ndim
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 4 * n:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()


def save_tensor(arr, path):
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())


def read_wav(path):
    """Return ``(sample_rate, audio)`` with audio as float channels x samples."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype != np.float32:
        data = data.astype(np.float32)
    if data.ndim == 1:
        data = data[:, None]
    return sr, np.ascontiguousarray(data.T)


def write_wav(path, audio, sample_rate: int):
    wavfile.write(path, sample_rate, np.ascontiguousarray(np.asarray(audio, dtype=np.float32).T))
