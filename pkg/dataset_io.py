import logging
import struct
from pathlib import Path
from typing import BinaryIO, List, Tuple, Union

import numpy as np

from config import DATASET_MAGIC
from errors import InvalidArgumentError
from network_tools import NetworkSpec
from rng_tools import SeedSpec
from student_tools import Dataset, teacher_chunks

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# all integers little-endian
_COUNTS = struct.Struct("<QQ")
_FIELD_COUNT = struct.Struct("<I")
_FIELD_LENGTH = struct.Struct("<H")


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _FIELD_LENGTH.pack(len(raw)) + raw


def _pack_fields(fields: List[Tuple[str, str]]) -> bytes:
    parts = [_FIELD_COUNT.pack(len(fields))]
    for name, value in fields:
        parts.append(_pack_text(name))
        parts.append(_pack_text(value))
    return b"".join(parts)


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    chunk = stream.read(size)
    if len(chunk) != size:
        raise InvalidArgumentError("Dataset file is truncated")
    return chunk


def _read_text(stream: BinaryIO) -> str:
    (length,) = _FIELD_LENGTH.unpack(_read_exact(stream, _FIELD_LENGTH.size))
    raw = _read_exact(stream, length)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise InvalidArgumentError(f"Dataset text field is not UTF-8: {e}") from e


def write_dataset(path: PathLike, data: Dataset) -> Path:
    """Write a dataset in the DRLD1 binary layout.

    Header: magic, n and N as uint64, the teacher spec as a length-prefixed
    field list, then the dataset seed (master, stream) as uint64. Body:
    row-major float64 inputs, then one byte per label (0x00 = -1, 0x01 = +1).

    Args:
        path (str | Path): Destination file
        data (Dataset): Dataset to serialize

    Returns:
        Path: The written file
    """
    path = Path(path)
    n = data.teacher_spec.input_dim
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(_COUNTS.pack(n, data.size))
        f.write(_pack_fields(data.teacher_spec.to_fields()))
        f.write(_COUNTS.pack(data.seed.master_seed, data.seed.stream_id))
        f.write(np.ascontiguousarray(data.inputs, dtype="<f8").tobytes(order="C"))
        f.write(np.where(data.labels > 0, 1, 0).astype(np.uint8).tobytes())
    logger.info("Wrote dataset n=%d N=%d to %s", n, data.size, path)
    return path


def read_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, len(DATASET_MAGIC)) != DATASET_MAGIC:
            raise InvalidArgumentError(f"{path} is not a dataset file")
        n, size = _COUNTS.unpack(_read_exact(f, _COUNTS.size))
        (count,) = _FIELD_COUNT.unpack(_read_exact(f, _FIELD_COUNT.size))
        fields = [(_read_text(f), _read_text(f)) for _ in range(count)]
        master, stream = _COUNTS.unpack(_read_exact(f, _COUNTS.size))
        inputs = np.frombuffer(_read_exact(f, 8 * n * size), dtype="<f8").reshape(size, n)
        raw_labels = np.frombuffer(_read_exact(f, size), dtype=np.uint8)
        if f.read(1):
            raise InvalidArgumentError(f"{path} has trailing bytes")

    if np.any(raw_labels > 1):
        raise InvalidArgumentError("Label bytes must be 0x00 or 0x01")
    teacher = NetworkSpec.from_fields(fields)
    if teacher.input_dim != n:
        raise InvalidArgumentError(f"Header n={n} disagrees with teacher input_dim={teacher.input_dim}")
    return Dataset(
        inputs=inputs.astype(np.float64),
        labels=np.where(raw_labels == 1, 1, -1).astype(np.int8),
        teacher_spec=teacher,
        seed=SeedSpec(master, stream),
        chunk_sizes=tuple(len(chunk) for chunk in teacher_chunks(size)),
    )
