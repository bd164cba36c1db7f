"""
ATLAB1 checkpoint files.

Layout (little-endian):
    b"ATLAB1"
    u32 config length, UTF-8 JSON of the TrainConfig
    u32 parameter count, then per parameter an array record
    u8 optimizer flag; when 1: u64 step, f64 beta1, f64 beta2, f64 epsilon,
        u32 record count, then array records "adam.m.<name>" / "adam.v.<name>"

Array record: u32 name length, name bytes, u32 rank, u64 per dim, f64 payload.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from tts_alignment_lab.config import TrainConfig
from tts_alignment_lab.errors import CheckpointError
from tts_alignment_lab.optim import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"ATLAB1"


@dataclass
class Checkpoint:
    config: TrainConfig
    parameters: Dict[str, np.ndarray]
    optimizer: Optional[AdamState] = None


def write_array(stream: BinaryIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    stream.write(struct.pack("<I", len(encoded)))
    stream.write(encoded)
    stream.write(struct.pack("<I", array.ndim))
    for dim in array.shape:
        stream.write(struct.pack("<Q", dim))
    stream.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    chunk = stream.read(size)
    if len(chunk) != size:
        raise CheckpointError("unexpected end of file")
    return chunk


def _unpack(stream: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(stream, struct.calcsize(fmt)))


def read_array(stream: BinaryIO) -> Tuple[str, np.ndarray]:
    (name_length,) = _unpack(stream, "<I")
    name = _read_exact(stream, name_length).decode("utf-8")
    (rank,) = _unpack(stream, "<I")
    shape = tuple(_unpack(stream, f"<{rank}Q")) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(stream, 8 * count)
    array = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return name, array


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    stream = io.BytesIO()
    stream.write(MAGIC)
    config_bytes = checkpoint.config.model_dump_json().encode("utf-8")
    stream.write(struct.pack("<I", len(config_bytes)))
    stream.write(config_bytes)

    names = list(checkpoint.parameters)
    stream.write(struct.pack("<I", len(names)))
    for name in names:
        write_array(stream, name, checkpoint.parameters[name])

    state = checkpoint.optimizer
    stream.write(struct.pack("<B", 0 if state is None else 1))
    if state is not None:
        stream.write(struct.pack("<Qddd", state.step, state.beta1, state.beta2, state.epsilon))
        stream.write(struct.pack("<I", 2 * len(names)))
        for name, m, v in zip(names, state.first_moment, state.second_moment):
            write_array(stream, f"adam.m.{name}", m)
            write_array(stream, f"adam.v.{name}", v)
    return stream.getvalue()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    stream = io.BytesIO(blob)
    if _read_exact(stream, len(MAGIC)) != MAGIC:
        raise CheckpointError("not an ATLAB1 checkpoint")
    (config_length,) = _unpack(stream, "<I")
    try:
        config = TrainConfig.model_validate_json(_read_exact(stream, config_length))
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc

    (count,) = _unpack(stream, "<I")
    parameters: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name, array = read_array(stream)
        parameters[name] = array

    (has_state,) = _unpack(stream, "<B")
    optimizer = None
    if has_state:
        step, beta1, beta2, epsilon = _unpack(stream, "<Qddd")
        (records,) = _unpack(stream, "<I")
        moments = dict(read_array(stream) for _ in range(records))
        try:
            first = [moments[f"adam.m.{name}"] for name in parameters]
            second = [moments[f"adam.v.{name}"] for name in parameters]
        except KeyError as exc:
            raise CheckpointError(f"optimizer state lacks {exc}") from exc
        optimizer = AdamState(first, second, step=step, beta1=beta1, beta2=beta2, epsilon=epsilon)
    if stream.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config=config, parameters=parameters, optimizer=optimizer)


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info("checkpoint written to %s (%d tensors)", path, len(checkpoint.parameters))
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return decode_checkpoint(blob)
