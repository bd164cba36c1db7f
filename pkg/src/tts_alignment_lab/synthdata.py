"""
Synthetic multi-speaker text-to-frames task with a known monotonic alignment.

Every token id owns a prototype vector in frame space. An utterance repeats the
prototype of each token (plus the speaker's offset) for a speaker-scaled number
of frames, blends part of the previous frame into each frame and adds speaker
noise. Everything derives from the master seed:

    prototypes        default_rng([seed, 0])
    speaker profiles  default_rng([seed, 1])
    sample i of split default_rng([seed, 2 + split code, i])

so any sample can be regenerated on its own.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Dict, List, Tuple

import numpy as np
from pydantic import ValidationError

from tts_alignment_lab.alignment import AttentionMatrix
from tts_alignment_lab.config import TaskConfig
from tts_alignment_lab.errors import CheckpointError, ParameterError
from tts_alignment_lab.tensor import Tensor

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLITS)}
DATASET_MAGIC = b"ATDS1"
SPLIT_SUFFIX = ".atds"
ROUNDING_SLACK = 1e-9


@dataclass
class SyntheticSample:
    phonemes: np.ndarray
    speaker: int
    frames: np.ndarray
    alignment: np.ndarray

    @property
    def T(self) -> int:
        return len(self.phonemes)

    @property
    def S(self) -> int:
        return len(self.frames)


@dataclass
class SpeakerProfile:
    speed: float
    noise_sigma: float
    offset: np.ndarray


@dataclass
class Dataset:
    config: TaskConfig
    splits: Dict[str, List[SyntheticSample]]

    def split(self, name: str) -> List[SyntheticSample]:
        if name not in self.splits:
            raise ParameterError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]


@dataclass
class SplitStats:
    count: int
    mean_frames: float
    min_frames: int
    max_frames: int
    mean_tokens: float
    min_tokens: int
    max_tokens: int


def token_prototypes(config: TaskConfig) -> np.ndarray:
    return np.random.default_rng([config.seed, 0]).normal(0.0, 1.0, size=(config.vocab_size, config.frame_dim))


def speaker_profiles(config: TaskConfig) -> List[SpeakerProfile]:
    rng = np.random.default_rng([config.seed, 1])
    speeds = rng.uniform(config.min_speed, config.max_speed, size=config.num_speakers)
    sigmas = rng.uniform(config.min_noise_sigma, config.max_noise_sigma, size=config.num_speakers)
    offsets = rng.normal(0.0, config.speaker_offset_scale, size=(config.num_speakers, config.frame_dim))
    if config.speaker_speeds is not None:
        speeds = np.asarray(config.speaker_speeds, dtype=np.float64)
    return [SpeakerProfile(float(v), float(s), o) for v, s, o in zip(speeds, sigmas, offsets)]


def scaled_duration(base: int, speed: float) -> int:
    """Frames for one token: base * speed rounded half up, at least 1."""
    return max(1, int(math.floor(base * speed + 0.5 + ROUNDING_SLACK)))


def render_frames(
    phonemes: np.ndarray,
    durations: np.ndarray,
    prototypes: np.ndarray,
    profile: SpeakerProfile,
    blend: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Frames and per-frame token index for one token sequence."""
    alignment = np.repeat(np.arange(len(phonemes)), durations)
    targets = prototypes[phonemes[alignment]] + profile.offset
    clean = np.empty_like(targets)
    clean[0] = targets[0]
    for s in range(1, len(targets)):
        clean[s] = (1.0 - blend) * targets[s] + blend * clean[s - 1]
    noise = rng.normal(0.0, 1.0, size=clean.shape) * profile.noise_sigma
    return clean + noise, alignment


def make_sample(
    config: TaskConfig,
    split: str,
    index: int,
    prototypes: np.ndarray,
    profiles: List[SpeakerProfile],
) -> SyntheticSample:
    rng = np.random.default_rng([config.seed, 2 + SPLIT_CODES[split], index])
    length = int(rng.integers(config.min_tokens, config.max_tokens + 1))
    phonemes = rng.integers(0, config.vocab_size, size=length)
    base = rng.integers(config.min_duration, config.max_duration + 1, size=length)
    speaker = index % config.num_speakers
    profile = profiles[speaker]
    durations = np.array([scaled_duration(int(d), profile.speed) for d in base])
    frames, alignment = render_frames(phonemes, durations, prototypes, profile, config.blend, rng)
    return SyntheticSample(phonemes.astype(np.int64), speaker, frames, alignment.astype(np.int64))


def make_dataset(config: TaskConfig) -> Dataset:
    """Generate all three splits; a pure function of the config."""
    prototypes = token_prototypes(config)
    profiles = speaker_profiles(config)
    sizes = {"train": config.train_size, "valid": config.valid_size, "test": config.test_size}
    splits = {
        name: [make_sample(config, name, i, prototypes, profiles) for i in range(sizes[name])]
        for name in SPLITS
    }
    logger.info("generated %s samples", "/".join(str(len(splits[name])) for name in SPLITS))
    return Dataset(config=config, splits=splits)


def oracle_alignment_matrix(sample: SyntheticSample) -> AttentionMatrix:
    """One-hot S x T matrix, row s hot at alignment[s]."""
    matrix = np.zeros((sample.S, sample.T))
    matrix[np.arange(sample.S), sample.alignment] = 1.0
    return AttentionMatrix(Tensor(matrix))


def path_deviation(sample: SyntheticSample) -> Fraction:
    """max_s |s - k * alignment[s]| with k = S/T, exactly."""
    slope = Fraction(sample.S, sample.T)
    return max(abs(Fraction(s) - slope * int(t)) for s, t in enumerate(sample.alignment))


def covering_bandwidth(sample: SyntheticSample) -> int:
    """Smallest integer b whose band contains the whole ground-truth path."""
    return math.ceil(path_deviation(sample))


def dataset_stats(dataset: Dataset) -> Dict[str, SplitStats]:
    stats = {}
    for name, samples in dataset.splits.items():
        if not samples:
            continue
        frames = np.array([s.S for s in samples])
        tokens = np.array([s.T for s in samples])
        stats[name] = SplitStats(
            count=len(samples),
            mean_frames=float(frames.mean()),
            min_frames=int(frames.min()),
            max_frames=int(frames.max()),
            mean_tokens=float(tokens.mean()),
            min_tokens=int(tokens.min()),
            max_tokens=int(tokens.max()),
        )
    return stats


# ===== SPLIT FILES =====
#
# magic "ATDS1", u32 + TaskConfig JSON, u32 + split name, u32 sample count, then per sample:
# u32 T, T x i64 token ids, u32 speaker, u32 S, u32 frame_dim, S*frame_dim x f64 frames,
# S x i64 alignment. Little-endian throughout.

def _write_sample(stream: BinaryIO, sample: SyntheticSample) -> None:
    stream.write(struct.pack("<I", sample.T))
    stream.write(np.ascontiguousarray(sample.phonemes, dtype="<i8").tobytes())
    stream.write(struct.pack("<III", sample.speaker, sample.S, sample.frames.shape[1]))
    stream.write(np.ascontiguousarray(sample.frames, dtype="<f8").tobytes())
    stream.write(np.ascontiguousarray(sample.alignment, dtype="<i8").tobytes())


def _read(stream: BinaryIO, size: int) -> bytes:
    chunk = stream.read(size)
    if len(chunk) != size:
        raise CheckpointError("dataset file is truncated")
    return chunk


def _read_sample(stream: BinaryIO) -> SyntheticSample:
    (length,) = struct.unpack("<I", _read(stream, 4))
    phonemes = np.frombuffer(_read(stream, 8 * length), dtype="<i8").astype(np.int64)
    speaker, frame_count, frame_dim = struct.unpack("<III", _read(stream, 12))
    frames = np.frombuffer(_read(stream, 8 * frame_count * frame_dim), dtype="<f8")
    frames = frames.astype(np.float64).reshape(frame_count, frame_dim)
    alignment = np.frombuffer(_read(stream, 8 * frame_count), dtype="<i8").astype(np.int64)
    return SyntheticSample(phonemes, speaker, frames, alignment)


def encode_split(config: TaskConfig, split: str, samples: List[SyntheticSample]) -> bytes:
    stream = io.BytesIO()
    stream.write(DATASET_MAGIC)
    for text in (config.model_dump_json(), split):
        encoded = text.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
    stream.write(struct.pack("<I", len(samples)))
    for sample in samples:
        _write_sample(stream, sample)
    return stream.getvalue()


def decode_split(blob: bytes) -> Tuple[TaskConfig, str, List[SyntheticSample]]:
    stream = io.BytesIO(blob)
    if _read(stream, len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise CheckpointError("not an ATDS1 dataset file")
    (size,) = struct.unpack("<I", _read(stream, 4))
    try:
        config = TaskConfig.model_validate_json(_read(stream, size))
    except ValidationError as exc:
        raise CheckpointError(f"dataset header is invalid: {exc}") from exc
    (size,) = struct.unpack("<I", _read(stream, 4))
    split = _read(stream, size).decode("utf-8")
    (count,) = struct.unpack("<I", _read(stream, 4))
    samples = [_read_sample(stream) for _ in range(count)]
    if stream.read(1):
        raise CheckpointError("trailing bytes after dataset payload")
    return config, split, samples


def save_split(config: TaskConfig, split: str, samples: List[SyntheticSample], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_split(config, split, samples))
    return path


def load_split(path: Path) -> Tuple[TaskConfig, str, List[SyntheticSample]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read dataset file {path}: {exc.strerror or exc}") from exc
    return decode_split(blob)


def save_dataset(dataset: Dataset, directory: Path) -> List[Path]:
    directory = Path(directory)
    written = [
        save_split(dataset.config, name, samples, directory / f"{name}{SPLIT_SUFFIX}")
        for name, samples in dataset.splits.items()
    ]
    logger.info("dataset written to %s", directory)
    return written


def load_dataset(directory: Path) -> Dataset:
    """Read every split file of a directory; all files must echo the same TaskConfig."""
    directory = Path(directory)
    files = sorted(directory.glob(f"*{SPLIT_SUFFIX}")) if directory.is_dir() else []
    if not files:
        raise CheckpointError(f"no dataset split files in {directory}")
    config = None
    splits: Dict[str, List[SyntheticSample]] = {}
    for path in files:
        split_config, split, samples = load_split(path)
        if config is not None and split_config != config:
            raise CheckpointError(f"{path.name} was generated from a different task config")
        config = split_config
        splits[split] = samples
    return Dataset(config=config, splits=splits)
