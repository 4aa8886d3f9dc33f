"""Video clips -> aligned face crops -> per-frame style latents, plus the on-disk latent cache."""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np

from .errors import (
    ClipLengthError,
    CorruptCacheError,
    DimensionMismatchError,
    EncoderFailure,
    FaceNotFoundError,
    ShapeError,
)

NUM_LEVELS = 18
NUM_CHANNELS = 512
LATENT_DIM = NUM_LEVELS * NUM_CHANNELS
CLIP_LENGTH = 32
LATENT_CROP = 256
CONTENT_CROP = 224


class Label(enum.IntEnum):
    REAL = 0
    FAKE = 1
    UNLABELED = 2

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, str):
            return cls[value.strip().upper()]
        return cls(int(value))


@dataclass(frozen=True)
class VideoClip:
    frames: Sequence[np.ndarray]
    source_id: str
    start_frame: int = 0
    label: Label = Label.UNLABELED


@dataclass(frozen=True)
class Detection:
    box: tuple[int, int, int, int]  # x0, y0, x1, y1
    landmarks: np.ndarray  # (5, 2) pixel coordinates


@dataclass(frozen=True)
class FaceClip:
    faces256: np.ndarray | None  # (l, 256, 256, 3) uint8, latent path; None for content-only clips
    faces224: np.ndarray  # (l, 224, 224, 3) uint8, content path
    alignment_meta: tuple[Detection, ...] = ()
    label: Label = Label.UNLABELED
    source_id: str = ""

    def __len__(self):
        return len(self.faces224)


@dataclass(frozen=True)
class StyleLatentSequence:
    latents: np.ndarray  # (l, 18, 512)
    source_id: str = ""
    label: Label = Label.UNLABELED

    def __post_init__(self):
        lat = self.latents
        # level slices (coarse/middle/fine) keep fewer than 18 levels
        if lat.ndim != 3 or lat.shape[2] != NUM_CHANNELS or not 1 <= lat.shape[1] <= NUM_LEVELS:
            raise ShapeError(f"latents must be (l, <={NUM_LEVELS}, {NUM_CHANNELS}), got {lat.shape}")
        if not np.all(np.isfinite(lat)):
            raise ValueError("latents contain non-finite values")

    def __len__(self):
        return len(self.latents)

    def window(self, start: int, length: int) -> "StyleLatentSequence":
        return StyleLatentSequence(self.latents[start:start + length], self.source_id, self.label)


class FaceDetector(Protocol):
    """Anything that maps an RGB frame to a face box and landmarks, or None."""

    def detect(self, image: np.ndarray) -> Detection | None: ...


class InversionEncoder(Protocol):
    """Maps one 256x256x3 uint8 face crop to an (18, 512) style latent."""

    fingerprint: str

    def encode(self, image: np.ndarray) -> np.ndarray: ...


class CenterCropDetector:
    """Stand-in detector: the largest centered square, with canonical 5-point landmarks."""

    # eyes, nose tip, mouth corners as fractions of the crop box
    _CANONICAL = np.array(
        [[0.35, 0.40], [0.65, 0.40], [0.50, 0.58], [0.38, 0.75], [0.62, 0.75]]
    )

    def detect(self, image):
        h, w = image.shape[:2]
        side = min(h, w)
        y0 = (h - side) // 2
        x0 = (w - side) // 2
        landmarks = self._CANONICAL * side + np.array([x0, y0])
        return Detection((x0, y0, x0 + side, y0 + side), landmarks)


def _crop_resize(image, box, size):
    x0, y0, x1, y1 = box
    crop = image[max(y0, 0):y1, max(x0, 0):x1]
    if crop.size == 0:
        raise DimensionMismatchError(f"empty crop for box {box}")
    return cv2.resize(crop, (size, size), interpolation=cv2.INTER_AREA)


def detect_and_align(video: VideoClip, detector: FaceDetector, clip_length: int = CLIP_LENGTH) -> FaceClip:
    frames = list(video.frames)
    if not frames:
        raise ClipLengthError("video has no frames")
    if len(frames) != clip_length:
        raise ClipLengthError(f"expected {clip_length} frames, got {len(frames)}")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise DimensionMismatchError("frames do not share identical dimensions")

    big, small, meta = [], [], []
    for i, frame in enumerate(frames):
        det = detector.detect(frame)
        if det is None:
            raise FaceNotFoundError(i)
        big.append(_crop_resize(frame, det.box, LATENT_CROP))
        small.append(_crop_resize(frame, det.box, CONTENT_CROP))
        meta.append(det)
    return FaceClip(
        faces256=np.stack(big).astype(np.uint8),
        faces224=np.stack(small).astype(np.uint8),
        alignment_meta=tuple(meta),
        label=video.label,
        source_id=video.source_id,
    )


class MockLinearEncoder:
    """Seeded linear projection of an 8x8 grayscale thumbnail to 18x512, plus per-level offsets.

    Cheap stand-in for a GAN-inversion encoder; deterministic for a fixed seed.
    """

    name = "mock-linear-v1"

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((64, LATENT_DIM)) / 8.0
        self.level_offsets = rng.standard_normal(NUM_LEVELS)
        self.fingerprint = encoder_fingerprint(self.name, seed)

    def thumbnail(self, image):
        gray = image.astype(np.float64).mean(axis=2) / 255.0
        h, w = gray.shape
        return gray.reshape(8, h // 8, 8, w // 8).mean(axis=(1, 3))

    def encode(self, image):
        if image.shape != (LATENT_CROP, LATENT_CROP, 3):
            raise ShapeError(f"encoder expects {LATENT_CROP}x{LATENT_CROP}x3, got {image.shape}")
        flat = self.thumbnail(image).ravel() @ self.weight
        out = flat.reshape(NUM_LEVELS, NUM_CHANNELS) + self.level_offsets[:, None]
        return out.astype(np.float32)


def encoder_fingerprint(name: str, seed: int) -> str:
    return hashlib.sha256(f"{name}:seed={seed}".encode()).hexdigest()[:32]


def extract_style_latents(clip: FaceClip, encoder: InversionEncoder) -> StyleLatentSequence:
    faces = clip.faces256
    got = None if faces is None else faces.shape[1:]
    if got != (LATENT_CROP, LATENT_CROP, 3):
        raise ShapeError(f"latent-path crops must be {LATENT_CROP}x{LATENT_CROP}x3, got {got}")
    out = np.empty((len(faces), NUM_LEVELS, NUM_CHANNELS), dtype=np.float32)
    for i, face in enumerate(faces):
        try:
            latent = np.asarray(encoder.encode(face), dtype=np.float32)
        except Exception as exc:
            raise EncoderFailure(i, exc) from exc
        if latent.shape != (NUM_LEVELS, NUM_CHANNELS):
            raise EncoderFailure(i, f"bad latent shape {latent.shape}")
        out[i] = latent
    return StyleLatentSequence(out, clip.source_id, clip.label)


def clip_starts(n_frames: int, clip_length: int = CLIP_LENGTH, stride: int | None = None) -> list[int]:
    """Window start indices; non-overlapping when stride is None."""
    stride = stride or clip_length
    if n_frames < clip_length:
        return []
    return list(range(0, n_frames - clip_length + 1, stride))


def read_frame_dir(path) -> list[np.ndarray]:
    """Load every .png/.jpg in a directory (sorted by name) as RGB uint8."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    frames = []
    for p in files:
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)
        if img is None:
            raise DimensionMismatchError(f"unreadable frame {p}")
        frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    return frames


# ---- cache -----------------------------------------------------------------

CACHE_MAGIC = b"SLF1"
_HEADER = struct.Struct("<4sIHHBB2x16s32s")  # 64 bytes
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class LatentCacheHeader:
    source_id: str
    frame_count: int
    label: Label
    encoder_fingerprint: str
    level_count: int = NUM_LEVELS
    channel_count: int = NUM_CHANNELS

    def pack(self) -> bytes:
        sid = self.source_id.encode("utf-8")
        if len(sid) > 32:
            raise ValueError(f"source_id longer than 32 bytes: {self.source_id!r}")
        return _HEADER.pack(
            CACHE_MAGIC, self.frame_count, self.level_count, self.channel_count,
            int(self.label), len(sid), bytes.fromhex(self.encoder_fingerprint.ljust(32, "0")), sid,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "LatentCacheHeader":
        if len(raw) < HEADER_SIZE:
            raise CorruptCacheError("truncated header")
        magic, frames, levels, channels, label, sid_len, fp, sid = _HEADER.unpack(raw[:HEADER_SIZE])
        if magic != CACHE_MAGIC:
            raise CorruptCacheError(f"bad magic {magic!r}")
        if (levels, channels) != (NUM_LEVELS, NUM_CHANNELS):
            raise CorruptCacheError(f"unexpected latent layout {levels}x{channels}")
        try:
            label = Label(label)
        except ValueError as exc:
            raise CorruptCacheError(f"bad label byte {label}") from exc
        return cls(sid[:sid_len].decode("utf-8"), frames, label, fp.hex(), levels, channels)


@dataclass
class LatentCache:
    """Reads and writes one latent sequence per file under ``root``."""

    root: Path
    fingerprint: str = field(default="0" * 32)

    def __post_init__(self):
        self.root = Path(self.root)

    def path_for(self, source_id: str) -> Path:
        return self.root / f"{source_id}.slf"

    def store(self, seq: StyleLatentSequence) -> Path:
        return cache_store(seq, self.path_for(seq.source_id), self.fingerprint)

    def load(self, source_id: str) -> StyleLatentSequence:
        return cache_load(self.path_for(source_id))

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.slf"))


def cache_store(seq: StyleLatentSequence, path, fingerprint: str = "0" * 32) -> Path:
    if seq.latents.shape[1] != NUM_LEVELS:
        raise ShapeError("only full 18-level sequences can be cached")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = LatentCacheHeader(seq.source_id, len(seq), seq.label, fingerprint)
    payload = np.ascontiguousarray(seq.latents, dtype="<f4").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.pack())
        fh.write(payload)
    tmp.replace(path)
    return path


def read_cache_header(path) -> LatentCacheHeader:
    with open(path, "rb") as fh:
        return LatentCacheHeader.unpack(fh.read(HEADER_SIZE))


def cache_load(path) -> StyleLatentSequence:
    raw = Path(path).read_bytes()
    header = LatentCacheHeader.unpack(raw)
    expected = header.frame_count * LATENT_DIM * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise CorruptCacheError(
            f"payload is {len(payload)} bytes, header promises {header.frame_count} frames ({expected} bytes)"
        )
    latents = np.frombuffer(payload, dtype="<f4").reshape(header.frame_count, NUM_LEVELS, NUM_CHANNELS)
    return StyleLatentSequence(latents.astype(np.float32), header.source_id, header.label)
