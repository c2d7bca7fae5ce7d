"""Synchronized WiFi-CSI / video data: on-disk format, protocol splits and a synthetic generator.

A dataset is a manifest (JSON) plus one binary file per recording. A recording is
one continuous stream of a single (activity, subject) pair in one environment.
Frame ``t`` of a recording owns CSI packets ``[P*t, P*t + P)``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DataLoadError, ValidationError

log = logging.getLogger(__name__)

CLIP_MAGIC = b"MI2MCLP1"
CLIP_VERSION = 1
MANIFEST_FORMAT = "mi2m-manifest"
MANIFEST_VERSION = 1

DEFAULT_CSI_SHAPE = (3, 114, 10)
DEFAULT_IMAGE_SHAPE = (3, 224, 224)
DEFAULT_SEQ_LEN = 8

_HEADER = struct.Struct("<8sI6IIII")


@dataclass(frozen=True)
class MultimodalFrame:
    csi: np.ndarray  # (A, S, P)
    image: np.ndarray  # (C, H, W), values in [0, 1]
    timestamp_index: int

    def validate(self, csi_shape=None, image_shape=None) -> None:
        if csi_shape is not None and tuple(self.csi.shape) != tuple(csi_shape):
            raise ValidationError(f"csi shape {tuple(self.csi.shape)} != expected {tuple(csi_shape)}")
        if image_shape is not None and tuple(self.image.shape) != tuple(image_shape):
            raise ValidationError(f"image shape {tuple(self.image.shape)} != expected {tuple(image_shape)}")
        if not np.all(np.isfinite(self.csi)):
            raise ValidationError("csi contains non-finite values")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValidationError("image values outside [0, 1]")


@dataclass
class Recording:
    """All frames of one recording, stored as stacked arrays."""

    csi: np.ndarray  # (T, A, S, P)
    images: np.ndarray  # (T, C, H, W)
    activity: int
    subject: int
    environment: str = ""
    start_index: int = 0
    name: str = ""

    def __len__(self) -> int:
        return self.csi.shape[0]

    def frame(self, t: int) -> MultimodalFrame:
        return MultimodalFrame(self.csi[t], self.images[t], self.start_index + t)

    def frames(self) -> list[MultimodalFrame]:
        return [self.frame(t) for t in range(len(self))]

    def csi_stream(self) -> np.ndarray:
        """CSI as one packet stream, shape (A, S, T*P)."""
        T, A, S, P = self.csi.shape
        return self.csi.transpose(1, 2, 0, 3).reshape(A, S, T * P)

    def slice(self, start: int, stop: int) -> "Recording":
        return replace(self, csi=self.csi[start:stop], images=self.images[start:stop], start_index=self.start_index + start)


def packet_range(t: int, packets_per_frame: int) -> range:
    """CSI packet indices owned by video frame ``t``."""
    return range(packets_per_frame * t, packets_per_frame * t + packets_per_frame)


@dataclass(frozen=True)
class ActivityClip:
    csi: np.ndarray  # (T, A, S, P)
    images: np.ndarray  # (T, C, H, W)
    activity: int
    subject: int
    environment: str
    start_index: int
    clip_id: str

    def __post_init__(self):
        if self.csi.shape[0] != self.images.shape[0]:
            raise ValidationError(f"clip {self.clip_id}: csi/video frame counts differ")

    @property
    def timestamps(self) -> list[int]:
        return list(range(self.start_index, self.start_index + len(self)))

    def __len__(self) -> int:
        return self.csi.shape[0]

    def frames(self) -> list[MultimodalFrame]:
        return [MultimodalFrame(self.csi[t], self.images[t], self.start_index + t) for t in range(len(self))]

    def label(self, task: str = "activity", num_subjects: int | None = None) -> int:
        if task == "activity":
            return self.activity
        if task == "joint":
            if num_subjects is None:
                raise ArgumentError("joint task needs num_subjects")
            return joint_label(self.activity, self.subject, num_subjects)
        raise ArgumentError(f"unknown task {task!r}")


def joint_label(activity: int, subject: int, num_subjects: int) -> int:
    return activity * num_subjects + subject


@dataclass
class ClipEntry:
    path: str
    activity: int
    subject: int
    environment: str
    num_frames: int


@dataclass
class DatasetManifest:
    root_path: Path
    shapes: tuple[int, int, int, int, int, int]
    num_activities: int
    num_subjects: int
    frame_rate_ratio: int
    split_seed: int = 0
    frame_rate: float = 100.0
    clips: list[ClipEntry] = field(default_factory=list)

    def __post_init__(self):
        self.shapes = tuple(int(s) for s in self.shapes)
        if len(self.shapes) != 6 or any(s <= 0 for s in self.shapes):
            raise ValidationError(f"declared shapes must be six positive integers, got {self.shapes}")
        if self.frame_rate_ratio != self.shapes[2]:
            raise ValidationError(
                f"frame_rate_ratio {self.frame_rate_ratio} must equal packets per frame {self.shapes[2]}"
            )

    @property
    def csi_shape(self) -> tuple[int, int, int]:
        return self.shapes[:3]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.shapes[3:]

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "shapes": list(self.shapes),
            "num_activities": self.num_activities,
            "num_subjects": self.num_subjects,
            "frame_rate_ratio": self.frame_rate_ratio,
            "frame_rate": self.frame_rate,
            "split_seed": self.split_seed,
            "clips": [
                {"path": c.path, "activity": c.activity, "subject": c.subject,
                 "environment": c.environment, "num_frames": c.num_frames}
                for c in self.clips
            ],
        }

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root_path / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# clip files


def write_clip(path, recording: Recording, csi_shape=None, image_shape=None) -> None:
    T = len(recording)
    csi_shape = tuple(csi_shape or recording.csi.shape[1:])
    image_shape = tuple(image_shape or recording.images.shape[1:])
    header = _HEADER.pack(CLIP_MAGIC, CLIP_VERSION, *csi_shape, *image_shape,
                          recording.activity, recording.subject, T)
    csi = np.ascontiguousarray(recording.csi, dtype="<f4").reshape(T, -1)
    img = np.ascontiguousarray(recording.images, dtype="<f4").reshape(T, -1)
    body = np.concatenate([csi, img], axis=1).tobytes()
    Path(path).write_bytes(header + body)


def read_clip(path, csi_shape=None, image_shape=None, environment: str = "") -> Recording:
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"clip file not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ValidationError(f"clip {path}: truncated header")
    magic, version, *rest = _HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise ValidationError(f"clip {path}: bad magic {magic!r}")
    if version != CLIP_VERSION:
        raise ValidationError(f"clip {path}: unsupported version {version}")
    file_csi, file_img = tuple(rest[0:3]), tuple(rest[3:6])
    activity, subject, T = rest[6:9]
    if csi_shape is not None and file_csi != tuple(csi_shape):
        raise ValidationError(f"clip {path}: csi shape expected {tuple(csi_shape)}, actual {file_csi}")
    if image_shape is not None and file_img != tuple(image_shape):
        raise ValidationError(f"clip {path}: image shape expected {tuple(image_shape)}, actual {file_img}")
    n_csi, n_img = math.prod(file_csi), math.prod(file_img)
    expected = _HEADER.size + 4 * T * (n_csi + n_img)
    if len(data) != expected:
        raise ValidationError(f"clip {path}: size {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(T, n_csi + n_img)
    csi = body[:, :n_csi].astype(np.float32).reshape(T, *file_csi)
    images = body[:, n_csi:].astype(np.float32).reshape(T, *file_img)
    return Recording(csi, images, int(activity), int(subject), environment, 0, path.stem)


# ---------------------------------------------------------------------------
# manifest / dataset


class Dataset:
    """A loaded manifest with lazily read recordings. Immutable after load."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[int, Recording] = {}

    def __len__(self) -> int:
        return len(self.manifest.clips)

    def recording(self, i: int) -> Recording:
        if i not in self._cache:
            entry = self.manifest.clips[i]
            rec = read_clip(self.manifest.root_path / entry.path, self.manifest.csi_shape,
                            self.manifest.image_shape, entry.environment)
            if rec.activity != entry.activity or rec.subject != entry.subject or len(rec) != entry.num_frames:
                raise ValidationError(f"clip {entry.path}: header labels/length disagree with manifest")
            self._cache[i] = rec
        return self._cache[i]

    def recordings(self) -> list[Recording]:
        return [self.recording(i) for i in range(len(self))]


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataLoadError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataLoadError(f"manifest {path} does not parse: {exc}") from exc
    if raw.get("format") != MANIFEST_FORMAT:
        raise DataLoadError(f"manifest {path}: not an {MANIFEST_FORMAT} file")
    try:
        manifest = DatasetManifest(
            root_path=path.parent,
            shapes=tuple(raw["shapes"]),
            num_activities=int(raw["num_activities"]),
            num_subjects=int(raw["num_subjects"]),
            frame_rate_ratio=int(raw["frame_rate_ratio"]),
            split_seed=int(raw.get("split_seed", 0)),
            frame_rate=float(raw.get("frame_rate", 100.0)),
            clips=[ClipEntry(**c) for c in raw["clips"]],
        )
    except (KeyError, TypeError) as exc:
        raise DataLoadError(f"manifest {path}: missing or malformed field ({exc})") from exc
    for entry in manifest.clips:
        if not (manifest.root_path / entry.path).exists():
            raise DataLoadError(f"manifest {path}: clip file not found: {manifest.root_path / entry.path}")
    return Dataset(manifest)


# ---------------------------------------------------------------------------
# protocol helpers


@dataclass
class FrameSet:
    """Contiguous per-recording frame ranges."""

    recordings: list[Recording]

    @property
    def num_frames(self) -> int:
        return sum(len(r) for r in self.recordings)

    def csi(self) -> np.ndarray:
        return np.concatenate([r.csi for r in self.recordings]) if self.recordings else np.zeros((0,))

    def images(self) -> np.ndarray:
        return np.concatenate([r.images for r in self.recordings]) if self.recordings else np.zeros((0,))

    def keys(self) -> set[tuple[str, int]]:
        return {(r.name, r.start_index + t) for r in self.recordings for t in range(len(r))}


def split_pretrain_test(dataset: Dataset | Sequence[Recording], pretrain_fraction: float = 0.8,
                        seed: int = 0) -> tuple[FrameSet, FrameSet]:
    """First floor(fraction * N_T) frames of each recording pretrain; the rest test.

    The split is contiguous, so ``seed`` never changes the result; it is accepted so
    callers can record it alongside the split.
    """
    if not 0.0 < pretrain_fraction < 1.0:
        raise ArgumentError(f"pretrain_fraction must be in (0, 1), got {pretrain_fraction}")
    recs = dataset.recordings() if isinstance(dataset, Dataset) else list(dataset)
    pre, test = [], []
    for rec in recs:
        cut = math.floor(Fraction(repr(float(pretrain_fraction))) * len(rec))
        pre.append(rec.slice(0, cut))
        test.append(rec.slice(cut, len(rec)))
    return FrameSet(pre), FrameSet(test)


def segment_clips(stream: Recording, seq_len: int = DEFAULT_SEQ_LEN) -> list[ActivityClip]:
    """Non-overlapping windows of ``seq_len`` frames; a short tail is dropped."""
    if seq_len < 1:
        raise ArgumentError(f"seq_len must be >= 1, got {seq_len}")
    clips = []
    for k in range(len(stream) // seq_len):
        a, b = k * seq_len, (k + 1) * seq_len
        start = stream.start_index + a
        clips.append(ActivityClip(stream.csi[a:b], stream.images[a:b], stream.activity, stream.subject,
                                  stream.environment, start, f"{stream.name}@{start}"))
    return clips


def segment_frame_set(frames: FrameSet, seq_len: int = DEFAULT_SEQ_LEN) -> list[ActivityClip]:
    return [c for rec in frames.recordings for c in segment_clips(rec, seq_len)]


@dataclass
class BudgetSelection:
    clips: list[ActivityClip]
    per_class: dict[int, int]
    warnings: list[str]


def select_finetune_budget(clips: Sequence[ActivityClip], seconds_per_class: float, frame_rate: float,
                           num_classes: int | None = None, task: str = "activity",
                           num_subjects: int | None = None) -> BudgetSelection:
    """Earliest clips per class until the class's raw frame budget is used up.

    "Earliest" orders clips by start frame, ties broken by input order, so a class
    recorded by several subjects draws from all of them round-robin. A class whose
    budget is smaller than one clip still gets its earliest clip.
    """
    if seconds_per_class <= 0:
        raise ArgumentError(f"seconds_per_class must be positive, got {seconds_per_class}")
    if frame_rate <= 0:
        raise ArgumentError(f"frame_rate must be positive, got {frame_rate}")
    max_frames = math.floor(seconds_per_class * frame_rate + 1e-9)
    order = sorted(range(len(clips)), key=lambda i: (clips[i].start_index, i))
    used: dict[int, int] = {}
    chosen: list[int] = []
    for i in order:
        y = clips[i].label(task, num_subjects)
        n = len(clips[i])
        have = used.get(y, 0)
        if have + n <= max_frames or have == 0:
            used[y] = have + n
            chosen.append(i)
    chosen.sort()
    selected = [clips[i] for i in chosen]
    per_class: dict[int, int] = {}
    for c in selected:
        y = c.label(task, num_subjects)
        per_class[y] = per_class.get(y, 0) + 1
    warnings = []
    if num_classes is not None:
        for k in range(num_classes):
            if k not in per_class:
                msg = f"class {k} has no clips"
                log.warning(msg)
                warnings.append(msg)
    return BudgetSelection(selected, dict(sorted(per_class.items())), warnings)


def darken(image, gamma: float = 3.0):
    """Low-light simulation: element-wise ``image ** gamma`` on values in [0, 1]."""
    if not gamma > 0:
        raise ArgumentError(f"gamma must be positive, got {gamma}")
    if gamma == 1:
        return image.copy() if hasattr(image, "copy") else image.clone()
    return image ** gamma


# ---------------------------------------------------------------------------
# CSI preprocessing


@dataclass
class CsiNormalizer:
    """Per (antenna pair, subcarrier) min-max scaling fitted on the pretraining split."""

    low: np.ndarray  # (A, S, 1)
    high: np.ndarray

    @classmethod
    def fit(cls, csi: np.ndarray) -> "CsiNormalizer":
        amp = np.abs(csi)
        low = amp.min(axis=(0, 3))[..., None]
        high = amp.max(axis=(0, 3))[..., None]
        return cls(low.astype(np.float32), high.astype(np.float32))

    def __call__(self, csi: np.ndarray) -> np.ndarray:
        span = np.maximum(self.high - self.low, 1e-6)
        return ((np.abs(csi) - self.low) / span).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class Environment:
    """Static scene properties: background brightness/texture and CSI multipath baseline."""

    name: str = "A"
    background: float = 0.2
    texture: float = 0.05
    csi_baseline: float = 0.5
    csi_multipath: float = 0.1
    layout_seed: int = 0
    # camera viewpoint: mirror the scene left-right
    mirror: bool = False
    # room geometry changes how motion modulates the channel: extra cycles across
    # the subcarrier axis and the phase step between antenna pairs
    csi_freq_shift: float = 0.0
    antenna_phase: float = math.pi / 3
    # sensor noise relative to SynthConfig.noise
    noise_scale: float = 1.0


ENVIRONMENTS = {
    "A": Environment("A", 0.2, 0.05, 0.5, 0.1, 11),
    "B": Environment("B", 0.45, 0.15, 0.4, 0.25, 23, mirror=True, antenna_phase=math.pi / 2, noise_scale=2.5),
}


@dataclass
class SynthConfig:
    root: Path
    num_activities: int = 6
    num_subjects: int = 4
    frames_per_recording: int = 100
    csi_shape: tuple[int, int, int] = DEFAULT_CSI_SHAPE
    image_shape: tuple[int, int, int] = DEFAULT_IMAGE_SHAPE
    noise: float = 0.05
    seed: int = 0
    environment: Environment = ENVIRONMENTS["A"]
    frame_rate: float = 100.0
    # radians of latent phase per video frame
    angular_speed: float = 2 * math.pi / 16

    def __post_init__(self):
        if isinstance(self.environment, str):
            if self.environment not in ENVIRONMENTS:
                raise ArgumentError(f"unknown environment {self.environment!r}; known: {sorted(ENVIRONMENTS)}")
            self.environment = ENVIRONMENTS[self.environment]

    def validate(self) -> None:
        if self.num_activities < 1 or self.num_subjects < 1 or self.frames_per_recording < 1:
            raise ArgumentError("activities, subjects and frames_per_recording must be >= 1")
        if self.noise < 0:
            raise ArgumentError(f"noise must be >= 0, got {self.noise}")
        if any(s <= 0 for s in (*self.csi_shape, *self.image_shape)):
            raise ArgumentError("shapes must be positive")


@dataclass(frozen=True)
class Motion:
    """Per (activity, subject) latent: the shared phase drives both modalities."""

    center: tuple[float, float]  # (x, y) as a fraction of image width/height
    radius: float  # trajectory radius, fraction of image size
    axis: str  # "circle", "horizontal" or "vertical"
    direction: int  # +1 / -1
    blob_size: float  # fraction of image size, subject dependent
    gain: float  # CSI modulation depth, subject dependent
    spatial_freq: int  # CSI cycles across the subcarrier axis
    phase0: float


def motion_for(activity: int, subject: int, num_activities: int, num_subjects: int) -> Motion:
    # Activities come in pairs sharing a location and differing in direction or axis,
    # so a single frame cannot always tell the pair apart.
    group = activity // 2
    n_groups = max(1, (num_activities + 1) // 2)
    ang = 2 * math.pi * group / n_groups
    center = (0.5 + 0.22 * math.cos(ang), 0.5 + 0.22 * math.sin(ang))
    kinds = ("circle", "circle", "horizontal", "vertical")
    axis = "circle" if group % 2 == 0 else kinds[2 + activity % 2]
    direction = 1 if activity % 2 == 0 else -1
    frac = subject / max(1, num_subjects - 1)
    return Motion(
        center=center,
        radius=0.14,
        axis=axis,
        direction=direction,
        blob_size=0.06 + 0.05 * frac,
        gain=0.6 + 0.4 * frac,
        spatial_freq=1 + group,
        phase0=0.7 * activity + 1.3 * subject,
    )


def latent_phase(motion: Motion, t: np.ndarray, angular_speed: float) -> np.ndarray:
    return motion.phase0 + motion.direction * angular_speed * np.asarray(t, dtype=np.float64)


def blob_position(motion: Motion, phase: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cx, cy = motion.center
    if motion.axis == "circle":
        return cx + motion.radius * np.cos(phase), cy + motion.radius * np.sin(phase)
    if motion.axis == "horizontal":
        return cx + motion.radius * np.cos(phase), np.full_like(phase, cy)
    return np.full_like(phase, cx), cy + motion.radius * np.sin(phase)


def _background(env: Environment, image_shape) -> np.ndarray:
    C, H, W = image_shape
    rng = np.random.default_rng(env.layout_seed)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    freq = rng.uniform(2, 5, size=2)
    tex = np.sin(2 * np.pi * freq[0] * xx) * np.cos(2 * np.pi * freq[1] * yy)
    tint = rng.uniform(0.8, 1.2, size=C)
    bg = env.background * tint[:, None, None] + env.texture * tex[None]
    return np.clip(bg, 0.0, 1.0)


def _csi_baseline(env: Environment, csi_shape) -> np.ndarray:
    A, S, _ = csi_shape
    rng = np.random.default_rng(env.layout_seed + 1)
    s = np.arange(S) / S
    paths = rng.uniform(0.5, 4.0, size=(A, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(A, 3))
    base = sum(np.cos(2 * np.pi * paths[:, k, None] * s[None] + phases[:, k, None]) for k in range(3)) / 3
    return env.csi_baseline + env.csi_multipath * base  # (A, S)


def render_recording(config: SynthConfig, activity: int, subject: int) -> Recording:
    """Render one recording. Deterministic in (config.seed, activity, subject, environment)."""
    A, S, P = config.csi_shape
    C, H, W = config.image_shape
    T = config.frames_per_recording
    motion = motion_for(activity, subject, config.num_activities, config.num_subjects)
    rng = np.random.default_rng([config.seed, activity, subject, config.environment.layout_seed])

    # images
    t = np.arange(T)
    phase = latent_phase(motion, t, config.angular_speed)
    bx, by = blob_position(motion, phase)
    if config.environment.mirror:
        bx = 1.0 - bx
    yy, xx = np.mgrid[0:H, 0:W]
    xx = (xx + 0.5) / W
    yy = (yy + 0.5) / H
    d2 = (xx[None] - bx[:, None, None]) ** 2 + (yy[None] - by[:, None, None]) ** 2
    blob = np.exp(-d2 / (2 * motion.blob_size**2))  # (T, H, W)
    color = np.array([0.95, 0.75, 0.55] + [0.8] * max(0, C - 3))[:C]
    bg = _background(config.environment, config.image_shape)
    images = bg[None] * (1 - blob[:, None]) + color[None, :, None, None] * blob[:, None]
    noise = config.noise * config.environment.noise_scale
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0)

    # CSI: packet p of frame t sits at fine time t + p/P on the same latent phase
    fine_t = t[:, None] + np.arange(P)[None] / P  # (T, P)
    fine_phase = latent_phase(motion, fine_t, config.angular_speed)  # (T, P)
    sc = np.arange(S) / S
    ant = np.arange(A) * config.environment.antenna_phase
    arg = (2 * np.pi * (motion.spatial_freq + config.environment.csi_freq_shift) * sc)[None, None, :, None] + ant[None, :, None, None] \
        + fine_phase[:, None, None, :]
    csi = _csi_baseline(config.environment, config.csi_shape)[None, :, :, None] + 0.3 * motion.gain * np.sin(arg)
    if noise > 0:
        csi = csi + noise * rng.standard_normal(csi.shape)

    name = f"{config.environment.name}_a{activity:02d}_s{subject:02d}"
    return Recording(csi.astype(np.float32), images.astype(np.float32), activity, subject,
                     config.environment.name, 0, name)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Write a synthetic dataset under ``config.root`` and return it loaded."""
    config.validate()
    root = Path(config.root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataLoadError(f"cannot write dataset to {root}: {exc}") from exc
    entries = []
    for a in range(config.num_activities):
        for s in range(config.num_subjects):
            rec = render_recording(config, a, s)
            fname = f"{rec.name}.clip"
            write_clip(root / fname, rec)
            entries.append(ClipEntry(fname, a, s, config.environment.name, len(rec)))
    manifest = DatasetManifest(
        root_path=root,
        shapes=(*config.csi_shape, *config.image_shape),
        num_activities=config.num_activities,
        num_subjects=config.num_subjects,
        frame_rate_ratio=config.csi_shape[2],
        split_seed=config.seed,
        frame_rate=config.frame_rate,
        clips=entries,
    )
    manifest.write()
    log.info("wrote %d recordings to %s", len(entries), root)
    return Dataset(manifest)


def recordings_by_label(recs: Iterable[Recording]) -> dict[tuple[int, int], Recording]:
    return {(r.activity, r.subject): r for r in recs}
