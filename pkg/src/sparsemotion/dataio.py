"""Motion clips: file format, resampling, windowing, synthetic data, label embeddings.

Motion file layout (version 1)
------------------------------
A UTF-8 header of ``key=value`` lines (values are JSON), terminated by a line
containing only ``---``, followed immediately by a little-endian float32
block::

    SPARSEMOTION-MOTION
    version=1
    fps=30.0
    n_frames=120
    n_joints=22
    label="walk"                  (or null)
    clip_id="walk_000"            (or null)
    skeleton="<16 hex chars>"     (or null)
    embedding_dim=512             (0 when neither embedding is present)
    has_text_embedding=true
    has_image_embedding=true
    ---
    local_rot        n_frames * n_joints * 6   (6D, column convention)
    root_translation n_frames * 3              (metres)
    text_embedding   embedding_dim             (only if present)
    image_embedding  embedding_dim             (only if present)

Velocities are never stored; they are derived per frame (metres/frame).
"""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InvalidFps, ParseError, ShapeError, VersionError
from .kinematics import (
    FullPose,
    SkeletonModel,
    default_skeleton,
    forward_kinematics,
    rot6d_decode,
    rot6d_encode,
    rot_x,
    rot_y,
    rot_z,
)

log = logging.getLogger(__name__)

MAGIC = "SPARSEMOTION-MOTION"
FORMAT_VERSION = 1
EMBED_DIM = 512
ACTION_CLASSES = ("walk", "squat", "wave", "kick", "idle")


@dataclass
class MotionClip:
    fps: float
    local_rot: np.ndarray  # (n_frames, J, 6)
    root_translation: np.ndarray  # (n_frames, 3)
    action_label: str | None = None
    text_embedding: np.ndarray | None = None
    image_embedding: np.ndarray | None = None
    clip_id: str | None = None

    def __post_init__(self):
        self.local_rot = np.asarray(self.local_rot, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.local_rot.ndim != 3 or self.local_rot.shape[2] != 6:
            raise ShapeError(f"local_rot must be (n_frames, J, 6), got {self.local_rot.shape}")
        if len(self.local_rot) < 1:
            raise DataError("a motion clip needs at least one frame")
        if self.root_translation.shape != (len(self.local_rot), 3):
            raise ShapeError(f"root_translation must be ({len(self.local_rot)}, 3), "
                             f"got {self.root_translation.shape}")
        for name in ("text_embedding", "image_embedding"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.ndim != 1 or abs(np.linalg.norm(v) - 1.0) > 1e-6:
                    raise DataError(f"{name} must be a unit-norm vector")
                setattr(self, name, v)

    @property
    def n_frames(self) -> int:
        return len(self.local_rot)

    @property
    def n_joints(self) -> int:
        return self.local_rot.shape[1]

    @property
    def has_embeddings(self) -> bool:
        return self.text_embedding is not None and self.image_embedding is not None

    def slice(self, start, stop, step=1) -> "MotionClip":
        return replace(self, local_rot=self.local_rot[start:stop:step].copy(),
                       root_translation=self.root_translation[start:stop:step].copy())

    def pose(self) -> FullPose:
        return FullPose(self.local_rot, self.root_translation)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.local_rot.tobytes())
        h.update(self.root_translation.tobytes())
        return h.hexdigest()[:16]


# ----------------------------------------------------------------------------
# file format


def save_motion(clip: MotionClip, path, skeleton_hash: str | None = None):
    path = Path(path)
    dim = len(clip.text_embedding) if clip.text_embedding is not None else (
        len(clip.image_embedding) if clip.image_embedding is not None else 0)
    header = {
        "version": FORMAT_VERSION,
        "fps": float(clip.fps),
        "n_frames": clip.n_frames,
        "n_joints": clip.n_joints,
        "label": clip.action_label,
        "clip_id": clip.clip_id,
        "skeleton": skeleton_hash,
        "embedding_dim": dim,
        "has_text_embedding": clip.text_embedding is not None,
        "has_image_embedding": clip.image_embedding is not None,
    }
    lines = [MAGIC] + [f"{k}={json.dumps(v)}" for k, v in header.items()] + ["---", ""]
    parts = [clip.local_rot.ravel(), clip.root_translation.ravel()]
    for v in (clip.text_embedding, clip.image_embedding):
        if v is not None:
            parts.append(v)
    block = np.concatenate(parts).astype("<f4").tobytes()
    path.write_bytes("\n".join(lines).encode() + block)
    return path


def load_motion(path) -> MotionClip:
    path = Path(path)
    raw = path.read_bytes()
    marker = b"\n---\n"
    end = raw.find(marker)
    if end < 0:
        raise ParseError(f"{path}: header terminator '---' not found")
    lines = raw[:end].decode("utf-8", errors="replace").split("\n")
    if lines[0] != MAGIC:
        raise ParseError(f"{path}:1: expected {MAGIC!r}, found {lines[0][:40]!r}")
    header = {}
    for lineno, line in enumerate(lines[1:], start=2):
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected key=value, found {line[:40]!r}")
        try:
            header[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            raise ParseError(f"{path}:{lineno}: value for {key.strip()!r} is not valid JSON") from None
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported motion format version {header.get('version')!r}")
    try:
        n, j, dim = int(header["n_frames"]), int(header["n_joints"]), int(header["embedding_dim"])
        fps = float(header["fps"])
    except KeyError as exc:
        raise ParseError(f"{path}: header missing key {exc.args[0]!r}") from None
    if n < 1:
        raise ParseError(f"{path}: n_frames must be >= 1, got {n}")
    n_emb = int(bool(header.get("has_text_embedding"))) + int(bool(header.get("has_image_embedding")))
    expected = n * j * 6 + n * 3 + n_emb * dim
    offset = end + len(marker)
    block = raw[offset:]
    if len(block) != expected * 4:
        raise ParseError(f"{path}: byte offset {offset}: data block has {len(block)} bytes, "
                         f"expected {expected * 4}")
    flat = np.frombuffer(block, dtype="<f4").astype(np.float64)
    rot = flat[: n * j * 6].reshape(n, j, 6)
    trans = flat[n * j * 6: n * j * 6 + n * 3].reshape(n, 3)
    rest = flat[n * j * 6 + n * 3:]
    text = image = None
    if header.get("has_text_embedding"):
        text, rest = rest[:dim], rest[dim:]
    if header.get("has_image_embedding"):
        image = rest[:dim]
    try:
        return MotionClip(fps, rot, trans, header.get("label"), _unit(text), _unit(image),
                          header.get("clip_id"))
    except (DataError, ShapeError) as exc:
        raise ParseError(f"{path}: {exc}") from None


def _unit(v):
    # float32 storage perturbs the norm at the 1e-8 level; renormalise in float64
    return None if v is None else v / np.linalg.norm(v)


def load_motion_dir(path) -> list[MotionClip]:
    files = sorted(Path(path).glob("*.motion"))
    if not files:
        raise DataError(f"no .motion files found in {path}")
    return [load_motion(f) for f in files]


def export_positions_csv(positions, path, fps=30.0):
    """Per-frame global joint positions as CSV (for plotting only)."""
    n, j, _ = positions.shape
    cols = ["frame", "time_s"] + [f"j{k}_{a}" for k in range(j) for a in "xyz"]
    rows = np.column_stack([np.arange(n), np.arange(n) / fps, positions.reshape(n, -1)])
    np.savetxt(path, rows, delimiter=",", header=",".join(cols), comments="", fmt="%.6f")


# ----------------------------------------------------------------------------
# resampling and windowing


def downsample(clip: MotionClip, target_fps=30.0) -> MotionClip:
    """Integer-stride decimation, ``stride = round(fps / target_fps)``; no interpolation."""
    if clip.fps < target_fps:
        raise InvalidFps(f"clip fps {clip.fps} is below target {target_fps}")
    stride = max(1, int(round(clip.fps / target_fps)))
    out = clip.slice(0, None, stride)
    out.fps = clip.fps / stride
    return out


@dataclass
class Window:
    clip: MotionClip
    source: int
    start: int


@dataclass
class WindowedDataset:
    windows: list[Window]
    T: int
    skipped: int = 0

    def __len__(self):
        return len(self.windows)


def make_windows(clips, T, stride=1) -> WindowedDataset:
    """Every length-``T`` slice starting at multiples of ``stride`` within each clip."""
    if T < 1 or stride < 1:
        raise ConfigError(f"window length and stride must be >= 1 (got T={T}, stride={stride})")
    windows, skipped = [], 0
    for i, clip in enumerate(clips):
        if clip.n_frames < T:
            skipped += 1
            continue
        for s in range(0, clip.n_frames - T + 1, stride):
            windows.append(Window(clip.slice(s, s + T), i, s))
    if skipped:
        log.warning("make_windows: skipped %d clip(s) shorter than %d frames", skipped, T)
    return WindowedDataset(windows, T, skipped)


# ----------------------------------------------------------------------------
# label embeddings


@dataclass
class EmbeddingTable:
    text: dict[str, np.ndarray]
    image: dict[str, np.ndarray]
    seed: int | None = None

    @property
    def labels(self):
        return sorted(self.text)

    def lookup(self, label):
        if label not in self.text:
            raise DataError(f"label {label!r} not in embedding table")
        return self.text[label], self.image[label]

    def to_dict(self):
        return {"seed": self.seed, "dim": len(next(iter(self.text.values()))) if self.text else 0,
                "labels": {k: {"text": self.text[k].tolist(), "image": self.image[k].tolist()}
                           for k in self.labels}}


def build_embedding_table(labels, seed, dim=EMBED_DIM, spread=0.2, max_cos=0.5) -> EmbeddingTable:
    """Deterministic stand-in for frozen text/image projections.

    Each label gets a random unit base vector; its text and image vectors are
    the base plus independent perturbations of norm ``spread``, renormalised,
    so the two modalities stay near-aligned (cosine about 0.96). Labels whose
    base collides with an earlier one (cosine >= ``max_cos``) are resampled.
    """
    labels = sorted(set(labels))
    if not labels:
        raise ConfigError("embedding table needs at least one label")
    text, image, bases = {}, {}, []
    for label in labels:
        for attempt in range(1000):
            rng = np.random.default_rng([seed, zlib.crc32(label.encode()), attempt])
            base = _normed(rng.standard_normal(dim))
            if all(abs(base @ b) < max_cos for b in bases):
                break
        else:
            raise ConfigError(f"could not place label {label!r} below cosine {max_cos}")
        bases.append(base)
        text[label] = _normed(base + spread * _normed(rng.standard_normal(dim)))
        image[label] = _normed(base + spread * _normed(rng.standard_normal(dim)))
    return EmbeddingTable(text, image, seed)


def _normed(v):
    return v / np.linalg.norm(v)


def save_embedding_table(table: EmbeddingTable, path):
    Path(path).write_text(json.dumps(table.to_dict()))


def load_embedding_table(path) -> EmbeddingTable:
    try:
        d = json.loads(Path(path).read_text())
        text = {k: np.asarray(v["text"], dtype=np.float64) for k, v in d["labels"].items()}
        image = {k: np.asarray(v["image"], dtype=np.float64) for k, v in d["labels"].items()}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed embedding table ({exc})") from None
    for k in text:
        for v in (text[k], image[k]):
            if abs(np.linalg.norm(v) - 1) > 1e-6:
                raise DataError(f"{path}: embedding for {k!r} is not unit norm")
    return EmbeddingTable(text, image, d.get("seed"))


def attach_embeddings(clips, table: EmbeddingTable):
    """Replace each clip's stored embeddings with the table's entry for its label."""
    out = []
    for c in clips:
        t, i = table.lookup(c.action_label)
        out.append(replace(c, text_embedding=t, image_embedding=i))
    return out


# ----------------------------------------------------------------------------
# synthetic motion


@dataclass
class SynthConfig:
    classes: dict[str, int] = field(default_factory=lambda: {c: 10 for c in ACTION_CLASSES})
    duration_s: float = 4.0
    fps: float = 30.0
    start_offset_m: float = 0.25
    embedding_seed: int = 0
    test_per_class: int = 0

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config key(s): {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        bad = set(self.classes) - set(ACTION_CLASSES)
        if bad:
            raise ConfigError(f"unknown action class(es) {sorted(bad)}; allowed: {list(ACTION_CLASSES)}")
        if any(int(n) < 0 for n in self.classes.values()):
            raise ConfigError("class counts must be non-negative")
        if self.duration_s <= 0 or self.fps <= 0:
            raise ConfigError("duration_s and fps must be positive")
        if self.start_offset_m < 0:
            raise ConfigError("start_offset_m must be non-negative")
        if self.test_per_class < 0:
            raise ConfigError("test_per_class must be non-negative")


STANDING_HEIGHT = 0.93  # pelvis height that puts the shipped skeleton's feet near y = 0


def synth_generate(config: SynthConfig, seed: int, skeleton: SkeletonModel | None = None, split="train"):
    """Deterministic synthetic clips, one periodic motion family per class.

    ``split="test"`` yields ``test_per_class`` further clips per class, drawn
    with clip indices after the training ones so the two never coincide.
    """
    config.validate()
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    skeleton = skeleton or default_skeleton()
    if skeleton.n_joints != 22:
        raise ConfigError("the synthetic generator drives the 22-joint body model")
    table = build_embedding_table(list(config.classes), config.embedding_seed)
    n = max(1, int(round(config.duration_s * config.fps)))
    t = np.arange(n) / config.fps
    clips = []
    for label in sorted(config.classes):
        n_train = int(config.classes[label])
        ks = range(n_train) if split == "train" else range(n_train, n_train + config.test_per_class)
        for k in ks:
            rng = np.random.default_rng([seed, zlib.crc32(label.encode()), k])
            rot, trans = _CLASS_MOTION[label](t, rng)
            off = rng.uniform(-config.start_offset_m, config.start_offset_m, size=2)
            trans[:, 0] += off[0]
            trans[:, 2] += off[1]
            text, image = table.lookup(label)
            clips.append(MotionClip(config.fps, rot6d_encode(rot), trans, label, text, image,
                                    f"{label}_{k:03d}"))
    return clips


def _base_pose(n):
    """Arms lowered from the T-pose; everything else at rest."""
    R = np.tile(np.eye(3), (n, 22, 1, 1))
    R[:, 16] = rot_z(np.full(n, -1.2))
    R[:, 17] = rot_z(np.full(n, 1.2))
    return R


def _params(rng):
    amp = rng.uniform(0.8, 1.2)
    freq = rng.uniform(0.85, 1.15)
    phase = rng.uniform(0, 2 * np.pi)
    return amp, freq, phase


def _idle(t, rng):
    amp, freq, phase = _params(rng)
    w = 2 * np.pi * 0.25 * freq * t + phase
    R = _base_pose(len(t))
    R[:, 3] = rot_z(0.01 * amp * np.sin(w))
    R[:, 1] = rot_x(-0.005 * amp * np.sin(w))
    R[:, 2] = rot_x(-0.005 * amp * np.sin(w + 0.5))
    R[:, 4] = rot_x(0.005 * amp * (1 + np.sin(w)))
    R[:, 5] = rot_x(0.005 * amp * (1 + np.sin(w + 0.5)))
    R[:, 15] = rot_y(0.02 * amp * np.sin(0.5 * w))
    trans = np.zeros((len(t), 3))
    trans[:, 1] = STANDING_HEIGHT
    return R, trans


def _walk(t, rng):
    amp, freq, phase = _params(rng)
    w = 2 * np.pi * 0.9 * freq * t + phase
    R = _base_pose(len(t))
    swing = 0.45 * amp * np.sin(w)
    R[:, 0] = rot_y(0.08 * np.sin(w))
    R[:, 1] = rot_x(-swing)
    R[:, 2] = rot_x(swing)
    R[:, 4] = rot_x(0.7 * amp * np.maximum(0, np.sin(w + 1.2)) + 0.05)
    R[:, 5] = rot_x(0.7 * amp * np.maximum(0, np.sin(w + np.pi + 1.2)) + 0.05)
    R[:, 7] = rot_x(-0.2 * np.sin(w + 0.5))
    R[:, 8] = rot_x(0.2 * np.sin(w + 0.5))
    R[:, 3] = rot_x(np.full(len(t), 0.08))
    R[:, 16] = rot_z(np.full(len(t), -1.2)) @ rot_y(0.35 * amp * np.sin(w))
    R[:, 17] = rot_z(np.full(len(t), 1.2)) @ rot_y(0.35 * amp * np.sin(w))
    R[:, 18] = rot_y(np.full(len(t), 0.3))
    R[:, 19] = rot_y(np.full(len(t), -0.3))
    trans = np.zeros((len(t), 3))
    speed = 1.0 * amp * freq
    trans[:, 2] = speed * t
    trans[:, 1] = STANDING_HEIGHT - 0.03 + 0.02 * np.cos(2 * w)
    return R, trans


def _squat(t, rng):
    amp, freq, phase = _params(rng)
    w = 2 * np.pi * 0.45 * freq * t + phase
    s = 0.5 * (1 - np.cos(w)) * amp
    R = _base_pose(len(t))
    R[:, 1] = rot_x(-1.2 * s)
    R[:, 2] = rot_x(-1.2 * s)
    R[:, 4] = rot_x(1.9 * s)
    R[:, 5] = rot_x(1.9 * s)
    R[:, 7] = rot_x(-0.6 * s)
    R[:, 8] = rot_x(-0.6 * s)
    R[:, 3] = rot_x(0.35 * s)
    R[:, 15] = rot_x(-0.2 * s)
    # arms held forward for balance
    R[:, 16] = rot_z(np.full(len(t), -1.2)) @ rot_y(-1.2 * s)
    R[:, 17] = rot_z(np.full(len(t), 1.2)) @ rot_y(1.2 * s)
    trans = np.zeros((len(t), 3))
    trans[:, 1] = STANDING_HEIGHT - 0.32 * s
    trans[:, 2] = -0.18 * s
    return R, trans


def _wave(t, rng):
    amp, freq, phase = _params(rng)
    w = 2 * np.pi * 1.4 * freq * t + phase
    R = _base_pose(len(t))
    # right arm raised, forearm swinging side to side
    R[:, 17] = rot_z(np.full(len(t), -0.3))
    R[:, 19] = rot_z(-1.2 + 0.5 * amp * np.sin(w))
    R[:, 21] = rot_z(0.2 * np.sin(w + 0.4))
    R[:, 3] = rot_z(0.03 * np.sin(w))
    R[:, 15] = rot_y(0.1 * np.sin(0.3 * w))
    trans = np.zeros((len(t), 3))
    trans[:, 1] = STANDING_HEIGHT
    return R, trans


def _kick(t, rng):
    amp, freq, phase = _params(rng)
    w = 2 * np.pi * 0.5 * freq * t + phase
    k = np.maximum(0, np.sin(w)) ** 2 * amp
    chamber = np.maximum(0, np.sin(w - 0.6)) ** 2
    R = _base_pose(len(t))
    R[:, 2] = rot_x(-1.3 * k)
    R[:, 5] = rot_x(1.4 * chamber * (1 - 0.6 * k))
    R[:, 8] = rot_x(0.4 * k)
    R[:, 1] = rot_x(0.1 * k)
    R[:, 4] = rot_x(0.15 * k)
    # counter-balance: lean back, arms out
    R[:, 3] = rot_x(-0.2 * k)
    R[:, 16] = rot_z(-1.2 + 0.5 * k)
    R[:, 17] = rot_z(1.2 - 0.5 * k)
    trans = np.zeros((len(t), 3))
    trans[:, 1] = STANDING_HEIGHT - 0.03 * k
    return R, trans


_CLASS_MOTION = {"idle": _idle, "walk": _walk, "squat": _squat, "wave": _wave, "kick": _kick}


def clip_positions(skeleton: SkeletonModel, clip: MotionClip, relative=False):
    """FK positions ``(n_frames, J, 3)``; ``relative`` drops the root translation."""
    trans = np.zeros_like(clip.root_translation) if relative else clip.root_translation
    pos, _ = forward_kinematics(skeleton, FullPose(clip.local_rot, trans))
    return pos


def validate_clip_rotations(clip: MotionClip):
    """Raises DegenerateInput if any stored rotation cannot be decoded."""
    rot6d_decode(clip.local_rot)
