"""Frame ingestion, cuboid sampling and the synthetic scene generator."""
from __future__ import annotations

import csv
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, IoError, NoData, SpecError

RAW_DATA = "frames.u8"
RAW_META = "frames.json"
PGM_NAME = "{:06d}.pgm"


@dataclass
class FrameSequence:
    frames: np.ndarray  # [N, H, W], values in [0, 1]
    ids: np.ndarray = None
    fps: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise FormatError(f"frames must be [N, H, W], got {self.frames.shape}")
        if self.ids is None:
            self.ids = np.arange(len(self.frames))
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) != len(self.frames):
            raise FormatError("one id per frame required")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


@dataclass
class Cuboid:
    data: np.ndarray  # [T, H, W]
    start: int | None
    temporal_stride: int = 1
    source: int = 0

    @property
    def frame_indices(self) -> list[int]:
        if self.start is None:
            return []
        return [self.start + j * self.temporal_stride for j in range(len(self.data))]


@dataclass
class SamplingConfig:
    T: int = 10
    sample_stride: int = 2
    strides_enabled: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if self.T < 1 or self.sample_stride < 1:
            raise ValueError(f"invalid sampling config {self}")
        self.strides_enabled = tuple(sorted(set(self.strides_enabled)))
        if not self.strides_enabled or any(d < 1 for d in self.strides_enabled):
            raise ValueError("temporal strides must be >= 1")


# -- image IO ------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Decode a binary 8-bit PGM (P5) into a uint8 array."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            if fh.read(2) != b"P5":
                raise IoError(f"{path.name}: not a binary PGM (P5) file")
        with Image.open(path) as im:
            if im.mode != "L":
                raise IoError(f"{path.name}: expected 8-bit grayscale, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(f"{path.name}: {exc}") from exc


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [0, 1] image as P5, values scaled by 255 and rounded."""
    Image.fromarray(to_u8(img), mode="L").save(path, format="PPM")


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = size
    if (oh, ow) == (h, w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    rows = img[y0] * (1 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def _frame_number(name: str) -> int:
    m = re.fullmatch(r"(\d+)\.pgm", name)
    if not m:
        raise IoError(f"{name}: frame files must be named %06d.pgm")
    return int(m.group(1))


def load_frames(path, resize: tuple[int, int] | None = None, threads: int = 1) -> FrameSequence:
    """Load a directory of ``%06d.pgm`` frames or a raw ``frames.u8`` + ``frames.json`` pair."""
    path = Path(path)
    if path.is_file() and path.name == RAW_DATA:
        path = path.parent
    if not path.is_dir():
        raise IoError(f"{path}: no such frame directory")
    if (path / RAW_META).exists():
        raw, ids = _load_raw(path), None
    else:
        files = sorted(p for p in path.iterdir() if p.suffix == ".pgm")
        if not files:
            raise NoData(f"{path}: no PGM frames found")
        ids = [_frame_number(p.name) for p in files]
        order = np.argsort(ids, kind="stable")
        files = [files[i] for i in order]
        ids = [ids[i] for i in order]
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                imgs = list(pool.map(read_pgm, files))
        else:
            imgs = [read_pgm(f) for f in files]
        shapes = {im.shape for im in imgs}
        if len(shapes) != 1 and resize is None:
            raise FormatError(f"{path}: frames have differing sizes {sorted(shapes)}")
        raw = imgs
    frames = [np.asarray(f, dtype=np.float64) / 255.0 for f in raw]
    if resize is not None:
        frames = [resize_bilinear(f, resize) for f in frames]
    return FrameSequence(np.stack(frames), ids)


def _load_raw(path: Path) -> np.ndarray:
    try:
        meta = json.loads((path / RAW_META).read_text())
        h, w, n = int(meta["height"]), int(meta["width"]), int(meta["count"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise IoError(f"{RAW_META}: {exc}") from exc
    try:
        buf = (path / RAW_DATA).read_bytes()
    except OSError as exc:
        raise IoError(f"{RAW_DATA}: {exc}") from exc
    if len(buf) != h * w * n:
        raise FormatError(f"{RAW_DATA}: {len(buf)} bytes, header promises {n}x{h}x{w}")
    return np.frombuffer(buf, dtype=np.uint8).reshape(n, h, w)


def save_frames(seq: FrameSequence, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in zip(seq.ids, seq.frames):
        write_pgm(out_dir / PGM_NAME.format(int(i)), frame)


def save_raw(seq: FrameSequence, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RAW_DATA).write_bytes(to_u8(seq.frames).tobytes())
    h, w = seq.shape
    (out_dir / RAW_META).write_text(json.dumps({"height": h, "width": w, "count": len(seq)}))


def write_labels(path, labels: Sequence[int], ids: Sequence[int] | None = None) -> None:
    ids = range(len(labels)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "label"])
        for i, lab in zip(ids, labels):
            wr.writerow([int(i), int(lab)])


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = np.array([int(r["frame"]) for r in rows], dtype=np.int64)
        labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    except (OSError, KeyError, ValueError) as exc:
        raise IoError(f"{Path(path).name}: {exc}") from exc
    return ids, labels


# -- cuboids ---------------------------------------------------------------------

def cuboid_count(length: int, T: int, d: int, sample_stride: int) -> int:
    span = length - (T - 1) * d - 1
    return span // sample_stride + 1 if span >= 0 else 0


def sample_cuboids(seq: FrameSequence, cfg: SamplingConfig, source: int = 0) -> list[Cuboid]:
    """All cuboids for every enabled temporal stride, stride-major then by start.

    Cuboid data are views into ``seq.frames``; nothing is copied.
    """
    n = len(seq)
    if n < cfg.T:
        raise NoData(f"sequence of {n} frames is shorter than one {cfg.T}-frame cuboid")
    out = []
    for d in cfg.strides_enabled:
        span = (cfg.T - 1) * d
        for start in range(0, n - span, cfg.sample_stride):
            out.append(Cuboid(seq.frames[start : start + span + 1 : d], start, d, source))
    return out


def make_prediction_cuboid(frame: np.ndarray, T: int) -> Cuboid:
    """Zero cuboid with ``frame`` in channel ``T // 2``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    frame = np.asarray(frame, dtype=np.float64)
    data = np.zeros((T, *frame.shape))
    data[T // 2] = frame
    return Cuboid(data, None, 1)


# -- synthetic scenes ------------------------------------------------------------

BEHAVIOURS = ("speed4", "reverse", "teleport")


@dataclass
class IrregularSegment:
    start: int
    end: int  # inclusive
    behavior: str
    movers: list[int] | None = None  # None: every mover

    def __post_init__(self):
        if self.behavior not in BEHAVIOURS:
            raise SpecError(f"unknown behaviour {self.behavior!r}; choose from {BEHAVIOURS}")
        if self.start > self.end or self.start < 0:
            raise SpecError(f"bad segment interval [{self.start}, {self.end}]")


@dataclass
class SceneSpec:
    """Constant-velocity Gaussian blobs on a torus, all drifting rightwards.

    ``t0`` shifts the clock so that test videos can continue a training scene.
    """

    length: int = 400
    height: int = 32
    width: int = 32
    movers: int = 1
    radius: float = 4.0
    speed: tuple[float, float] = (0.8, 1.6)
    background: float = 0.5
    t0: int = 0
    irregular: list[IrregularSegment] = field(default_factory=list)

    def __post_init__(self):
        self.irregular = [s if isinstance(s, IrregularSegment) else IrregularSegment(**s) for s in self.irregular]
        if self.length < 1 or self.height < 1 or self.width < 1 or self.movers < 0:
            raise SpecError("scene dimensions must be positive")
        if not self.radius > 0 or not 0.0 <= self.background <= 1.0:
            raise SpecError("need radius > 0 and background in [0, 1]")
        segs = sorted(self.irregular, key=lambda s: s.start)
        for a, b in zip(segs, segs[1:]):
            if b.start <= a.end:
                raise SpecError(f"irregular segments [{a.start},{a.end}] and [{b.start},{b.end}] overlap")
        for s in segs:
            if s.end >= self.length:
                raise SpecError(f"segment [{s.start},{s.end}] exceeds video length {self.length}")
            if s.movers is not None and any(m < 0 or m >= self.movers for m in s.movers):
                raise SpecError(f"segment refers to unknown movers {s.movers}")


def simulate_trajectories(spec: SceneSpec, seed: int) -> np.ndarray:
    """Mover centres ``[length, movers, 2]`` as (x, y) for output frames."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    pos = rng.uniform((0, 0), (w, h), size=(spec.movers, 2))
    speed = rng.uniform(*spec.speed, size=spec.movers)
    angle = rng.uniform(-0.3, 0.3, size=spec.movers)
    vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
    jump_rng = np.random.default_rng([seed, 1])
    out = np.empty((spec.length, spec.movers, 2))
    for t in range(spec.t0 + spec.length):
        k = t - spec.t0
        if k >= 0:
            out[k] = pos
        step = vel.copy()
        for seg in spec.irregular:
            if not seg.start <= k + 1 <= seg.end:
                continue
            sel = slice(None) if seg.movers is None else seg.movers
            if seg.behavior == "speed4":
                step[sel] *= 4.0
            elif seg.behavior == "reverse":
                step[sel] *= -1.0
        pos = np.mod(pos + step, (w, h))
        for seg in spec.irregular:
            if seg.behavior == "teleport" and seg.start <= k + 1 <= seg.end:
                sel = range(spec.movers) if seg.movers is None else seg.movers
                for m in sel:
                    pos[m] = jump_rng.uniform((0, 0), (w, h))
    return out


def render_frame(centres: np.ndarray, spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    peak = np.zeros((h, w))
    for cx, cy in centres:
        dx = np.abs(xs - cx)
        dy = np.abs(ys - cy)
        dx = np.minimum(dx, w - dx)  # torus distance
        dy = np.minimum(dy, h - dy)
        peak = np.maximum(peak, np.exp(-(dx * dx + dy * dy) / (2.0 * spec.radius**2)))
    return np.clip(spec.background + (1.0 - spec.background) * peak, 0.0, 1.0)


def synth_video_generate(spec: SceneSpec, seed: int) -> tuple[FrameSequence, np.ndarray]:
    """Deterministic synthetic video and its per-frame 0/1 irregularity labels.

    Frames are quantised to 8 bits so that a PGM round trip is lossless.
    """
    traj = simulate_trajectories(spec, seed)
    frames = np.stack([render_frame(c, spec) for c in traj])
    frames = np.rint(frames * 255.0) / 255.0
    labels = np.zeros(spec.length, dtype=np.int64)
    for seg in spec.irregular:
        labels[seg.start : seg.end + 1] = 1
    return FrameSequence(frames), labels
