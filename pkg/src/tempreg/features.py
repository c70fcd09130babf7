"""Dense-grid HOG+HOF descriptors (204-d) for the fully connected autoencoder."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .data import FrameSequence
from .errors import FormatError, IoError, ShapeMismatch

PATCH = 32
SPATIAL_CELLS = 2
TEMPORAL_CELLS = 3
HOG_BINS = 8
HOF_BINS = 9  # 8 orientations + zero motion
ZERO_MOTION = 0.1  # px/frame
DESCRIPTOR_DIM = SPATIAL_CELLS**2 * TEMPORAL_CELLS * (HOG_BINS + HOF_BINS)

_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray


@dataclass
class PatchDescriptor:
    vector: np.ndarray
    location: tuple[int, int]  # patch centre (x, y)
    frame_span: tuple[int, int]  # inclusive


def dense_flow(f1: np.ndarray, f2: np.ndarray, iters: int = 100, alpha: float = 0.05) -> FlowField:
    """Horn-Schunck flow from ``f1`` to ``f2``, zero-initialised.

    ``alpha`` weighs smoothness against brightness constancy and is on the
    scale of intensity gradients of [0, 1] images.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ShapeMismatch(f"{f1.shape} vs {f2.shape}")
    gy1, gx1 = np.gradient(f1)
    gy2, gx2 = np.gradient(f2)
    ix, iy, it = 0.5 * (gx1 + gx2), 0.5 * (gy1 + gy2), f2 - f1
    denom = alpha**2 + ix**2 + iy**2
    u = np.zeros_like(f1)
    v = np.zeros_like(f1)
    for _ in range(iters):
        ub = convolve(u, _HS_AVG, mode="nearest")
        vb = convolve(v, _HS_AVG, mode="nearest")
        common = (ix * ub + iy * vb + it) / denom
        u = ub - ix * common
        v = vb - iy * common
    return FlowField(u, v)


def _orientation_bins(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Hard assignment to 8 bins centred on multiples of 45 degrees (bin 0 = +x)."""
    ang = np.arctan2(dy, dx)
    return np.floor(ang / (np.pi / 4) + 0.5).astype(int) % 8


def _normalize(h: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(h)
    return h / n if n > 0 else h


def _cells(n: int) -> list[np.ndarray]:
    return np.array_split(np.arange(n), TEMPORAL_CELLS)


def hog_hof_descriptor(cuboid: np.ndarray, flows: list[FlowField], origin=(0, 0, 0)) -> PatchDescriptor:
    """204-d descriptor of a ``[L, 32, 32]`` block and its ``L - 1`` flow fields.

    Layout: 2x2 spatial by 3 temporal cells; 8 HOG bins per cell (96 values)
    followed by 9 HOF bins per cell (108 values). Each cell histogram has unit
    L2 norm unless empty. ``origin`` is ``(x0, y0, t0)`` of the block.
    """
    cuboid = np.asarray(cuboid, dtype=np.float64)
    if cuboid.ndim != 3 or cuboid.shape[1:] != (PATCH, PATCH):
        raise ShapeMismatch(f"descriptor block must be [L, {PATCH}, {PATCH}], got {cuboid.shape}")
    L = cuboid.shape[0]
    if L < TEMPORAL_CELLS + 1 or len(flows) != L - 1:
        raise ShapeMismatch(f"need L >= {TEMPORAL_CELLS + 1} frames and L - 1 flows (L={L}, {len(flows)} flows)")
    for f in flows:
        if f.u.shape != (PATCH, PATCH) or f.v.shape != (PATCH, PATCH):
            raise ShapeMismatch("flow fields must match the block's spatial size")
    half = PATCH // SPATIAL_CELLS

    grads = [np.gradient(frame) for frame in cuboid]
    hog_mag = np.stack([np.hypot(gx, gy) for gy, gx in grads])
    hog_bin = np.stack([_orientation_bins(gx, gy) for gy, gx in grads])
    u = np.stack([f.u for f in flows])
    v = np.stack([f.v for f in flows])
    flow_mag = np.hypot(u, v)
    still = flow_mag < ZERO_MOTION
    hof_bin = np.where(still, 8, _orientation_bins(u, v))
    hof_w = np.where(still, 1.0, flow_mag)

    hog, hof = [], []
    for tc_frames, tc_flows in zip(_cells(L), _cells(L - 1)):
        for cy in range(SPATIAL_CELLS):
            for cx in range(SPATIAL_CELLS):
                sl = (slice(cy * half, (cy + 1) * half), slice(cx * half, (cx + 1) * half))
                b = hog_bin[tc_frames][(slice(None), *sl)].ravel()
                w = hog_mag[tc_frames][(slice(None), *sl)].ravel()
                hog.append(_normalize(np.bincount(b, weights=w, minlength=HOG_BINS)))
                b = hof_bin[tc_flows][(slice(None), *sl)].ravel()
                w = hof_w[tc_flows][(slice(None), *sl)].ravel()
                hof.append(_normalize(np.bincount(b, weights=w, minlength=HOF_BINS)))
    vector = np.clip(np.concatenate(hog + hof), 0.0, 1.0)
    x0, y0, t0 = origin
    return PatchDescriptor(vector, (x0 + half, y0 + half), (t0, t0 + L - 1))


def sequence_flows(seq: FrameSequence, iters: int = 100, alpha: float = 0.05) -> list[FlowField]:
    return [dense_flow(a, b, iters, alpha) for a, b in zip(seq.frames[:-1], seq.frames[1:])]


def extract_grid_descriptors(
    seq: FrameSequence, grid_step: int = 5, L: int = 15, flow_iters: int = 100, alpha: float = 0.05
) -> list[PatchDescriptor]:
    """Descriptors for 32x32xL blocks on a ``grid_step`` grid with 50% temporal overlap.

    Blocks crossing the frame border are skipped. Order: spatial location
    (row-major), then temporal start.
    """
    n = len(seq)
    h, w = seq.shape
    if n < L or h < PATCH or w < PATCH:
        return []
    flows = sequence_flows(seq, flow_iters, alpha)
    half = PATCH // 2
    ys = range(half, h - half + 1, grid_step)
    xs = range(half, w - half + 1, grid_step)
    starts = range(0, n - L + 1, max(1, L // 2))
    out = []
    for cy in ys:
        for cx in xs:
            y0, x0 = cy - half, cx - half
            for t0 in starts:
                block = seq.frames[t0 : t0 + L, y0 : y0 + PATCH, x0 : x0 + PATCH]
                fl = [FlowField(f.u[y0 : y0 + PATCH, x0 : x0 + PATCH], f.v[y0 : y0 + PATCH, x0 : x0 + PATCH])
                      for f in flows[t0 : t0 + L - 1]]
                d = hog_hof_descriptor(block, fl, origin=(x0, y0, int(seq.ids[t0])))
                d.frame_span = (int(seq.ids[t0]), int(seq.ids[t0 + L - 1]))
                out.append(d)
    return out


def write_descriptors(path, descriptors: list[PatchDescriptor]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "y", "t_start", *(f"d{i}" for i in range(DESCRIPTOR_DIM))])
        for d in descriptors:
            wr.writerow([d.location[0], d.location[1], d.frame_span[0], *(repr(float(x)) for x in d.vector)])


def read_descriptors(path, L: int = 15) -> list[PatchDescriptor]:
    """Read a descriptor CSV; ``L`` restores each frame span, which the format does not store."""
    out = []
    try:
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if header[:3] != ["x", "y", "t_start"] or len(header) != 3 + DESCRIPTOR_DIM:
                raise FormatError(f"{path}: not a descriptor CSV")
            for row in rd:
                t0 = int(row[2])
                vec = np.array([float(x) for x in row[3:]])
                out.append(PatchDescriptor(vec, (int(row[0]), int(row[1])), (t0, t0 + L - 1)))
    except (OSError, StopIteration, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise IoError(f"{path}: {exc}") from exc
    return out
