"""Reconstruction-error fields, regularity scores, syntheses and predictions."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import Cuboid, FrameSequence, make_prediction_cuboid
from .errors import NoData, ShapeMismatch, WrongModel
from .models import Autoencoder


@dataclass
class ErrorField:
    e: np.ndarray  # [T', H, W], non-negative
    frame_ids: np.ndarray


@dataclass
class RegularitySeries:
    frame_ids: np.ndarray
    e: np.ndarray
    s: np.ndarray

    def __len__(self):
        return len(self.e)


def regularity_scores(e: np.ndarray) -> np.ndarray:
    """``s = 1 - (e - min e) / max e``; a series with ``max e == 0`` scores 1 everywhere."""
    e = np.asarray(e, dtype=np.float64)
    top = e.max() if e.size else 0.0
    if top == 0:
        return np.ones_like(e)
    # same value as 1 - (e - min) / max, with one rounding step fewer
    return (top - (e - e.min())) / top


def pixel_error(model: Autoencoder, cuboid: Cuboid | np.ndarray) -> ErrorField:
    """Per-pixel absolute reconstruction error of one cuboid."""
    data = cuboid.data if isinstance(cuboid, Cuboid) else np.asarray(cuboid)
    if data.shape != model.input_shape:
        raise ShapeMismatch(f"cuboid {data.shape} vs model input {model.input_shape}")
    recon = model.reconstruct(data.astype(model.dtype))
    ids = np.array(cuboid.frame_indices if isinstance(cuboid, Cuboid) else range(len(data)))
    return ErrorField(np.abs(data - recon), ids)


def frame_error_field(model: Autoencoder, seq: FrameSequence, batch: int = 32, threads: int = 1) -> ErrorField:
    """Per-frame error field averaged over every stride-1 cuboid covering the frame."""
    if model.kind != "conv_ae":
        raise WrongModel("pixel scoring needs a conv_ae model")
    T = model.input_shape[0]
    if seq.shape != model.input_shape[1:]:
        raise ShapeMismatch(f"frames {seq.shape} vs model input {model.input_shape[1:]}")
    n = len(seq)
    if n < T:
        raise NoData(f"sequence of {n} frames is shorter than one {T}-frame cuboid")
    starts = np.arange(n - T + 1)
    frames = seq.frames

    def chunk_error(chunk: np.ndarray) -> np.ndarray:
        x = np.stack([frames[s : s + T] for s in chunk])
        return np.abs(x - model.reconstruct(x.astype(model.dtype)))

    chunks = [starts[i : i + batch] for i in range(0, len(starts), batch)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(chunk_error, chunks))
    else:
        results = [chunk_error(c) for c in chunks]
    total = np.zeros(frames.shape)
    count = np.zeros(n)
    for chunk, err in zip(chunks, results):
        for s, e in zip(chunk, err):
            total[s : s + T] += e
            count[s : s + T] += 1
    return ErrorField(total / count[:, None, None], seq.ids.copy())


def regularity_series(seq: FrameSequence, model: Autoencoder, batch: int = 32, threads: int = 1) -> RegularitySeries:
    field = frame_error_field(model, seq, batch=batch, threads=threads)
    e = field.e.sum(axis=(1, 2))
    return RegularitySeries(field.frame_ids, e, regularity_scores(e))


def synthesize_from_field(frames: np.ndarray, err: np.ndarray) -> np.ndarray:
    """Pick each pixel from the frame where its error is lowest (earliest on ties)."""
    t_star = np.argmin(err, axis=0)
    return np.take_along_axis(frames, t_star[None], axis=0)[0]


def regular_frame_synthesis(seq: FrameSequence, model: Autoencoder, threads: int = 1) -> np.ndarray:
    field = frame_error_field(model, seq, threads=threads)
    return synthesize_from_field(seq.frames, field.e)


def normalized_error_map(err: np.ndarray) -> np.ndarray:
    acc = err.sum(axis=0)
    lo, hi = acc.min(), acc.max()
    if hi == lo:
        return np.zeros_like(acc)
    return (acc - lo) / (hi - lo)


def pixel_regularity_map(seq: FrameSequence, model: Autoencoder, threads: int = 1) -> np.ndarray:
    """Accumulated per-pixel error, min-max normalised; bright means irregular."""
    return normalized_error_map(frame_error_field(model, seq, threads=threads).e)


def predict_past_future(frame: np.ndarray, model: Autoencoder) -> np.ndarray:
    if model.kind != "conv_ae":
        raise WrongModel("past/future prediction needs a conv_ae model")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != model.input_shape[1:]:
        raise ShapeMismatch(f"frame {frame.shape} vs model input {model.input_shape[1:]}")
    cub = make_prediction_cuboid(frame, model.input_shape[0])
    return model.reconstruct(cub.data.astype(model.dtype))


def feature_regularity_series(descriptors: Iterable, fc_model: Autoencoder, batch: int = 4096) -> RegularitySeries:
    """Per-frame sum of descriptor reconstruction errors over the patches covering it."""
    if fc_model.kind != "fc_ae":
        raise WrongModel("feature scoring needs an fc_ae model")
    descs = list(descriptors)
    if not descs:
        raise NoData("no descriptors to score")
    vecs = np.stack([d.vector for d in descs])
    errs = np.concatenate([
        np.linalg.norm(vecs[i : i + batch] - fc_model.reconstruct(vecs[i : i + batch].astype(fc_model.dtype)), axis=1)
        for i in range(0, len(vecs), batch)
    ])
    per_frame: dict[int, float] = {}
    for d, err in zip(descs, errs):
        t0, t1 = d.frame_span
        for t in range(t0, t1 + 1):
            per_frame[t] = per_frame.get(t, 0.0) + float(err)
    ids = np.array(sorted(per_frame), dtype=np.int64)
    e = np.array([per_frame[t] for t in ids])
    return RegularitySeries(ids, e, regularity_scores(e))


def write_scores(path, series: RegularitySeries) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "e", "s"])
        for i, e, s in zip(series.frame_ids, series.e, series.s):
            wr.writerow([int(i), repr(float(e)), repr(float(s))])


def read_scores(path) -> RegularitySeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return RegularitySeries(
        np.array([int(r["frame"]) for r in rows], dtype=np.int64),
        np.array([float(r["e"]) for r in rows]),
        np.array([float(r["s"]) for r in rows]),
    )
