"""Temporal segmentation of a regularity series into abnormal events, and evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInput, UndefinedMetric


@dataclass
class PersistentMinimum:
    index: int
    value: float
    persistence: float


@dataclass
class AnomalyEvent:
    start: int
    end: int
    minima: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"start": int(self.start), "end": int(self.end), "minima": [int(m) for m in self.minima]}


@dataclass
class EvalReport:
    correct_detections: int
    false_alarms: int
    missed: int
    auc: float
    eer: float


def all_minima_persistence(s: Sequence[float]) -> list[PersistentMinimum]:
    """Sub-level-set persistence of every local minimum of a 1-D series.

    Values are swept in ascending (value, index) order; when a sample joins two
    components the one born later dies, its persistence being the joining
    value minus its birth value. The global minimum never dies (``inf``).
    """
    s = np.asarray(s, dtype=np.float64)
    n = len(s)
    if n == 0:
        return []
    parent = np.full(n, -1)
    birth = {}  # root -> index of its minimum
    deaths: dict[int, float] = {}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in np.lexsort((np.arange(n), s)):
        roots = {find(j) for j in (i - 1, i + 1) if 0 <= j < n and parent[j] != -1}
        parent[i] = i
        if not roots:
            birth[i] = i
            continue
        roots = sorted(roots, key=lambda r: (s[birth[r]], birth[r]))
        keeper = roots[0]
        parent[i] = keeper
        for r in roots[1:]:
            deaths[birth[r]] = float(s[i] - s[birth[r]])
            parent[r] = keeper
    out = []
    for root_min in sorted(set(birth.values()) | set(deaths)):
        out.append(PersistentMinimum(int(root_min), float(s[root_min]), deaths.get(root_min, math.inf)))
    return out


def default_threshold(s: Sequence[float]) -> float:
    s = np.asarray(s, dtype=np.float64)
    return 0.2 * float(s.max() - s.min()) if s.size else 0.0


def persistent_minima(s: Sequence[float], threshold: float | None = None) -> list[PersistentMinimum]:
    """Minima with persistence >= ``threshold`` (default: 20% of the series range), by index."""
    if threshold is None:
        threshold = default_threshold(s)
    return [m for m in all_minima_persistence(s) if m.persistence >= threshold]


def build_events(minima: Sequence[int], series_len: int, window: int = 50) -> list[AnomalyEvent]:
    """Span each minimum by +-window/2 (clamped) and merge spans that overlap or touch."""
    half = window // 2
    events: list[AnomalyEvent] = []
    for m in sorted(int(m) for m in minima):
        lo, hi = max(0, m - half), min(series_len - 1, m + half)
        if events and lo <= events[-1].end + 1:
            events[-1].end = max(events[-1].end, hi)
            events[-1].minima.append(m)
        else:
            events.append(AnomalyEvent(lo, hi, [m]))
    return events


def _intervals(items) -> list[tuple[int, int]]:
    out = [(e.start, e.end) if isinstance(e, AnomalyEvent) else (int(e[0]), int(e[1])) for e in items]
    for a, b in out:
        if a > b:
            raise InvalidInput(f"interval [{a}, {b}] has start > end")
    for (a0, a1), (b0, b1) in zip(out, out[1:]):
        if b0 <= a1 or b0 < a0:
            raise InvalidInput(f"intervals [{a0},{a1}] and [{b0},{b1}] overlap or are unsorted")
    return out


def label_intervals(labels: Sequence[int], ids: Sequence[int] | None = None) -> list[tuple[int, int]]:
    """Maximal runs of positive labels as inclusive (start, end) frame ids."""
    labels = np.asarray(labels)
    ids = np.arange(len(labels)) if ids is None else np.asarray(ids)
    out = []
    start = None
    for k, lab in enumerate(labels):
        if lab and start is None:
            start = k
        if not lab and start is not None:
            out.append((int(ids[start]), int(ids[k - 1])))
            start = None
    if start is not None:
        out.append((int(ids[start]), int(ids[-1])))
    return out


def match_events(detected, ground_truth) -> tuple[int, int, int]:
    """Greedy one-to-one matching, largest overlap first.

    A pair qualifies when the overlap covers at least half of the ground-truth
    interval. Returns ``(correct, false_alarms, missed)``.
    """
    det = _intervals(detected)
    gt = _intervals(ground_truth)
    pairs = []
    for gi, (g0, g1) in enumerate(gt):
        need = 0.5 * (g1 - g0 + 1)
        for di, (d0, d1) in enumerate(det):
            ov = min(g1, d1) - max(g0, d0) + 1
            if ov > 0 and ov >= need:
                pairs.append((-ov, gi, di))
    used_g, used_d = set(), set()
    for _, gi, di in sorted(pairs):
        if gi not in used_g and di not in used_d:
            used_g.add(gi)
            used_d.add(di)
    correct = len(used_d)
    return correct, len(det) - correct, len(gt) - correct


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) over every distinct threshold, from (0, 0) to (1, 1)."""
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp = np.cumsum(labels)[last_of_group]
    fp = (last_of_group + 1) - tp
    tpr = np.r_[0.0, tp / labels.sum()]
    fpr = np.r_[0.0, fp / (len(labels) - labels.sum())]
    return fpr, tpr


def roc_auc_eer(s: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Frame-level AUC and EER with anomaly score ``1 - s``."""
    s = np.asarray(s, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if s.shape != labels.shape:
        raise InvalidInput(f"{len(s)} scores vs {len(labels)} labels")
    if len(labels) == 0 or labels.min() == labels.max():
        raise UndefinedMetric("both normal and anomalous frames are required")
    fpr, tpr = roc_curve(1.0 - s, labels)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    # fpr - fnr rises monotonically from -1 to 1 along the curve
    gap = fpr + tpr - 1.0
    k = int(np.argmax(gap >= 0))
    if k == 0 or gap[k] == 0:
        eer = float(fpr[k])
    else:
        t = -gap[k - 1] / (gap[k] - gap[k - 1])
        eer = float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))
    return auc, eer


def evaluate(events, labels: Sequence[int], s: Sequence[float], ids: Sequence[int] | None = None) -> EvalReport:
    correct, fa, missed = match_events(events, label_intervals(labels, ids))
    auc, eer = roc_auc_eer(s, labels)
    return EvalReport(correct, fa, missed, auc, eer)


def write_events(path, events: Sequence[AnomalyEvent]) -> None:
    with open(path, "w") as fh:
        json.dump([e.to_json() for e in events], fh, indent=1)
        fh.write("\n")


def read_events(path) -> list[AnomalyEvent]:
    with open(path) as fh:
        return [AnomalyEvent(int(d["start"]), int(d["end"]), [int(m) for m in d.get("minima", [])]) for d in json.load(fh)]


def write_report(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(report), fh, indent=1, sort_keys=True)
        fh.write("\n")
