"""Detection scoring against ground truth.

Per-frame greedy one-to-one matching under a pixel-neighborhood rule
(Chebyshev by default, a 7x7 box at radius 3), aggregated into precision,
recall and the F-measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CHEBYSHEV = "chebyshev"
EUCLIDEAN = "euclidean"


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_frame: list = field(default_factory=list)  # (frame, tp, fp, fn)
    warnings: list = field(default_factory=list)

    def add(self, frame: int, tp: int, fp: int, fn: int) -> None:
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.per_frame.append((frame, tp, fp, fn))


def _distances(detections: np.ndarray, truths: np.ndarray, metric: str) -> np.ndarray:
    diff = detections[:, None, :] - truths[None, :, :]
    if metric == CHEBYSHEV:
        return np.abs(diff).max(axis=2)
    if metric == EUCLIDEAN:
        return np.sqrt((diff**2).sum(axis=2))
    raise ValueError(f"unknown metric {metric!r}")


def match_frame(detections, truths, radius: float = 3.0, metric: str = CHEBYSHEV):
    """Greedy one-to-one matching of detections to ground-truth positions.

    Pairs are visited by ascending distance; a pair matches when its distance
    is within ``radius`` and neither endpoint is taken. Returns (tp, fp, fn).
    """
    det = np.asarray(detections, dtype=float).reshape(-1, 2)
    tru = np.asarray(truths, dtype=float).reshape(-1, 2)
    if len(det) == 0 or len(tru) == 0:
        return 0, len(det), len(tru)
    dist = _distances(det, tru, metric)
    di, tj = np.nonzero(dist <= radius)
    order = sorted(range(len(di)), key=lambda k: (dist[di[k], tj[k]], di[k], tj[k]))
    used_d = set()
    used_t = set()
    tp = 0
    for k in order:
        i, j = int(di[k]), int(tj[k])
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        tp += 1
    return tp, len(det) - tp, len(tru) - tp


def f_beta(tp: int, fp: int, fn: int, beta_squared: float = 1.0):
    """Precision, recall and the F-measure; zero-denominator cases score 0."""
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision == 0.0 and recall == 0.0:
        return precision, recall, 0.0
    f = (1.0 + beta_squared) * precision * recall / (beta_squared * precision + recall)
    return precision, recall, f


def evaluate_detections(
    detections,
    annotations,
    radius: float = 3.0,
    metric: str = CHEBYSHEV,
    beta_squared: float = 1.0,
) -> MatchResult:
    """Score rows of (frame, id, x, y[, score]) detections against
    (frame, id, x, y) annotations, frame by frame."""
    det_by_frame: dict[int, list] = {}
    for row in detections:
        det_by_frame.setdefault(int(row[0]), []).append((float(row[2]), float(row[3])))
    tru_by_frame: dict[int, list] = {}
    for row in annotations:
        tru_by_frame.setdefault(int(row[0]), []).append((float(row[2]), float(row[3])))

    result = MatchResult()
    stray = sorted(set(det_by_frame) - set(tru_by_frame))
    if stray:
        result.warnings.append(
            f"{len(stray)} detection frame(s) absent from annotations (first: {stray[0]})"
        )
    for frame in sorted(set(det_by_frame) | set(tru_by_frame)):
        tp, fp, fn = match_frame(
            det_by_frame.get(frame, []), tru_by_frame.get(frame, []), radius, metric
        )
        result.add(frame, tp, fp, fn)
    return result


def evaluate_sequence(
    detections_path: str,
    annotations_path: str,
    radius: float = 3.0,
    metric: str = CHEBYSHEV,
    beta_squared: float = 1.0,
):
    """Evaluate a detections CSV against an annotations CSV.

    Returns (MatchResult, report text, summary CSV text).
    """
    from .formats import read_annotations, read_detections

    detections = read_detections(detections_path)
    annotations = read_annotations(annotations_path)
    result = evaluate_detections(detections, annotations, radius, metric, beta_squared)
    precision, recall, f = f_beta(result.tp, result.fp, result.fn, beta_squared)

    lines = [
        f"frames evaluated: {len(result.per_frame)}",
        f"tp: {result.tp}  fp: {result.fp}  fn: {result.fn}",
        f"precision: {precision:.4f}",
        f"recall: {recall:.4f}",
        f"f_measure: {f:.4f}",
    ]
    lines.extend(f"warning: {w}" for w in result.warnings)
    report = "\n".join(lines)
    summary = (
        "precision,recall,f_measure,tp,fp,fn\n"
        f"{precision:.6f},{recall:.6f},{f:.6f},{result.tp},{result.fp},{result.fn}\n"
    )
    return result, report, summary
