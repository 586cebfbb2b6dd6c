"""CSV schemas shared across the pipeline.

Annotations: ``frame,target_id,x,y`` (integers, x = column, y = row).
Detections: ``frame,track_id,x,y,score``.
Candidates: ``frame,x,y,polarity,score`` with polarity ``bright``/``dark``.
"""

from __future__ import annotations

import csv

from .imaging import BRIGHT, DARK

ANNOTATION_HEADER = ["frame", "target_id", "x", "y"]
DETECTION_HEADER = ["frame", "track_id", "x", "y", "score"]
CANDIDATE_HEADER = ["frame", "x", "y", "polarity", "score"]

_POLARITY_NAMES = {BRIGHT: "bright", DARK: "dark"}
_POLARITY_VALUES = {v: k for k, v in _POLARITY_NAMES.items()}


def _read_rows(path: str, expected_header):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return []
    start = 1 if rows[0][: len(expected_header)] == expected_header else 0
    return rows[start:]


def read_annotations(path: str):
    """Rows of (frame, target_id, x, y) as ints."""
    out = []
    for row in _read_rows(path, ANNOTATION_HEADER):
        if not row:
            continue
        try:
            out.append((int(row[0]), int(row[1]), int(row[2]), int(row[3])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"bad annotation row {row!r} in {path}") from exc
    return out


def write_annotations(rows, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for frame, target_id, x, y in rows:
            writer.writerow([int(frame), int(target_id), int(round(float(x))), int(round(float(y)))])


def read_detections(path: str):
    """Rows of (frame, track_id, x, y, score)."""
    out = []
    for row in _read_rows(path, DETECTION_HEADER):
        if not row:
            continue
        try:
            out.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"bad detection row {row!r} in {path}") from exc
    return out


def write_detections(detections, path: str) -> None:
    """Write Detection objects or (frame, track_id, x, y, score) tuples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_HEADER)
        for det in detections:
            if hasattr(det, "frame"):
                row = (det.frame, det.track_id, det.x, det.y, det.score)
            else:
                row = det
            writer.writerow(
                [int(row[0]), int(row[1]), f"{row[2]:.10g}", f"{row[3]:.10g}", f"{row[4]:.10g}"]
            )


def write_candidates(candidates, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANDIDATE_HEADER)
        for c in candidates:
            writer.writerow(
                [
                    int(c.frame),
                    f"{c.position[0]:.10g}",
                    f"{c.position[1]:.10g}",
                    _POLARITY_NAMES[c.polarity],
                    f"{c.score:.10g}",
                ]
            )


def read_candidates(path: str):
    """Rows of (frame, x, y, polarity int, score)."""
    out = []
    for row in _read_rows(path, CANDIDATE_HEADER):
        if not row:
            continue
        try:
            out.append(
                (int(row[0]), float(row[1]), float(row[2]), _POLARITY_VALUES[row[3]], float(row[4]))
            )
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"bad candidate row {row!r} in {path}") from exc
    return out
