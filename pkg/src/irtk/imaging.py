"""Frame container, 16-bit PGM I/O and connected-component labeling.

Frames are single-channel intensity images stored as uint16 numpy arrays
(row-major, [row, col] indexing). Files are binary PGM (P5); 16-bit samples
are big-endian per the PNM convention. 8-bit files are widened by value copy,
never rescaled, so round trips are bit exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

BRIGHT = 1
DARK = -1

# 8-connectivity: diagonal neighbors belong to the same component
_STRUCTURE_8 = np.ones((3, 3), dtype=int)


class PgmFormatError(ValueError):
    """Raised for files that are not well-formed binary PGM."""


@dataclass(frozen=True)
class Frame:
    """One sensor image plus its position in the sequence."""

    index: int
    pixels: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("frame index must be non-negative")
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("pixels must be a non-empty 2-D array")
        if px.dtype != np.uint16:
            if np.any(px < 0) or np.any(px > 65535):
                raise ValueError("intensities must lie in [0, 65535]")
            px = px.astype(np.uint16)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel interest labels: 0 background, +1 bright, -1 dark."""

    labels: np.ndarray  # (height, width) int8

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("labels must be 2-D")
        object.__setattr__(self, "labels", lab.astype(np.int8))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class Component:
    """A connected domain of same-polarity interest pixels.

    ``pixels`` is an (n, 2) array of (row, col) positions in row-major order.
    The representative pixel is chosen later by the candidate stage (it needs
    intensities, which the mask no longer carries).
    """

    polarity: int  # BRIGHT or DARK
    pixels: np.ndarray
    representative: Optional[tuple] = field(default=None)

    @property
    def min_row(self) -> int:
        return int(self.pixels[:, 0].min())

    @property
    def min_col(self) -> int:
        return int(self.pixels[:, 1].min())


def mirror_indices(n: int, pad: int) -> np.ndarray:
    """Index map realizing mirror reflection (no edge repeat) for -pad..n+pad-1."""
    if n == 1:
        return np.zeros(n + 2 * pad, dtype=np.intp)
    idx = np.arange(-pad, n + pad)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx).astype(np.intp)


def mirror_pad(arr: np.ndarray, pad: int) -> np.ndarray:
    """Mirror-reflect pad a 2-D array by ``pad`` on all sides."""
    h, w = arr.shape
    return arr[np.ix_(mirror_indices(h, pad), mirror_indices(w, pad))]


def _read_pnm_tokens(data: bytes, count: int, start: int):
    """Read whitespace/comment-delimited header tokens, return (tokens, offset)."""
    tokens = []
    i = start
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise PgmFormatError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    if i >= n:
        raise PgmFormatError("missing raster data")
    i += 1
    return tokens, i


def load_frame(path: str, index: int = 0) -> Frame:
    """Load a binary PGM (P5) file as a Frame.

    Sample values are preserved exactly: 16-bit big-endian samples for
    maxval > 255, single bytes widened by value copy otherwise.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise PgmFormatError("not a binary PGM (P5) file")
    try:
        (w_tok, h_tok, max_tok), offset = _read_pnm_tokens(data, 3, 2)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except PgmFormatError:
        raise
    except ValueError as exc:
        raise PgmFormatError(f"bad PGM header: {exc}") from exc
    if width <= 0 or height <= 0:
        raise PgmFormatError("non-positive image dimensions")
    if not 0 < maxval <= 65535:
        raise PgmFormatError(f"unsupported maxval {maxval}")
    n = width * height
    bytes_per = 2 if maxval > 255 else 1
    raster = data[offset : offset + n * bytes_per]
    if len(raster) < n * bytes_per:
        raise IOError(f"truncated PGM raster in {path}")
    if bytes_per == 2:
        px = np.frombuffer(raster, dtype=">u2", count=n).astype(np.uint16)
    else:
        px = np.frombuffer(raster, dtype=np.uint8, count=n).astype(np.uint16)
    return Frame(index=index, pixels=px.reshape(height, width))


def save_frame(frame: Frame, path: str) -> None:
    """Write a Frame as 16-bit binary PGM. load_frame(save_frame(f)) == f."""
    header = f"P5\n{frame.width} {frame.height}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frame.pixels.astype(">u2").tobytes())


def connected_components(mask: LabelMask) -> list[Component]:
    """Partition nonzero mask pixels into maximal 8-connected same-polarity
    components, ordered by (min row, min col)."""
    comps = []
    for polarity in (BRIGHT, DARK):
        binary = mask.labels == polarity
        if not binary.any():
            continue
        lab, n = ndimage.label(binary, structure=_STRUCTURE_8)
        flat = np.flatnonzero(lab)
        labs = lab.ravel()[flat]
        order = np.argsort(labs, kind="stable")
        flat = flat[order]
        counts = np.bincount(labs, minlength=n + 1)[1:]
        stop = np.cumsum(counts)
        start = stop - counts
        w = mask.width
        for s, e in zip(start, stop):
            pix = flat[s:e]  # row-major order within the component
            comps.append(Component(polarity=polarity, pixels=np.stack([pix // w, pix % w], axis=1)))
    comps.sort(key=lambda c: (c.min_row, c.min_col, -c.polarity))
    return comps
