"""Inter-frame motion estimation and candidate remapping.

The inter-frame movement is modeled as a homography. Correspondences come
from a pluggable provider; the built-in one detects corners by the structure
tensor's minimum eigenvalue and matches 11x11 patches by normalized
cross-correlation with a mutual-best check. Estimation is RANSAC over a
normalized DLT solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .imaging import Frame


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine a homography."""


class RegistrationError(RuntimeError):
    """Robust estimation failed (not enough consensus)."""


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, normalized so matrix[2, 2] == 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(m[2, 2]) < 1e-12:
            raise DegenerateGeometryError("homography has vanishing (3,3) element")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateGeometryError("homography is not invertible")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """Apply ``other`` first: compose(other)(p) == self(other(p))."""
        return Homography(self.matrix @ other.matrix)


@dataclass(frozen=True)
class Correspondence:
    p: tuple  # (x, y) in frame A
    q: tuple  # (x, y) in frame B

    def __post_init__(self):
        if not (np.isfinite(self.p).all() and np.isfinite(self.q).all()):
            raise ValueError("correspondence coordinates must be finite")


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 1000
    inlier_threshold: float = 2.0
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if self.max_iterations < 1 or self.min_inliers < 4:
            raise ValueError("max_iterations >= 1 and min_inliers >= 4 required")


def remap_point(h: Homography, p) -> np.ndarray:
    """Apply the homography with perspective division."""
    x, y = float(p[0]), float(p[1])
    m = h.matrix
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) < 1e-12:
        raise DegenerateGeometryError(f"point {p} maps to infinity")
    return np.array(
        [
            (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w,
        ]
    )


def remap_points(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Vectorized remap of an (n, 2) array."""
    pts = np.asarray(pts, dtype=np.float64)
    ph = np.c_[pts, np.ones(len(pts))]
    q = ph @ h.matrix.T
    w = q[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateGeometryError("point maps to infinity")
    return q[:, :2] / w[:, None]


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if mean_dist < 1e-12:
        raise DegenerateGeometryError("coincident points")
    s = np.sqrt(2.0) / mean_dist
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def solve_homography_dlt(correspondences) -> Homography:
    """Least-squares homography via the normalized direct linear transform."""
    corrs = list(correspondences)
    if len(corrs) < 4:
        raise ValueError("need at least 4 correspondences")
    P = np.array([c.p for c in corrs], dtype=np.float64)
    Q = np.array([c.q for c in corrs], dtype=np.float64)
    Tp = _hartley_normalization(P)
    Tq = _hartley_normalization(Q)
    Pn = (np.c_[P, np.ones(len(P))] @ Tp.T)[:, :2]
    Qn = (np.c_[Q, np.ones(len(Q))] @ Tq.T)[:, :2]

    n = len(corrs)
    A = np.zeros((2 * n, 9))
    x, y = Pn[:, 0], Pn[:, 1]
    u, v = Qn[:, 0], Qn[:, 1]
    A[0::2, 0] = x
    A[0::2, 1] = y
    A[0::2, 2] = 1.0
    A[0::2, 6] = -u * x
    A[0::2, 7] = -u * y
    A[0::2, 8] = -u
    A[1::2, 3] = x
    A[1::2, 4] = y
    A[1::2, 5] = 1.0
    A[1::2, 6] = -v * x
    A[1::2, 7] = -v * y
    A[1::2, 8] = -v

    _, s, Vt = np.linalg.svd(A)
    if s[7] < 1e-10 * s[0]:
        raise DegenerateGeometryError("degenerate correspondence configuration")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tq) @ Hn @ Tp
    if abs(H[2, 2]) < 1e-12:
        raise DegenerateGeometryError("solution not normalizable")
    return Homography(H)


def estimate_homography_ransac(correspondences, params: RansacParams):
    """RANSAC homography fit; returns (Homography, inlier index list).

    Samples of 4, scored by the count of correspondences whose forward
    reprojection error stays within the threshold; the winning consensus set
    is refit with the DLT solver. Deterministic given the seed.
    """
    corrs = list(correspondences)
    n = len(corrs)
    if n < 4:
        raise ValueError("need at least 4 correspondences")
    P = np.array([c.p for c in corrs], dtype=np.float64)
    Q = np.array([c.q for c in corrs], dtype=np.float64)
    rng = np.random.default_rng(params.seed)

    best_count = 0
    best_inliers = None
    for _ in range(params.max_iterations):
        pick = rng.choice(n, size=4, replace=False)
        try:
            model = solve_homography_dlt([corrs[i] for i in pick])
        except DegenerateGeometryError:
            continue
        err = np.sqrt(((remap_points(model, P) - Q) ** 2).sum(axis=1))
        inliers = np.nonzero(err <= params.inlier_threshold)[0]
        if len(inliers) > best_count:
            best_count = len(inliers)
            best_inliers = inliers
    if best_inliers is None or best_count < max(4, params.min_inliers):
        raise RegistrationError(
            f"ransac consensus {best_count} below minimum {params.min_inliers}"
        )
    refit = solve_homography_dlt([corrs[i] for i in best_inliers])
    return refit, [int(i) for i in best_inliers]


def _min_eigenvalue_response(img: np.ndarray, sum_window: int = 5) -> np.ndarray:
    gy, gx = np.gradient(img)
    sxx = ndimage.uniform_filter(gx * gx, sum_window)
    syy = ndimage.uniform_filter(gy * gy, sum_window)
    sxy = ndimage.uniform_filter(gx * gy, sum_window)
    half_trace = 0.5 * (sxx + syy)
    root = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    return half_trace - root


def _detect_corners(img: np.ndarray, max_corners: int, nms_radius: int, margin: int):
    resp = _min_eigenvalue_response(img)
    resp[:margin, :] = 0
    resp[-margin:, :] = 0
    resp[:, :margin] = 0
    resp[:, -margin:] = 0
    local_max = resp == ndimage.maximum_filter(resp, size=2 * nms_radius + 1, mode="constant")
    ys, xs = np.nonzero(local_max & (resp > 1e-9))
    if len(ys) == 0:
        return ys, xs
    order = np.argsort(-resp[ys, xs], kind="stable")[:max_corners]
    return ys[order], xs[order]


def _ncc_best(template: np.ndarray, search: np.ndarray):
    """(best score, (dy, dx) of the best placement's top-left) via ZNCC."""
    res = cv2.matchTemplate(search, template, cv2.TM_CCOEFF_NORMED)
    _, max_val, _, max_loc = cv2.minMaxLoc(res)
    return float(max_val), (int(max_loc[1]), int(max_loc[0]))


def _best_match(img_from: np.ndarray, img_to: np.ndarray, y: int, x: int, prad: int, srad: int):
    """Best NCC position in img_to for the patch at (y, x) of img_from,
    searching a (2*srad+1)^2 box clipped to valid patch placements."""
    h, w = img_to.shape
    template = img_from[y - prad : y + prad + 1, x - prad : x + prad + 1]
    y0 = max(y - srad, prad)
    y1 = min(y + srad, h - 1 - prad)
    x0 = max(x - srad, prad)
    x1 = min(x + srad, w - 1 - prad)
    if y1 < y0 or x1 < x0:
        return -1.0, (y, x)
    search = img_to[y0 - prad : y1 + prad + 1, x0 - prad : x1 + prad + 1]
    score, (dy, dx) = _ncc_best(template, search)
    return score, (y0 + dy, x0 + dx)


def match_frames(
    a: Frame,
    b: Frame,
    max_corners: int = 500,
    nms_radius: int = 8,
    patch_size: int = 11,
    search_radius: int = 32,
    min_ncc: float = 0.8,
) -> list[Correspondence]:
    """Corner + patch-correlation correspondences between two frames.

    Corners come from frame a; each is matched into b by normalized
    cross-correlation within the search radius, kept only when the score
    reaches ``min_ncc`` and the backward match lands exactly on the corner.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError("frames must have identical dimensions")
    fa = a.pixels.astype(np.float32)
    fb = b.pixels.astype(np.float32)
    prad = patch_size // 2
    ys, xs = _detect_corners(fa, max_corners, nms_radius, margin=prad + 1)

    matches = []
    for y, x in zip(ys, xs):
        score, (qy, qx) = _best_match(fa, fb, int(y), int(x), prad, search_radius)
        if score < min_ncc:
            continue
        back_score, (py, px) = _best_match(fb, fa, qy, qx, prad, search_radius)
        if back_score < min_ncc or (py, px) != (int(y), int(x)):
            continue
        matches.append(Correspondence(p=(float(x), float(y)), q=(float(qx), float(qy))))
    return matches


def chain_to_reference(step_homographies) -> list[Homography]:
    """Cumulative composition of frame-to-previous-frame homographies.

    ``step_homographies[i]`` maps frame i+1 coordinates to frame i. The
    result has one extra entry: element i maps frame i to frame 0.
    """
    chain = [Homography.identity()]
    for step in step_homographies:
        chain.append(chain[-1].compose(step))
    return chain


def load_transforms(path: str) -> list[Homography]:
    """Read per-step homographies: 9 whitespace-separated reals per line."""
    steps = []
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 9:
                raise ValueError(f"{path}:{ln}: expected 9 values per transform")
            steps.append(Homography(np.array(vals).reshape(3, 3)))
    return steps


def save_transforms(steps, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for h in steps:
            fh.write(" ".join(f"{v:.17g}" for v in h.matrix.ravel()) + "\n")
