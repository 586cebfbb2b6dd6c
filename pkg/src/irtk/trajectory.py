"""Trajectory-constrained target confirmation.

Candidates remapped to a common reference frame are linked into trajectory
segments under a short-strict constraint (piecewise uniform motion over three
consecutive frames, plus an absolute velocity gate), stopped segments are
bridged by a long-loose similarity merge, idle segments are pruned, and
segments exceeding the confirmation length become detected targets. Crossed
confirmed trajectories resolve to the longest.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .registration import Homography, RegistrationError, remap_point, remap_points

ACTIVE = "active"
CONFIRMED = "confirmed"
DELETED = "deleted"

_COINCIDENT_EPS = 1e-9
_ZERO_DENOM_EPS = 1e-12


@dataclass(frozen=True)
class TrajectoryParams:
    """Thresholds of the trajectory stage (defaults follow the reference
    operating point: 0.2 / 10 / 0.1 / 5 / 0.3 / 20)."""

    cost_threshold: float = 0.2        # max link cost for growth
    velocity_limit: float = 10.0       # max per-frame displacement, pixels
    similarity_threshold: float = 0.1  # min similarity for merging
    inactivity_limit: int = 5          # frames without growth/merge before pruning
    length_fraction: float = 0.3       # fraction of the window for confirmation
    window_length: int = 20            # time-window length, frames
    branch_limit: int = 5              # max branches one segment spawns per frame
    crossing_radius: float = 1.0       # same-position radius for crossing resolution

    def __post_init__(self):
        if min(self.cost_threshold, self.velocity_limit, self.similarity_threshold) <= 0:
            raise ValueError("thresholds must be positive")
        if self.inactivity_limit <= 0 or self.window_length <= 0:
            raise ValueError("inactivity_limit and window_length must be positive")
        if not 0 < self.length_fraction < 1:
            raise ValueError("length_fraction must lie in (0, 1)")

    @property
    def confirmation_length(self) -> int:
        # guard against 0.3 * 20 style float droop
        return int(math.floor(self.length_fraction * self.window_length + 1e-9))


@dataclass
class TrajectoryNode:
    """One linked candidate: frame index, position in the current reference
    coordinates, candidate identifier, plus the original-frame pixel position
    and classifier score carried along for reporting."""

    frame: int
    position: np.ndarray  # (2,) float, reference coordinates
    source: int
    origin: tuple = (0.0, 0.0)  # (x, y) in the frame's own pixel coordinates
    score: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)


@dataclass
class TrajectorySegment:
    id: int
    nodes: list  # time-ordered TrajectoryNodes
    last_activity: int
    state: str = ACTIVE

    @property
    def length(self) -> int:
        return len(self.nodes)

    @property
    def start_frame(self) -> int:
        return self.nodes[0].frame

    @property
    def end_frame(self) -> int:
        return self.nodes[-1].frame


@dataclass
class Detection:
    frame: int
    track_id: int
    x: float
    y: float
    score: float


def link_cost(n_prev2, n_prev1, c) -> float:
    """Deviation of candidate c from uniform-motion completion of the last
    two positions, normalized by twice the last step length."""
    n_prev2 = np.asarray(n_prev2, dtype=float)
    n_prev1 = np.asarray(n_prev1, dtype=float)
    c = np.asarray(c, dtype=float)
    step = np.linalg.norm(n_prev2 - n_prev1)
    if step < _COINCIDENT_EPS:
        raise ValueError("link cost undefined for coincident history points")
    return float(np.linalg.norm(n_prev2 + c - 2.0 * n_prev1) / (2.0 * step))


def velocity_gate(p, q, velocity_limit: float) -> bool:
    """True iff the displacement between consecutive frames stays within the
    absolute velocity limit (inclusive)."""
    d = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    return bool(np.linalg.norm(d) <= velocity_limit)


def grow_segments(
    segments: list,
    candidates_t: list,
    candidates_t_minus_1: list,
    params: TrajectoryParams,
    id_start: int = None,
) -> tuple[list, int]:
    """One growth round: extend segments ending at frame t-1 with frame-t
    candidates passing the cost and velocity gates, then seed a new two-node
    segment from every gated (t-1, t) candidate pair.

    Candidates are TrajectoryNodes in reference coordinates. Segments with at
    least one match are replaced by their extensions (one new segment per
    matching candidate, at most ``branch_limit`` by ascending cost); segments
    with none are kept unchanged. Returns (segments, next segment id).
    """
    if id_start is None:
        id_start = 1 + max((s.id for s in segments), default=-1)
    next_id = id_start
    out = []
    if candidates_t:
        t = candidates_t[0].frame
        cand_pos = np.array([c.position for c in candidates_t])
    else:
        t = None
        cand_pos = np.zeros((0, 2))

    for seg in segments:
        if seg.state == DELETED:
            continue
        extensions = []
        if candidates_t and seg.end_frame == t - 1:
            last = seg.nodes[-1].position
            prev = seg.nodes[-2].position
            dists = np.sqrt(((cand_pos - last) ** 2).sum(axis=1))
            gated = np.nonzero(dists <= params.velocity_limit)[0]
            stationary = np.linalg.norm(prev - last) < _COINCIDENT_EPS
            for j in gated:
                cand = candidates_t[int(j)]
                if stationary:
                    # uniform motion is trivially satisfied; rank by displacement
                    extensions.append((float(dists[j]), int(j), cand))
                else:
                    cost = link_cost(prev, last, cand.position)
                    if cost <= params.cost_threshold:
                        extensions.append((cost, int(j), cand))
        if not extensions:
            out.append(seg)
            continue
        extensions.sort(key=lambda e: (e[0], e[1]))
        for rank, (_, _, cand) in enumerate(extensions[: params.branch_limit]):
            if rank == 0:
                sid = seg.id
            else:
                sid = next_id
                next_id += 1
            out.append(
                TrajectorySegment(
                    id=sid,
                    nodes=seg.nodes + [cand],
                    last_activity=cand.frame,
                    state=seg.state,
                )
            )

    if candidates_t and candidates_t_minus_1:
        prev_pos = np.array([c.position for c in candidates_t_minus_1])
        gate = cdist(prev_pos, cand_pos) <= params.velocity_limit
        for i, j in np.argwhere(gate):
            a = candidates_t_minus_1[int(i)]
            b = candidates_t[int(j)]
            out.append(
                TrajectorySegment(id=next_id, nodes=[a, b], last_activity=b.frame)
            )
            next_id += 1
    return out, next_id


def segment_similarity(seg_a: TrajectorySegment, seg_b: TrajectorySegment) -> float:
    """Long-loose similarity between a segment and a later one.

    Both segments are extended across the gap under their own terminal
    uniform velocities and compared against the straight-line interpolation
    between the junction endpoints: similarity = gap / sum of deviations.
    Adjacent segments (gap 0) use one extrapolated point each across the
    junction. Pairs overlapping in time score 0; a zero deviation sum
    (perfect collinear alignment) scores +inf.
    """
    if seg_a.end_frame >= seg_b.start_frame:
        return 0.0
    a_last = seg_a.nodes[-1].position
    a_vel = a_last - seg_a.nodes[-2].position
    b_first = seg_b.nodes[0].position
    b_vel = seg_b.nodes[1].position - b_first
    gap = seg_b.start_frame - seg_a.end_frame - 1

    if gap == 0:
        forward = a_last + a_vel  # at seg_b's first frame
        backward = b_first - b_vel  # at seg_a's last frame
        total = float(np.linalg.norm(forward - b_first) + np.linalg.norm(backward - a_last))
        return math.inf if total < _ZERO_DENOM_EPS else 1.0 / total

    span = gap + 1
    total = 0.0
    for k in range(1, gap + 1):
        fwd = a_last + k * a_vel
        bwd = b_first - (span - k) * b_vel
        interp = a_last + (k / span) * (b_first - a_last)
        total += float(np.linalg.norm(fwd - interp) + np.linalg.norm(bwd - interp))
    return math.inf if total < _ZERO_DENOM_EPS else gap / total


def _mergeable_pairs(segments: list, params: TrajectoryParams):
    """Index pairs (earlier, later) that can possibly reach the similarity
    threshold.

    Junction distance is bounded for any pair that passes the threshold: all
    runs obey the velocity gate, so a qualifying pair must satisfy
    ||b_first - a_last|| <= (gap + 1) * (velocity_limit + 1/threshold).
    Pairs beyond that provably score below the threshold and are skipped.
    """
    reach = params.velocity_limit + 1.0 / params.similarity_threshold
    ends = np.array([s.nodes[-1].position for s in segments])
    starts = np.array([s.nodes[0].position for s in segments])
    end_frames = np.array([s.end_frame for s in segments])
    start_frames = np.array([s.start_frame for s in segments])
    pairs = []
    chunk = 1024
    for i0 in range(0, len(segments), chunk):
        i1 = min(i0 + chunk, len(segments))
        span = start_frames[None, :] - end_frames[i0:i1, None]  # gap + 1 when > 0
        qualifying = span > 0
        if not qualifying.any():
            continue
        dist = cdist(ends[i0:i1], starts)
        qualifying &= dist <= span * reach
        for di, j in np.argwhere(qualifying):
            pairs.append((i0 + int(di), int(j)))
    return pairs


def merge_segments(
    segments: list,
    params: TrajectoryParams,
    current_frame: int = None,
) -> list:
    """One merging round under the long-loose constraint.

    Segments are ranked by length (descending); pairs whose similarity
    reaches the threshold merge greedily, longer segment first, and each
    merge zeroes the links that would conflict with it: partners of the
    absorbed segment lose their link to the absorber, and vice versa.
    """
    live = [s for s in segments if s.state != DELETED]
    if len(live) < 2:
        return segments
    order = sorted(range(len(live)), key=lambda k: (-live[k].length, live[k].start_frame, live[k].id))
    ranked = [live[k] for k in order]

    neighbors: dict[int, set] = {i: set() for i in range(len(ranked))}
    for li, lj in _mergeable_pairs(ranked, params):
        if segment_similarity(ranked[li], ranked[lj]) >= params.similarity_threshold:
            neighbors[li].add(lj)
            neighbors[lj].add(li)

    consumed = set()
    merged: dict[int, TrajectorySegment] = {}

    def current(i):
        return merged.get(i, ranked[i])

    for i in range(len(ranked)):
        if i in consumed:
            continue
        for j in range(i + 1, len(ranked)):
            if j in consumed or j not in neighbors[i]:
                continue
            a, b = current(i), current(j)
            # the similarity matrix is not recomputed after a merge, so a
            # previously qualifying partner may now overlap the grown extent;
            # time disjointness is the merge precondition, recheck it
            if not (a.end_frame < b.start_frame or b.end_frame < a.start_frame):
                continue
            nodes = sorted(a.nodes + b.nodes, key=lambda n: n.frame)
            state = CONFIRMED if CONFIRMED in (a.state, b.state) else ACTIVE
            activity = current_frame if current_frame is not None else max(a.last_activity, b.last_activity)
            merged[i] = TrajectorySegment(id=a.id, nodes=nodes, last_activity=activity, state=state)
            consumed.add(j)
            # zero conflicting links: anything similar to j loses its link
            # with i, anything similar to i loses its link with j
            neighbors[i].discard(j)
            neighbors[j].discard(i)
            for k in list(neighbors[j]):
                neighbors[i].discard(k)
                neighbors[k].discard(i)
            for k in list(neighbors[i]):
                neighbors[j].discard(k)
                neighbors[k].discard(j)

    out = [s for s in segments if s.state == DELETED]
    out.extend(current(i) for i in range(len(ranked)) if i not in consumed)
    return out


def prune_segments(segments: list, current_frame: int, inactivity_limit: int) -> list:
    """Drop unconfirmed segments idle for more than ``inactivity_limit``
    frames. Confirmed segments are exempt."""
    out = []
    for seg in segments:
        if seg.state == ACTIVE and current_frame - seg.last_activity > inactivity_limit:
            seg.state = DELETED
            continue
        if seg.state != DELETED:
            out.append(seg)
    return out


def confirm_tracks(segments: list, params: TrajectoryParams) -> tuple[list, list]:
    """Mark segments longer than the confirmation length as confirmed,
    resolve crossings (same position, same frame) in favor of the longest,
    and emit every node of surviving confirmed segments as a Detection in
    original-frame pixel coordinates."""
    threshold = params.confirmation_length
    for seg in segments:
        if seg.state == ACTIVE and seg.length > threshold:
            seg.state = CONFIRMED

    confirmed = [s for s in segments if s.state == CONFIRMED]
    confirmed.sort(key=lambda s: (-s.length, s.start_frame, s.id))
    kept = []
    for seg in confirmed:
        clash = False
        for other in kept:
            if _segments_cross(seg, other, params.crossing_radius):
                clash = True
                break
        if clash:
            seg.state = DELETED
        else:
            kept.append(seg)

    survivors = [s for s in segments if s.state != DELETED]
    detections = []
    for seg in kept:
        for node in seg.nodes:
            detections.append(
                Detection(
                    frame=node.frame,
                    track_id=seg.id,
                    x=float(node.origin[0]),
                    y=float(node.origin[1]),
                    score=node.score,
                )
            )
    detections.sort(key=lambda d: (d.frame, d.track_id))
    return survivors, detections


def _segments_cross(a: TrajectorySegment, b: TrajectorySegment, radius: float) -> bool:
    by_frame = {n.frame: n.position for n in b.nodes}
    for node in a.nodes:
        other = by_frame.get(node.frame)
        if other is not None and np.linalg.norm(node.position - other) <= radius:
            return True
    return False


@dataclass
class SequenceResult:
    detections: list  # final confirmed Detections, sorted by (frame, track_id)
    registration_failures: list  # frame indices that fell back to identity
    detect_seconds: float = 0.0
    register_seconds: float = 0.0
    trajectory_seconds: float = 0.0
    n_frames: int = 0


def process_sequence(
    frames,
    detector,
    registration_provider,
    params: TrajectoryParams,
) -> SequenceResult:
    """Run the online pipeline over an ordered frame sequence.

    ``detector(frame) -> list[Candidate]`` supplies per-frame candidates;
    ``registration_provider(prev_frame, frame) -> Homography`` supplies the
    frame-to-previous transform (exceptions or None degrade to identity with
    a warning). Positions are compared in a reference frame re-anchored every
    ``params.window_length`` frames. Detections come out in original-frame
    pixel coordinates.
    """
    segments: list[TrajectorySegment] = []
    next_segment_id = 0
    next_source_id = 0
    prev_nodes: list[TrajectoryNode] = []
    prev_frame = None
    chain = Homography.identity()  # current frame -> anchor
    frames_since_anchor = 0
    detections: list[Detection] = []
    failures = []
    result = SequenceResult(detections=[], registration_failures=failures)

    for frame in frames:
        t0 = time.perf_counter()
        candidates = detector(frame)
        t1 = time.perf_counter()

        if prev_frame is not None:
            step = None
            try:
                step = registration_provider(prev_frame, frame)
            except (RegistrationError, ValueError):
                step = None
            if step is None:
                step = Homography.identity()
                failures.append(frame.index)
            chain = chain.compose(step)
            frames_since_anchor += 1
            if frames_since_anchor >= params.window_length:
                # re-anchor: current frame becomes the reference; re-express
                # every live position in the new coordinates exactly once
                # (node objects are shared between branched segments)
                to_new = chain.inverse()
                unique = {}
                for seg in segments:
                    for node in seg.nodes:
                        unique[id(node)] = node
                for node in prev_nodes:
                    unique[id(node)] = node
                nodes = list(unique.values())
                if nodes:
                    remapped = remap_points(to_new, np.array([n.position for n in nodes]))
                    for node, pos in zip(nodes, remapped):
                        node.position = pos
                chain = Homography.identity()
                frames_since_anchor = 0
        t2 = time.perf_counter()

        nodes_t = []
        if candidates:
            ref = remap_points(chain, np.array([c.position for c in candidates]))
            for cand, pos in zip(candidates, ref):
                nodes_t.append(
                    TrajectoryNode(
                        frame=frame.index,
                        position=pos,
                        source=next_source_id,
                        origin=(float(cand.position[0]), float(cand.position[1])),
                        score=cand.score,
                    )
                )
                next_source_id += 1

        segments, next_segment_id = grow_segments(
            segments, nodes_t, prev_nodes, params, next_segment_id
        )
        segments = merge_segments(segments, params, frame.index)
        segments = prune_segments(segments, frame.index, params.inactivity_limit)
        segments, detections = confirm_tracks(segments, params)
        t3 = time.perf_counter()

        result.detect_seconds += t1 - t0
        result.register_seconds += t2 - t1
        result.trajectory_seconds += t3 - t2
        result.n_frames += 1
        prev_nodes = nodes_t
        prev_frame = frame

    result.detections = detections
    return result
