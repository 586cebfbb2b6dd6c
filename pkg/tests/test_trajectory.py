import math

import numpy as np
import pytest

from irtk.imaging import Frame
from irtk.registration import Homography
from irtk.trajectory import (
    ACTIVE,
    CONFIRMED,
    DELETED,
    TrajectoryNode,
    TrajectoryParams,
    TrajectorySegment,
    confirm_tracks,
    grow_segments,
    link_cost,
    merge_segments,
    process_sequence,
    prune_segments,
    segment_similarity,
    velocity_gate,
)

PARAMS = TrajectoryParams()


def node(frame, x, y, source=0):
    return TrajectoryNode(frame=frame, position=(x, y), source=source, origin=(x, y))


def segment(sid, points, state=ACTIVE, last_activity=None):
    """points: iterable of (frame, x, y)."""
    nodes = [node(f, x, y, source=sid * 1000 + k) for k, (f, x, y) in enumerate(points)]
    return TrajectorySegment(
        id=sid,
        nodes=nodes,
        last_activity=nodes[-1].frame if last_activity is None else last_activity,
        state=state,
    )


# ---------------------------------------------------------------- link cost


def test_link_cost_uniform_motion_is_zero():
    assert link_cost((0, 0), (1, 0), (2, 0)) == 0.0


def test_link_cost_worked_examples():
    assert link_cost((0, 0), (1, 0), (2, 1)) == pytest.approx(0.5, rel=1e-12)
    assert link_cost((0, 0), (2, 0), (4.2, 0)) == pytest.approx(0.05, rel=1e-12)
    assert link_cost((0, 0), (2, 0), (4.2, 0)) <= PARAMS.cost_threshold


def test_link_cost_coincident_history_raises():
    with pytest.raises(ValueError):
        link_cost((1, 1), (1, 1), (2, 2))


def test_link_cost_rigid_motion_and_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pts = rng.uniform(-10, 10, (3, 2))
        if np.linalg.norm(pts[0] - pts[1]) < 1e-6:
            continue
        base = link_cost(*pts)
        theta = rng.uniform(0, 2 * math.pi)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        shift = rng.uniform(-100, 100, 2)
        scale = rng.uniform(0.1, 10.0)
        moved = [scale * (rot @ p) + shift for p in pts]
        assert link_cost(*moved) == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_link_cost_zero_iff_uniform_completion():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.uniform(-5, 5, (2, 2))
        if np.linalg.norm(a - b) < 1e-6:
            continue
        exact = 2 * b - a
        assert link_cost(a, b, exact) == pytest.approx(0.0, abs=1e-12)
        assert link_cost(a, b, exact + [0.01, 0]) > 0


# ------------------------------------------------------------ velocity gate


def test_velocity_gate_boundaries():
    assert velocity_gate((3, 3), (3, 3), 10.0)
    assert velocity_gate((0, 0), (10.0, 0), 10.0)  # inclusive
    assert not velocity_gate((0, 0), (10.001, 0), 10.0)


# ------------------------------------------------------------------ growth


def test_grow_extends_and_seeds():
    seg = segment(0, [(0, 0, 0), (1, 1, 0)])
    prev = [node(1, 1, 0, source=7)]
    cur = [node(2, 2, 0, source=8)]
    out, _ = grow_segments([seg], cur, prev, PARAMS)
    assert len(out) == 2
    extended = next(s for s in out if s.length == 3)
    assert [tuple(n.position) for n in extended.nodes] == [(0, 0), (1, 0), (2, 0)]
    assert extended.id == 0 and extended.last_activity == 2
    seeded = next(s for s in out if s.length == 2)
    assert [n.frame for n in seeded.nodes] == [1, 2]


def test_grow_branches_consume_prefix():
    seg = segment(0, [(0, 0, 0), (1, 1, 0)])
    cur = [node(2, 2, 0.1, source=1), node(2, 2, -0.1, source=2)]
    out, _ = grow_segments([seg], cur, [], PARAMS)
    # two branches replace the original: M grows by exactly one
    assert len(out) == 2
    assert all(s.length == 3 for s in out)
    assert {tuple(s.nodes[-1].position) for s in out} == {(2, 0.1), (2, -0.1)}
    assert len({s.id for s in out}) == 2


def test_grow_no_candidates_keeps_segments():
    seg = segment(0, [(0, 0, 0), (1, 1, 0)])
    out, _ = grow_segments([seg], [], [node(1, 1, 0)], PARAMS)
    assert out == [seg]


def test_grow_rejects_high_cost_or_fast_candidates():
    seg = segment(0, [(0, 0, 0), (1, 1, 0)])
    too_fast = [node(2, 12.0, 0, source=1)]  # velocity gate
    out, _ = grow_segments([seg], too_fast, [], PARAMS)
    assert out == [seg]
    crooked = [node(2, 2, 2, source=1)]  # cost = ||(0,2)||/2 = 1 > 0.2
    out, _ = grow_segments([seg], crooked, [], PARAMS)
    assert out == [seg]


def test_grow_stationary_history_bypasses_cost():
    seg = segment(0, [(0, 5, 5), (1, 5, 5)])
    cur = [node(2, 6, 5, source=1)]
    out, _ = grow_segments([seg], cur, [], PARAMS)
    assert any(s.length == 3 for s in out)


def test_grow_branch_limit():
    seg = segment(0, [(0, 0, 0), (1, 1, 0)])
    cur = [node(2, 2, 0.01 * k, source=k) for k in range(8)]
    out, _ = grow_segments([seg], cur, [], PARAMS)
    assert len(out) == PARAMS.branch_limit
    # lowest-cost candidates win the branches
    kept = sorted(abs(s.nodes[-1].position[1]) for s in out)
    assert kept == pytest.approx([0.0, 0.01, 0.02, 0.03, 0.04])


def test_grow_segment_count_never_decreases():
    rng = np.random.default_rng(2)
    segs = [segment(i, [(0, rng.uniform(0, 50), rng.uniform(0, 50)), (1, rng.uniform(0, 50), rng.uniform(0, 50))]) for i in range(10)]
    prev = [node(1, rng.uniform(0, 50), rng.uniform(0, 50), source=100 + i) for i in range(5)]
    cur = [node(2, rng.uniform(0, 50), rng.uniform(0, 50), source=200 + i) for i in range(5)]
    out, _ = grow_segments(segs, cur, prev, PARAMS)
    assert len(out) >= len(segs)


# -------------------------------------------------------------- similarity


def test_similarity_collinear_gap_two_is_infinite():
    a = segment(0, [(0, 0, 0), (1, 1, 0)])
    b = segment(1, [(4, 4, 0), (5, 5, 0)])
    assert segment_similarity(a, b) == math.inf


def test_similarity_worked_example():
    # gap 2; extensions (2,0),(3,0) and (2,1),(3,1); interpolation
    # (2,1/3),(3,2/3); deviation sum 2 -> similarity 1.0
    a = segment(0, [(5, 0, 0), (6, 1, 0)])
    b = segment(1, [(9, 4, 1), (10, 5, 1)])
    s = segment_similarity(a, b)
    assert s == pytest.approx(1.0, rel=1e-12)
    assert s >= PARAMS.similarity_threshold


def test_similarity_overlap_scores_zero():
    a = segment(0, [(0, 0, 0), (1, 1, 0), (2, 2, 0)])
    b = segment(1, [(2, 10, 0), (3, 11, 0)])
    assert segment_similarity(a, b) == 0.0
    assert segment_similarity(b, a) == 0.0


def test_similarity_adjacent_segments():
    a = segment(0, [(0, 0, 0), (1, 1, 0)])
    b = segment(1, [(2, 2, 0), (3, 3, 0)])
    assert segment_similarity(a, b) == math.inf
    # bend the continuation: forward lands at (2,0) vs (2,1); backward (1,1) vs (1,0)
    c = segment(2, [(2, 2, 1), (3, 3, 1)])
    assert segment_similarity(a, c) == pytest.approx(1.0 / 2.0, rel=1e-12)


def test_similarity_role_exchange_time_reversal():
    rng = np.random.default_rng(3)
    for _ in range(100):
        fa = int(rng.integers(0, 4))
        la = fa + int(rng.integers(1, 4))
        fb = la + 1 + int(rng.integers(0, 4))
        lb = fb + int(rng.integers(1, 4))
        mk = lambda f0, f1: [(f, float(rng.uniform(-20, 20)), float(rng.uniform(-20, 20))) for f in range(f0, f1 + 1)]
        a = segment(0, mk(fa, la))
        b = segment(1, mk(fb, lb))
        s_forward = segment_similarity(a, b)
        # reverse time: frame f -> -f, segments swap roles
        rev = lambda seg, sid: segment(sid, [(-n.frame, n.position[0], n.position[1]) for n in reversed(seg.nodes)])
        s_reversed = segment_similarity(rev(b, 2), rev(a, 3))
        if math.isinf(s_forward):
            assert math.isinf(s_reversed)
        else:
            assert s_reversed == pytest.approx(s_forward, rel=1e-9)


# ----------------------------------------------------------------- merging


def test_merge_two_collinear_segments():
    a = segment(0, [(0, 0, 0), (1, 1, 0)])
    b = segment(1, [(4, 4, 0), (5, 5, 0)])
    out = merge_segments([a, b], PARAMS, current_frame=5)
    assert len(out) == 1
    merged = out[0]
    assert merged.length == 4
    assert [n.frame for n in merged.nodes] == [0, 1, 4, 5]
    assert merged.last_activity == 5


def test_merge_nothing_similar():
    a = segment(0, [(0, 0, 0), (1, 1, 0)])
    b = segment(1, [(4, 40, 40), (5, 39, 40)])
    out = merge_segments([a, b], PARAMS)
    assert {s.id for s in out} == {0, 1}
    assert all(s.length == 2 for s in out)


def test_merge_three_mutually_similar_zeroing():
    a = segment(0, [(0, 0, 0), (1, 1, 0), (2, 2, 0), (3, 3, 0), (4, 4, 0)])
    b = segment(1, [(7, 7, 0), (8, 8, 0), (9, 9, 0)])
    c = segment(2, [(12, 12, 0), (13, 13, 0)])
    out = merge_segments([a, b, c], PARAMS, current_frame=13)
    # a absorbs b; c's links are zeroed by the conflict rule and it survives alone
    assert len(out) == 2
    merged = next(s for s in out if s.id == 0)
    assert merged.length == 8
    assert [n.frame for n in merged.nodes] == [0, 1, 2, 3, 4, 7, 8, 9]
    lone = next(s for s in out if s.id == 2)
    assert lone.length == 2


def test_merge_preserves_confirmed_state():
    a = segment(0, [(0, 0, 0), (1, 1, 0)], state=CONFIRMED)
    b = segment(1, [(4, 4, 0), (5, 5, 0)])
    out = merge_segments([a, b], PARAMS, current_frame=5)
    assert out[0].state == CONFIRMED


def _merge_oracle(segments, params, current_frame):
    """Independent re-derivation: dense similarity matrix + the literal
    nested-loop merge with explicit zeroing."""

    def similarity(sa, sb):
        if sa.end_frame >= sb.start_frame:
            return 0.0
        gap = sb.start_frame - sa.end_frame - 1
        a_last = sa.nodes[-1].position
        va = a_last - sa.nodes[-2].position
        b_first = sb.nodes[0].position
        vb = sb.nodes[1].position - b_first
        frames = list(range(sa.end_frame + 1, sb.start_frame))
        if not frames:
            d = np.linalg.norm(a_last + va - b_first) + np.linalg.norm(b_first - vb - a_last)
            return math.inf if d < 1e-12 else 1.0 / d
        total = 0.0
        for f in frames:
            pa = a_last + (f - sa.end_frame) * va
            pb = b_first - (sb.start_frame - f) * vb
            w = (f - sa.end_frame) / (sb.start_frame - sa.end_frame)
            pk = (1 - w) * a_last + w * b_first
            total += np.linalg.norm(pa - pk) + np.linalg.norm(pb - pk)
        return math.inf if total < 1e-12 else gap / total

    ranked = sorted(segments, key=lambda s: (-s.length, s.start_frame, s.id))
    m = len(ranked)
    A2 = np.zeros((m, m), dtype=bool)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            s = max(similarity(ranked[i], ranked[j]), similarity(ranked[j], ranked[i]))
            if s >= params.similarity_threshold:
                A2[i, j] = True
    nodes = {i: list(ranked[i].nodes) for i in range(m)}
    states = {i: ranked[i].state for i in range(m)}
    gone = set()
    for i in range(m):
        if i in gone:
            continue
        for j in range(i + 1, m):
            if j in gone or not A2[i, j]:
                continue
            fi = {n.frame for n in nodes[i]}
            fj = {n.frame for n in nodes[j]}
            if fi & fj or not (max(fi) < min(fj) or max(fj) < min(fi)):
                continue
            nodes[i] = sorted(nodes[i] + nodes[j], key=lambda n: n.frame)
            if states[j] == CONFIRMED:
                states[i] = CONFIRMED
            gone.add(j)
            for k in range(m):
                if A2[k, j]:
                    A2[i, k] = A2[k, i] = False
                if A2[k, i]:
                    A2[j, k] = A2[k, j] = False
    return sorted(
        (tuple(n.frame for n in nodes[i]), states[i]) for i in range(m) if i not in gone
    )


def test_merge_matches_independent_oracle():
    rng = np.random.default_rng(4)
    params = TrajectoryParams()
    for trial in range(60):
        segs = []
        for sid in range(int(rng.integers(2, 8))):
            start = int(rng.integers(0, 12))
            length = int(rng.integers(2, 6))
            x, y = rng.uniform(0, 60, 2)
            vx, vy = rng.uniform(-4, 4, 2)  # steps bounded by the velocity gate
            pts = []
            for k in range(length):
                pts.append((start + k, x + vx * k, y + vy * k))
            segs.append(segment(sid, pts))
        got = merge_segments([TrajectorySegment(s.id, list(s.nodes), s.last_activity, s.state) for s in segs], params, current_frame=20)
        got_shape = sorted((tuple(n.frame for n in s.nodes), s.state) for s in got)
        want_shape = _merge_oracle(segs, params, current_frame=20)
        assert got_shape == want_shape, f"trial {trial}"


# ----------------------------------------------------------------- pruning


def test_prune_idle_segments():
    stale = segment(0, [(0, 0, 0), (1, 1, 0)], last_activity=1)
    fresh = segment(1, [(0, 5, 5), (1, 6, 5)], last_activity=2)
    out = prune_segments([stale, fresh], current_frame=7, inactivity_limit=5)
    assert [s.id for s in out] == [1]
    assert stale.state == DELETED


def test_prune_boundary_is_strict():
    seg = segment(0, [(0, 0, 0), (1, 1, 0)], last_activity=2)
    out = prune_segments([seg], current_frame=7, inactivity_limit=5)  # idle exactly 5
    assert out == [seg]
    assert seg.state == ACTIVE


def test_prune_exempts_confirmed():
    seg = segment(0, [(0, 0, 0), (1, 1, 0)], state=CONFIRMED, last_activity=0)
    out = prune_segments([seg], current_frame=10, inactivity_limit=5)
    assert out == [seg]
    assert seg.state == CONFIRMED


# ------------------------------------------------------------- confirmation


def test_confirmation_threshold_floor():
    assert PARAMS.confirmation_length == 6  # floor(0.3 * 20)
    assert TrajectoryParams(length_fraction=0.65).confirmation_length == 13


def test_confirm_length_boundary():
    six = segment(0, [(f, f, 0) for f in range(6)])
    seven = segment(1, [(f, 30 + f, 30) for f in range(7)])
    survivors, detections = confirm_tracks([six, seven], PARAMS)
    assert six.state == ACTIVE
    assert seven.state == CONFIRMED
    assert {d.track_id for d in detections} == {1}
    assert len(detections) == 7


def test_confirm_crossing_keeps_longest():
    long = segment(0, [(f, f, 0) for f in range(9)])
    short = segment(1, [(f, f, 0.5) for f in range(2, 9)])  # crosses within 1 px
    survivors, detections = confirm_tracks([long, short], PARAMS)
    assert long.state == CONFIRMED
    assert short.state == DELETED
    assert {d.track_id for d in detections} == {0}


def test_confirm_none_long_enough():
    segs = [segment(i, [(f, 10 * i + f, 0) for f in range(4)]) for i in range(3)]
    survivors, detections = confirm_tracks(segs, PARAMS)
    assert detections == []


# ------------------------------------------------------------------ driver


class _ScriptedDetector:
    """Candidate script: {frame: [(x, y), ...]}."""

    def __init__(self, script):
        self.script = script

    def __call__(self, frame):
        from irtk.candidates import Candidate

        return [
            Candidate(frame=frame.index, position=np.array(p, float), polarity=1)
            for p in self.script.get(frame.index, [])
        ]


def blank_frames(n):
    return [Frame(index=i, pixels=np.zeros((8, 8), np.uint16)) for i in range(n)]


def identity_registration(prev, cur):
    return Homography.identity()


def test_driver_uniform_target_static_camera():
    script = {t: [(10.0 + 1.0 * t, 20.0)] for t in range(50)}
    result = process_sequence(blank_frames(50), _ScriptedDetector(script), identity_registration, PARAMS)
    tracks = {d.track_id for d in result.detections}
    assert len(tracks) == 1
    frames_covered = {d.frame for d in result.detections}
    assert len(frames_covered) >= 50 - PARAMS.confirmation_length
    assert frames_covered == set(range(50))
    xs = {d.frame: d.x for d in result.detections}
    assert xs[7] == pytest.approx(17.0)


def test_driver_empty_sequence():
    result = process_sequence(blank_frames(30), _ScriptedDetector({}), identity_registration, PARAMS)
    assert result.detections == []


def test_driver_bridges_detector_dropout():
    script = {t: [(5.0 + 2.0 * t, 8.0)] for t in range(30) if t not in (14, 15)}
    result = process_sequence(blank_frames(30), _ScriptedDetector(script), identity_registration, PARAMS)
    tracks = {d.track_id for d in result.detections}
    assert len(tracks) == 1
    frames_covered = sorted({d.frame for d in result.detections})
    assert frames_covered == [t for t in range(30) if t not in (14, 15)]


def test_driver_registration_failure_degrades_to_identity():
    def failing(prev, cur):
        return None

    script = {t: [(10.0 + t, 10.0)] for t in range(10)}
    result = process_sequence(blank_frames(10), _ScriptedDetector(script), failing, PARAMS)
    assert result.registration_failures == list(range(1, 10))
    assert {d.track_id for d in result.detections}  # track still confirmed


def test_driver_compensates_camera_motion():
    # moving camera: content shifts by (+3, 0) per frame; a world-static
    # target appears at image x decreasing by 3 per frame. With ground-truth
    # steps the remapped track is stationary and must confirm.
    steps = [Homography(np.array([[1.0, 0, 3.0], [0, 1.0, 0], [0, 0, 1.0]])) for _ in range(19)]

    def provider(prev, cur):
        return steps[cur.index - 1]

    script = {t: [(90.0 - 3.0 * t, 40.0)] for t in range(20)}
    result = process_sequence(blank_frames(20), _ScriptedDetector(script), provider, PARAMS)
    assert len({d.track_id for d in result.detections}) == 1
    # detections keep original per-frame pixel coordinates
    xs = {d.frame: d.x for d in result.detections}
    assert xs[10] == pytest.approx(60.0)


def test_driver_reanchors_and_keeps_linking():
    # 45 frames crosses two re-anchor points at L=20; linking must survive
    steps = [Homography(np.array([[1.0, 0, 1.5], [0, 1.0, -0.5], [0, 0, 1.0]])) for _ in range(44)]

    def provider(prev, cur):
        return steps[cur.index - 1]

    script = {t: [(100.0 - 1.5 * t + 0.4 * t, 50.0 + 0.5 * t + 0.3 * t)] for t in range(45)}
    result = process_sequence(blank_frames(45), _ScriptedDetector(script), provider, PARAMS)
    assert len({d.track_id for d in result.detections}) == 1
    assert {d.frame for d in result.detections} == set(range(45))
