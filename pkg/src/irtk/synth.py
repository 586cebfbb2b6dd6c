"""Synthetic infrared sequence generator.

Renders a textured background once at twice the frame extent, samples it per
frame through a cumulative camera homography, injects small Gaussian spot
targets following piecewise-uniform world trajectories, sprinkles short-lived
clutter speckles, and adds sensor noise. Ground truth (per-frame target
centers and per-step true homographies) comes out alongside the frames.
Everything is deterministic given the seed; background, targets, clutter and
noise each draw from their own RNG stream.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .imaging import Frame, save_frame
from .registration import Homography, save_transforms
from .formats import write_annotations

BACKGROUNDS = ("smooth-noise", "cloud-like", "block-texture")


@dataclass(frozen=True)
class SequenceSpec:
    width: int = 640
    height: int = 512
    n_frames: int = 50
    n_targets: int = 2
    target_size_min: int = 3
    target_size_max: int = 7
    bright_fraction: float = 0.7
    target_contrast_min: float = 1500.0
    target_contrast_max: float = 4000.0
    target_speed_min: float = 0.4
    target_speed_max: float = 2.5
    background: str = "cloud-like"
    background_level: float = 20000.0
    background_amplitude: float = 4000.0
    camera_translation: float = 1.0  # px/frame drift magnitude
    camera_rotation: float = 0.002  # rad/frame
    camera_perspective: float = 0.0  # relative perspective magnitude
    clutter_rate: float = 5.0  # expected speckles born per frame
    noise_sigma: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValueError("frame must be at least 32x32")
        if self.n_frames < 0:
            raise ValueError("n_frames must be non-negative")
        if not 0 <= self.n_targets <= 3:
            raise ValueError("n_targets must lie in [0, 3]")
        if not 3 <= self.target_size_min <= self.target_size_max <= 7:
            raise ValueError("target sizes must lie in [3, 7]")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if not 0 <= self.bright_fraction <= 1:
            raise ValueError("bright_fraction must lie in [0, 1]")
        if self.clutter_rate < 0 or self.noise_sigma < 0:
            raise ValueError("clutter_rate and noise_sigma must be non-negative")


@dataclass
class GroundTruth:
    """Per-frame annotated target centers and per-step true homographies."""

    annotations: list = field(default_factory=list)  # (frame, target_id, x, y) floats
    step_homographies: list = field(default_factory=list)  # frame t+1 -> frame t


def _value_noise(shape, cell: float, rng, smooth: bool) -> np.ndarray:
    """One octave of value noise: random grid values interpolated bilinearly,
    optionally with a smoothstep fade."""
    h, w = shape
    gh = int(math.ceil(h / cell)) + 2
    gw = int(math.ceil(w / cell)) + 2
    grid = rng.standard_normal((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    if smooth:
        ty = ty * ty * (3.0 - 2.0 * ty)
        tx = tx * tx * (3.0 - 2.0 * tx)
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    top = g00 * (1 - tx) + g01 * tx
    bot = g10 * (1 - tx) + g11 * tx
    return top * (1 - ty) + bot * ty


def _render_background(spec: SequenceSpec, rng) -> np.ndarray:
    """World texture at 2x the frame extent."""
    shape = (2 * spec.height, 2 * spec.width)
    base_cell = max(shape) / 4.0
    if spec.background == "smooth-noise":
        layers = [(base_cell, 1.0), (base_cell / 2, 0.4)]
        smooth = True
    elif spec.background == "cloud-like":
        layers = [(base_cell / 2**k, 0.55**k) for k in range(5)]
        smooth = True
    else:  # block-texture
        layers = [(base_cell / 2**k, 0.6**k) for k in range(3)]
        smooth = False
    tex = np.zeros(shape)
    total = 0.0
    for cell, weight in layers:
        tex += weight * _value_noise(shape, max(cell, 2.0), rng, smooth)
        total += weight
    tex /= total
    if spec.background == "block-texture":
        # quantize to plateaus, keep mild smoothing so edges are not aliased
        tex = np.round(tex * 3.0) / 3.0
        tex = ndimage.uniform_filter(tex, 3)
    tex = spec.background_level + spec.background_amplitude * tex / max(np.abs(tex).max(), 1e-9)
    return np.clip(tex, 0.0, 65535.0)


def _camera_steps(spec: SequenceSpec, rng) -> list:
    """Per-step homographies mapping frame t+1 coordinates to frame t."""
    cx, cy = spec.width / 2.0, spec.height / 2.0
    drift = rng.uniform(-spec.camera_translation, spec.camera_translation, size=2)
    steps = []
    for _ in range(max(spec.n_frames - 1, 0)):
        jitter = rng.normal(0.0, spec.camera_translation / 4.0, size=2)
        tx, ty = drift + jitter
        theta = rng.normal(0.0, spec.camera_rotation)
        c, s = math.cos(theta), math.sin(theta)
        # rotate about the image center, then translate
        m = np.array(
            [
                [c, -s, cx - c * cx + s * cy + tx],
                [s, c, cy - s * cx - c * cy + ty],
                [0.0, 0.0, 1.0],
            ]
        )
        if spec.camera_perspective > 0:
            m[2, 0] = rng.normal(0.0, spec.camera_perspective / spec.width)
            m[2, 1] = rng.normal(0.0, spec.camera_perspective / spec.height)
        steps.append(Homography(m))
    return steps


class _TargetTrack:
    """Piecewise-uniform world trajectory with bounded velocity changes."""

    def __init__(self, spec: SequenceSpec, rng):
        margin = 0.15
        self.pos = np.array(
            [
                spec.width / 2.0 + rng.uniform(margin * spec.width, (1 - margin) * spec.width),
                spec.height / 2.0 + rng.uniform(margin * spec.height, (1 - margin) * spec.height),
            ]
        )
        speed = rng.uniform(spec.target_speed_min, spec.target_speed_max)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        self.vel = speed * np.array([math.cos(angle), math.sin(angle)])
        self.next_turn = int(rng.integers(15, 31))
        self.size = int(rng.integers(spec.target_size_min, spec.target_size_max + 1))
        self.contrast = rng.uniform(spec.target_contrast_min, spec.target_contrast_max)
        self.bright = rng.random() < spec.bright_fraction
        self._spec = spec
        self._rng = rng

    def advance(self, frame: int) -> None:
        self.pos = self.pos + self.vel
        if frame >= self.next_turn:
            # small rotation and scale keep the turn well inside the uniform
            # motion tolerance of the linking stage
            angle = self._rng.uniform(-0.3, 0.3)
            scale = self._rng.uniform(0.9, 1.1)
            c, s = math.cos(angle), math.sin(angle)
            self.vel = scale * np.array(
                [c * self.vel[0] - s * self.vel[1], s * self.vel[0] + c * self.vel[1]]
            )
            speed = float(np.linalg.norm(self.vel))
            lo, hi = self._spec.target_speed_min, self._spec.target_speed_max
            if speed > 0 and not lo <= speed <= hi:
                self.vel *= min(max(speed, lo), hi) / speed
            self.next_turn = frame + int(self._rng.integers(15, 31))


def _splat_gaussian(img: np.ndarray, x: float, y: float, size: int, amplitude: float) -> None:
    """Add a Gaussian spot (sigma = size/4) centered at subpixel (x, y)."""
    sigma = size / 4.0
    reach = int(math.ceil(3.0 * sigma))
    h, w = img.shape
    x0, x1 = int(math.floor(x)) - reach, int(math.floor(x)) + reach + 1
    y0, y1 = int(math.floor(y)) - reach, int(math.floor(y)) + reach + 1
    x0c, x1c = max(x0, 0), min(x1, w)
    y0c, y1c = max(y0, 0), min(y1, h)
    if x0c >= x1c or y0c >= y1c:
        return
    ys = np.arange(y0c, y1c)[:, None] - y
    xs = np.arange(x0c, x1c)[None, :] - x
    img[y0c:y1c, x0c:x1c] += amplitude * np.exp(-(ys * ys + xs * xs) / (2.0 * sigma * sigma))


def generate_sequence(spec: SequenceSpec):
    """Render (frames, GroundTruth) for the spec."""
    streams = np.random.SeedSequence(spec.seed).spawn(4)
    rng_bg = np.random.default_rng(streams[0])
    rng_targets = np.random.default_rng(streams[1])
    rng_clutter = np.random.default_rng(streams[2])
    rng_noise = np.random.default_rng(streams[3])

    world = _render_background(spec, rng_bg)
    steps = _camera_steps(spec, rng_bg)
    truth = GroundTruth(step_homographies=steps)

    # world coordinates of the frame-0 view start at (width/2, height/2)
    g0_inv = np.array(
        [[1.0, 0.0, spec.width / 2.0], [0.0, 1.0, spec.height / 2.0], [0.0, 0.0, 1.0]]
    )
    targets = [_TargetTrack(spec, rng_targets) for _ in range(spec.n_targets)]

    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    pix_h = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])

    frames = []
    live_clutter = []  # (x, y, size, amplitude, frames_left) in current frame coords
    cam_inv = g0_inv.copy()  # image t -> world
    for t in range(spec.n_frames):
        if t > 0:
            cam_inv = cam_inv @ steps[t - 1].matrix
            for tr in targets:
                tr.advance(t)

        # inverse-warp the world texture through the cumulative camera motion
        world_pts = cam_inv @ pix_h
        wx = world_pts[0] / world_pts[2]
        wy = world_pts[1] / world_pts[2]
        img = ndimage.map_coordinates(
            world, [wy.reshape(spec.height, spec.width), wx.reshape(spec.height, spec.width)],
            order=1, mode="nearest",
        )

        cam = np.linalg.inv(cam_inv)  # world -> image t
        for tid, tr in enumerate(targets):
            ph = cam @ np.array([tr.pos[0], tr.pos[1], 1.0])
            ix, iy = ph[0] / ph[2], ph[1] / ph[2]
            _splat_gaussian(img, ix, iy, tr.size, tr.contrast if tr.bright else -tr.contrast)
            if 0 <= ix <= spec.width - 1 and 0 <= iy <= spec.height - 1:
                truth.annotations.append((t, tid, ix, iy))

        # clutter speckles live 1-2 frames and look just like targets;
        # telling them apart is the trajectory stage's job
        surviving = []
        for x, y, size, amp, left in live_clutter:
            _splat_gaussian(img, x, y, size, amp)
            if left > 1:
                surviving.append((x, y, size, amp, left - 1))
        live_clutter = surviving
        for _ in range(rng_clutter.poisson(spec.clutter_rate)):
            x = rng_clutter.uniform(0, spec.width - 1)
            y = rng_clutter.uniform(0, spec.height - 1)
            size = int(rng_clutter.integers(spec.target_size_min, spec.target_size_max + 1))
            amp = rng_clutter.uniform(spec.target_contrast_min, spec.target_contrast_max)
            if rng_clutter.random() >= spec.bright_fraction:
                amp = -amp
            lifetime = int(rng_clutter.integers(1, 3))
            _splat_gaussian(img, x, y, size, amp)
            if lifetime > 1:
                live_clutter.append((x, y, size, amp, lifetime - 1))

        if spec.noise_sigma > 0:
            img = img + rng_noise.normal(0.0, spec.noise_sigma, img.shape)
        frames.append(Frame(index=t, pixels=np.clip(np.rint(img), 0, 65535).astype(np.uint16)))
    return frames, truth


def spec_to_text(spec: SequenceSpec) -> str:
    return "\n".join(f"{k} = {v}" for k, v in asdict(spec).items()) + "\n"


def spec_from_text(text: str) -> SequenceSpec:
    defaults = SequenceSpec()
    kwargs = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ValueError(f"line {ln}: unknown spec key {key!r}")
        current = getattr(defaults, key)
        kwargs[key] = type(current)(value) if not isinstance(current, str) else value
    return SequenceSpec(**kwargs)


def write_dataset(frames, truth: GroundTruth, out_dir: str, spec: SequenceSpec = None) -> None:
    """Write frames as frame_%05d.pgm plus annotations.csv, transforms.txt
    and (when given) the generating spec as spec.cfg."""
    os.makedirs(out_dir, exist_ok=True)
    for frame in frames:
        save_frame(frame, os.path.join(out_dir, f"frame_{frame.index:05d}.pgm"))
    write_annotations(
        [(f, tid, round(x), round(y)) for f, tid, x, y in truth.annotations],
        os.path.join(out_dir, "annotations.csv"),
    )
    save_transforms(truth.step_homographies, os.path.join(out_dir, "transforms.txt"))
    if spec is not None:
        with open(os.path.join(out_dir, "spec.cfg"), "w", encoding="ascii") as fh:
            fh.write(spec_to_text(spec))


def read_dataset_frames(seq_dir: str) -> list:
    """Load frame_%05d.pgm files in index order."""
    from .imaging import load_frame

    names = sorted(n for n in os.listdir(seq_dir) if n.startswith("frame_") and n.endswith(".pgm"))
    frames = []
    for name in names:
        index = int(name[len("frame_") : -len(".pgm")])
        frames.append(load_frame(os.path.join(seq_dir, name), index=index))
    return frames
