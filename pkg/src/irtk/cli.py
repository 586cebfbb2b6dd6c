"""Command-line orchestration: synth, train, detect, eval, dump-config.

One flat ``key = value`` config file covers every pipeline parameter; CLI
flags override individual entries. All commands exit 0 on success and 1 on
any validation or I/O failure. IRTK_THREADS caps the per-frame detection
worker count (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import candidates as cand_mod
from . import evaluation, formats, gbdt, registration, synth, trajectory
from .imaging import Frame, save_frame


@dataclass(frozen=True)
class PipelineConfig:
    # per-frame candidate detection
    median_window: int = 11
    candidate_budget: int = 3500
    scales: tuple = (3, 7, 11, 15)
    score_threshold: float = 0.5
    # classifier training
    negative_ratio: float = 10.0
    train_seed: int = 0
    n_trees: int = 200
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_samples_leaf: int = 20
    n_bins: int = 64
    goss_enabled: bool = True
    goss_top_rate: float = 0.2
    goss_other_rate: float = 0.3
    # registration
    ransac_iterations: int = 1000
    ransac_inlier_threshold: float = 2.0
    ransac_min_inliers: int = 12
    ransac_seed: int = 0
    # trajectory constraints
    cost_threshold: float = 0.2
    velocity_limit: float = 10.0
    similarity_threshold: float = 0.1
    inactivity_limit: int = 5
    length_fraction: float = 0.3
    window_length: int = 20
    branch_limit: int = 5
    crossing_radius: float = 1.0
    # evaluation
    match_radius: float = 3.0
    match_metric: str = "chebyshev"

    def validate(self) -> "PipelineConfig":
        # constructing the stage parameter objects runs their range checks
        self.interest_params()
        self.train_params()
        self.ransac_params()
        self.trajectory_params()
        if self.match_metric not in (evaluation.CHEBYSHEV, evaluation.EUCLIDEAN):
            raise ValueError(f"unknown match_metric {self.match_metric!r}")
        if self.match_radius <= 0:
            raise ValueError("match_radius must be positive")
        if not self.scales or any(s < 1 or s % 2 == 0 for s in self.scales):
            raise ValueError("scales must be odd positive region sizes")
        return self

    def interest_params(self) -> cand_mod.InterestFilterParams:
        return cand_mod.InterestFilterParams(
            median_window=self.median_window, budget=self.candidate_budget
        )

    def train_params(self) -> gbdt.GbdtTrainParams:
        return gbdt.GbdtTrainParams(
            n_trees=self.n_trees,
            learning_rate=self.learning_rate,
            max_leaves=self.max_leaves,
            min_samples_leaf=self.min_samples_leaf,
            n_bins=self.n_bins,
            goss_enabled=self.goss_enabled,
            goss_top_rate=self.goss_top_rate,
            goss_other_rate=self.goss_other_rate,
        )

    def ransac_params(self) -> registration.RansacParams:
        return registration.RansacParams(
            max_iterations=self.ransac_iterations,
            inlier_threshold=self.ransac_inlier_threshold,
            min_inliers=self.ransac_min_inliers,
            seed=self.ransac_seed,
        )

    def trajectory_params(self) -> trajectory.TrajectoryParams:
        return trajectory.TrajectoryParams(
            cost_threshold=self.cost_threshold,
            velocity_limit=self.velocity_limit,
            similarity_threshold=self.similarity_threshold,
            inactivity_limit=self.inactivity_limit,
            length_fraction=self.length_fraction,
            window_length=self.window_length,
            branch_limit=self.branch_limit,
            crossing_radius=self.crossing_radius,
        )


def _parse_value(current, text: str):
    if isinstance(current, bool):
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text.strip()


def config_to_text(config: PipelineConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: PipelineConfig = None) -> PipelineConfig:
    config = base or PipelineConfig()
    known = {f.name for f in fields(config)}
    updates = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        updates[key] = _parse_value(getattr(config, key), value)
    return replace(config, **updates)


def load_config(path: str = None, overrides: dict = None) -> PipelineConfig:
    config = PipelineConfig()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            config = config_from_text(fh.read(), config)
    if overrides:
        parsed = {k: _parse_value(getattr(config, k), str(v)) for k, v in overrides.items()}
        config = replace(config, **parsed)
    return config.validate()


def worker_count() -> int:
    raw = os.environ.get("IRTK_THREADS", "").strip()
    if raw in ("", "0"):
        return min(4, os.cpu_count() or 1)
    n = int(raw)
    if n < 1:
        raise ValueError("IRTK_THREADS must be a non-negative integer")
    return n


def _collect_overrides(args, mapping: dict) -> dict:
    overrides = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def cmd_synth(args) -> int:
    spec = synth.SequenceSpec()
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = synth.spec_from_text(fh.read())
    updates = {}
    for attr, key in (
        ("width", "width"),
        ("height", "height"),
        ("frames", "n_frames"),
        ("targets", "n_targets"),
        ("clutter_rate", "clutter_rate"),
        ("noise_sigma", "noise_sigma"),
        ("background", "background"),
        ("seed", "seed"),
    ):
        value = getattr(args, attr)
        if value is not None:
            updates[key] = value
    if updates:
        spec = replace(spec, **updates)
    frames, truth = synth.generate_sequence(spec)
    synth.write_dataset(frames, truth, args.out, spec)
    print(f"wrote {len(frames)} frames, {len(truth.annotations)} annotations to {args.out}")
    return 0


def _load_sequence_dir(seq_dir: str):
    frames = synth.read_dataset_frames(seq_dir)
    if not frames:
        raise ValueError(f"no frame_*.pgm files in {seq_dir}")
    ann_path = os.path.join(seq_dir, "annotations.csv")
    annotations = formats.read_annotations(ann_path) if os.path.exists(ann_path) else []
    return frames, annotations


def cmd_train(args) -> int:
    config = load_config(args.config, _collect_overrides(args, {"seed": "train_seed"}))
    feats = []
    labels = []
    n_pos = 0
    for seq_dir in args.data:
        frames, annotations = _load_sequence_dir(seq_dir)
        if not annotations:
            raise ValueError(f"no annotations.csv in {seq_dir}; cannot train")
        ts = cand_mod.build_training_set(
            frames,
            annotations,
            scales=config.scales,
            negative_ratio=config.negative_ratio,
            seed=config.train_seed,
        )
        feats.append(ts.features)
        labels.append(ts.labels)
        n_pos += int(ts.labels.sum())
    data = cand_mod.TrainingSet(features=np.vstack(feats), labels=np.concatenate(labels))
    model = gbdt.train(data, config.train_params(), seed=config.train_seed)
    gbdt.save_model(model, args.model_out)
    print(f"samples: {len(data.labels)} ({n_pos} positive, {len(data.labels) - n_pos} negative)")
    print(f"final training loss: {model.train_losses[-1]:.6f}")
    print(f"model written to {args.model_out}")
    return 0


def _make_detector(config: PipelineConfig, model):
    params = config.interest_params()

    def detector(frame: Frame):
        return cand_mod.detect_candidates(
            frame, params, config.scales, model, config.score_threshold
        )

    return detector


def _make_image_registration(config: PipelineConfig):
    ransac = config.ransac_params()

    def provider(prev: Frame, cur: Frame):
        matches = registration.match_frames(prev, cur)
        if len(matches) < 4:
            return None
        homography, _ = registration.estimate_homography_ransac(matches, ransac)
        return homography

    return provider


def _make_transform_registration(steps):
    def provider(prev: Frame, cur: Frame):
        idx = cur.index - 1
        if not 0 <= idx < len(steps):
            return None
        return steps[idx]

    return provider


def _draw_box(pixels: np.ndarray, x: float, y: float, radius: int, value: int) -> None:
    h, w = pixels.shape
    xi, yi = int(round(x)), int(round(y))
    x0, x1 = max(xi - radius, 0), min(xi + radius, w - 1)
    y0, y1 = max(yi - radius, 0), min(yi + radius, h - 1)
    if x0 > x1 or y0 > y1:
        return
    pixels[y0, x0 : x1 + 1] = value
    pixels[y1, x0 : x1 + 1] = value
    pixels[y0 : y1 + 1, x0] = value
    pixels[y0 : y1 + 1, x1] = value


def _write_overlays(frames, detections, annotations, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    det_by_frame: dict[int, list] = {}
    for d in detections:
        det_by_frame.setdefault(d.frame, []).append((d.x, d.y))
    ann_by_frame: dict[int, list] = {}
    for frame, _tid, x, y in annotations:
        ann_by_frame.setdefault(int(frame), []).append((float(x), float(y)))
    for frame in frames:
        pixels = frame.pixels.copy()
        for x, y in ann_by_frame.get(frame.index, []):
            _draw_box(pixels, x, y, 7, 32768)
        for x, y in det_by_frame.get(frame.index, []):
            _draw_box(pixels, x, y, 5, 65535)
        save_frame(Frame(index=frame.index, pixels=pixels), os.path.join(out_dir, f"frame_{frame.index:05d}.pgm"))


def cmd_detect(args) -> int:
    overrides = _collect_overrides(
        args, {"budget": "candidate_budget", "window": "window_length", "mu": "length_fraction"}
    )
    config = load_config(args.config, overrides)
    model = gbdt.load_model(args.model)
    frames, annotations = _load_sequence_dir(args.seq)

    traj_params = config.trajectory_params()
    print(f"confirmation threshold: {traj_params.confirmation_length}")

    detector = _make_detector(config, model)
    workers = worker_count()
    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_frame = list(pool.map(detector, frames))
    else:
        per_frame = [detector(f) for f in frames]
    detect_seconds = time.perf_counter() - t0
    cached = {f.index: c for f, c in zip(frames, per_frame)}

    if args.gt_transforms is not None:
        path = args.gt_transforms
        if path == "auto":
            path = os.path.join(args.seq, "transforms.txt")
        provider = _make_transform_registration(registration.load_transforms(path))
    else:
        provider = _make_image_registration(config)

    result = trajectory.process_sequence(
        frames, lambda f: cached[f.index], provider, traj_params
    )
    formats.write_detections(result.detections, args.out)

    n = max(result.n_frames, 1)
    print(f"frames: {result.n_frames}")
    print(f"candidate detection: {1000.0 * detect_seconds / n:.1f} ms/frame")
    print(f"registration: {1000.0 * result.register_seconds / n:.1f} ms/frame")
    print(f"trajectory: {1000.0 * result.trajectory_seconds / n:.1f} ms/frame")
    if result.registration_failures:
        print(f"registration fell back to identity on {len(result.registration_failures)} frame(s)")
    tracks = {d.track_id for d in result.detections}
    print(f"detections: {len(result.detections)} across {len(tracks)} track(s) -> {args.out}")
    if args.overlay:
        _write_overlays(frames, result.detections, annotations, args.overlay)
        print(f"overlays written to {args.overlay}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, _collect_overrides(args, {}))
    result, report, summary = evaluation.evaluate_sequence(
        args.detections,
        args.annotations,
        radius=config.match_radius,
        metric=config.match_metric,
    )
    print(report)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(summary)
        print(f"summary written to {args.report}")
    return 0


def cmd_dump_config(args) -> int:
    config = load_config(args.config, _collect_overrides(args, {}))
    sys.stdout.write(config_to_text(config))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irtk", description="small infrared aerial target detection pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated sequence")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--spec", help="sequence spec file (key = value)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--targets", type=int)
    p.add_argument("--clutter-rate", dest="clutter_rate", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--background", choices=synth.BACKGROUNDS)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the candidate classifier")
    p.add_argument("--data", nargs="+", required=True, help="annotated sequence directories")
    p.add_argument("--config")
    p.add_argument("--model-out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over a sequence directory")
    p.add_argument("--seq", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="detections CSV path")
    p.add_argument(
        "--gt-transforms",
        nargs="?",
        const="auto",
        default=None,
        help="use ground-truth transforms (optionally a path; defaults to seq/transforms.txt)",
    )
    p.add_argument("--overlay", help="write frames with detection boxes burned in")
    p.add_argument("--budget", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against annotations")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--report", help="write summary CSV here")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-config", help="print the effective configuration")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, gbdt.ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
