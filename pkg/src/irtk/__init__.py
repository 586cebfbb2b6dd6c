"""Small infrared aerial target detection: per-frame candidate detection,
inter-frame registration, and trajectory-constrained confirmation."""

__version__ = "0.1.0"

from .imaging import Frame, LabelMask, Component, load_frame, save_frame, connected_components
from .candidates import (
    InterestFilterParams,
    Candidate,
    interest_mask,
    select_candidates,
    extract_features,
    build_training_set,
    detect_candidates,
)
from .gbdt import GbdtModel, GbdtTrainParams, train, predict_proba, save_model, load_model
from .registration import (
    Homography,
    Correspondence,
    RansacParams,
    solve_homography_dlt,
    estimate_homography_ransac,
    match_frames,
    chain_to_reference,
    remap_point,
)
from .trajectory import (
    TrajectoryParams,
    TrajectoryNode,
    TrajectorySegment,
    link_cost,
    velocity_gate,
    grow_segments,
    segment_similarity,
    merge_segments,
    prune_segments,
    confirm_tracks,
    process_sequence,
)
from .evaluation import MatchResult, match_frame, f_beta, evaluate_sequence
from .synth import SequenceSpec, GroundTruth, generate_sequence, write_dataset
