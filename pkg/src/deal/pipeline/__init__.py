"""Detection, matching, evaluation, tracking, training and file formats."""

from .detect import detect_keypoints
from .matching import EvalReport, Match, PairReport, evaluate_pair, match_nn, sweep_eval
from .tracking import PixelTps, ransac_tps_track
from .training import Adam, TrainConfig, train

__all__ = [
    "Adam",
    "EvalReport",
    "Match",
    "PairReport",
    "PixelTps",
    "TrainConfig",
    "detect_keypoints",
    "evaluate_pair",
    "match_nn",
    "ransac_tps_track",
    "sweep_eval",
    "train",
]
