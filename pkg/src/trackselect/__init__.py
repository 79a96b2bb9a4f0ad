"""Language-aligned selection of candidate mask tracks from object tokens."""

from .data import Corpus, ExpressionRecord, TextEmbedding, TokenSet, Video, load_corpus, save_corpus
from .masks import MaskTrack, RleMask, TrackSet, jf_score, mask_iou, merge_tracks, track_miou
from .selector import SelectorConfig, forward, select
from .synth import SynthConfig, generate_synthetic
from .trainer import TrainConfig, resume, train

__version__ = "0.1.0"

__all__ = [
    "Corpus", "ExpressionRecord", "MaskTrack", "RleMask", "SelectorConfig", "SynthConfig", "TextEmbedding",
    "TokenSet", "TrackSet", "TrainConfig", "Video", "forward", "generate_synthetic", "jf_score",
    "load_corpus", "mask_iou", "merge_tracks", "resume", "save_corpus", "select", "track_miou", "train",
]
