"""IoU pseudo-labels and the training objective.

The alignment loss uses ``d(x, y) = 1 - cos(x, y)``. As printed, the
objective carries a leading minus that would pull positive tokens away from
the text anchor; ``sign=+1`` (default) minimises the intended direction and
``sign=-1`` reproduces the printed formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .masks import MaskTrack, TrackSet, track_miou
from .tensor import ParamStore, Tensor

LOG_EPS = 1e-7
NORM_EPS = 1e-8
ANCHOR_PARAM = "anchors.neg"


@dataclass
class PseudoLabels:
    y: np.ndarray
    miou: np.ndarray
    tau_label: float = 0.5


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def make_pseudo_labels(candidates: TrackSet | list[MaskTrack], gt: MaskTrack, tau_label: float = 0.5,
                       both_empty: str = "one") -> PseudoLabels:
    """y_i = 1 iff mIoU(candidate_i, gt) > tau_label (strict)."""
    miou = np.array([track_miou(c, gt, both_empty) for c in candidates], dtype=float)
    return PseudoLabels((miou > tau_label).astype(np.float64), miou, tau_label)


def init_anchor_bank(store: ParamStore, n_neg: int, dim: int, seed: int = 0) -> Tensor:
    """Negative anchors ~ N(0, 1/sqrt(D)), stored as ``anchors.neg``."""
    if n_neg < 1:
        raise ValueError("need at least one negative anchor")
    rng = np.random.default_rng([seed, 2])
    return store.add(ANCHOR_PARAM, rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_neg, dim)))


def positive_anchor(e: Tensor) -> Tensor:
    """Mean of the (projected) text tokens."""
    if e.shape[0] < 1:
        raise ValueError("positive anchor needs at least one word")
    return tc.mean(e, axis=0)


def _labels(y, like: Tensor) -> np.ndarray:
    y = y.y if isinstance(y, PseudoLabels) else y
    return np.asarray(y, dtype=like.dtype).reshape(-1)


def bce_loss(s_a: Tensor, y) -> Tensor:
    yv = _labels(y, s_a)
    if yv.shape[0] != s_a.shape[0]:
        raise ValueError(f"{s_a.shape[0]} scores vs {yv.shape[0]} labels")
    s = tc.clip(s_a, LOG_EPS, 1.0 - LOG_EPS)
    ll = tc.log(s) * yv + tc.log(1.0 - s) * (1.0 - yv)
    return -tc.mean(ll)


def cosine_distance(x: Tensor, y: Tensor) -> Tensor:
    return 1.0 - tc.cosine_sim(x, y, eps=NORM_EPS)


def alignment_loss(o_a: Tensor, y, a_p: Tensor, anchors: Tensor, sign: float = 1.0) -> Tensor:
    """Anchor contrastive loss over alignment tokens ``o_a`` (N, D)."""
    if anchors.ndim != 2 or anchors.shape[0] < 1:
        raise ValueError("negative anchor bank must be (N_neg >= 1, D)")
    yv = _labels(y, o_a)
    n = o_a.shape[0]
    if yv.shape[0] != n:
        raise ValueError(f"{n} tokens vs {yv.shape[0]} labels")
    d_pos = cosine_distance(o_a, a_p)  # (N,)
    d_neg = cosine_distance(tc.reshape(o_a, (n, 1, o_a.shape[1])), anchors)  # (N, N_neg)
    # nearest anchor: argmin picks the lowest index on ties
    nearest = np.zeros(d_neg.shape, dtype=o_a.dtype)
    nearest[np.arange(n), np.argmin(d_neg.data, axis=1)] = 1.0
    d_near = tc.sum(d_neg * nearest, axis=1)
    d_all = tc.sum(d_neg, axis=1)
    l_pos = d_pos - d_all
    l_neg = d_near - d_pos - (d_all - d_near)
    per_item = l_pos * yv + l_neg * (1.0 - yv)
    return tc.mean(per_item) * float(sign)


def total_loss(s_a: Tensor, o_a: Tensor, y, a_p: Tensor, anchors: Tensor,
               weights: LossWeights = LossWeights(), sign: float = 1.0) -> tuple[Tensor, dict]:
    """lambda1 * BCE + lambda2 * alignment; also returns the float components."""
    bce = bce_loss(s_a, y)
    parts = {"bce": float(bce.data)}
    if weights.lambda2 == 0:
        total = bce * weights.lambda1
        parts["align"] = float(alignment_loss(o_a, y, a_p, anchors, sign).data)
    else:
        align = alignment_loss(o_a, y, a_p, anchors, sign)
        parts["align"] = float(align.data)
        total = bce * weights.lambda1 + align * weights.lambda2
    parts["total"] = float(total.data)
    return total, parts
