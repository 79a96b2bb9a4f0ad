"""Run-length encoded binary masks, IoU, track dedup/merge and J/F metrics.

Runs are row-major and alternate background/foreground starting with a
background run (which is 0 when the first pixel is set).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage


class MaskFormatError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self):
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if self.height <= 0 or self.width <= 0:
            raise MaskFormatError(f"bad mask size {self.height}x{self.width}")
        if not runs or any(r < 0 for r in runs):
            raise MaskFormatError("runs must be a non-empty list of non-negative counts")
        if sum(runs) != self.height * self.width:
            raise MaskFormatError(f"run sum {sum(runs)} != {self.height}*{self.width}")
        if any(r == 0 for r in runs[1:]):
            raise MaskFormatError("only the leading run may be zero-length")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def area(self) -> int:
        return sum(self.runs[1::2])

    @classmethod
    def encode(cls, dense) -> "RleMask":
        dense = np.asarray(dense, dtype=bool)
        if dense.ndim != 2 or 0 in dense.shape:
            raise MaskFormatError(f"expected a non-empty 2-D grid, got shape {dense.shape}")
        flat = dense.ravel()
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0]:
            runs.insert(0, 0)
        return cls(dense.shape[0], dense.shape[1], tuple(runs))

    @classmethod
    def empty(cls, height: int, width: int) -> "RleMask":
        return cls(height, width, (height * width,))

    def decode(self) -> np.ndarray:
        vals = np.arange(len(self.runs)) % 2 == 1
        return np.repeat(vals, self.runs).reshape(self.height, self.width)

    def intervals(self) -> np.ndarray:
        """Foreground intervals as an (n, 2) array of [start, end) offsets."""
        ends = np.cumsum(self.runs)
        starts = ends - np.asarray(self.runs)
        return np.stack([starts[1::2], ends[1::2]], axis=1)

    @classmethod
    def from_intervals(cls, height: int, width: int, intervals) -> "RleMask":
        """Build from sorted, disjoint, non-adjacent [start, end) intervals."""
        runs, pos = [], 0
        for s, e in intervals:
            runs.append(int(s) - pos)
            runs.append(int(e) - int(s))
            pos = int(e)
        runs.append(height * width - pos)
        if runs[-1] == 0:
            runs.pop()
        return cls(height, width, tuple(runs))


def _prefix_ones(mask: RleMask, x: np.ndarray) -> np.ndarray:
    """Number of foreground pixels with flat index < x (vectorised over x)."""
    iv = mask.intervals()
    if len(iv) == 0:
        return np.zeros_like(x)
    lengths = iv[:, 1] - iv[:, 0]
    before = np.concatenate(([0], np.cumsum(lengths)))
    k = np.searchsorted(iv[:, 0], x, side="right")  # intervals starting at or before x
    full = before[np.maximum(k - 1, 0)]
    last = np.where(k > 0, np.clip(x - iv[np.maximum(k - 1, 0), 0], 0, lengths[np.maximum(k - 1, 0)]), 0)
    return np.where(k > 0, full + last, 0)


def intersection_area(a: RleMask, b: RleMask) -> int:
    _check_same(a, b)
    iv = b.intervals()
    if len(iv) == 0 or a.area == 0:
        return 0
    return int(np.sum(_prefix_ones(a, iv[:, 1]) - _prefix_ones(a, iv[:, 0])))


def _check_same(a: RleMask, b: RleMask):
    if a.shape != b.shape:
        raise GeometryError(f"mask geometry mismatch: {a.shape} vs {b.shape}")


def mask_iou(a: RleMask, b: RleMask, both_empty: str = "one") -> float:
    """|a & b| / |a | b|. Two empty masks score 1.0 (or NaN with ``both_empty='skip'``)."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 1.0 if both_empty == "one" else math.nan
    return inter / union


@dataclass(frozen=True)
class MaskTrack:
    frames: tuple[RleMask, ...]
    track_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise GeometryError("a mask track needs at least one frame")
        shape = frames[0].shape
        if any(f.shape != shape for f in frames):
            raise GeometryError(f"track {self.track_id!r} has mixed frame sizes")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def geometry(self) -> tuple[int, int, int]:
        return (len(self.frames),) + self.frames[0].shape

    @classmethod
    def from_dense(cls, dense, track_id: str = "") -> "MaskTrack":
        dense = np.asarray(dense, dtype=bool)
        if dense.ndim != 3:
            raise GeometryError(f"expected (T, H, W), got {dense.shape}")
        return cls(tuple(RleMask.encode(f) for f in dense), track_id)

    @classmethod
    def empty(cls, t: int, h: int, w: int, track_id: str = "") -> "MaskTrack":
        return cls(tuple(RleMask.empty(h, w) for _ in range(t)), track_id)

    def to_dense(self) -> np.ndarray:
        return np.stack([f.decode() for f in self.frames])

    def with_id(self, track_id: str) -> "MaskTrack":
        return MaskTrack(self.frames, track_id)


@dataclass
class TrackSet:
    tracks: list[MaskTrack]
    video_id: str = ""

    def __post_init__(self):
        if self.tracks:
            geo = self.tracks[0].geometry
            for tr in self.tracks:
                if tr.geometry != geo:
                    raise GeometryError(f"{self.video_id}: track {tr.track_id!r} geometry {tr.geometry} != {geo}")
        ids = [t.track_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"{self.video_id}: duplicate track ids")

    def __len__(self):
        return len(self.tracks)

    def __getitem__(self, i):
        return self.tracks[i]

    def __iter__(self):
        return iter(self.tracks)

    @property
    def track_ids(self) -> list[str]:
        return [t.track_id for t in self.tracks]

    @property
    def geometry(self) -> tuple[int, int, int]:
        return self.tracks[0].geometry


def _check_tracks(a: MaskTrack, b: MaskTrack):
    if a.geometry != b.geometry:
        raise GeometryError(f"track geometry mismatch: {a.geometry} vs {b.geometry}")


def frame_ious(a: MaskTrack, b: MaskTrack, both_empty: str = "one") -> np.ndarray:
    _check_tracks(a, b)
    return np.array([mask_iou(fa, fb, both_empty) for fa, fb in zip(a.frames, b.frames)])


def track_miou(a: MaskTrack, b: MaskTrack, both_empty: str = "one") -> float:
    """Mean per-frame IoU.

    ``both_empty='skip'`` leaves frames where both masks are empty out of
    the mean (1.0 if every frame is skipped).
    """
    ious = frame_ious(a, b, both_empty)
    if both_empty == "skip":
        ious = ious[~np.isnan(ious)]
        if ious.size == 0:
            return 1.0
    return float(np.mean(ious))


def dedup_tracks(ts: TrackSet, prompt_frame: int = 0, theta: float = 0.7) -> TrackSet:
    """Greedy prompt-frame NMS: drop a track whose IoU with a kept one exceeds theta."""
    if not 0 < theta <= 1:
        raise ValueError("theta must be in (0, 1]")
    if ts.tracks and not 0 <= prompt_frame < ts.geometry[0]:
        raise IndexError(f"prompt frame {prompt_frame} out of range")
    kept: list[MaskTrack] = []
    for tr in ts.tracks:
        f = tr.frames[prompt_frame]
        if all(mask_iou(f, k.frames[prompt_frame]) <= theta for k in kept):
            kept.append(tr)
    return TrackSet(kept, ts.video_id)


def _union_intervals(masks: Sequence[RleMask]) -> RleMask:
    h, w = masks[0].shape
    iv = np.concatenate([m.intervals() for m in masks])
    if len(iv) == 0:
        return RleMask.empty(h, w)
    iv = iv[np.argsort(iv[:, 0], kind="stable")]
    merged = [list(iv[0])]
    for s, e in iv[1:]:
        if s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return RleMask.from_intervals(h, w, merged)


def merge_tracks(selected: Sequence[MaskTrack], geometry: tuple[int, int, int] | None = None,
                 track_id: str = "merged") -> MaskTrack:
    """Per-frame pixelwise OR. An empty selection needs ``geometry`` (T, H, W)."""
    if not selected:
        if geometry is None:
            raise GeometryError("merging nothing requires an explicit geometry")
        return MaskTrack.empty(*geometry, track_id=track_id)
    geo = selected[0].geometry
    for tr in selected:
        if tr.geometry != geo:
            raise GeometryError(f"cannot merge {tr.geometry} with {geo}")
    if geometry is not None and tuple(geometry) != geo:
        raise GeometryError(f"merge geometry {geometry} != tracks {geo}")
    frames = tuple(_union_intervals([tr.frames[t] for tr in selected]) for t in range(geo[0]))
    return MaskTrack(frames, track_id)


# --- J / F -------------------------------------------------------------------

def region_similarity_J(pred: MaskTrack, gt: MaskTrack, both_empty: str = "one") -> float:
    return track_miou(pred, gt, both_empty)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background pixel among their 8 neighbours.

    Pixels beyond the image border count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=0)
    return mask & ~interior


def boundary_radius(height: int, width: int, tol_fraction: float = 0.008) -> int:
    return int(math.ceil(tol_fraction * math.hypot(height, width)))


def frame_boundary_f(pred: np.ndarray, gt: np.ndarray, tol_fraction: float = 0.008) -> float:
    if pred.shape != gt.shape:
        raise GeometryError(f"{pred.shape} vs {gt.shape}")
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    r = boundary_radius(*pred.shape, tol_fraction)
    # distance from every pixel to the nearest boundary pixel of the other mask
    dist_to_g = ndimage.distance_transform_edt(~bg)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    precision = np.count_nonzero(dist_to_g[bp] <= r) / n_p
    recall = np.count_nonzero(dist_to_p[bg] <= r) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_F(pred: MaskTrack, gt: MaskTrack, tol_fraction: float = 0.008) -> float:
    _check_tracks(pred, gt)
    scores = [frame_boundary_f(p.decode(), g.decode(), tol_fraction) for p, g in zip(pred.frames, gt.frames)]
    return float(np.mean(scores))


def jf_score(pred: MaskTrack, gt: MaskTrack, tol_fraction: float = 0.008,
             both_empty: str = "one") -> tuple[float, float, float]:
    j = region_similarity_J(pred, gt, both_empty)
    f = boundary_F(pred, gt, tol_fraction)
    return j, f, (j + f) / 2
