"""Desk-scale synthetic corpus: moving shapes, their tokens and templated expressions.

Object tokens are a fixed random linear embedding of
``[colour one-hot | shape one-hot | background flag | position | velocity]``
plus Gaussian noise; expression embeddings are one fixed random vector per
slot word. Background tracks (overlapping windows whose tokens describe the
content under them) give the inter-object attention some scene context.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Corpus, ExpressionRecord, TextEmbedding, TokenSet, Video
from .masks import MaskTrack, TrackSet, merge_tracks

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("disc", "square", "diamond", "bar")
MOTIONS = ("left", "right", "up", "down", "circling", "static")
MOTION_PHRASE = {
    "left": "moving left", "right": "moving right", "up": "moving up", "down": "moving down",
    "circling": "moving in circles", "static": "staying still",
}
EXTREMES = ("leftmost", "rightmost", "topmost", "bottommost")
TEMPLATE_WORDS = ("moving", "going")
TEMPLATES = ("full", "motion", "relational")
DEFAULT_TEMPLATES = ("full", "motion")


class SynthError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    scenes: int = 20
    objects: int = 8
    frames: int = 24
    size: int = 64
    dim: int = 256
    text_dim: int = 768
    colors: int = 6
    shapes: int = 4
    noise: float = 0.1
    expressions_per_scene: int = 2
    n_background: int = 9
    background: str = "windows"
    max_targets: int = 1
    templates: tuple[str, ...] = DEFAULT_TEMPLATES  # "relational" is opt-in
    max_retries: int = 200
    embed_seed: int = 0  # token projection and word table; shared by corpora that should be comparable
    extra: dict = field(default_factory=dict)

    def check(self) -> None:
        problems = []
        if self.scenes < 1:
            problems.append("scenes must be >= 1")
        if not 4 <= self.objects <= 12:
            problems.append("objects must be in [4, 12]")
        if not 16 <= self.frames <= 32:
            problems.append("frames must be in [16, 32]")
        if self.size not in (64, 96):
            problems.append("size must be 64 or 96")
        if self.dim < 1 or self.text_dim < 1:
            problems.append("dim and text_dim must be >= 1")
        if not 1 <= self.colors <= len(COLORS) or not 1 <= self.shapes <= len(SHAPES):
            problems.append(f"colors <= {len(COLORS)}, shapes <= {len(SHAPES)}")
        if self.noise < 0:
            problems.append("noise must be >= 0")
        if self.expressions_per_scene < 1 or self.max_targets < 1 or self.n_background < 0:
            problems.append("expressions_per_scene, max_targets >= 1 and n_background >= 0")
        if self.background not in ("windows", "cells"):
            problems.append("background must be 'windows' or 'cells'")
        if not self.templates or set(self.templates) - set(TEMPLATES):
            problems.append(f"templates must be drawn from {TEMPLATES}")
        if problems:
            raise ValueError("; ".join(problems))


def vocabulary() -> list[str]:
    return list(COLORS) + list(SHAPES) + list(MOTIONS) + list(EXTREMES) + list(TEMPLATE_WORDS)


@dataclass
class _Object:
    color: str
    shape: str
    motion: str
    radius: float
    pos: np.ndarray  # (T, 2) x, y in pixels
    vel: np.ndarray  # (T, 2) normalised


def _trajectory(rng, motion, t, size, r):
    speed = rng.uniform(0.6, 1.1) * size / 64
    lo, hi = r + 1, size - r - 1
    steps = np.arange(t, dtype=float)
    if motion in ("left", "right", "up", "down"):
        span = speed * (t - 1)
        axis = 0 if motion in ("left", "right") else 1
        sign = -1.0 if motion in ("left", "up") else 1.0
        start = np.empty(2)
        start[axis] = rng.uniform(lo + span, hi) if sign < 0 else rng.uniform(lo, hi - span)
        start[1 - axis] = rng.uniform(lo, hi)
        pos = np.repeat(start[None], t, axis=0)
        pos[:, axis] += sign * speed * steps
    elif motion == "circling":
        rad = rng.uniform(5, 9) * size / 64
        omega = rng.choice([-1, 1]) * 2 * math.pi / t * rng.uniform(0.8, 1.2)
        center = rng.uniform(lo + rad, hi - rad, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        ang = phase + omega * steps
        pos = center + rad * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        pos = np.repeat(rng.uniform(lo, hi, size=2)[None], t, axis=0)
    vel = np.gradient(pos, axis=0) / (size / 64)
    return pos, vel


def _render(shape, pos, r, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.empty((len(pos), size, size), dtype=bool)
    for i, (cx, cy) in enumerate(pos):
        dx, dy = np.abs(xx - cx), np.abs(yy - cy)
        if shape == "disc":
            m = dx * dx + dy * dy <= r * r
        elif shape == "square":
            m = (dx <= 0.85 * r) & (dy <= 0.85 * r)
        elif shape == "diamond":
            m = dx + dy <= 1.2 * r
        else:
            m = (dx <= 1.3 * r) & (dy <= 0.6 * r)
        out[i] = m
    return out


def _background_cells(n, size):
    rows = max(1, int(math.floor(math.sqrt(n))))
    cols = -(-n // rows)
    cells = []
    for k in range(n):
        i, j = divmod(k, cols)
        y0, y1 = size * i // rows, size * (i + 1) // rows
        x0, x1 = size * j // cols, size * (j + 1) // cols
        cells.append((y0, y1, x0, x1))
    return cells


def _background_windows(n, size):
    """Overlapping square windows on a g x g grid; neighbours share half a side."""
    g = max(1, int(math.ceil(math.sqrt(n))))
    side = 2 * size / (g + 1)
    cells = []
    for k in range(n):
        i, j = divmod(k, g)
        y0, x0 = round(i * side / 2), round(j * side / 2)
        cells.append((y0, min(size, round(y0 + side)), x0, min(size, round(x0 + side))))
    return cells


def satisfies(obj: dict, pred: dict, scene: list[dict]) -> bool:
    """Predicate checker on attribute dicts (colour, shape, motion, mean_x, mean_y)."""
    kind = pred["kind"]
    if kind == "full":
        return (obj["color"], obj["shape"], obj["motion"]) == (pred["color"], pred["shape"], pred["motion"])
    if kind == "motion":
        return obj["motion"] == pred["motion"]
    if kind == "relational":
        if obj["color"] != pred["color"]:
            return False
        key, sign = {"leftmost": ("mean_x", 1), "rightmost": ("mean_x", -1),
                     "topmost": ("mean_y", 1), "bottommost": ("mean_y", -1)}[pred["extreme"]]
        same = [o for o in scene if o["color"] == pred["color"]]
        return all(sign * obj[key] <= sign * o[key] for o in same)
    raise ValueError(f"unknown predicate kind {kind!r}")


def _predicate(kind, obj, attrs, rng):
    if kind == "full":
        words = [obj.color, obj.shape, "moving", obj.motion]
        text = f"the {obj.color} {obj.shape} {MOTION_PHRASE[obj.motion]}"
        return {"kind": "full", "color": obj.color, "shape": obj.shape, "motion": obj.motion}, words, text
    if kind == "motion":
        words = ["going", obj.motion]
        text = MOTION_PHRASE[obj.motion].replace("moving", "going")
        return {"kind": "motion", "motion": obj.motion}, words, text
    same = [a for a in attrs if a["color"] == obj.color]
    if len(same) < 2:
        return None
    ext = str(rng.choice(EXTREMES))
    key = "mean_x" if ext in ("leftmost", "rightmost") else "mean_y"
    vals = sorted(a[key] for a in same)
    # the extreme must be clear, otherwise the expression is ambiguous
    gap = vals[1] - vals[0] if ext in ("leftmost", "topmost") else vals[-1] - vals[-2]
    if gap < 4:
        return None
    return {"kind": "relational", "color": obj.color, "extreme": ext}, [ext, obj.color], f"the {ext} {obj.color} one"


class _Embedder:
    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng([cfg.embed_seed, 7001])
        self.n_feat = cfg.colors + cfg.shapes + 1 + 4
        self.proj = rng.normal(size=(self.n_feat, cfg.dim))
        vocab = vocabulary()
        table = rng.normal(size=(len(vocab), cfg.text_dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.words = dict(zip(vocab, table))
        self.cfg = cfg

    def features(self, color, shape, pos, vel):
        cfg = self.cfg
        t = len(pos)
        f = np.zeros((t, self.n_feat))
        if color is None:
            f[:, cfg.colors + cfg.shapes] = 1.0
        else:
            f[:, COLORS.index(color)] = 1.0
            f[:, cfg.colors + SHAPES.index(shape)] = 1.0
        f[:, -4:-2] = 2.0 * (pos / cfg.size - 0.5)
        f[:, -2:] = vel
        return f

    def region_features(self, region, objs, dense):
        """Content under a region mask: coverage-weighted object attributes, centroid, centroid velocity."""
        cfg = self.cfg
        t = region.shape[0]
        area = region.sum(axis=(1, 2)).astype(float)
        f = np.zeros((t, self.n_feat))
        covered = np.zeros(t)
        for o, d in zip(objs, dense):
            frac = (region & d).sum(axis=(1, 2)) / area
            f[:, COLORS.index(o.color)] += frac
            f[:, cfg.colors + SHAPES.index(o.shape)] += frac
            covered += frac
        f[:, cfg.colors + cfg.shapes] = np.clip(1.0 - covered, 0.0, 1.0)
        ys, xs = np.mgrid[0:cfg.size, 0:cfg.size] + 0.5
        pos = np.stack([(region * xs).sum(axis=(1, 2)), (region * ys).sum(axis=(1, 2))], axis=1) / area[:, None]
        f[:, -4:-2] = 2.0 * (pos / cfg.size - 0.5)
        f[:, -2:] = np.gradient(pos, axis=0) / (cfg.size / 64) if t > 1 else 0.0
        return f

    def tokens(self, feats, rng):
        out = feats @ self.proj
        return out + self.cfg.noise * rng.normal(size=out.shape)

    def text(self, words):
        return np.stack([self.words[w] for w in words])


def _scene(cfg: SynthConfig, emb: _Embedder, rng, video_id: str) -> Video | None:
    t, size = cfg.frames, cfg.size
    colors, shapes = COLORS[:cfg.colors], SHAPES[:cfg.shapes]
    objs: list[_Object] = []
    for i in range(cfg.objects):
        color = str(rng.choice(colors))
        shape = str(rng.choice(shapes))
        if objs and rng.random() < 0.5:
            color = objs[rng.integers(len(objs))].color
        motion = str(rng.choice(MOTIONS))
        r = rng.uniform(0.06, 0.11) * size
        pos, vel = _trajectory(rng, motion, t, size, r)
        objs.append(_Object(color, shape, motion, r, pos, vel))
    dense = [_render(o.shape, o.pos, o.radius, size) for o in objs]
    if any(not d.any(axis=(1, 2)).all() for d in dense):
        return None
    obj_tracks = [MaskTrack.from_dense(d) for d in dense]
    occupied = np.any(dense, axis=0)
    windows = cfg.background == "windows"
    bg_dense = []
    for y0, y1, x0, x1 in (_background_windows if windows else _background_cells)(cfg.n_background, size):
        cell = np.zeros((t, size, size), dtype=bool)
        cell[:, y0:y1, x0:x1] = True
        bg_dense.append(cell if windows else cell & ~occupied)
    if any(not d.any(axis=(1, 2)).all() for d in bg_dense):
        return None

    feats = [emb.features(o.color, o.shape, o.pos, o.vel) for o in objs]
    feats += [emb.region_features(d, objs, dense) for d in bg_dense]
    all_dense = dense + bg_dense
    kinds = ["object"] * len(objs) + ["background"] * len(bg_dense)
    areas = [int(d[0].sum()) for d in all_dense]
    order = sorted(range(len(all_dense)), key=lambda i: -areas[i])
    ids = [f"{video_id}_t{k:02d}" for k in range(len(order))]
    new_id = {old: ids[k] for k, old in enumerate(order)}
    tracks = [MaskTrack.from_dense(all_dense[i], new_id[i]) for i in order]
    tokens = np.stack([emb.tokens(feats[i], rng) for i in order]).astype(np.float32)

    attrs = [{"color": o.color, "shape": o.shape, "motion": o.motion,
              "mean_x": float(o.pos[:, 0].mean()), "mean_y": float(o.pos[:, 1].mean())} for o in objs]
    exprs = []
    used_targets: set[int] = set()
    candidates = list(rng.permutation(len(objs)))
    for k in range(cfg.expressions_per_scene):
        found = None
        for kind in rng.permutation(list(cfg.templates)):
            for oi in candidates:
                if oi in used_targets:
                    continue
                built = _predicate(str(kind), objs[oi], attrs, rng)
                if built is None:
                    continue
                pred, words, text = built
                match = [j for j in range(len(objs)) if satisfies(attrs[j], pred, attrs)]
                if oi in match and len(match) <= cfg.max_targets:
                    found = (oi, match, words, text)
                    break
            if found:
                break
        if found is None:
            return None
        oi, match, words, text = found
        used_targets.update(match)
        gt = merge_tracks([obj_tracks[j] for j in match], track_id="gt")
        eid = f"{video_id}_e{k}"
        exprs.append(ExpressionRecord(
            eid, video_id, TextEmbedding(emb.text(words).astype(np.float32), eid, text),
            gt, tuple(new_id[j] for j in match), dict(pred)))
    video = Video(video_id, TrackSet(tracks, video_id), TokenSet(tokens, ids), exprs,
                  [kinds[i] for i in order], {new_id[j]: attrs[j] for j in range(len(objs))})
    if not _separated(video, all_dense, order):
        return None
    return video


def _separated(video: Video, all_dense, order) -> bool:
    """Non-target tracks must overlap each gt by less than 0.5 mIoU."""
    from .masks import track_miou

    for e in video.expressions:
        targets = set(e.target_ids)
        for tr in video.tracks:
            if tr.track_id not in targets and track_miou(tr, e.gt_track) >= 0.5:
                return False
    return True


def generate_synthetic(cfg: SynthConfig, seed: int) -> Corpus:
    """Pure function of (cfg, seed)."""
    cfg.check()
    emb = _Embedder(cfg)
    videos = []
    for s in range(cfg.scenes):
        vid = f"v{s:04d}"
        for attempt in range(cfg.max_retries):
            rng = np.random.default_rng([seed, s, attempt])
            video = _scene(cfg, emb, rng, vid)
            if video is not None:
                break
        else:
            raise SynthError(f"scene {vid}: no valid scene after {cfg.max_retries} attempts")
        videos.append(video)
    meta = {"generator": _cfg_echo(cfg), "seed": int(seed)}
    return Corpus(videos, meta)


def _cfg_echo(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["templates"] = list(cfg.templates)
    return d
