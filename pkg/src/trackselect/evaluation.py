"""Corpus evaluation, ablation sweeps and object-token similarity diagnostics."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import selector as sel
from .data import Corpus, TokenSet
from .masks import MaskTrack, TrackSet, jf_score, track_miou
from .selector import SelectorConfig
from .supervision import make_pseudo_labels
from .trainer import TrainConfig, TrainState, input_rows, train

HIST_BINS = 10

# Reference J&F rows (MeViS) shown next to the sweep for context only.
REFERENCE_JF = {
    "full": 48.6,
    "no_align": 44.5,
    "no_inter_object": 44.3,
    "no_motion_attn": 44.9,
    "no_background": 45.7,
    "layers=1": 42.5,
    "layers=3": 48.2,
}

TOGGLES = tuple(REFERENCE_JF)[1:]


@dataclass
class ExpressionResult:
    expression_id: str
    video_id: str
    J: float
    F: float
    JF: float
    selected: list[str] = field(default_factory=list)
    exact: bool = False


@dataclass
class EvalReport:
    rows: list[ExpressionResult]
    label_balance: float = float("nan")
    score_hist: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def J(self) -> float:
        return float(np.mean([r.J for r in self.rows])) if self.rows else float("nan")

    @property
    def F(self) -> float:
        return float(np.mean([r.F for r in self.rows])) if self.rows else float("nan")

    @property
    def JF(self) -> float:
        return float(np.mean([r.JF for r in self.rows])) if self.rows else float("nan")

    @property
    def accuracy(self) -> float:
        return float(np.mean([r.exact for r in self.rows])) if self.rows else float("nan")

    def summary(self) -> dict:
        return {"n": len(self.rows), "J": self.J, "F": self.F, "JF": self.JF,
                "accuracy": self.accuracy, "label_balance": self.label_balance,
                "score_hist": list(self.score_hist)}

    def records(self) -> list[str]:
        """Line-delimited JSON: one record per expression, then the summary."""
        out = [json.dumps({"type": "expression", "expression_id": r.expression_id, "video_id": r.video_id,
                           "J": r.J, "F": r.F, "JF": r.JF, "selected": r.selected, "exact": r.exact},
                          sort_keys=True) for r in self.rows]
        out.append(json.dumps({"type": "summary", **self.summary(), "config": self.config}, sort_keys=True))
        return out

    def table(self) -> str:
        lines = [f"{'expression':<16} {'J':>6} {'F':>6} {'J&F':>6}"]
        lines += [f"{r.expression_id:<16} {r.J:6.1f} {r.F:6.1f} {r.JF:6.1f}" for r in self.rows]
        lines.append(f"{'mean':<16} {self.J:6.1f} {self.F:6.1f} {self.JF:6.1f}")
        lines.append(f"exact-set accuracy {self.accuracy:.3f}")
        return "\n".join(lines)


def score_expression(pred: MaskTrack, gt: MaskTrack) -> tuple[float, float, float]:
    """(J, F, J&F) scaled to 0..100; J&F is (J + F) / 2."""
    j, f, _ = jf_score(pred, gt)
    j, f = 100.0 * j, 100.0 * f
    return j, f, (j + f) / 2.0


def evaluate_predictions(corpus: Corpus, preds: dict[str, MaskTrack]) -> EvalReport:
    """Score externally produced masks, keyed by expression id."""
    rows = []
    for video, expr in corpus.pairs():
        if expr.expression_id not in preds:
            raise KeyError(f"no prediction for {expr.expression_id}")
        j, f, jf = score_expression(preds[expr.expression_id], expr.gt_track)
        rows.append(ExpressionResult(expr.expression_id, video.video_id, j, f, jf))
    return EvalReport(rows)


def _predict_one(store, cfg: SelectorConfig, video, expr, tau_label: float):
    rows = input_rows(video, cfg)
    out = sel.forward(video.tokens.values[rows], expr.embedding, store, cfg)
    result = sel.select(out.scores, video.tracks, cfg, rows)
    labels = make_pseudo_labels(video.tracks, expr.gt_track, tau_label)
    positives = {video.tracks[i].track_id for i in rows if labels.y[i] > 0}
    j, f, jf = score_expression(result.merged_track, expr.gt_track)
    res = ExpressionResult(expr.expression_id, video.video_id, j, f, jf,
                           result.selected_track_ids, set(result.selected_track_ids) == positives)
    return res, result, labels.y[rows], result.scores


def predict(state_or_store, cfg: SelectorConfig | None, corpus: Corpus, tau_label: float = 0.5,
            jobs: int = 1) -> list[tuple]:
    """Forward + select for every expression; output order follows ``corpus.pairs()``."""
    store, cfg = _unpack(state_or_store, cfg)
    pairs = list(corpus.pairs())

    def one(p):
        return _predict_one(store, cfg, p[0], p[1], tau_label)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(one, pairs))
    return [one(p) for p in pairs]


def _unpack(state_or_store, cfg):
    if isinstance(state_or_store, TrainState):
        return state_or_store.store, cfg or state_or_store.selector_cfg
    if cfg is None:
        raise ValueError("selector config required with a bare parameter store")
    return state_or_store, cfg


def evaluate(state_or_store, corpus: Corpus, cfg: SelectorConfig | None = None, tau_label: float = 0.5,
             jobs: int = 1) -> EvalReport:
    store, cfg = _unpack(state_or_store, cfg)
    results = predict(store, cfg, corpus, tau_label, jobs)
    rows = [r[0] for r in results]
    labels = np.concatenate([r[2] for r in results]) if results else np.zeros(0)
    scores = np.concatenate([r[3] for r in results]) if results else np.zeros(0)
    hist, _ = np.histogram(scores, bins=HIST_BINS, range=(0.0, 1.0))
    balance = float(labels.mean()) if labels.size else float("nan")
    echo = {"selector": cfg.echo(), "tau_label": tau_label}
    if isinstance(state_or_store, TrainState):
        echo["train"] = state_or_store.train_cfg.echo()
    return EvalReport(rows, balance, [int(h) for h in hist], echo)


def ablation_configs(base_sel: SelectorConfig, base_train: TrainConfig,
                     toggles=TOGGLES) -> list[tuple[str, SelectorConfig, TrainConfig]]:
    out = [("full", base_sel, base_train)]
    for name in toggles:
        if name == "no_align":
            out.append((name, base_sel, replace(base_train, lambda2=0.0)))
        elif name == "no_inter_object":
            out.append((name, replace(base_sel, use_inter_object=False), base_train))
        elif name == "no_motion_attn":
            out.append((name, replace(base_sel, use_motion_attn=False), base_train))
        elif name == "no_background":
            out.append((name, replace(base_sel, include_background_tokens=False), base_train))
        elif name.startswith("layers="):
            out.append((name, replace(base_sel, layers=int(name.split("=", 1)[1])), base_train))
        else:
            raise ValueError(f"unknown ablation toggle {name!r}")
    return out


@dataclass
class AblationRow:
    name: str
    per_seed: list[float]
    accuracy: list[float]

    @property
    def JF(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def reference(self) -> float | None:
        return REFERENCE_JF.get(self.name)


def ablation_sweep(train_corpus: Corpus, eval_corpus: Corpus, base_sel: SelectorConfig,
                   base_train: TrainConfig, toggles=TOGGLES, seeds=(0,), jobs: int = 1) -> list[AblationRow]:
    """Train and evaluate the baseline plus one row per toggle, sharing seeds."""
    rows = []
    for name, scfg, tcfg in ablation_configs(base_sel, base_train, toggles):
        jfs, accs = [], []
        for seed in seeds:
            state = train(train_corpus, scfg, replace(tcfg, seed=seed))
            rep = evaluate(state, eval_corpus, tau_label=tcfg.tau_label, jobs=jobs)
            jfs.append(rep.JF)
            accs.append(rep.accuracy)
        rows.append(AblationRow(name, jfs, accs))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'config':<18} {'J&F':>6} {'acc':>6} {'ref J&F':>8}"]
    for r in rows:
        ref = f"{r.reference:8.1f}" if r.reference is not None else f"{'-':>8}"
        lines.append(f"{r.name:<18} {r.JF:6.1f} {np.mean(r.accuracy):6.3f} {ref}")
    return "\n".join(lines)


def _pool(values: np.ndarray, pooling: str) -> np.ndarray:
    if pooling == "mean":
        return values.mean(axis=1)
    if pooling == "last":
        return values[:, -1]
    raise ValueError("pooling must be 'mean' or 'last'")


def token_pairs(tokens: TokenSet | np.ndarray, tracks: TrackSet, pooling: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """(mIoU, cosine similarity) for every unordered track pair."""
    values = tokens.values if isinstance(tokens, TokenSet) else np.asarray(tokens)
    n = len(tracks)
    if n < 2:
        raise ValueError("similarity analysis needs at least two tracks")
    if values.shape[0] != n:
        raise ValueError(f"{values.shape[0]} token rows vs {n} tracks")
    pooled = _pool(np.asarray(values, dtype=np.float64), pooling)
    norms = np.linalg.norm(pooled, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero pooled token; cosine similarity undefined")
    unit = pooled / norms[:, None]
    iu, ju = np.triu_indices(n, k=1)
    miou = np.array([track_miou(tracks[i], tracks[j]) for i, j in zip(iu, ju)])
    sim = np.einsum("ij,ij->i", unit[iu], unit[ju])
    return miou, sim


def spearman(x, y) -> float:
    rho = stats.spearmanr(x, y).correlation
    return float(rho)


@dataclass
class SimilarityCurve:
    edges: np.ndarray
    counts: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    rho: float
    n_pairs: int

    def table(self) -> str:
        lines = [f"{'mIoU bin':<14} {'n':>6} {'mean sim':>9} {'var':>9}"]
        for k in range(len(self.counts)):
            lo, hi = self.edges[k], self.edges[k + 1]
            lines.append(f"[{lo:.1f}, {hi:.1f}{']' if k == len(self.counts) - 1 else ')'}   "
                         f"{self.counts[k]:6d} {self.mean[k]:9.4f} {self.var[k]:9.4f}")
        lines.append(f"spearman rho {self.rho:.4f} over {self.n_pairs} pairs")
        return "\n".join(lines)

    def record(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "mean": [None if np.isnan(v) else float(v) for v in self.mean],
                "var": [None if np.isnan(v) else float(v) for v in self.var],
                "rho": self.rho, "n_pairs": self.n_pairs}


def similarity_curve(miou: np.ndarray, sim: np.ndarray, bins: int = 10) -> SimilarityCurve:
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.digitize(miou, edges[1:-1], right=False), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    mean = np.full(bins, np.nan)
    var = np.full(bins, np.nan)
    for k in range(bins):
        if counts[k]:
            mean[k] = sim[idx == k].mean()
            var[k] = sim[idx == k].var()
    return SimilarityCurve(edges, counts, mean, var, spearman(miou, sim), len(miou))


def token_similarity_analysis(tokens: TokenSet | np.ndarray, tracks: TrackSet, pooling: str = "mean",
                              bins: int = 10) -> SimilarityCurve:
    miou, sim = token_pairs(tokens, tracks, pooling)
    return similarity_curve(miou, sim, bins)


def corpus_similarity_analysis(corpus: Corpus, pooling: str = "mean", bins: int = 10) -> SimilarityCurve:
    """Pool track pairs from every video before binning and ranking."""
    xs, ys = [], []
    for v in corpus.videos:
        m, s = token_pairs(v.tokens, v.tracks, pooling)
        xs.append(m)
        ys.append(s)
    if not xs:
        raise ValueError("empty corpus")
    return similarity_curve(np.concatenate(xs), np.concatenate(ys), bins)
