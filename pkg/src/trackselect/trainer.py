"""Deterministic training loop: one expression per optimiser step."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import selector as sel
from . import tensor as tc
from .checkpoint import CheckpointError, encode_checkpoint, load_checkpoint, write_atomic
from .data import Corpus
from .selector import SelectorConfig
from .supervision import (ANCHOR_PARAM, LossWeights, PseudoLabels, init_anchor_bank,
                          make_pseudo_labels, positive_anchor, total_loss)
from .tensor import ParamStore

log = logging.getLogger(__name__)

OPTIM_PREFIX = "optim."


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 13
    lr_init: float = 5e-6
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.3
    n_neg: int = 32
    tau_label: float = 0.5
    align_sign: float = 1.0
    align_warmup_epochs: int = 0  # epochs trained with lambda2 forced to 0
    dtype: str = "float32"

    @classmethod
    def synthetic(cls, **kw) -> "TrainConfig":
        base = dict(epochs=12, lr_init=1e-3, align_warmup_epochs=4)
        base.update(kw)
        return cls(**base)

    def check(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_init > 0:
            raise ValueError("lr_init must be > 0")
        if self.schedule not in ("cosine", "linear"):
            raise ValueError("schedule must be 'cosine' or 'linear'")
        if not 0 <= self.align_warmup_epochs <= self.epochs:
            raise ValueError("align_warmup_epochs must be in [0, epochs]")
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")
        if self.align_sign not in (1.0, -1.0):
            raise ValueError("align_sign must be +1 or -1")
        if self.dtype not in tc.DTYPES:
            raise ValueError(f"dtype must be one of {sorted(tc.DTYPES)}")
        LossWeights(self.lambda1, self.lambda2)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def weights_at(self, epoch: int) -> LossWeights:
        """Loss weights for a 0-based epoch; the alignment term is off during warm-up."""
        return LossWeights(self.lambda1, 0.0 if epoch < self.align_warmup_epochs else self.lambda2)

    def echo(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Learning rate for the update at (0-based) ``step``."""
    frac = step / (steps_per_epoch * cfg.epochs)
    if cfg.schedule == "cosine":
        return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr_init * (1.0 - frac)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm <= max_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.t = 0

    def step(self, store: ParamStore, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in store.items():
            g = store.grads[name]
            if c.weight_decay and name != ANCHOR_PARAM:  # decaying the anchors would drive them to zero
                g = g + c.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            upd = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"{OPTIM_PREFIX}m/{n}": a for n, a in self.m.items()}
        out.update({f"{OPTIM_PREFIX}v/{n}": a for n, a in self.v.items()})
        return out

    def load(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = tensors[f"{OPTIM_PREFIX}m/{n}"].astype(self.m[n].dtype)
            self.v[n] = tensors[f"{OPTIM_PREFIX}v/{n}"].astype(self.v[n].dtype)
        self.t = t


@dataclass
class TrainState:
    store: ParamStore
    selector_cfg: SelectorConfig
    train_cfg: TrainConfig
    optim: Adam
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    run: dict = field(default_factory=dict)  # effective run config, echoed into artifacts

    def config_echo(self) -> dict:
        return {
            "run": self.run,
            "selector": self.selector_cfg.echo(),
            "train": self.train_cfg.echo(),
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
        }

    def checkpoint_bytes(self) -> bytes:
        tensors = self.store.state()
        tensors.update(self.optim.state())
        return encode_checkpoint(self.config_echo(), tensors)


def new_state(selector_cfg: SelectorConfig, train_cfg: TrainConfig) -> TrainState:
    selector_cfg.check()
    train_cfg.check()
    store = sel.init_params(selector_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    init_anchor_bank(store, train_cfg.n_neg, selector_cfg.dim, seed=train_cfg.seed)
    return TrainState(store, selector_cfg, train_cfg, Adam(store, train_cfg))


def state_from_checkpoint(config: dict, tensors: dict[str, np.ndarray],
                          train_cfg: TrainConfig | None = None) -> TrainState:
    scfg = SelectorConfig(**config["selector"])
    tcfg = train_cfg or TrainConfig(**config["train"])
    ref = new_state(scfg, tcfg)
    for name, t in ref.store.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != t.shape:
            raise tc.ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != config shape {t.shape}")
        ref.store.set(name, tensors[name])
    if any(k.startswith(OPTIM_PREFIX) for k in tensors):
        ref.optim.load(tensors, config.get("step", 0))
    ref.epoch = config.get("epoch", 0)
    ref.step = config.get("step", 0)
    ref.history = list(config.get("history", []))
    ref.run = dict(config.get("run", {}))
    return ref


def load_state(path, train_cfg: TrainConfig | None = None) -> TrainState:
    config, tensors = load_checkpoint(path)
    return state_from_checkpoint(config, tensors, train_cfg)


def _label_cache(corpus: Corpus, tau_label: float) -> dict[str, PseudoLabels]:
    return {e.expression_id: make_pseudo_labels(v.tracks, e.gt_track, tau_label) for v, e in corpus.pairs()}


def check_corpus(corpus: Corpus, cfg: SelectorConfig) -> None:
    for v in corpus.videos:
        if v.tokens.values.shape[-1] != cfg.dim:
            raise tc.ShapeError(f"video {v.video_id}: token dim {v.tokens.values.shape[-1]} != selector dim {cfg.dim}")
        for e in v.expressions:
            if e.embedding.values.shape[-1] != cfg.text_dim:
                raise tc.ShapeError(f"expression {e.expression_id}: text dim "
                                    f"{e.embedding.values.shape[-1]} != selector text_dim {cfg.text_dim}")


def input_rows(video, cfg: SelectorConfig) -> list[int]:
    return list(range(len(video.tracks))) if cfg.include_background_tokens else video.object_rows()


def expression_loss(state: TrainState, video, expr, labels: PseudoLabels):
    scfg, tcfg = state.selector_cfg, state.train_cfg
    rows = input_rows(video, scfg)
    out = sel.forward(video.tokens.values[rows], expr.embedding, state.store, scfg)
    a_p = positive_anchor(out.text_tokens)
    return total_loss(out.scores, out.aligned_tokens, labels.y[rows], a_p,
                      state.store[ANCHOR_PARAM], tcfg.weights_at(state.epoch), tcfg.align_sign)


def run_epochs(state: TrainState, corpus: Corpus, out_dir=None, until: int | None = None) -> TrainState:
    """Advance ``state`` epoch by epoch up to ``until`` (default: train_cfg.epochs)."""
    tcfg = state.train_cfg
    until = tcfg.epochs if until is None else min(until, tcfg.epochs)
    pairs = list(corpus.pairs())
    if not pairs:
        raise TrainingError("corpus has no (video, expression) pairs")
    check_corpus(corpus, state.selector_cfg)
    labels = _label_cache(corpus, tcfg.tau_label)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if state.epoch else "w")
        if not state.epoch:
            log_fh.write(json.dumps({"type": "config", "run": state.run, "selector": state.selector_cfg.echo(),
                                     "train": tcfg.echo()}, sort_keys=True) + "\n")
    try:
        while state.epoch < until:
            order = np.random.default_rng([tcfg.seed, state.epoch]).permutation(len(pairs))
            sums = {"total": 0.0, "bce": 0.0, "align": 0.0}
            n_pos = n_all = 0
            for idx in order:
                video, expr = pairs[idx]
                lab = labels[expr.expression_id]
                try:
                    loss, parts = expression_loss(state, video, expr, lab)
                    tc.backward(loss, state.store)
                except tc.NumericalError as exc:
                    raise TrainingError(f"non-finite loss on {video.video_id}/{expr.expression_id}: {exc}") from exc
                gnorm = clip_grads(state.store.grads, tcfg.grad_clip)
                lr = lr_at(tcfg, state.step, len(pairs))
                state.optim.step(state.store, lr)
                rows = input_rows(video, state.selector_cfg)
                n_pos += int(lab.y[rows].sum())
                n_all += len(rows)
                for k in sums:
                    sums[k] += parts[k]
                if log_fh:
                    log_fh.write(json.dumps({
                        "type": "step", "epoch": state.epoch, "step": state.step, "lr": lr,
                        "loss": parts["total"], "bce": parts["bce"], "align": parts["align"],
                        "grad_norm": gnorm, "expression_id": expr.expression_id,
                    }, sort_keys=True) + "\n")
                state.step += 1
            state.epoch += 1
            record = {
                "type": "epoch", "epoch": state.epoch,
                "mean_loss": sums["total"] / len(pairs),
                "mean_bce": sums["bce"] / len(pairs),
                "mean_align": sums["align"] / len(pairs),
                "label_balance": n_pos / max(n_all, 1),
                "lambda1": tcfg.lambda1, "lambda2": tcfg.weights_at(state.epoch - 1).lambda2,
            }
            state.history.append(record)
            log.info("epoch %d mean loss %.4f (bce %.4f, align %.4f)", state.epoch,
                     record["mean_loss"], record["mean_bce"], record["mean_align"])
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
                write_atomic(out_dir / f"ckpt_epoch{state.epoch:03d}.solp", state.checkpoint_bytes())
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        write_atomic(out_dir / "final.solp", state.checkpoint_bytes())
    return state


def train(corpus: Corpus, selector_cfg: SelectorConfig, train_cfg: TrainConfig, out_dir=None,
          until: int | None = None, run: dict | None = None) -> TrainState:
    if not corpus.videos:
        raise TrainingError("empty corpus")
    state = new_state(selector_cfg, train_cfg)
    state.run = dict(run or {})
    return run_epochs(state, corpus, out_dir, until)


def resume(checkpoint, corpus: Corpus, train_cfg: TrainConfig | None = None, out_dir=None) -> TrainState:
    """Continue from a checkpoint path or TrainState; a finished run is returned unchanged."""
    state = checkpoint if isinstance(checkpoint, TrainState) else load_state(checkpoint, train_cfg)
    if train_cfg is not None:
        _check_compatible(state.train_cfg, train_cfg)
        state.train_cfg = train_cfg
        state.optim.cfg = train_cfg
    if state.epoch >= state.train_cfg.epochs:
        return state
    return run_epochs(state, corpus, out_dir)


def _check_compatible(old: TrainConfig, new: TrainConfig) -> None:
    if old.n_neg != new.n_neg or old.dtype != new.dtype:
        raise tc.ShapeError("train config changes anchor count or precision; cannot resume")


def train_config_keys() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


def gradcheck_fixture(seed: int = 0, n: int = 5, t: int = 8, dim: int = 16, n_words: int = 4,
                      text_dim: int = 12, layers: int = 2, heads: int = 4, n_neg: int = 4):
    """Tiny float64 selector + total loss for finite-difference checking.

    Returns ``(objective, store)`` where ``objective(store)`` is the scalar loss.
    """
    scfg = SelectorConfig(dim=dim, text_dim=text_dim, layers=layers, heads=heads)
    tcfg = TrainConfig(n_neg=n_neg, dtype="float64", seed=seed)
    state = new_state(scfg, tcfg)
    rng = np.random.default_rng([seed, 99])
    tokens = rng.uniform(-1.0, 1.0, size=(n, t, dim))
    text = rng.uniform(-1.0, 1.0, size=(n_words, text_dim))
    y = np.zeros(n)
    y[rng.choice(n, size=max(1, n // 2), replace=False)] = 1.0

    def objective(store: ParamStore):
        out = sel.forward(tokens, text, store, scfg)
        loss, _ = total_loss(out.scores, out.aligned_tokens, y, positive_anchor(out.text_tokens),
                             store[ANCHOR_PARAM], tcfg.weights, tcfg.align_sign)
        return loss

    return objective, state.store
