"""Language-aligned track selection network.

Pipeline per (video, expression):
text projection -> short-term motion encoder (strided temporal convs) ->
L alignment layers (inter-object, motion, object-to-language attention, FFN)
-> frame-weighted aggregation into alignment tokens and scores.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tc
from .data import TextEmbedding, TokenSet
from .masks import MaskTrack, TrackSet, merge_tracks
from .tensor import ParamStore, Tensor


@dataclass
class SelectorConfig:
    dim: int = 256
    text_dim: int = 768
    layers: int = 2
    heads: int = 8
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_layers: int = 2
    ffn_mult: int = 2
    tau_select: float = 0.5
    fallback_argmax: bool = True
    use_inter_object: bool = True
    use_motion_attn: bool = True
    include_background_tokens: bool = True

    def check(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0 < self.tau_select < 1:
            raise ValueError("tau_select must be in (0, 1)")
        if self.conv_kernel < 1 or self.conv_stride < 1 or self.conv_layers < 1:
            raise ValueError("conv kernel/stride/layers must be >= 1")

    def reduced_length(self, t: int) -> int:
        for _ in range(self.conv_layers):
            t = tc.conv_out_len(t, self.conv_stride)
        return t

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class AlignmentOutput:
    aligned_tokens: Tensor  # O_a, (N, D)
    frame_weights: Tensor  # w_a, (N, T')
    scores: Tensor  # s_a, (N,)
    aligned_activations: Tensor  # O', (N, T', D)
    text_tokens: Tensor | None = None  # projected E, (N_w, D)


@dataclass
class SelectionResult:
    selected_track_ids: list[str]
    merged_track: MaskTrack
    scores: np.ndarray


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _add_attention(store, rng, prefix, d):
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", _xavier(rng, d, d))
    for name in ("bq", "bv", "bo"):
        store.add(f"{prefix}.{name}", np.zeros(d))


def _add_norm(store, prefix, d):
    store.add(f"{prefix}.g", np.ones(d))
    store.add(f"{prefix}.b", np.zeros(d))


def init_params(cfg: SelectorConfig, seed: int = 0, dtype: str = "float32",
                store: ParamStore | None = None) -> ParamStore:
    """Xavier-uniform projections, zero biases, unit norm gains."""
    cfg.check()
    store = store or ParamStore(dtype, rng_seed=seed)
    rng = np.random.default_rng([seed, 1])
    d, k = cfg.dim, cfg.conv_kernel
    store.add("text_proj", _xavier(rng, cfg.text_dim, d))
    for c in range(cfg.conv_layers):
        store.add(f"motion.conv{c}.w", _xavier(rng, k * d, d, (k, d, d)))
        store.add(f"motion.conv{c}.b", np.zeros(d))
    for layer in range(cfg.layers):
        p = f"layers.{layer}"
        for sub in ("inter", "motion", "cross"):
            _add_norm(store, f"{p}.{sub}_ln", d)
            _add_attention(store, rng, f"{p}.{sub}", d)
        _add_norm(store, f"{p}.text_ln", d)
        _add_norm(store, f"{p}.ffn_ln", d)
        h = cfg.ffn_mult * d
        store.add(f"{p}.ffn.w1", _xavier(rng, d, h))
        store.add(f"{p}.ffn.b1", np.zeros(h))
        store.add(f"{p}.ffn.w2", _xavier(rng, h, d))
        store.add(f"{p}.ffn.b2", np.zeros(d))
    _add_norm(store, "out_ln", d)
    return store


def _ln(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return tc.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def project_text(e_raw, store: ParamStore) -> Tensor:
    """Per-word linear map D_text -> D (no bias)."""
    w = store["text_proj"]
    e = _as_input(e_raw.values if isinstance(e_raw, TextEmbedding) else e_raw, store)
    if e.ndim != 2 or e.shape[1] != w.shape[0]:
        raise tc.ShapeError(f"text embedding {e.shape} does not match projection {w.shape}")
    return tc.matmul(e, w)


def _as_input(x, store: ParamStore) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=tc.DTYPES[store.dtype]))


def motion_encode(tokens, store: ParamStore, cfg: SelectorConfig) -> Tensor:
    """Strided temporal convolutions per track: (N, T, D) -> (N, T', D)."""
    x = _as_input(tokens, store)
    for c in range(cfg.conv_layers):
        x = tc.temporal_conv1d(x, store[f"motion.conv{c}.w"], cfg.conv_stride, store[f"motion.conv{c}.b"])
        if c < cfg.conv_layers - 1:
            x = tc.gelu(x)
    return x


def _attn(store, prefix, q, kv, heads):
    return tc.multihead_attention(q, kv, kv, store.group(prefix), heads)


def alignment_layer(x: Tensor, e: Tensor, store: ParamStore, layer: int, cfg: SelectorConfig) -> Tensor:
    p = f"layers.{layer}"
    n, t, d = x.shape
    if cfg.use_inter_object:
        h = tc.swapaxes(_ln(x, store, f"{p}.inter_ln"), 0, 1)  # (T', N, D): attend across tracks
        x = x + tc.swapaxes(_attn(store, f"{p}.inter", h, h, cfg.heads), 0, 1)
    if cfg.use_motion_attn:
        h = _ln(x, store, f"{p}.motion_ln")  # (N, T', D): attend across time
        x = x + _attn(store, f"{p}.motion", h, h, cfg.heads)
    h = tc.reshape(_ln(x, store, f"{p}.cross_ln"), (n * t, d))
    et = _ln(e, store, f"{p}.text_ln")
    x = x + tc.reshape(_attn(store, f"{p}.cross", h, et, cfg.heads), (n, t, d))
    h = _ln(x, store, f"{p}.ffn_ln")
    h = tc.gelu(tc.matmul(h, store[f"{p}.ffn.w1"]) + store[f"{p}.ffn.b1"])
    return x + tc.matmul(h, store[f"{p}.ffn.w2"]) + store[f"{p}.ffn.b2"]


def aggregate(o_prime: Tensor, e: Tensor) -> AlignmentOutput:
    """Frame weights, alignment tokens and scores from O' and projected text."""
    logits = tc.matmul(o_prime, tc.swapaxes(e, 0, 1))  # (N, T', N_w)
    per_frame = tc.mean(logits, axis=2)  # (N, T')
    w = tc.softmax_axis(per_frame, axis=1)
    n, t = per_frame.shape
    o_a = tc.mean(tc.reshape(w, (n, t, 1)) * o_prime, axis=1)
    s = tc.sigmoid(tc.mean(per_frame, axis=1))
    return AlignmentOutput(o_a, w, s, o_prime)


def forward(tokens, text, store: ParamStore, cfg: SelectorConfig) -> AlignmentOutput:
    """Run the selector on (N, T, D) tokens and an (N_w, D_text) embedding."""
    values = tokens.values if isinstance(tokens, TokenSet) else tokens
    e = project_text(text, store)
    x = motion_encode(values, store, cfg)
    for layer in range(cfg.layers):
        x = alignment_layer(x, e, store, layer, cfg)
    out = aggregate(_ln(x, store, "out_ln"), e)
    out.text_tokens = e
    return out


def select(scores, tracks: TrackSet, cfg: SelectorConfig, rows=None) -> SelectionResult:
    """Threshold scores at tau_select; optionally fall back to the argmax.

    ``rows`` maps score index -> index into ``tracks`` when the scores cover a
    subset of the tracks (e.g. background tokens excluded).
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=float).reshape(-1)
    rows = list(range(len(s))) if rows is None else list(rows)
    if len(rows) != len(s):
        raise ValueError("rows and scores differ in length")
    picked = [i for i in range(len(s)) if s[i] > cfg.tau_select]
    if not picked and cfg.fallback_argmax and len(s):
        picked = [int(np.argmax(s))]  # first maximum on ties
    chosen = [tracks[rows[i]] for i in picked]
    merged = merge_tracks(chosen, geometry=tracks.geometry)
    return SelectionResult([t.track_id for t in chosen], merged, s.copy())
