"""Shared residual multi-head attention with sliding-window masking.

Self-attention sub-layers run in one of two modes:

* ``Update(w)``: recompute scaled dot-product scores, add the carried residual
  score matrix, band-mask within ``w`` of the diagonal, attend.
* ``Shared``: skip the Q/K projections entirely and reuse the masked scores
  produced by the most recent update layer (or the raw pre-mask sum when
  ``share_raw_scores`` is selected). This halves both the learnable parameters
  and the matmul FLOPs of the sub-layer.

``mode=None`` builds a plain 4-projection multi-head attention layer, used for
decoder cross-attention and for the vanilla baseline variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ModeError, ScheduleError, ShapeError, StateError
from . import tensor as T
from .tensor import NEG_INF, Tensor


@dataclass(frozen=True)
class Update:
    """Update-mode marker carrying the window radius."""

    w: int

    def __post_init__(self):
        if self.w < 1:
            raise ConfigError(f"window radius must be >= 1, got {self.w}")


@dataclass(frozen=True)
class Shared:
    """Shared-mode marker; the layer reuses carried scores."""


LayerMode = Update | Shared


@dataclass
class AttentionScores:
    """Pre-softmax logits, shape [B, heads, T_q, T_k]."""

    values: Tensor

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class AttentionState:
    """Score state threaded through one self-attention stack.

    ``carried`` is the running residual sum (pre-mask), consumed by the next
    update layer. ``masked`` is the band/causal/padding-masked version emitted
    by the most recent update layer, consumed by shared layers.
    """

    carried: AttentionScores | None = None
    masked: AttentionScores | None = None


class SrmhaLayer:
    """One attention sub-layer's projections.

    Update mode and plain mode allocate all four projections (4*d^2 + 4*d
    scalars); shared mode allocates only the value and output projections
    (2*d^2 + 2*d scalars), since Q and K are never formed.
    """

    def __init__(self, d_model: int, heads: int, mode: LayerMode | None,
                 rng: np.random.Generator, dtype=np.float64):
        if d_model % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide d_model ({d_model})")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.mode = mode
        self.dtype = dtype

        def proj():
            w = Tensor(T.xavier_uniform(rng, d_model, d_model, dtype=dtype), requires_grad=True)
            b = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)
            return w, b

        if isinstance(mode, Shared):
            self.w_q = self.b_q = self.w_k = self.b_k = None
        else:
            self.w_q, self.b_q = proj()
            self.w_k, self.b_k = proj()
        self.w_v, self.b_v = proj()
        self.w_o, self.b_o = proj()

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"):
            t = getattr(self, name)
            if t is not None:
                named.append((name, t))
        return named

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.parameters())


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


@lru_cache(maxsize=128)
def band_mask(t_len: int, w: int, causal: bool) -> np.ndarray:
    """Bool [T, T]; True where |i - j| <= w (and j <= i when causal)."""
    i = np.arange(t_len)[:, None]
    j = np.arange(t_len)[None, :]
    keep = np.abs(i - j) <= w
    if causal:
        keep = keep & (j <= i)
    keep.setflags(write=False)
    return keep


def scaled_scores(q_in: Tensor, k_in: Tensor, layer: SrmhaLayer) -> AttentionScores:
    """Per-head (Q K^T) / sqrt(d_k) from freshly projected inputs."""
    if isinstance(layer.mode, Shared):
        raise ModeError("scaled_scores called on a shared-mode layer (no Q/K projections)")
    if q_in.shape[-1] != layer.d_model or k_in.shape[-1] != layer.d_model:
        raise ShapeError(
            f"inputs must have width {layer.d_model}, got {q_in.shape} and {k_in.shape}")
    q = _split_heads(T.add(T.matmul(q_in, layer.w_q), layer.b_q), layer.heads)
    k = _split_heads(T.add(T.matmul(k_in, layer.w_k), layer.b_k), layer.heads)
    s = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(layer.d_k))
    return AttentionScores(s)


def residual_update(raw: AttentionScores, carried: AttentionScores | None) -> AttentionScores:
    """Elementwise sum of new scores with the carried residual state."""
    if carried is None:
        return AttentionScores(raw.values)
    if carried.shape != raw.shape:
        raise StateError(
            f"carried scores {carried.shape} do not match new scores {raw.shape}; "
            "sequence length changed mid-stack")
    return AttentionScores(T.add(raw.values, carried.values))


def apply_swd(s: AttentionScores, w: int, causal: bool = False) -> AttentionScores:
    """Keep entries within ``w`` of the diagonal; mask the rest to NEG_INF."""
    if w < 1:
        raise ConfigError(f"window radius must be >= 1, got {w}")
    t_q, t_k = s.shape[-2], s.shape[-1]
    if t_q != t_k:
        raise ShapeError(f"band masking needs square scores, got {s.shape}")
    keep = band_mask(t_q, w, causal)
    return AttentionScores(T.where(keep, s.values, NEG_INF))


def apply_key_padding(s: AttentionScores, key_lengths: np.ndarray,
                      rescue_diagonal: bool = False) -> AttentionScores:
    """Mask key positions past each item's valid length.

    ``rescue_diagonal`` keeps (i, i) visible so padded query rows never become
    fully masked; their outputs are ignored downstream anyway.
    """
    key_lengths = np.asarray(key_lengths)
    t_k = s.shape[-1]
    valid = np.arange(t_k)[None, :] < key_lengths[:, None]          # [B, T_k]
    keep = valid[:, None, None, :]                                   # [B,1,1,T_k]
    if rescue_diagonal:
        t_q = s.shape[-2]
        diag = np.eye(t_q, t_k, dtype=bool)[None, None, :, :]
        keep = keep | diag
    else:
        keep = np.broadcast_to(keep, (len(key_lengths), 1, s.shape[-2], t_k))
    return AttentionScores(T.where(keep, s.values, NEG_INF))


def attend(s: AttentionScores, v_in: Tensor, layer: SrmhaLayer) -> Tensor:
    """softmax(scores) @ V per head, heads merged, output-projected."""
    v = _split_heads(T.add(T.matmul(v_in, layer.w_v), layer.b_v), layer.heads)
    probs = T.softmax_rows(s.values)
    ctx = T.matmul(probs, v)
    return T.add(T.matmul(_merge_heads(ctx), layer.w_o), layer.b_o)


def srmha_forward(x: Tensor, layer: SrmhaLayer, state: AttentionState | None = None,
                  *, causal: bool = False, key_lengths: np.ndarray | None = None,
                  share_raw_scores: bool = False) -> tuple[Tensor, AttentionState]:
    """One self-attention sub-layer forward; returns output and new state."""
    if state is None:
        state = AttentionState()
    if isinstance(layer.mode, Update):
        raw = scaled_scores(x, x, layer)
        carried = residual_update(raw, state.carried)
        masked = apply_swd(carried, layer.mode.w, causal)
        if key_lengths is not None:
            masked = apply_key_padding(masked, key_lengths, rescue_diagonal=True)
        out = attend(masked, x, layer)
        return out, AttentionState(carried=carried, masked=masked)
    if isinstance(layer.mode, Shared):
        if state.masked is None or state.carried is None:
            raise ScheduleError("shared-mode layer before any update layer in the stack")
        if share_raw_scores:
            s = state.carried
            if key_lengths is not None:
                s = apply_key_padding(s, key_lengths, rescue_diagonal=True)
        else:
            s = state.masked
        out = attend(s, x, layer)
        return out, state
    raise ModeError("srmha_forward needs an Update or Shared mode layer")


def cross_attention(q_in: Tensor, kv_in: Tensor, layer: SrmhaLayer,
                    kv_lengths: np.ndarray | None = None) -> Tensor:
    """Standard multi-head attention of decoder queries over encoder memory."""
    if isinstance(layer.mode, Shared):
        raise ModeError("cross attention needs a layer with Q/K projections")
    s = scaled_scores(q_in, kv_in, layer)
    if kv_lengths is not None:
        s = apply_key_padding(s, kv_lengths)
    return attend(s, kv_in, layer)


# ---- band-limited inference kernel ------------------------------------------
#
# Everything any layer ever reads from the score state passes through the same
# band mask, so entries outside |i-j| <= w can never influence an output. The
# low-memory inference path below therefore stores scores as [B, h, T, 2w+1]
# bands: residual carries stay exact while peak memory drops from O(T^2) to
# O(T*w). Dot products are reorganized into per-offset elementwise work, which
# the matmul FLOP counter does not see; FLOP parity is asserted on the dense
# path only.


@dataclass
class BandedAttentionState:
    carried: Tensor | None = None   # [B, h, T, 2w+1] residual score band
    probs: Tensor | None = None     # [B, h, T, 2w+1] softmax of masked band


def _banded_scores(q: Tensor, k: Tensor, w: int, causal: bool) -> Tensor:
    """Band of (Q K^T)/sqrt(d_k): column w+delta holds score(i, i+delta)."""
    b, h, t, dk = q.shape
    scale = 1.0 / np.sqrt(dk)
    cols = []
    for delta in range(-w, w + 1):
        lo, hi = max(0, -delta), t - max(0, delta)
        if (causal and delta > 0) or hi <= lo:
            cols.append(T.full((b, h, t, 1), NEG_INF, dtype=q.dtype))
            continue
        qs = T.slice_axis(q, 2, lo, hi)
        ks = T.slice_axis(k, 2, lo + delta, hi + delta)
        core = T.mul(T.tsum(T.mul(qs, ks), axis=-1, keepdims=True), scale)
        pieces = []
        if lo > 0:
            pieces.append(T.full((b, h, lo, 1), NEG_INF, dtype=q.dtype))
        pieces.append(core)
        if hi < t:
            pieces.append(T.full((b, h, t - hi, 1), NEG_INF, dtype=q.dtype))
        cols.append(T.concat(pieces, axis=2) if len(pieces) > 1 else pieces[0])
    return T.concat(cols, axis=3)


def _banded_attend(probs: Tensor, v: Tensor, w: int) -> Tensor:
    """Weighted value sum out[i] = sum_delta probs[i, w+delta] * v[i+delta]."""
    b, h, t, _ = probs.shape
    dk = v.shape[-1]
    out = None
    for delta in range(-w, w + 1):
        lo, hi = max(0, -delta), t - max(0, delta)
        if hi <= lo:
            continue
        p = T.slice_axis(T.slice_axis(probs, 3, w + delta, w + delta + 1), 2, lo, hi)
        vs = T.slice_axis(v, 2, lo + delta, hi + delta)
        contrib = T.mul(p, vs)
        pieces = []
        if lo > 0:
            pieces.append(T.zeros((b, h, lo, dk), dtype=v.dtype))
        pieces.append(contrib)
        if hi < t:
            pieces.append(T.zeros((b, h, t - hi, dk), dtype=v.dtype))
        term = T.concat(pieces, axis=2) if len(pieces) > 1 else pieces[0]
        out = term if out is None else T.add(out, term)
    return out


def srmha_forward_banded(x: Tensor, layer: SrmhaLayer,
                         state: BandedAttentionState | None = None,
                         *, causal: bool = False) -> tuple[Tensor, BandedAttentionState]:
    """Band-storage equivalent of :func:`srmha_forward` (default share mode).

    Intended for inference (no padding); outputs match the dense path to
    floating-point reassociation error.
    """
    if state is None:
        state = BandedAttentionState()
    if isinstance(layer.mode, Update):
        w = layer.mode.w
        q = _split_heads(T.add(T.matmul(x, layer.w_q), layer.b_q), layer.heads)
        k = _split_heads(T.add(T.matmul(x, layer.w_k), layer.b_k), layer.heads)
        band = _banded_scores(q, k, w, causal)
        del q, k
        if state.carried is not None:
            if state.carried.shape != band.shape:
                raise StateError("carried band does not match current sequence length")
            keep = band.data > NEG_INF / 2
            band = T.where(keep, T.add(band, state.carried), NEG_INF)
        probs = T.softmax_rows(band)
        state = BandedAttentionState(carried=band, probs=probs)
    elif isinstance(layer.mode, Shared):
        if state.probs is None:
            raise ScheduleError("shared-mode layer before any update layer in the stack")
        w = (state.probs.shape[-1] - 1) // 2
        probs = state.probs
    else:
        raise ModeError("banded forward needs an Update or Shared mode layer")
    v = _split_heads(T.add(T.matmul(x, layer.w_v), layer.b_v), layer.heads)
    ctx = _banded_attend(probs, v, w)
    out = T.add(T.matmul(_merge_heads(ctx), layer.w_o), layer.b_o)
    return out, state
