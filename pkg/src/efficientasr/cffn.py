"""Chunk-level feed-forward network.

The embedding dimension is split into ``n_chunks`` contiguous slices; each
slice runs through its own small two-layer FFN (hidden width d_ff / n), and
the outputs are concatenated back. ``n_chunks=1`` is the ordinary FFN. Total
weight scalars shrink by exactly 1/n; no cross-chunk mixing is added, that is
left to the surrounding attention sub-layers.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


class CffnBlock:
    """Per-chunk key/value matrices of a chunked FFN.

    Each chunk i stores a key matrix [d_ff/n, d_model/n] (rows act as pattern
    keys) and a value matrix [d_ff/n, d_model/n] (rows act as value vectors):
    chunk_i(X_i) = ReLU(X_i K_i^T + b1_i) V_i + b2_i.
    """

    def __init__(self, d_model: int, d_ff: int, n_chunks: int,
                 rng: np.random.Generator, dtype=np.float64):
        if n_chunks < 1:
            raise ConfigError(f"n_chunks must be >= 1, got {n_chunks}")
        if d_model % n_chunks != 0 or d_ff % n_chunks != 0:
            raise ConfigError(
                f"n_chunks ({n_chunks}) must divide d_model ({d_model}) and d_ff ({d_ff})")
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_chunks = n_chunks
        d_in = d_model // n_chunks
        d_hid = d_ff // n_chunks
        self.keys: list[Tensor] = []
        self.values: list[Tensor] = []
        self.b1: list[Tensor] = []
        self.b2: list[Tensor] = []
        for _ in range(n_chunks):
            self.keys.append(Tensor(T.xavier_uniform(rng, d_in, d_hid, shape=(d_hid, d_in), dtype=dtype),
                                    requires_grad=True))
            self.values.append(Tensor(T.xavier_uniform(rng, d_hid, d_in, shape=(d_hid, d_in), dtype=dtype),
                                      requires_grad=True))
            self.b1.append(Tensor(np.zeros(d_hid, dtype=dtype), requires_grad=True))
            self.b2.append(Tensor(np.zeros(d_in, dtype=dtype), requires_grad=True))

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i in range(self.n_chunks):
            named += [(f"k{i}", self.keys[i]), (f"b1_{i}", self.b1[i]),
                      (f"v{i}", self.values[i]), (f"b2_{i}", self.b2[i])]
        return named

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.parameters())

    def weight_count(self) -> int:
        """Weight scalars only (biases excluded)."""
        return sum(t.data.size for t in self.keys + self.values)


def split_embed(x: Tensor, n: int) -> list[Tensor]:
    """Contiguous equal slices along the embedding (last) dimension."""
    d = x.shape[-1]
    if d % n != 0:
        raise ConfigError(f"n_chunks ({n}) must divide the embedding width ({d})")
    return T.split(x, n, axis=-1)


def cffn_forward(x: Tensor, block: CffnBlock) -> Tensor:
    """Apply each chunk's FFN to its slice and concatenate."""
    if x.shape[-1] != block.d_model:
        raise ShapeError(f"input width {x.shape[-1]} != block d_model {block.d_model}")
    parts = split_embed(x, block.n_chunks)
    outs = []
    for i, part in enumerate(parts):
        hidden = T.relu(T.add(T.matmul(part, T.swap_last2(block.keys[i])), block.b1[i]))
        outs.append(T.add(T.matmul(hidden, block.values[i]), block.b2[i]))
    if len(outs) == 1:
        return outs[0]
    return T.concat(outs, axis=-1)


def cffn_param_count(d_model: int, d_ff: int, n: int) -> int:
    """Analytic scalar count, equal to a constructed block's allocation."""
    if n < 1 or d_model % n != 0 or d_ff % n != 0:
        raise ConfigError(f"n ({n}) must divide d_model ({d_model}) and d_ff ({d_ff})")
    per_chunk = 2 * (d_model // n) * (d_ff // n) + d_ff // n + d_model // n
    return n * per_chunk
