"""CTC loss: log-space forward algorithm over blank-augmented alignments.

The recursion runs as a time loop of vectorized tape ops over the extended
label axis, so gradients come from the same reverse-mode machinery as the rest
of the model. Loss is the negative log total alignment probability, averaged
over the batch.
"""

from __future__ import annotations

import numpy as np

from .errors import InfeasibleAlignmentError, VocabError
from . import tensor as T
from .tensor import NEG_INF, Tensor


def min_input_length(target: np.ndarray) -> int:
    """Frames needed for any valid alignment: length plus adjacent repeats."""
    target = np.asarray(target)
    if len(target) == 0:
        return 0
    return len(target) + int(np.sum(target[1:] == target[:-1]))


def ctc_loss(log_probs: Tensor, targets: np.ndarray, input_lengths: np.ndarray,
             target_lengths: np.ndarray, blank: int = 0) -> Tensor:
    """Batched CTC loss.

    log_probs: [B, T, V] log-softmax outputs. targets: [B, L_max] padded token
    ids (never the blank). Raises InfeasibleAlignmentError when any item has
    fewer frames than its shortest valid alignment.
    """
    b, t_max, vocab = log_probs.shape
    targets = np.asarray(targets)
    input_lengths = np.asarray(input_lengths)
    target_lengths = np.asarray(target_lengths)

    for i in range(b):
        tgt = targets[i, : target_lengths[i]]
        if np.any(tgt < 0) or np.any(tgt >= vocab):
            raise VocabError(f"CTC target ids out of range [0, {vocab}) in item {i}")
        if np.any(tgt == blank):
            raise VocabError(f"CTC target contains the blank id ({blank}) in item {i}")
        need = min_input_length(tgt)
        if input_lengths[i] < need:
            raise InfeasibleAlignmentError(
                f"item {i}: {input_lengths[i]} frames cannot align a target needing {need}")

    l_max = int(target_lengths.max(initial=0))
    s_max = 2 * l_max + 1

    # extended labels: blank at even s, target symbol at odd s
    ext = np.full((b, s_max), blank, dtype=np.int64)
    ext[:, 1::2] = targets[:, :l_max]
    s_len = 2 * target_lengths + 1
    s_idx = np.arange(s_max)[None, :]
    valid_s = s_idx < s_len[:, None]
    # the s-2 skip is legal only onto a non-blank that differs from ext[s-2]
    skip_ok = np.zeros((b, s_max), dtype=bool)
    if s_max >= 3:
        skip_ok[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip_ok &= valid_s

    def emission(t_step: int) -> Tensor:
        frame = T.reshape(T.slice_axis(log_probs, 1, t_step, t_step + 1), (b, vocab))
        return T.gather_last(frame, ext)

    start = (s_idx == 0) | ((s_idx == 1) & (target_lengths[:, None] >= 1))
    alpha = T.where(start & valid_s, emission(0), NEG_INF)

    neg_col = T.full((b, 1), NEG_INF, dtype=log_probs.dtype)
    for step in range(1, t_max):
        prev = T.concat([neg_col, T.slice_axis(alpha, 1, 0, s_max - 1)], axis=1)
        inner = T.logaddexp(alpha, prev)
        if s_max >= 3:
            skip = T.concat([neg_col, neg_col, T.slice_axis(alpha, 1, 0, s_max - 2)], axis=1)
            skip = T.where(skip_ok, skip, NEG_INF)
            inner = T.logaddexp(inner, skip)
        cand = T.where(valid_s, T.add(inner, emission(step)), NEG_INF)
        active = (step < input_lengths)[:, None]
        alpha = T.where(active, cand, alpha)

    last = 2 * target_lengths          # index of the final blank state
    prev_idx = np.maximum(2 * target_lengths - 1, 0)
    picked = T.gather_last(alpha, np.stack([last, prev_idx], axis=1))
    a_last = T.slice_axis(picked, 1, 0, 1)
    a_prev = T.where((target_lengths > 0)[:, None], T.slice_axis(picked, 1, 1, 2), NEG_INF)
    log_p = T.logaddexp(a_last, a_prev)
    return T.neg(T.tmean(log_p))
