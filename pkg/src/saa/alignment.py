"""Blank-removal alignment loss, its brute-force oracle, and the confidence penalty.

With blank b, the forward variable over target prefixes is

    alpha(u, n) = alpha(u-1, n) p_u(b) + alpha(u-1, n-1) p_u(y_n),  alpha(0, 0) = 1

and the loss is -log alpha(U, N). Unlike CTC there is no repeat merging, so
each frame either emits the next target label or a blank.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from saa import tensor as T
from saa.errors import InfeasibleAlignmentError, OracleSizeError
from saa.tensor import Tensor

# log of an unreachable state; finite so logsumexp and its gradient stay finite
_LOG_ZERO = -1e30


def _check_feasible(targets, lengths) -> None:
    for i, (y, u) in enumerate(zip(targets, lengths)):
        if len(y) > u:
            raise InfeasibleAlignmentError(
                f"item {i}: target of length {len(y)} cannot align to {u} frames"
            )


def rna_loss_dp(log_probs: Tensor, targets: Sequence[Sequence[int]], blank: int,
                lengths=None) -> Tensor:
    """Summed negative log-likelihood over a batch of lattices.

    log_probs: (U, V) with a single target, or (B, U, V) with one target per
    item; ``lengths`` gives the valid frame count per item (defaults to U).
    """
    if log_probs.ndim == 2:
        log_probs = T.reshape(log_probs, (1,) + log_probs.shape)
        targets = [targets]
    b, u_max, _ = log_probs.shape
    lengths = np.full(b, u_max) if lengths is None else np.asarray(lengths)
    targets = [list(y) for y in targets]
    _check_feasible(targets, lengths)
    n_len = np.array([len(y) for y in targets])
    n_max = int(n_len.max())

    blank_lp = log_probs[:, :, blank]  # (B, U)
    alpha = Tensor(np.where(np.arange(n_max + 1)[None, :] == 0, 0.0, _LOG_ZERO) * np.ones((b, 1)))
    if n_max:
        y_pad = np.zeros((b, n_max), dtype=np.int64)
        for i, y in enumerate(targets):
            y_pad[i, :len(y)] = y
        emit_lp = T.gather(log_probs, np.broadcast_to(y_pad[:, None, :], (b, u_max, n_max)))
        edge = Tensor(np.full((b, 1), _LOG_ZERO))
    for u in range(u_max):
        stay = alpha + blank_lp[:, u:u + 1]
        if n_max:
            move = T.concat([edge, alpha[:, :n_max] + emit_lp[:, u]], axis=1)
            new = T.logsumexp(T.stack([stay, move], axis=-1), axis=-1)
        else:
            new = stay
        live = (u < lengths).astype(np.float64)[:, None]
        alpha = new if live.all() else new * live + alpha * (1.0 - live)
    final = T.gather(alpha, n_len[:, None])
    return T.neg(T.sum_(final))


def rna_loss_bruteforce(log_probs: np.ndarray, y: Sequence[int], blank: int) -> float:
    """Exact loss by enumerating all (L+1)^U alignments."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    if lp.ndim == 3:
        lp = lp[0]
    u, v = lp.shape
    y = list(y)
    if len(y) > u:
        raise InfeasibleAlignmentError(f"target of length {len(y)} cannot align to {u} frames")
    if v ** u > 10 ** 7:
        raise OracleSizeError(f"{v}^{u} alignments exceed the enumeration limit of 1e7")
    paths = np.array(list(itertools.product(range(v), repeat=u)), dtype=np.int64).reshape(-1, u)
    emitted = paths != blank
    keep = emitted.sum(axis=1) == len(y)
    paths, emitted = paths[keep], emitted[keep]
    if len(y):
        # stable sort moves emitted labels to the front in their original order
        order = np.argsort(~emitted, axis=1, kind="stable")[:, :len(y)]
        keep = (np.take_along_axis(paths, order, axis=1) == np.array(y)).all(axis=1)
        paths = paths[keep]
    scores = lp[np.arange(u)[None, :], paths].sum(axis=1)
    top = scores.max()
    return -(top + math.log(math.fsum(np.exp(scores - top))))


def confidence_penalty(log_probs: Tensor, lengths=None) -> Tensor:
    """Negative total entropy of the valid lattice rows, i.e. sum p log p."""
    if log_probs.ndim == 2:
        log_probs = T.reshape(log_probs, (1,) + log_probs.shape)
    b, u_max, _ = log_probs.shape
    plogp = T.exp(log_probs) * log_probs
    if lengths is not None:
        mask = (np.arange(u_max)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
        plogp = plogp * mask[:, :, None]
    return T.sum_(plogp)
