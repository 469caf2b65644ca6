"""CTC loss (log-space forward/backward DP), greedy decoding, and a
brute-force path-enumeration oracle for small cases.

Frame matrices are (T, K) row-stochastic with blank at column 0. Targets
are label-index sequences without blanks. A target is feasible iff
T >= len(labels) + number of adjacent repeats.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autograd as ag
from .errors import ContractViolation, InfeasibleTarget

NEG_INF = -np.inf


def adjacent_repeats(labels: Sequence[int]) -> int:
    return sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def is_feasible(n_frames: int, labels: Sequence[int]) -> bool:
    return n_frames >= len(labels) + adjacent_repeats(labels)


def _extended(labels: Sequence[int]) -> np.ndarray:
    """Blank-interleaved state labels: [0, l1, 0, l2, ..., 0]."""
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(labels, dtype=np.int64)
    return ext


def ctc_loss_and_grad(probs: np.ndarray, labels: Sequence[int]):
    """-log P(labels | probs) and its exact gradient w.r.t. probs.

    The forward/backward recursions run in log space; the gradient at
    (t, k) sums alpha*beta over DP states carrying label k.
    """
    T, K = probs.shape
    labels = list(int(x) for x in labels)
    if len(labels) < 1:
        raise ContractViolation("CTC target must be non-empty")
    if any(not (1 <= c < K) for c in labels):
        raise ContractViolation(f"CTC target out of range for {K} classes: {labels}")
    if not is_feasible(T, labels):
        raise InfeasibleTarget(
            f"target of length {len(labels)} (+{adjacent_repeats(labels)} repeats) "
            f"needs more than {T} frames"
        )
    ext = _extended(labels)
    S = ext.size
    with np.errstate(divide="ignore"):
        logp = np.log(probs)

    # allow2[s]: the skip transition s-2 -> s is legal
    allow2 = np.zeros(S, dtype=bool)
    allow2[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, 0]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step1 = np.concatenate(([NEG_INF], prev[:-1]))
        step2 = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        step2 = np.where(allow2, step2, NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step1), step2) + logp[t, ext]

    log_total = np.logaddexp(alpha[T - 1, S - 1],
                             alpha[T - 1, S - 2] if S > 1 else NEG_INF)

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        stay = nxt
        step1 = np.concatenate((nxt[1:], [NEG_INF]))
        shifted_allow = np.concatenate((allow2[2:], [False, False]))
        step2 = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        step2 = np.where(shifted_allow, step2, NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, step1), step2)

    grad = np.zeros_like(probs)
    with np.errstate(invalid="ignore"):
        gamma = alpha + beta  # (T, S), log path mass through each state
    for s in range(S):
        k = ext[s]
        col = gamma[:, s] - log_total
        contrib = np.exp(col)
        y = probs[:, k]
        safe = contrib > 0.0
        grad[safe, k] -= contrib[safe] / y[safe]
    return float(-log_total), grad


def ctc_loss(probs: ag.Tensor, labels: Sequence[int]) -> ag.Tensor:
    """Autograd node wrapping ctc_loss_and_grad for a single (T, K) input."""
    value, grad = ctc_loss_and_grad(probs.data, labels)
    return ag.custom_node("ctc", (probs,), np.asarray(value),
                          lambda g: [grad * float(g)])


class BatchCtc:
    """CTC over a (B, T, K) batch as one graph node.

    Infeasible targets are skipped (zero gradient) and counted; the loss is
    the mean over the feasible instances.
    """

    def __init__(self, probs: ag.Tensor, label_seqs: Sequence[Sequence[int]]):
        data = probs.data
        if data.ndim != 3 or data.shape[0] != len(label_seqs):
            raise ContractViolation(
                f"batch CTC expects (B, T, K) with B targets, got {data.shape} "
                f"and {len(label_seqs)} targets"
            )
        B = data.shape[0]
        grads = np.zeros_like(data)
        losses = []
        feasible = []
        for b in range(B):
            if len(label_seqs[b]) > 0 and is_feasible(data.shape[1], label_seqs[b]):
                loss_b, grad_b = ctc_loss_and_grad(data[b], label_seqs[b])
                losses.append(loss_b)
                grads[b] = grad_b
                feasible.append(b)
        self.n_skipped = B - len(feasible)
        self.n_feasible = len(feasible)
        if not feasible:
            self.loss = None
            return
        scale = 1.0 / len(feasible)
        value = np.asarray(sum(losses) * scale)
        self.loss = ag.custom_node("ctc_batch", (probs,), value,
                                   lambda g: [grads * (float(g) * scale)])


def ctc_greedy_decode(probs: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse adjacent repeats, drop blanks.

    np.argmax breaks ties toward the lowest index, matching the tie rule.
    """
    best = np.argmax(probs, axis=1)
    out: list[int] = []
    prev = -1
    for k in best:
        if k != prev and k != 0:
            out.append(int(k))
        prev = k
    return out


@lru_cache(maxsize=64)
def _all_paths(n_frames: int, n_classes: int):
    """Every label path of length n_frames over n_classes symbols, with its
    collapsed output sequence."""
    grids = np.meshgrid(*([np.arange(n_classes)] * n_frames), indexing="ij")
    paths = np.stack([g.reshape(-1) for g in grids], axis=1)
    collapsed = []
    for row in paths:
        seq = []
        prev = -1
        for k in row:
            if k != prev and k != 0:
                seq.append(int(k))
            prev = k
        collapsed.append(tuple(seq))
    return paths, collapsed


def ctc_brute_force(probs: np.ndarray, labels: Sequence[int]) -> float:
    """-log P(labels) by exhaustive enumeration of all K^T alignment paths."""
    T, K = probs.shape
    paths, collapsed = _all_paths(T, K)
    path_probs = probs[np.arange(T), paths].prod(axis=1)
    target = tuple(int(x) for x in labels)
    total = float(path_probs[[c == target for c in collapsed]].sum())
    return -np.log(total)
