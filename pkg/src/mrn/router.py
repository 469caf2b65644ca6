"""Domain routing and soft-voting fusion over per-branch frame probabilities.

The gated router consumes the stacked feature cubic (P patches x D domains
x C channels). Each block projects channels, gates along the flattened
patch-domain axis (project, layer-norm, project, elementwise product with
the ungated branch), merges residually, repeats the gate along the channel
axis, and finally mean-pools to a D-vector of logits -> softmax scores.
A plain two-layer MLP over the flattened cubic is kept as the baseline
router. Fusion is a convex combination of padded per-branch probability
matrices, so fused rows stay on the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .ctc import ctc_loss, is_feasible
from .errors import ContractViolation
from .optim import Adam, OneCycle

DM_ROUTER = "dm"
MLP_ROUTER = "mlp"
CONST_ROUTER = "const"
MLP_HIDDEN = 64


def stack_features(per_branch: Sequence[np.ndarray]) -> np.ndarray:
    """D feature matrices (T, C) -> cubic (P=T, D, C)."""
    if not per_branch:
        raise ContractViolation("stack_features needs at least one matrix")
    shape = per_branch[0].shape
    for f in per_branch[1:]:
        if f.shape != shape:
            raise ContractViolation(
                f"feature shape mismatch: {f.shape} vs {shape}"
            )
    return np.stack(per_branch, axis=1)


@dataclass
class RouterParams:
    kind: str                       # DM_ROUTER or MLP_ROUTER
    n_domains: int
    n_patches: int
    n_channels: int
    depth: int
    params: dict[str, Tensor]
    hidden: int = MLP_HIDDEN
    train_report: dict = field(default_factory=dict)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def init_dm_router(rng: np.random.Generator, n_patches: int, n_domains: int,
                   n_channels: int, depth: int = 1) -> RouterParams:
    if depth < 1:
        raise ContractViolation(f"router depth must be >= 1, got {depth}")
    pd = n_patches * n_domains
    c = n_channels
    p: dict[str, np.ndarray] = {}
    for d in range(depth):
        p[f"b{d}_chan_w"] = rng.normal(0.0, c ** -0.5, (c, c))
        p[f"b{d}_chan_b"] = np.zeros((1, c))
        p[f"b{d}_pd_w1"] = rng.normal(0.0, pd ** -0.5, (pd, pd))
        p[f"b{d}_pd_b1"] = np.zeros((pd, 1))
        p[f"b{d}_pd_gain"] = np.ones((1, c))
        p[f"b{d}_pd_beta"] = np.zeros((1, c))
        p[f"b{d}_pd_w2"] = rng.normal(0.0, pd ** -0.5, (pd, pd))
        p[f"b{d}_pd_b2"] = np.ones((pd, 1))
        p[f"b{d}_ch_w1"] = rng.normal(0.0, c ** -0.5, (c, c))
        p[f"b{d}_ch_b1"] = np.zeros((1, c))
        p[f"b{d}_ch_gain"] = np.ones((1, c))
        p[f"b{d}_ch_beta"] = np.zeros((1, c))
        p[f"b{d}_ch_w2"] = rng.normal(0.0, c ** -0.5, (c, c))
        p[f"b{d}_ch_b2"] = np.ones((1, c))
    p["head_w"] = rng.normal(0.0, n_domains ** -0.5, (n_domains, n_domains))
    p["head_b"] = np.zeros((1, n_domains))
    return RouterParams(DM_ROUTER, n_domains, n_patches, n_channels, depth,
                        {k: ag.parameter(v) for k, v in p.items()})


def init_mlp_router(rng: np.random.Generator, n_patches: int, n_domains: int,
                    n_channels: int, hidden: int = MLP_HIDDEN) -> RouterParams:
    flat = n_patches * n_domains * n_channels
    p = {
        "mlp_w1": rng.normal(0.0, flat ** -0.5, (flat, hidden)),
        "mlp_b1": np.zeros((1, hidden)),
        "mlp_w2": rng.normal(0.0, hidden ** -0.5, (hidden, n_domains)),
        "mlp_b2": np.zeros((1, n_domains)),
    }
    return RouterParams(MLP_ROUTER, n_domains, n_patches, n_channels, 1,
                        {k: ag.parameter(v) for k, v in p.items()},
                        hidden=hidden)


def _rows(ones_col: Tensor, vec: Tensor) -> Tensor:
    """Tile a (1, C) row vector down the rows: ones (N, 1) @ vec."""
    return ag.matmul(ones_col, vec)


def _gate_pd(p: dict[str, Tensor], tag: str, y: Tensor, ones_pd: Tensor,
             ones_c: Tensor) -> Tensor:
    """Patch-domain gate: project along PD, layer-norm (+affine), project
    along PD again, then elementwise product with the ungated branch."""
    a = ag.add(ag.matmul(p[f"{tag}_w1"], y), ag.matmul(p[f"{tag}_b1"], ones_c))
    h = ag.layer_norm(a)
    h = ag.add(ag.mul(h, _rows(ones_pd, p[f"{tag}_gain"])),
               _rows(ones_pd, p[f"{tag}_beta"]))
    g = ag.add(ag.matmul(p[f"{tag}_w2"], h), ag.matmul(p[f"{tag}_b2"], ones_c))
    return ag.mul(g, y)


def _gate_ch(p: dict[str, Tensor], tag: str, y: Tensor, ones_pd: Tensor) -> Tensor:
    """Channel gate: same structure with projections along the channel axis."""
    a = ag.add(ag.matmul(y, p[f"{tag}_w1"]), _rows(ones_pd, p[f"{tag}_b1"]))
    h = ag.layer_norm(a)
    h = ag.add(ag.mul(h, _rows(ones_pd, p[f"{tag}_gain"])),
               _rows(ones_pd, p[f"{tag}_beta"]))
    g = ag.add(ag.matmul(h, p[f"{tag}_w2"]), _rows(ones_pd, p[f"{tag}_b2"]))
    return ag.mul(g, y)


def dm_router_forward(router: RouterParams, cubic: np.ndarray) -> Tensor:
    """Feature cubic (P, D, C) -> domain scores (D,) on the simplex."""
    P, D, C = cubic.shape
    if (P, D, C) != (router.n_patches, router.n_domains, router.n_channels):
        raise ContractViolation(
            f"cubic {cubic.shape} vs router "
            f"({router.n_patches}, {router.n_domains}, {router.n_channels})"
        )
    p = router.params
    pd = P * D
    ones_pd = ag.tensor(np.ones((pd, 1)))
    ones_c = ag.tensor(np.ones((1, C)))
    x = ag.tensor(cubic)
    for d in range(router.depth):
        y = ag.reshape(x, (pd, C))
        y = ag.add(ag.matmul(y, p[f"b{d}_chan_w"]),
                   _rows(ones_pd, p[f"b{d}_chan_b"]))
        s = _gate_pd(p, f"b{d}_pd", y, ones_pd, ones_c)
        x = ag.add(x, ag.reshape(s, (P, D, C)))
        y2 = ag.reshape(x, (pd, C))
        s2 = _gate_ch(p, f"b{d}_ch", y2, ones_pd)
        x = ag.add(x, ag.reshape(s2, (P, D, C)))
    pooled = ag.mean_pool(ag.mean_pool(x, 0), 1)      # (D,)
    logits = ag.add(ag.matmul(ag.reshape(pooled, (1, D)), p["head_w"]),
                    p["head_b"])
    return ag.reshape(ag.softmax(logits, axis=-1), (D,))


def mlp_router_forward(router: RouterParams, cubic: np.ndarray) -> Tensor:
    P, D, C = cubic.shape
    if (P, D, C) != (router.n_patches, router.n_domains, router.n_channels):
        raise ContractViolation(
            f"cubic {cubic.shape} vs router "
            f"({router.n_patches}, {router.n_domains}, {router.n_channels})"
        )
    p = router.params
    x = ag.tensor(cubic.reshape(1, P * D * C))
    h = ag.tanh(ag.add(ag.matmul(x, p["mlp_w1"]), p["mlp_b1"]))
    logits = ag.add(ag.matmul(h, p["mlp_w2"]), p["mlp_b2"])
    return ag.reshape(ag.softmax(logits, axis=-1), (D,))


def init_const_router(n_patches: int, n_channels: int) -> RouterParams:
    """The degenerate single-domain router: scores are always [1.0]."""
    return RouterParams(CONST_ROUTER, 1, n_patches, n_channels, 0, {})


def router_forward(router: RouterParams, cubic: np.ndarray) -> Tensor:
    if router.kind == CONST_ROUTER:
        return ag.tensor(np.ones(1))
    if router.kind == DM_ROUTER:
        return dm_router_forward(router, cubic)
    if router.kind == MLP_ROUTER:
        return mlp_router_forward(router, cubic)
    raise ContractViolation(f"unknown router kind {router.kind!r}")


# ---------------------------------------------------------------------------
# voting and fusion

SOFT = "soft"
HARD = "hard"


def quantize(scores: np.ndarray, mode: str) -> np.ndarray:
    """Soft voting keeps the scores; hard voting one-hots the argmax
    (ties to the lowest index)."""
    if mode == SOFT:
        return scores
    if mode == HARD:
        out = np.zeros_like(scores)
        out[int(np.argmax(scores))] = 1.0
        return out
    raise ContractViolation(f"unknown voting mode {mode!r}")


def fuse(weights: np.ndarray, padded: np.ndarray) -> np.ndarray:
    """Weighted elementwise sum: (D,) simplex weights x (D, T, K) -> (T, K)."""
    if weights.shape[0] != padded.shape[0]:
        raise ContractViolation(
            f"{weights.shape[0]} weights vs {padded.shape[0]} branches"
        )
    return np.einsum("d,dtk->tk", weights, padded)


def fuse_on_tape(scores: Tensor, padded: np.ndarray) -> Tensor:
    """Graph version of fuse: gradients flow into the routing scores."""
    D, T, K = padded.shape
    mat = ag.tensor(padded.reshape(D, T * K))
    fused = ag.matmul(ag.reshape(scores, (1, D)), mat)
    return ag.reshape(fused, (T, K))


@dataclass
class LossReport:
    l_clf: float
    l_domain: float
    l_total: Tensor


def stage2_loss(fused: Tensor, target: Sequence[int], scores: Tensor,
                true_language_index: int, alpha: float) -> LossReport:
    """Recognition loss on the fused probs plus weighted domain CE.

    Branch probabilities enter `fused` as constants, so gradients reach
    router parameters alone.
    """
    if alpha < 0:
        raise ContractViolation(f"alpha must be >= 0, got {alpha}")
    l_clf = ctc_loss(fused, target)
    l_dom = ag.cross_entropy(scores, true_language_index)
    total = ag.add(l_clf, ag.scalar_mul(l_dom, alpha))
    return LossReport(l_clf=l_clf.item(), l_domain=l_dom.item(), l_total=total)


def train_router(kind: str, cubics: Sequence[np.ndarray],
                 padded_fn, targets: Sequence[Sequence[int]],
                 true_languages: Sequence[int], *, n_frames: int,
                 depth: int, alpha: float, iterations: int, batch: int,
                 max_lr: float, seed_stream: Sequence[int],
                 hidden: int = MLP_HIDDEN) -> RouterParams:
    """Stage-II training over cached per-instance cubics.

    `padded_fn(i)` yields instance i's (D, T, K) padded branch probs; it is
    called lazily per batch so the full stack never has to sit in memory.
    CTC-infeasible targets contribute only the domain term; the count is
    recorded in the train report.
    """
    if not cubics:
        raise ContractViolation("no stage-II training data")
    P, D, C = cubics[0].shape
    rng = np.random.default_rng(list(seed_stream))
    if kind == DM_ROUTER:
        router = init_dm_router(rng, P, D, C, depth)
    else:
        router = init_mlp_router(rng, P, D, C, hidden)
    n = len(cubics)
    feasible = [is_feasible(n_frames, t) and len(t) > 0 for t in targets]
    opt = Adam(list(router.params.values()))
    sched = OneCycle(max_lr, iterations)
    losses: list[float] = []
    n_skipped = 0
    for it in range(iterations):
        idx = rng.integers(0, n, size=min(batch, n))
        with ag.Tape() as tape:
            parts: list[Tensor] = []
            for i in idx:
                scores = router_forward(router, cubics[i])
                l_dom = ag.cross_entropy(scores, true_languages[i])
                item = ag.scalar_mul(l_dom, alpha)
                if feasible[i]:
                    fused = fuse_on_tape(scores, padded_fn(i))
                    item = ag.add(ctc_loss(fused, targets[i]), item)
                else:
                    n_skipped += 1
                parts.append(ag.reshape(item, (1,)))
            total = ag.scalar_mul(ag.sum_all(ag.concat(parts, axis=0)),
                                  1.0 / len(idx))
        opt.zero_grad()
        tape.backward(total, list(router.params.values()))
        opt.step(sched.lr_at(it))
        losses.append(total.item())
    router.train_report = {
        "first_loss": losses[0],
        "last_loss": losses[-1],
        "skipped_targets": n_skipped,
        "iterations": iterations,
    }
    return router


def route_instance(router: RouterParams, cubic: np.ndarray) -> np.ndarray:
    """Inference-time scores as a plain array."""
    return router_forward(router, cubic).data
