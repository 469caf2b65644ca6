"""Quantified verification suites: finite-difference gradient checks for
every differentiable op and both routers, the CTC enumeration oracle, and
the fusion algebra properties. The CLI `verify` subcommand and the
acceptance tests both run these."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check
from .ctc import ctc_brute_force, ctc_greedy_decode, ctc_loss, ctc_loss_and_grad, is_feasible
from .router import (DM_ROUTER, fuse, fuse_on_tape, init_dm_router,
                     init_mlp_router, quantize, router_forward, stage2_loss)

GRAD_TOL = 1e-4
CTC_TOL = 1e-8
ROW_SUM_TOL = 1e-9
AFFINE_TOL = 1e-12


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ag.sum_all(ag.mul(out, ag.tensor(weights)))


def _op_case(op: str, rng: np.random.Generator):
    """One random (f, x) pair for an op's gradient check."""
    if op == "matmul":
        m, k, n = rng.integers(1, 5, 3)
        other = ag.tensor(rng.normal(size=(k, n)))
        w = rng.normal(size=(m, n))
        if rng.random() < 0.5:
            return (lambda t: _weighted_sum(ag.matmul(t, other), w),
                    Tensor(rng.normal(size=(m, k))))
        left = ag.tensor(rng.normal(size=(m, k)))
        return (lambda t: _weighted_sum(ag.matmul(left, t), w),
                Tensor(rng.normal(size=(k, n))))
    if op in ("add", "sub", "mul"):
        shape = tuple(rng.integers(1, 5, int(rng.integers(1, 3))))
        other = ag.tensor(rng.normal(size=shape))
        w = rng.normal(size=shape)
        fn = getattr(ag, op)
        return (lambda t: _weighted_sum(fn(t, other), w),
                Tensor(rng.normal(size=shape)))
    if op == "scalar_mul":
        shape = tuple(rng.integers(1, 5, 2))
        c = float(rng.normal())
        w = rng.normal(size=shape)
        return (lambda t: _weighted_sum(ag.scalar_mul(t, c), w),
                Tensor(rng.normal(size=shape)))
    if op == "reshape":
        a, b = rng.integers(1, 5, 2)
        w = rng.normal(size=(b * a,))
        return (lambda t: _weighted_sum(ag.reshape(t, (a * b,)), w),
                Tensor(rng.normal(size=(a, b))))
    if op == "permute":
        shape = tuple(rng.integers(1, 4, 3))
        axes = tuple(rng.permutation(3))
        w = rng.normal(size=tuple(shape[i] for i in axes))
        return (lambda t: _weighted_sum(ag.permute(t, axes), w),
                Tensor(rng.normal(size=shape)))
    if op == "concat":
        rows = int(rng.integers(1, 4))
        cols = int(rng.integers(1, 4))
        other = ag.tensor(rng.normal(size=(rows, cols)))
        w = rng.normal(size=(2 * rows, cols))
        return (lambda t: _weighted_sum(ag.concat([t, other], axis=0), w),
                Tensor(rng.normal(size=(rows, cols))))
    if op == "split":
        n = int(rng.integers(2, 6))
        sizes = [1, n - 1]
        ws = [rng.normal(size=(s, 2)) for s in sizes]

        def f(t):
            parts = ag.split(t, sizes, axis=0)
            total = _weighted_sum(parts[0], ws[0])
            for p, w in zip(parts[1:], ws[1:]):
                total = ag.add(total, _weighted_sum(p, w))
            return total

        return f, Tensor(rng.normal(size=(n, 2)))
    if op in ("softmax", "log_softmax", "layer_norm"):
        rows, cols = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        w = rng.normal(size=(rows, cols))
        fn = getattr(ag, op)
        return (lambda t: _weighted_sum(fn(t, axis=-1), w),
                Tensor(rng.normal(size=(rows, cols))))
    if op in ("sigmoid", "tanh"):
        shape = tuple(rng.integers(1, 5, 2))
        w = rng.normal(size=shape)
        fn = getattr(ag, op)
        return (lambda t: _weighted_sum(fn(t), w),
                Tensor(rng.normal(size=shape)))
    if op == "relu":
        shape = tuple(rng.integers(1, 5, 2))
        w = rng.normal(size=shape)
        x = rng.normal(size=shape)
        x = np.where(np.abs(x) < 0.05, 0.1, x)  # keep clear of the kink
        return lambda t: _weighted_sum(ag.relu(t), w), Tensor(x)
    if op == "mean_pool":
        shape = tuple(rng.integers(1, 5, 3))
        axis = int(rng.integers(0, 3))
        w = rng.normal(size=tuple(s for i, s in enumerate(shape) if i != axis))
        return (lambda t: _weighted_sum(ag.mean_pool(t, axis), w),
                Tensor(rng.normal(size=shape)))
    if op == "sum":
        shape = tuple(rng.integers(1, 5, 2))
        return lambda t: ag.sum_all(t), Tensor(rng.normal(size=shape))
    if op == "embedding":
        v, e = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        ids = rng.integers(0, v, size=int(rng.integers(1, 6)))
        w = rng.normal(size=(len(ids), e))
        return (lambda t: _weighted_sum(ag.embedding_lookup(t, ids), w),
                Tensor(rng.normal(size=(v, e))))
    if op == "cross_entropy":
        if rng.random() < 0.5:
            k = int(rng.integers(2, 6))
            t_idx = int(rng.integers(0, k))
            return (lambda t: ag.cross_entropy(t, t_idx),
                    Tensor(rng.uniform(0.1, 1.0, size=k)))
        n, k = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        ids = rng.integers(0, k, size=n)
        return (lambda t: ag.cross_entropy(t, ids),
                Tensor(rng.uniform(0.1, 1.0, size=(n, k))))
    if op == "ctc":
        T = int(rng.integers(2, 6))
        K = int(rng.integers(2, 5))
        while True:
            labels = rng.integers(1, K, size=int(rng.integers(1, 3))).tolist()
            if is_feasible(T, labels):
                break
        probs = rng.uniform(0.05, 1.0, size=(T, K))
        probs /= probs.sum(axis=1, keepdims=True)
        return lambda t: ctc_loss(t, labels), Tensor(probs)
    raise ValueError(op)


CHECKED_OPS = (
    "matmul", "add", "sub", "mul", "scalar_mul", "reshape", "permute",
    "concat", "split", "softmax", "log_softmax", "layer_norm", "sigmoid",
    "tanh", "relu", "mean_pool", "sum", "embedding", "cross_entropy", "ctc",
)


def run_gradient_suite(n_cases: int = 100, seed: int = 0,
                       max_coords: int = 24) -> dict[str, float]:
    """Max relative error per op over n random cases each."""
    results: dict[str, float] = {}
    for op_index, op in enumerate(CHECKED_OPS):
        rng = np.random.default_rng([seed, op_index])
        worst = 0.0
        for _ in range(n_cases):
            f, x = _op_case(op, rng)
            size = x.data.size
            if size > max_coords:
                coords = rng.choice(size, size=max_coords, replace=False)
            else:
                coords = None
            worst = max(worst, grad_check(f, x, eps=1e-5, coords=coords))
        results[op] = worst
    for kind in (DM_ROUTER, "mlp"):
        rng = np.random.default_rng([seed, 91 if kind == DM_ROUTER else 92])
        worst = 0.0
        for case in range(n_cases):
            P, D, C = 3, int(rng.integers(2, 4)), 4
            if kind == DM_ROUTER:
                router = init_dm_router(rng, P, D, C, depth=1)
            else:
                router = init_mlp_router(rng, P, D, C, hidden=6)
            cubic = rng.normal(size=(P, D, C))
            T, K = 4, 5
            padded = rng.uniform(0.05, 1.0, size=(D, T, K))
            padded /= padded.sum(axis=-1, keepdims=True)
            target = [int(rng.integers(1, K))]
            true_lang = int(rng.integers(0, D))
            names = list(router.params)
            name = names[case % len(names)]

            def f(t, name=name):
                saved = router.params[name]
                router.params[name] = t
                try:
                    scores = router_forward(router, cubic)
                    fused = fuse_on_tape(scores, padded)
                    rep = stage2_loss(fused, target, scores, true_lang, 7.0)
                finally:
                    router.params[name] = saved
                return rep.l_total

            x = router.params[name]
            size = x.data.size
            coords = (rng.choice(size, size=max_coords, replace=False)
                      if size > max_coords else None)
            worst = max(worst, grad_check(f, Tensor(x.data.copy()), eps=1e-5,
                                          coords=coords))
        results[f"router_{kind}"] = worst
    return results


def run_ctc_oracle_suite(n_cases: int = 500, seed: int = 0) -> float:
    """Max |DP - brute force| over random small instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_cases:
        T = int(rng.integers(1, 7))
        K = int(rng.integers(2, 5))
        labels = rng.integers(1, K, size=int(rng.integers(1, 4))).tolist()
        if not is_feasible(T, labels):
            continue
        probs = rng.uniform(1e-3, 1.0, size=(T, K))
        probs /= probs.sum(axis=1, keepdims=True)
        dp, _ = ctc_loss_and_grad(probs, labels)
        brute = ctc_brute_force(probs, labels)
        worst = max(worst, abs(dp - brute))
        done += 1
    return worst


def run_fusion_suite(n_cases: int = 200, seed: int = 0) -> dict[str, float]:
    """Row sums, convexity endpoints, hard-voting equivalence, affinity."""
    rng = np.random.default_rng(seed)
    worst_row = 0.0
    worst_affine = 0.0
    endpoint_exact = True
    hard_matches = True
    for _ in range(n_cases):
        D = int(rng.integers(1, 5))
        T = int(rng.integers(1, 6))
        K = int(rng.integers(2, 7))
        padded = rng.uniform(0.0, 1.0, size=(D, T, K))
        padded[..., rng.integers(0, K)] = 0.0  # padded zero columns happen
        padded += 1e-9
        padded /= padded.sum(axis=-1, keepdims=True)
        w = rng.dirichlet(np.ones(D))
        fused = fuse(w, padded)
        worst_row = max(worst_row, float(np.abs(fused.sum(axis=-1) - 1.0).max()))

        j = int(rng.integers(0, D))
        onehot = np.zeros(D)
        onehot[j] = 1.0
        if not np.array_equal(fuse(onehot, padded), padded[j]):
            endpoint_exact = False

        hard = quantize(w, "hard")
        arg = int(np.argmax(w))
        if ctc_greedy_decode(fuse(hard, padded)) != ctc_greedy_decode(padded[arg]):
            hard_matches = False

        w2 = rng.dirichlet(np.ones(D))
        lam = float(rng.uniform())
        lhs = fuse(lam * w + (1 - lam) * w2, padded)
        rhs = lam * fuse(w, padded) + (1 - lam) * fuse(w2, padded)
        worst_affine = max(worst_affine, float(np.abs(lhs - rhs).max()))
    return {
        "max_row_sum_err": worst_row,
        "endpoint_exact": float(endpoint_exact),
        "hard_equals_argmax_branch": float(hard_matches),
        "max_affinity_err": worst_affine,
    }


def run_all(verbose: bool = True) -> bool:
    """Every suite at its acceptance threshold; one line per check."""
    ok = True
    grads = run_gradient_suite()
    for op, err in grads.items():
        good = err < GRAD_TOL
        ok &= good
        if verbose:
            print(f"[{'PASS' if good else 'FAIL'}] gradient {op}: "
                  f"max rel err {err:.2e} (tol {GRAD_TOL:.0e})")
    ctc_err = run_ctc_oracle_suite()
    good = ctc_err < CTC_TOL
    ok &= good
    if verbose:
        print(f"[{'PASS' if good else 'FAIL'}] ctc vs enumeration: "
              f"max abs err {ctc_err:.2e} (tol {CTC_TOL:.0e})")
    fus = run_fusion_suite()
    checks = [
        ("fusion row sums", fus["max_row_sum_err"] < ROW_SUM_TOL),
        ("fusion one-hot endpoint bitwise", fus["endpoint_exact"] == 1.0),
        ("hard voting == argmax branch", fus["hard_equals_argmax_branch"] == 1.0),
        ("fusion affine in weights", fus["max_affinity_err"] < AFFINE_TOL),
    ]
    for name, good in checks:
        ok &= good
        if verbose:
            print(f"[{'PASS' if good else 'FAIL'}] {name}")
    return bool(ok)
