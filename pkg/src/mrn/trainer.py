"""The incremental protocol: per-language stage-I training, router
training on new-task data plus rehearsal memory, evaluation over all seen
tasks, and the two reference systems (sequential-finetune baseline and the
jointly trained bound).

Raw training data flows through an access-audited handle: at step i no
training procedure may read the raw train split of an earlier task (old
tasks are visible only through the rehearsal set's stored copies). The
audit log lands in the run report and must stay violation-free for the
incremental modes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import (MODE_BASELINE, MODE_BOUND, MODE_MRN, ExperimentConfig)
from .errors import ContractViolation
from .glyphs import CharsetRegistry, TaskDataset, TextInstance, build_task_dataset
from .recognizer import (RecognizerBranch, UnionCharset, decode_branch,
                         extract_features_batch, frame_probs, pad_to_union,
                         train_recognizer)
from .rehearsal import RehearsalSet, character_frequencies, update_rehearsal
from .router import (CONST_ROUTER, RouterParams, fuse, init_const_router,
                     quantize, route_instance, stack_features, train_router)
from .ctc import ctc_greedy_decode
from . import storage


# ---------------------------------------------------------------------------
# audited data access


class AuditedDatasets:
    """Task datasets behind an access log.

    A train-split read is a violation when the task belongs to an earlier
    step than the current phase: by then only rehearsal copies are fair
    game. Test reads are always allowed (evaluation spans all seen tasks).
    """

    def __init__(self, datasets: dict[int, TaskDataset], step_of: dict[int, int]):
        self._datasets = datasets
        self._step_of = step_of
        self.phase: Optional[int] = None
        self.log: list[tuple[int, int, str]] = []
        self.violations: list[tuple[int, int, str]] = []

    def set_phase(self, step: int) -> None:
        self.phase = step

    def dataset(self, script_id: int) -> TaskDataset:
        return self._datasets[script_id]

    def train(self, script_id: int) -> list[TextInstance]:
        rec = (self.phase, self._step_of[script_id], "train")
        self.log.append(rec)
        if self.phase is not None and self._step_of[script_id] < self.phase:
            self.violations.append(rec)
        return self._datasets[script_id].train

    def test(self, script_id: int) -> list[TextInstance]:
        self.log.append((self.phase, self._step_of[script_id], "test"))
        return self._datasets[script_id].test

    def audit_summary(self) -> dict:
        return {
            "accesses": len(self.log),
            "violations": [list(v) for v in self.violations],
        }


def generate_datasets(cfg: ExperimentConfig):
    registry = CharsetRegistry(overlap=cfg.overlap)
    datasets: dict[int, TaskDataset] = {}
    for sid in cfg.order:
        spec = cfg.script(sid)
        datasets[sid] = build_task_dataset(spec, registry, cfg.noise, cfg.max_len)
    step_of = {sid: i for i, sid in enumerate(cfg.order)}
    return AuditedDatasets(datasets, step_of), registry


# ---------------------------------------------------------------------------
# caches


class ProbeCache:
    """Memoized frozen-branch features and frame probabilities on test data.

    Frozen branches are pure functions of the image, so entries are keyed
    by branch checksum and reusable across runs in one process.
    """

    def __init__(self):
        self._feats: dict = {}
        self._probs: dict = {}

    def features(self, branch: RecognizerBranch, script_id: int,
                 instances: Sequence[TextInstance]) -> np.ndarray:
        key = (branch.checksum(), script_id)
        if key not in self._feats:
            self._feats[key] = extract_features_batch(branch, instances)
        return self._feats[key]

    def probs(self, branch: RecognizerBranch, script_id: int,
              instances: Sequence[TextInstance]) -> np.ndarray:
        key = (branch.checksum(), script_id)
        if key not in self._probs:
            self._probs[key] = frame_probs(
                branch, self.features(branch, script_id, instances))
        return self._probs[key]


# ---------------------------------------------------------------------------
# reports


@dataclass
class AccuracyMatrix:
    acc: list[float] = field(default_factory=list)
    per_task: list[dict[int, float]] = field(default_factory=list)

    @property
    def avg(self) -> float:
        return float(np.mean(self.acc)) if self.acc else 0.0

    @property
    def last(self) -> float:
        return self.acc[-1] if self.acc else 0.0

    def macro(self) -> list[float]:
        return [float(np.mean(list(row.values()))) for row in self.per_task]


@dataclass
class RunReport:
    mode: str
    config: dict
    matrix: AccuracyMatrix
    hard_matrix: Optional[AccuracyMatrix]
    domain_acc: list[float]
    coverage: list[dict]
    audit: dict
    predictions: list[dict]
    branch_reports: dict[int, dict]
    router_reports: list[dict]
    frozen_checks: list[dict]
    seconds: float

    @property
    def avg(self) -> float:
        return self.matrix.avg

    @property
    def last(self) -> float:
        return self.matrix.last

    def summary_dict(self) -> dict:
        return {
            "mode": self.mode,
            "avg": self.avg,
            "last": self.last,
            "acc": self.matrix.acc,
            "per_task": [{str(k): v for k, v in row.items()}
                         for row in self.matrix.per_task],
            "macro_acc": self.matrix.macro(),
            "hard_acc": self.hard_matrix.acc if self.hard_matrix else None,
            "hard_avg": self.hard_matrix.avg if self.hard_matrix else None,
            "domain_acc": self.domain_acc,
            "coverage": self.coverage,
            "audit": self.audit,
            "branch_reports": {str(k): v for k, v in self.branch_reports.items()},
            "router_reports": self.router_reports,
            "frozen_checks": self.frozen_checks,
            "seconds": self.seconds,
            "config": self.config,
        }


# ---------------------------------------------------------------------------
# stages


def run_stage1(cfg: ExperimentConfig, data: AuditedDatasets, union: UnionCharset,
               script_id: int, seed: int) -> RecognizerBranch:
    """Train and freeze the branch for one language on its own data."""
    tr = cfg.training
    return train_recognizer(
        data.train(script_id), union, script_id,
        iterations=tr.iterations, batch=tr.batch, max_lr=tr.max_lr,
        seed_stream=[seed, 11, script_id],
        n_frames=tr.frames, n_channels=tr.channels,
    )


def _stage2_inputs(cfg: ExperimentConfig, data: AuditedDatasets,
                   union: UnionCharset, branches: Sequence[RecognizerBranch],
                   rset: RehearsalSet, step: int, script_id: int):
    insts = list(data.train(script_id)) + rset.instances(before_step=step)
    feats = [extract_features_batch(b, insts) for b in branches]
    cubics = [stack_features([f[j] for f in feats]) for j in range(len(insts))]
    probs = [frame_probs(b, f) for b, f in zip(branches, feats)]
    snapshots = [union.entries[:b.union_width - 1] for b in branches]

    def padded_fn(j: int) -> np.ndarray:
        return np.stack([
            pad_to_union(probs[k][j], snapshots[k], union)
            for k in range(len(branches))
        ])

    targets = [union.indices_for(i.labels) for i in insts]
    lang_index = {b.language_id: k for k, b in enumerate(branches)}
    true_langs = [lang_index[i.language_id] for i in insts]
    return cubics, padded_fn, targets, true_langs


def run_stage2(cfg: ExperimentConfig, data: AuditedDatasets, union: UnionCharset,
               branches: Sequence[RecognizerBranch], rset: RehearsalSet,
               step: int, script_id: int, seed: int) -> RouterParams:
    """Train the router on the arriving data plus old-task rehearsal copies.

    With one branch there is nothing to route: the constant scorer wins.
    Branch parameters are checksummed around the training as the frozen
    contract's witness.
    """
    tr = cfg.training
    if len(branches) == 1:
        return init_const_router(tr.frames, tr.channels)
    before = [b.checksum() for b in branches]
    cubics, padded_fn, targets, true_langs = _stage2_inputs(
        cfg, data, union, branches, rset, step, script_id)
    kind_code = 0 if cfg.router.variant == "dm" else 1
    router = train_router(
        cfg.router.variant, cubics, padded_fn, targets, true_langs,
        n_frames=tr.frames, depth=cfg.router.depth, alpha=cfg.router.alpha,
        iterations=tr.stage2_iterations, batch=tr.batch,
        max_lr=tr.stage2_max_lr, seed_stream=[seed, 22, step, kind_code],
        hidden=cfg.router.hidden,
    )
    after = [b.checksum() for b in branches]
    if before != after:  # pragma: no cover - frozen contract
        raise AssertionError("branch parameters changed during stage-II")
    router.train_report["frozen_branches_intact"] = True
    return router


def evaluate_step(data: AuditedDatasets, union: UnionCharset,
                  branches: Sequence[RecognizerBranch], router: RouterParams,
                  seen_scripts: Sequence[int], cache: ProbeCache,
                  log_mode: str = "soft"):
    """Fused decoding over every seen test set, under both voting modes.

    Returns pooled/per-task accuracy for soft and hard voting, the domain
    accuracy, and per-instance prediction rows (decoded under `log_mode`).
    """
    totals = {"soft": 0, "hard": 0}
    per_task: dict[str, dict[int, float]] = {"soft": {}, "hard": {}}
    n_total = 0
    n_domain_ok = 0
    predictions = []
    lang_pos = {b.language_id: k for k, b in enumerate(branches)}
    for sid in seen_scripts:
        insts = data.test(sid)
        feats = [cache.features(b, sid, insts) for b in branches]
        probs = [cache.probs(b, sid, insts) for b in branches]
        snapshots = [union.entries[:b.union_width - 1] for b in branches]
        ok = {"soft": 0, "hard": 0}
        for j, inst in enumerate(insts):
            if router.kind == CONST_ROUTER:
                scores = np.ones(1)
            else:
                cubic = stack_features([f[j] for f in feats])
                scores = route_instance(router, cubic)
            padded = np.stack([
                pad_to_union(probs[k][j], snapshots[k], union)
                for k in range(len(branches))
            ])
            decoded = {}
            for mode in ("soft", "hard"):
                fused = fuse(quantize(scores, mode), padded)
                idx = ctc_greedy_decode(fused)
                decoded[mode] = tuple(union.global_id_of(i) for i in idx)
                if decoded[mode] == inst.labels:
                    ok[mode] += 1
            if int(np.argmax(scores)) == lang_pos[inst.language_id]:
                n_domain_ok += 1
            predictions.append({
                "script_id": sid,
                "split": "test",
                "truth": list(inst.labels),
                "decoded": list(decoded[log_mode]),
                "correct": decoded[log_mode] == inst.labels,
                "domain_scores": [float(s) for s in scores],
            })
        n = len(insts)
        n_total += n
        for mode in ("soft", "hard"):
            per_task[mode][sid] = ok[mode] / n
            totals[mode] += ok[mode]
    return {
        "soft_acc": totals["soft"] / n_total,
        "hard_acc": totals["hard"] / n_total,
        "per_task_soft": per_task["soft"],
        "per_task_hard": per_task["hard"],
        "domain_acc": n_domain_ok / n_total,
        "predictions": predictions,
    }


def _coverage_entry(union: UnionCharset, rset: RehearsalSet, step: int) -> dict:
    covered = rset.covered_global_ids()
    all_ids = set(union.entries)
    uncovered = sorted(all_ids - covered)
    return {
        "step": step,
        "union_size": len(all_ids),
        "covered": len(all_ids) - len(uncovered),
        "fraction": (len(all_ids) - len(uncovered)) / max(1, len(all_ids)),
        "uncovered_global_ids": uncovered,
    }


# ---------------------------------------------------------------------------
# protocols


def run_schedule(cfg: ExperimentConfig, *, stage1_cache: Optional[dict] = None,
                 probe_cache: Optional[ProbeCache] = None,
                 out_dir: Optional[str | Path] = None) -> RunReport:
    """The full incremental protocol (stage-I + routing per step).

    `stage1_cache` may be shared across runs whose stage-I inputs are
    identical (branch training never sees the rehearsal or router config);
    entries are keyed by everything stage-I depends on. Rehearsal admission
    of the finished task happens at the end of its own step, so the memory
    used at step i holds tasks 1..i-1 only.
    """
    t0 = time.perf_counter()
    seed = cfg.effective_seed()
    data, _registry = generate_datasets(cfg)
    union = UnionCharset()
    rset = RehearsalSet(cfg.rehearsal.capacity, cfg.rehearsal.strategy, seed)
    cache = probe_cache if probe_cache is not None else ProbeCache()
    branches: list[RecognizerBranch] = []
    matrix = AccuracyMatrix()
    hard = AccuracyMatrix()
    domain_acc: list[float] = []
    coverage: list[dict] = []
    predictions: list[dict] = []
    branch_reports: dict[int, dict] = {}
    router_reports: list[dict] = []
    frozen_checks: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for step, sid in enumerate(cfg.order):
        data.set_phase(step)
        ds = data.dataset(sid)
        union.add_language(sid, ds.charset)
        key = _stage1_key(cfg, seed, step)
        if stage1_cache is not None and key in stage1_cache:
            branch = stage1_cache[key]
        else:
            branch = run_stage1(cfg, data, union, sid, seed)
            if stage1_cache is not None:
                stage1_cache[key] = branch
        branches.append(branch)
        branch_reports[sid] = dict(branch.train_report)
        if out is not None:
            storage.write_branch_checkpoint(
                out / f"branch_{sid}.mrnw", sid, branch.union_width,
                branch.param_arrays())

        # coverage of the memory the router trains with: tasks before this step
        coverage.append(_coverage_entry(union, rset, step))

        pre = [b.checksum() for b in branches]
        router = run_stage2(cfg, data, union, branches, rset, step, sid, seed)
        post = [b.checksum() for b in branches]
        frozen_checks.append({
            "step": step,
            "intact": pre == post,
            "checksums": post,
        })
        router_reports.append(dict(router.train_report))
        if out is not None and router.kind != CONST_ROUTER:
            storage.write_router_checkpoint(
                out / f"router_step{step}.mrnr", router.n_domains,
                router.depth, router.param_arrays())

        seen = cfg.order[:step + 1]
        ev = evaluate_step(data, union, branches, router, seen, cache,
                           log_mode=cfg.voting)
        matrix.acc.append(ev["soft_acc"] if cfg.voting == "soft" else ev["hard_acc"])
        matrix.per_task.append(ev["per_task_soft"] if cfg.voting == "soft"
                               else ev["per_task_hard"])
        hard.acc.append(ev["hard_acc"])
        hard.per_task.append(ev["per_task_hard"])
        domain_acc.append(ev["domain_acc"])
        for row in ev["predictions"]:
            row["step"] = step
        predictions.extend(ev["predictions"])

        train_insts = data.train(sid)
        update_rehearsal(rset, step, train_insts, branch,
                         character_frequencies(train_insts))

    # final state: what a hypothetical next step would inherit
    coverage.append(_coverage_entry(union, rset, len(cfg.order)))

    return RunReport(
        mode=MODE_MRN, config=cfg.to_dict(), matrix=matrix, hard_matrix=hard,
        domain_acc=domain_acc, coverage=coverage, audit=data.audit_summary(),
        predictions=predictions, branch_reports=branch_reports,
        router_reports=router_reports, frozen_checks=frozen_checks,
        seconds=time.perf_counter() - t0,
    )


def _stage1_key(cfg: ExperimentConfig, seed: int, step: int) -> tuple:
    """Everything branch training at `step` depends on."""
    prefix = cfg.order[:step + 1]
    specs = tuple(
        (s.script_id, s.charset_size, s.stroke_count_range, s.stroke_style,
         s.zipf_s, s.n_train, s.n_test, s.seed)
        for s in (cfg.script(sid) for sid in prefix)
    )
    tr = cfg.training
    return (specs, cfg.max_len, cfg.overlap, cfg.noise.sigma, cfg.noise.jitter,
            cfg.noise.contrast, tr.iterations, tr.batch, tr.max_lr, tr.frames,
            tr.channels, seed)


def run_baseline_sequential(cfg: ExperimentConfig,
                            out_dir: Optional[str | Path] = None) -> RunReport:
    """One recognizer over the growing union, fine-tuned each step on the
    arriving data plus rehearsal copies; no freezing, no routing."""
    t0 = time.perf_counter()
    seed = cfg.effective_seed()
    data, _registry = generate_datasets(cfg)
    union = UnionCharset()
    rset = RehearsalSet(cfg.rehearsal.capacity, cfg.rehearsal.strategy, seed)
    tr = cfg.training
    model: Optional[RecognizerBranch] = None
    matrix = AccuracyMatrix()
    coverage: list[dict] = []
    predictions: list[dict] = []
    branch_reports: dict[int, dict] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for step, sid in enumerate(cfg.order):
        data.set_phase(step)
        ds = data.dataset(sid)
        union.add_language(sid, ds.charset)
        coverage.append(_coverage_entry(union, rset, step))
        insts = list(data.train(sid)) + rset.instances(before_step=step)
        full_mask = np.ones(union.width, dtype=bool)
        model = train_recognizer(
            insts, union, sid,
            iterations=tr.iterations, batch=tr.batch, max_lr=tr.max_lr,
            seed_stream=[seed, 11, sid], n_frames=tr.frames,
            n_channels=tr.channels, mask=full_mask, start=model,
        )
        branch_reports[sid] = dict(model.train_report)
        if out is not None:
            storage.write_branch_checkpoint(
                out / f"baseline_step{step}.mrnw", sid, model.union_width,
                model.param_arrays())

        ok_total = 0
        n_total = 0
        per_task: dict[int, float] = {}
        for k in cfg.order[:step + 1]:
            tests = data.test(k)
            ok = 0
            for inst in tests:
                decoded = tuple(decode_branch(model, union, inst.image))
                if decoded == inst.labels:
                    ok += 1
                predictions.append({
                    "step": step, "script_id": k, "split": "test",
                    "truth": list(inst.labels), "decoded": list(decoded),
                    "correct": decoded == inst.labels, "domain_scores": [],
                })
            per_task[k] = ok / len(tests)
            ok_total += ok
            n_total += len(tests)
        matrix.acc.append(ok_total / n_total)
        matrix.per_task.append(per_task)

        train_insts = data.train(sid)
        update_rehearsal(rset, step, train_insts, model,
                         character_frequencies(train_insts))

    coverage.append(_coverage_entry(union, rset, len(cfg.order)))
    return RunReport(
        mode=MODE_BASELINE, config=cfg.to_dict(), matrix=matrix,
        hard_matrix=None, domain_acc=[], coverage=coverage,
        audit=data.audit_summary(), predictions=predictions,
        branch_reports=branch_reports, router_reports=[], frozen_checks=[],
        seconds=time.perf_counter() - t0,
    )


def run_bound_joint(cfg: ExperimentConfig,
                    out_dir: Optional[str | Path] = None) -> RunReport:
    """The oracle reference: one recognizer trained jointly on every task's
    training data (rehearsal plays no role). Its compute budget matches the
    whole incremental run: iterations x number of tasks."""
    t0 = time.perf_counter()
    seed = cfg.effective_seed()
    data, _registry = generate_datasets(cfg)
    union = UnionCharset()
    for sid in cfg.order:
        union.add_language(sid, data.dataset(sid).charset)
    insts: list[TextInstance] = []
    for sid in cfg.order:
        insts.extend(data.dataset(sid).train)
    tr = cfg.training
    full_mask = np.ones(union.width, dtype=bool)
    model = train_recognizer(
        insts, union, cfg.order[0],
        iterations=tr.iterations * len(cfg.order), batch=tr.batch,
        max_lr=tr.max_lr, seed_stream=[seed, 33], n_frames=tr.frames,
        n_channels=tr.channels, mask=full_mask,
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        storage.write_branch_checkpoint(out / "bound.mrnw", 0,
                                        model.union_width, model.param_arrays())

    predictions: list[dict] = []
    per_task: dict[int, float] = {}
    ok_total = 0
    n_total = 0
    for sid in cfg.order:
        tests = data.dataset(sid).test
        ok = 0
        for inst in tests:
            decoded = tuple(decode_branch(model, union, inst.image))
            if decoded == inst.labels:
                ok += 1
            predictions.append({
                "step": 0, "script_id": sid, "split": "test",
                "truth": list(inst.labels), "decoded": list(decoded),
                "correct": decoded == inst.labels, "domain_scores": [],
            })
        per_task[sid] = ok / len(tests)
        ok_total += ok
        n_total += len(tests)
    matrix = AccuracyMatrix(acc=[ok_total / n_total], per_task=[per_task])
    return RunReport(
        mode=MODE_BOUND, config=cfg.to_dict(), matrix=matrix,
        hard_matrix=None, domain_acc=[], coverage=[],
        audit={"accesses": 0, "violations": [], "exempt": True},
        predictions=predictions,
        branch_reports={0: dict(model.train_report)}, router_reports=[],
        frozen_checks=[], seconds=time.perf_counter() - t0,
    )


def run_mode(cfg: ExperimentConfig, mode: str, **kwargs) -> RunReport:
    if mode == MODE_MRN:
        return run_schedule(cfg, **kwargs)
    if mode == MODE_BASELINE:
        kwargs.pop("stage1_cache", None)
        kwargs.pop("probe_cache", None)
        return run_baseline_sequential(cfg, **kwargs)
    if mode == MODE_BOUND:
        kwargs.pop("stage1_cache", None)
        kwargs.pop("probe_cache", None)
        return run_bound_joint(cfg, **kwargs)
    raise ContractViolation(f"unknown mode {mode!r}")


def oracle_routed_decode(union: UnionCharset, branches: Sequence[RecognizerBranch],
                         branch_index: int, instance: TextInstance) -> tuple[int, ...]:
    """Decode through quantize+fuse with the true-language one-hot weights."""
    feats = [extract_features_batch(b, [instance])[0] for b in branches]
    probs = [frame_probs(b, f) for b, f in zip(branches, feats)]
    padded = np.stack([
        pad_to_union(probs[k], union.entries[:branches[k].union_width - 1], union)
        for k in range(len(branches))
    ])
    weights = np.zeros(len(branches))
    weights[branch_index] = 1.0
    fused = fuse(weights, padded)
    return tuple(union.global_id_of(i) for i in ctc_greedy_decode(fused))
