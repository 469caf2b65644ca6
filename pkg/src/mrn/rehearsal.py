"""Fixed-capacity rehearsal memory with pluggable sampling strategies.

Tasks get equal quotas (remainder to the earliest tasks). When a new task
is admitted, survivors of every old task are re-ranked by their
admission-time strategy scores, so shrinking is monotone: nothing evicted
ever returns. Strategies follow the ablation set: random draw, decoder
confidence, character count, and mean corpus character frequency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .glyphs import TextInstance
from .recognizer import RecognizerBranch, extract_features_batch, frame_probs

RANDOM = "random"
CONFIDENCE = "confidence"
LENGTH = "length"
FREQUENCY = "frequency"
STRATEGIES = (RANDOM, CONFIDENCE, LENGTH, FREQUENCY)


@dataclass
class _Entry:
    instance: TextInstance
    origin_step: int
    score: float
    admission_order: int


@dataclass
class RehearsalSet:
    capacity: int
    strategy: str = RANDOM
    seed: int = 0
    _by_task: dict[int, list[_Entry]] = field(default_factory=dict)
    _task_order: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractViolation(f"capacity must be >= 1, got {self.capacity}")
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"unknown strategy {self.strategy!r}")

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_task.values())

    def entries(self) -> list[tuple[TextInstance, int]]:
        out = []
        for step in self._task_order:
            out.extend((e.instance, e.origin_step) for e in self._by_task[step])
        return out

    def instances(self, before_step: Optional[int] = None) -> list[TextInstance]:
        """Stored instances, optionally restricted to origin_step < before_step."""
        out = []
        for step in self._task_order:
            if before_step is not None and step >= before_step:
                continue
            out.extend(e.instance for e in self._by_task[step])
        return out

    def task_counts(self) -> dict[int, int]:
        return {s: len(self._by_task[s]) for s in self._task_order}

    def covered_global_ids(self) -> set[int]:
        ids: set[int] = set()
        for entries in self._by_task.values():
            for e in entries:
                ids.update(e.instance.labels)
        return ids

    def _quotas(self, n_tasks: int) -> list[int]:
        q, r = divmod(self.capacity, n_tasks)
        return [q + (1 if i < r else 0) for i in range(n_tasks)]


def instance_scores(strategy: str, instances: Sequence[TextInstance],
                    branch: Optional[RecognizerBranch],
                    corpus_freq: Optional[dict[int, float]],
                    rng: np.random.Generator) -> np.ndarray:
    """Strategy score per instance (higher keeps)."""
    if strategy == RANDOM:
        return rng.random(len(instances))
    if strategy == LENGTH:
        return np.array([float(i.length) for i in instances])
    if strategy == CONFIDENCE:
        if branch is None:
            raise ContractViolation("confidence scoring needs the trained branch")
        feats = extract_features_batch(branch, instances)
        probs = frame_probs(branch, feats)          # (N, T, width)
        return probs.max(axis=-1).mean(axis=-1)
    if strategy == FREQUENCY:
        if corpus_freq is None:
            raise ContractViolation("frequency scoring needs corpus statistics")
        return np.array([
            float(np.mean([corpus_freq.get(g, 0.0) for g in i.labels]))
            for i in instances
        ])
    raise ContractViolation(f"unknown strategy {strategy!r}")


def score_instance(strategy: str, instance: TextInstance,
                   branch: Optional[RecognizerBranch] = None,
                   corpus_freq: Optional[dict[int, float]] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    if rng is None:
        rng = np.random.default_rng(0)
    return float(instance_scores(strategy, [instance], branch, corpus_freq, rng)[0])


def character_frequencies(instances: Sequence[TextInstance]) -> dict[int, float]:
    """Relative frequency of each global id over a task's train labels."""
    counts: dict[int, int] = {}
    total = 0
    for inst in instances:
        for g in inst.labels:
            counts[g] = counts.get(g, 0) + 1
            total += 1
    if total == 0:
        return {}
    return {g: c / total for g, c in counts.items()}


def _top_k(entries: list[_Entry], k: int) -> list[_Entry]:
    ranked = sorted(entries, key=lambda e: (-e.score, e.admission_order))
    kept = ranked[:k]
    kept.sort(key=lambda e: e.admission_order)
    return kept


def update_rehearsal(rset: RehearsalSet, step: int,
                     task_instances: Sequence[TextInstance],
                     branch: Optional[RecognizerBranch] = None,
                     corpus_freq: Optional[dict[int, float]] = None) -> RehearsalSet:
    """Admit a finished task and re-quota everything.

    Quotas are floor(capacity / #tasks) with the remainder going to the
    earliest tasks. Old tasks are down-sampled among their current
    survivors by stored score; the new task contributes its own top-quota
    (all of it when smaller than the quota).
    """
    if step in rset._by_task:
        raise ContractViolation(f"task for step {step} already admitted")
    n_tasks = len(rset._task_order) + 1
    quotas = rset._quotas(n_tasks)
    for i, old_step in enumerate(rset._task_order):
        rset._by_task[old_step] = _top_k(rset._by_task[old_step], quotas[i])
    rng = np.random.default_rng([rset.seed, step, 555])
    scores = instance_scores(rset.strategy, task_instances, branch,
                             corpus_freq, rng)
    entries = [
        _Entry(inst, step, float(s), i)
        for i, (inst, s) in enumerate(zip(task_instances, scores))
    ]
    rset._by_task[step] = _top_k(entries, quotas[-1])
    rset._task_order.append(step)
    if len(rset) > rset.capacity:
        raise AssertionError("rehearsal capacity exceeded")  # pragma: no cover
    return rset
