"""Procedural synthetic scripts: seeded random glyphs, long-tailed label
sampling, and variable-width text-strip rendering.

Each script is an invented language: a charset of random stroke glyphs
(style controls the look so scripts are tellable apart), a Zipf exponent
controlling character frequencies, and per-split instance counts. The
point of the generator is to reproduce the data/class-imbalance regime:
small splits legitimately miss rare categories, and the analytic helpers
at the bottom quantify exactly how likely that is.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation

GLYPH_SIZE = 16          # glyph box is GLYPH_SIZE x GLYPH_SIZE
IMAGE_HEIGHT = 16
GLYPH_ADVANCE = 16
DEFAULT_MAX_LEN = 25

STROKE_STYLES = ("angular", "curved", "dotted")


@dataclass(frozen=True)
class ScriptSpec:
    """Everything needed to regenerate one synthetic language bit-exactly."""

    script_id: int
    charset_size: int
    stroke_count_range: tuple[int, int]
    stroke_style: str
    zipf_s: float
    n_train: int
    n_test: int
    seed: int

    def __post_init__(self):
        if self.charset_size < 2:
            raise ContractViolation(f"charset_size must be >= 2, got {self.charset_size}")
        if self.stroke_style not in STROKE_STYLES:
            raise ContractViolation(f"unknown stroke_style {self.stroke_style!r}")
        lo, hi = self.stroke_count_range
        if not (1 <= lo <= hi):
            raise ContractViolation(f"bad stroke_count_range {self.stroke_count_range}")
        if self.zipf_s < 0:
            raise ContractViolation("zipf_s must be non-negative")


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.05
    jitter: int = 1
    contrast: tuple[float, float] = (0.75, 1.0)


@dataclass
class GlyphPrototype:
    category_index: int
    bitmap: np.ndarray  # (GLYPH_SIZE, GLYPH_SIZE) in [0, 1]


@dataclass
class TextInstance:
    """A glyph strip: H x W grayscale image plus its character sequence."""

    image: np.ndarray          # (IMAGE_HEIGHT, W) float32 in [0, 1]
    labels: tuple[int, ...]    # global character ids
    language_id: int

    @property
    def length(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def content_key(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.asarray(self.labels, dtype=np.int64).tobytes())
        h.update(self.image.tobytes())
        return h.digest()


@dataclass
class CoverageReport:
    script_id: int
    absent_categories: list[int]              # local indices never seen in train
    absence_probability: dict[int, float]     # analytic P(absent) per local index


@dataclass
class TaskDataset:
    script_id: int
    train: list[TextInstance]
    test: list[TextInstance]
    charset: list[int]        # global id per local category index
    coverage: CoverageReport = field(repr=False, default=None)


class CharsetRegistry:
    """Global id assignment for (script, local category) pairs.

    The first `overlap` local categories of every script alias the same
    global ids (a small deliberate cross-script overlap); the rest get
    fresh ids in registration order.
    """

    def __init__(self, overlap: int = 3):
        self.overlap = overlap
        self._scripts: dict[int, list[int]] = {}
        self._next = overlap

    def register(self, script_id: int, charset_size: int) -> list[int]:
        if script_id in self._scripts:
            return self._scripts[script_id]
        n_shared = min(self.overlap, charset_size)
        ids = list(range(n_shared))
        for _ in range(charset_size - n_shared):
            ids.append(self._next)
            self._next += 1
        self._scripts[script_id] = ids
        return ids

    def global_ids(self, script_id: int) -> list[int]:
        return self._scripts[script_id]

    def scripts(self) -> list[int]:
        return sorted(self._scripts)

    def all_global_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for sid in sorted(self._scripts):
            for g in self._scripts[sid]:
                seen.setdefault(g)
        return list(seen)

    def to_dict(self) -> dict:
        return {"overlap": self.overlap,
                "scripts": {str(k): v for k, v in self._scripts.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "CharsetRegistry":
        reg = cls(overlap=int(d["overlap"]))
        scripts = {int(k): list(map(int, v)) for k, v in d["scripts"].items()}
        reg._scripts = scripts
        reg._next = max((max(v) for v in scripts.values() if v), default=reg.overlap - 1) + 1
        reg._next = max(reg._next, reg.overlap)
        return reg


# ---------------------------------------------------------------------------
# glyph prototypes


def _splat(canvas: np.ndarray, cx: float, cy: float, radius: float, gain: float) -> None:
    n = canvas.shape[0]
    yy, xx = np.mgrid[0:n, 0:n]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    canvas += gain * np.exp(-d2 / (2.0 * radius * radius))


def _draw_stroke(canvas: np.ndarray, style: str, rng: np.random.Generator) -> None:
    lo, hi = 2.0, GLYPH_SIZE - 3.0
    if style == "angular":
        n_pts = int(rng.integers(2, 4))
        pts = rng.uniform(lo, hi, size=(n_pts + 1, 2))
        for a, b in zip(pts[:-1], pts[1:]):
            for t in np.linspace(0.0, 1.0, 24):
                x, y = a + t * (b - a)
                _splat(canvas, x, y, 0.75, 0.55)
    elif style == "curved":
        p = rng.uniform(lo, hi, size=(3, 2))
        for t in np.linspace(0.0, 1.0, 30):
            q = (1 - t) ** 2 * p[0] + 2 * (1 - t) * t * p[1] + t ** 2 * p[2]
            _splat(canvas, q[0], q[1], 0.8, 0.5)
    elif style == "dotted":
        n_dots = int(rng.integers(3, 6))
        for _ in range(n_dots):
            x, y = rng.uniform(lo, hi, size=2)
            _splat(canvas, x, y, 0.9, 1.1)
    else:  # pragma: no cover - guarded by ScriptSpec
        raise ContractViolation(f"unknown stroke style {style!r}")


def _render_prototype(spec: ScriptSpec, category: int, salt: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, category, salt])
    canvas = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    n_strokes = int(rng.integers(spec.stroke_count_range[0],
                                 spec.stroke_count_range[1] + 1))
    for _ in range(n_strokes):
        _draw_stroke(canvas, spec.stroke_style, rng)
    return np.clip(canvas, 0.0, 1.0)


def make_script(spec: ScriptSpec) -> list[GlyphPrototype]:
    """Charset prototypes, rendered deterministically from (seed, category).

    Re-rolls (with a salt) until the no-blank and pairwise-distinctness
    invariants hold; the salted retries are part of the deterministic
    generation, so identical specs regenerate identical prototypes.
    """
    protos: list[GlyphPrototype] = []
    for cat in range(spec.charset_size):
        for salt in range(64):
            bmp = _render_prototype(spec, cat, salt)
            if bmp.max() <= 0.5:
                continue
            if any(np.max(np.abs(bmp - p.bitmap)) <= 0.1 for p in protos):
                continue
            protos.append(GlyphPrototype(cat, bmp))
            break
        else:  # pragma: no cover - astronomically unlikely
            raise ContractViolation(
                f"could not render a distinct glyph for category {cat}"
            )
    return protos


# ---------------------------------------------------------------------------
# label sampling


def zipf_probs(charset_size: int, s: float) -> np.ndarray:
    """P(rank r) proportional to r^-s; rank order equals category order."""
    ranks = np.arange(1, charset_size + 1, dtype=np.float64)
    w = ranks ** (-s)
    return w / w.sum()


def sample_label_sequence(spec: ScriptSpec, rng: np.random.Generator,
                          max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """Length uniform on [1, max_len]; characters i.i.d. Zipf(zipf_s)."""
    probs = zipf_probs(spec.charset_size, spec.zipf_s)
    length = int(rng.integers(1, max_len + 1))
    return rng.choice(spec.charset_size, size=length, p=probs).tolist()


# ---------------------------------------------------------------------------
# rendering


def render_instance(prototypes: Sequence[GlyphPrototype], labels: Sequence[int],
                    noise: NoiseConfig, rng: np.random.Generator,
                    language_id: int = 0,
                    global_ids: Optional[Sequence[int]] = None) -> TextInstance:
    """Concatenate glyphs into a strip with jitter, contrast, and pixel noise.

    `labels` are local category indices; `global_ids` maps them to registry
    ids for the stored instance (identity when omitted).
    """
    if len(labels) == 0:
        raise ContractViolation("render_instance needs at least one label")
    n = len(labels)
    base_w = n * GLYPH_ADVANCE
    if noise.jitter > 0:
        w = base_w + int(rng.integers(-noise.jitter, noise.jitter + 1))
    else:
        w = base_w
    w = max(w, GLYPH_ADVANCE)
    canvas = np.zeros((IMAGE_HEIGHT, w))
    for i, lab in enumerate(labels):
        x0 = i * GLYPH_ADVANCE
        if noise.jitter > 0:
            x0 += int(rng.integers(-noise.jitter, noise.jitter + 1))
        x0 = min(max(x0, 0), w - GLYPH_ADVANCE)
        patch = canvas[:, x0:x0 + GLYPH_ADVANCE]
        np.maximum(patch, prototypes[lab].bitmap, out=patch)
    lo, hi = noise.contrast
    if (lo, hi) != (1.0, 1.0):
        canvas *= rng.uniform(lo, hi)
    if noise.sigma > 0:
        canvas = canvas + rng.normal(0.0, noise.sigma, size=canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0)
    if global_ids is None:
        gids = tuple(int(x) for x in labels)
    else:
        gids = tuple(int(global_ids[x]) for x in labels)
    return TextInstance(image=canvas.astype(np.float32), labels=gids,
                        language_id=language_id)


def build_task_dataset(spec: ScriptSpec, registry: CharsetRegistry,
                       noise: NoiseConfig = NoiseConfig(),
                       max_len: int = DEFAULT_MAX_LEN) -> TaskDataset:
    """Disjoint train/test splits plus a train-coverage report.

    Test instances that collide bytewise with a train instance are redrawn,
    which keeps the splits disjoint even under low-noise configs.
    """
    gids = registry.register(spec.script_id, spec.charset_size)
    protos = make_script(spec)
    rng = np.random.default_rng([spec.seed, 7001])

    def draw() -> tuple[TextInstance, list[int]]:
        local = sample_label_sequence(spec, rng, max_len)
        inst = render_instance(protos, local, noise, rng,
                               language_id=spec.script_id, global_ids=gids)
        return inst, local

    train: list[TextInstance] = []
    seen: set[bytes] = set()
    train_locals: list[list[int]] = []
    for _ in range(spec.n_train):
        inst, local = draw()
        seen.add(inst.content_key())
        train.append(inst)
        train_locals.append(local)

    test: list[TextInstance] = []
    for _ in range(spec.n_test):
        for _attempt in range(200):
            inst, _ = draw()
            if inst.content_key() not in seen:
                break
        else:
            raise ContractViolation(
                "could not draw a test instance disjoint from train; "
                "config generates too few distinct instances"
            )
        test.append(inst)

    present = set()
    for local in train_locals:
        present.update(local)
    absent = [c for c in range(spec.charset_size) if c not in present]
    probs = zipf_probs(spec.charset_size, spec.zipf_s)
    report = CoverageReport(
        script_id=spec.script_id,
        absent_categories=absent,
        absence_probability={
            c: float(absence_probability(probs[c], spec.n_train, max_len))
            for c in absent
        },
    )
    return TaskDataset(script_id=spec.script_id, train=train, test=test,
                       charset=list(gids), coverage=report)


# ---------------------------------------------------------------------------
# imbalance analytics (exact under the label model)


def _per_instance_miss(p, max_len: int):
    """E over L ~ U[1, max_len] of (1-p)^L, elementwise in p."""
    x = np.clip(1.0 - np.asarray(p, dtype=np.float64), 0.0, 1.0)
    powers = x[..., None] ** np.arange(1, max_len + 1)
    return powers.mean(axis=-1)


def absence_probability(p_char: float, n_instances: int, max_len: int) -> float:
    """Exact P(category with char-probability p never occurs in n instances)."""
    return float(_per_instance_miss(p_char, max_len) ** n_instances)


def absent_count_moments(probs: np.ndarray, n_instances: int,
                         max_len: int) -> tuple[float, float]:
    """Mean and variance of the number of absent categories.

    Uses the exact pairwise joint P(both c and c' absent) =
    g(p_c + p_c')^n, so the variance accounts for the (negative)
    correlation between absence events.
    """
    probs = np.asarray(probs, dtype=np.float64)
    q = _per_instance_miss(probs, max_len) ** n_instances
    mean = float(q.sum())
    pair = probs[:, None] + probs[None, :]
    q_pair = _per_instance_miss(pair, max_len) ** n_instances
    cov = q_pair - q[:, None] * q[None, :]
    var = float(q.sum() - np.sum(q * q) + cov.sum() - np.trace(cov))
    return mean, var


def some_category_absent_lower_bound(probs: np.ndarray, n_instances: int,
                                     max_len: int) -> float:
    """Analytic lower bound on P(at least one category absent).

    Cantelli's inequality on the absent-category count X:
    P(X = 0) <= Var / (Var + E^2), so P(X >= 1) >= E^2 / (Var + E^2).
    """
    mean, var = absent_count_moments(probs, n_instances, max_len)
    if mean <= 0:
        return 0.0
    var = max(var, 0.0)
    return mean * mean / (var + mean * mean)
