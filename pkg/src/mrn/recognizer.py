"""Per-language recognizer branches over a shared union label space.

A branch is a frame-feature skeleton (column-pooled pixels -> per-frame
embedding -> frame-wise mixing -> cross-frame mixing) plus a linear
classifier over the union charset. Out-of-charset classifier columns are
suppressed by adding -1e30 to their logits before the softmax, which both
zeroes their probability exactly and truncates any gradient into them.
Branches freeze after their task's training; later steps only read them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .ctc import BatchCtc, ctc_greedy_decode
from .errors import ContractViolation, RegistryError, TrainingImpossible
from .glyphs import IMAGE_HEIGHT, TextInstance
from .optim import Adam, OneCycle

MASK_NEG = -1e30
DEFAULT_FRAMES = 12
DEFAULT_CHANNELS = 32

BLANK = 0


class UnionCharset:
    """Append-only union of per-language charsets, blank at index 0.

    Union indices never move once assigned: index i >= 1 refers to
    entries[i-1] forever, so a branch trained against an older, narrower
    union stays aligned after the union grows.
    """

    def __init__(self):
        self.entries: list[int] = []
        self._index: dict[int, int] = {}
        self._languages: dict[int, list[int]] = {}

    @property
    def width(self) -> int:
        return len(self.entries) + 1

    def add_language(self, language_id: int, global_ids: Sequence[int]) -> None:
        if language_id in self._languages:
            return
        for g in global_ids:
            if g not in self._index:
                self.entries.append(int(g))
                self._index[int(g)] = len(self.entries)
        self._languages[language_id] = [int(g) for g in global_ids]

    def index_of(self, global_id: int) -> int:
        try:
            return self._index[int(global_id)]
        except KeyError:
            raise RegistryError(f"global id {global_id} not in union charset")

    def indices_for(self, global_ids: Sequence[int]) -> list[int]:
        return [self.index_of(g) for g in global_ids]

    def global_id_of(self, index: int) -> int:
        if index == BLANK:
            raise RegistryError("blank has no global id")
        return self.entries[index - 1]

    def language_mask(self, language_id: int, width: Optional[int] = None) -> np.ndarray:
        """Boolean mask over union columns; blank always belongs."""
        if language_id not in self._languages:
            raise RegistryError(f"language {language_id} not registered")
        width = self.width if width is None else width
        mask = np.zeros(width, dtype=bool)
        mask[BLANK] = True
        for g in self._languages[language_id]:
            idx = self._index[g]
            if idx < width:
                mask[idx] = True
        return mask

    def languages(self) -> list[int]:
        return list(self._languages)


@dataclass
class RecognizerBranch:
    language_id: int
    union_width: int
    mask: np.ndarray                       # bool, shape (union_width,)
    params: dict[str, Tensor]
    n_frames: int = DEFAULT_FRAMES
    n_channels: int = DEFAULT_CHANNELS
    frozen: bool = False
    train_report: dict = field(default_factory=dict)

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
        self.frozen = True

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


def init_branch(rng: np.random.Generator, language_id: int, union_width: int,
                mask: np.ndarray, n_frames: int = DEFAULT_FRAMES,
                n_channels: int = DEFAULT_CHANNELS) -> RecognizerBranch:
    """Random skeleton, random in-mask classifier columns, zeros elsewhere."""
    h, c, t = IMAGE_HEIGHT, n_channels, n_frames
    p = {
        "embed_w": rng.normal(0.0, h ** -0.5, (h, c)),
        "embed_b": np.zeros((1, c)),
        "mix_w": rng.normal(0.0, c ** -0.5, (c, c)),
        "mix_b": np.zeros((1, c)),
        "frame_w": rng.normal(0.0, t ** -0.5, (t, t)),
        "frame_b": np.zeros((t, 1)),
        "cls_w": rng.normal(0.0, c ** -0.5, (c, union_width)),
        "cls_b": np.zeros((1, union_width)),
    }
    p["cls_w"][:, ~mask] = 0.0
    params = {k: ag.parameter(v) for k, v in p.items()}
    return RecognizerBranch(language_id=language_id, union_width=union_width,
                            mask=mask.copy(), params=params,
                            n_frames=t, n_channels=c)


def widen_classifier(branch: RecognizerBranch, new_width: int,
                     new_mask: Optional[np.ndarray] = None) -> None:
    """Append zero-initialized classifier columns for newly seen categories.

    Appended columns stay masked unless new_mask says otherwise, so forward
    outputs on old inputs are unchanged bit for bit.
    """
    old = branch.union_width
    if new_width < old:
        raise ContractViolation(f"cannot shrink classifier {old} -> {new_width}")
    if new_width == old:
        return
    extra = new_width - old
    w = branch.params["cls_w"]
    b = branch.params["cls_b"]
    rg = w.requires_grad
    w_new = np.concatenate([w.data, np.zeros((w.data.shape[0], extra))], axis=1)
    b_new = np.concatenate([b.data, np.zeros((1, extra))], axis=1)
    branch.params["cls_w"] = Tensor(w_new, requires_grad=rg)
    branch.params["cls_b"] = Tensor(b_new, requires_grad=rg)
    mask = np.zeros(new_width, dtype=bool)
    mask[:old] = branch.mask
    if new_mask is not None:
        mask |= new_mask
    branch.mask = mask
    branch.union_width = new_width


# ---------------------------------------------------------------------------
# forward passes


def pool_image(image: np.ndarray, n_frames: int = DEFAULT_FRAMES) -> np.ndarray:
    """Column mean-pool a (H, W) image into (n_frames, H) frame vectors."""
    if image.shape[0] != IMAGE_HEIGHT:
        raise ContractViolation(
            f"image height {image.shape[0]} != {IMAGE_HEIGHT}"
        )
    bands = np.array_split(np.asarray(image, dtype=np.float64), n_frames, axis=1)
    return np.stack([b.mean(axis=1) for b in bands], axis=0)


def pool_batch(instances: Sequence[TextInstance],
               n_frames: int = DEFAULT_FRAMES) -> np.ndarray:
    return np.stack([pool_image(inst.image, n_frames) for inst in instances])


def skeleton_forward(branch: RecognizerBranch, pooled: np.ndarray) -> Tensor:
    """(B, T, H) pooled frames -> (B*T, C) features on the active tape."""
    B, T, H = pooled.shape
    if T != branch.n_frames:
        raise ContractViolation(f"expected {branch.n_frames} frames, got {T}")
    p = branch.params
    x = ag.tensor(pooled.reshape(B * T, H))
    ones_bt = ag.tensor(np.ones((B * T, 1)))
    h = ag.add(ag.matmul(x, p["embed_w"]), ag.matmul(ones_bt, p["embed_b"]))
    h = ag.tanh(ag.add(ag.matmul(h, p["mix_w"]), ag.matmul(ones_bt, p["mix_b"])))
    C = branch.n_channels
    r = ag.reshape(h, (B, T, C))
    r = ag.permute(r, (1, 0, 2))
    r = ag.reshape(r, (T, B * C))
    ones_bc = ag.tensor(np.ones((1, B * C)))
    m = ag.tanh(ag.add(ag.matmul(p["frame_w"], r), ag.matmul(p["frame_b"], ones_bc)))
    m = ag.reshape(m, (T, B, C))
    m = ag.permute(m, (1, 0, 2))
    return ag.reshape(m, (B * T, C))


def extract_features(branch: RecognizerBranch, image: np.ndarray) -> np.ndarray:
    """Frozen-path feature extraction for one image: (T, C) array."""
    feats = skeleton_forward(branch, pool_image(image, branch.n_frames)[None])
    return feats.data.reshape(branch.n_frames, branch.n_channels)


def extract_features_batch(branch: RecognizerBranch,
                           instances: Sequence[TextInstance]) -> np.ndarray:
    feats = skeleton_forward(branch, pool_batch(instances, branch.n_frames))
    return feats.data.reshape(len(instances), branch.n_frames, branch.n_channels)


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, MASK_NEG)


def classify_masked(branch: RecognizerBranch, features: Tensor,
                    mask: Optional[np.ndarray] = None) -> Tensor:
    """(N, C) features -> (N, width) row-stochastic probs, masked exactly to 0.

    The -1e30 logit offset keeps out-of-charset probabilities at exact zero
    and stops gradients into their classifier columns.
    """
    mask = branch.mask if mask is None else mask
    if mask.shape != (branch.union_width,):
        raise ContractViolation(
            f"mask width {mask.shape} vs classifier {branch.union_width}"
        )
    p = branch.params
    n = features.data.shape[0]
    ones = ag.tensor(np.ones((n, 1)))
    logits = ag.add(ag.matmul(features, p["cls_w"]), ag.matmul(ones, p["cls_b"]))
    bias = ag.tensor(np.tile(_mask_bias(mask), (n, 1)))
    return ag.softmax(ag.add(logits, bias), axis=-1)


def frame_probs(branch: RecognizerBranch, features_np: np.ndarray) -> np.ndarray:
    """No-graph classifier pass: (T, C) features -> (T, width) probs."""
    logits = features_np @ branch.params["cls_w"].data + branch.params["cls_b"].data
    logits = logits + _mask_bias(branch.mask)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pad_to_union(probs: np.ndarray, src_entries: Sequence[int],
                 union: UnionCharset) -> np.ndarray:
    """Scatter (T, w_src) rows into the current union width; zeros elsewhere."""
    t, w_src = probs.shape
    if w_src != len(src_entries) + 1:
        raise ContractViolation(
            f"probs width {w_src} vs {len(src_entries)} source entries"
        )
    out = np.zeros((t, union.width))
    cols = [BLANK] + [union.index_of(g) for g in src_entries]
    out[:, cols] = probs
    return out


def decode_branch(branch: RecognizerBranch, union: UnionCharset,
                  image: np.ndarray) -> list[int]:
    """Standalone greedy decode of one branch; returns global ids."""
    feats = extract_features(branch, image)
    probs = frame_probs(branch, feats)
    idx = ctc_greedy_decode(probs)
    snapshot = union.entries[:branch.union_width - 1]
    return [int(snapshot[i - 1]) for i in idx]


# ---------------------------------------------------------------------------
# training


def train_recognizer(instances: Sequence[TextInstance], union: UnionCharset,
                     language_id: int, *, iterations: int, batch: int,
                     max_lr: float, seed_stream: Sequence[int],
                     n_frames: int = DEFAULT_FRAMES,
                     n_channels: int = DEFAULT_CHANNELS,
                     mask: Optional[np.ndarray] = None,
                     start: Optional[RecognizerBranch] = None) -> RecognizerBranch:
    """Adam + one-cycle CTC training of one recognizer.

    `mask` defaults to the language's union mask (gradient-truncated branch
    training); pass an all-true mask for union-wide models. `start`
    continues from an existing model instead of a fresh init (the widened
    sequential baseline). Deterministic given the seed stream.
    """
    if not instances:
        raise TrainingImpossible("empty training split")
    rng = np.random.default_rng(list(seed_stream))
    width = union.width
    if mask is None:
        mask = union.language_mask(language_id)
    if start is None:
        model = init_branch(rng, language_id, width, mask, n_frames, n_channels)
    else:
        model = start
        widen_classifier(model, width, mask)
        model.mask = mask.copy()
        for p in model.params.values():
            p.requires_grad = True
        model.frozen = False

    pooled = pool_batch(instances, n_frames)
    targets = [union.indices_for(inst.labels) for inst in instances]

    opt = Adam(list(model.params.values()))
    sched = OneCycle(max_lr, iterations)
    n = len(instances)
    n_skipped = 0
    losses: list[float] = []
    for it in range(iterations):
        idx = rng.integers(0, n, size=min(batch, n))
        with ag.Tape() as tape:
            feats = skeleton_forward(model, pooled[idx])
            probs = classify_masked(model, feats)
            probs3 = ag.reshape(probs, (len(idx), n_frames, width))
            ctc = BatchCtc(probs3, [targets[i] for i in idx])
        n_skipped += ctc.n_skipped
        if ctc.loss is None:
            continue
        opt.zero_grad()
        tape.backward(ctc.loss, list(model.params.values()))
        opt.step(sched.lr_at(it))
        losses.append(ctc.loss.item())
    if not losses:
        raise TrainingImpossible("every batch was CTC-infeasible")
    w = max(1, min(50, len(losses) // 4))
    model.train_report = {
        "first_loss": losses[0],
        "last_loss": losses[-1],
        "head_mean_loss": float(np.mean(losses[:w])),
        "tail_mean_loss": float(np.mean(losses[-w:])),
        "skipped_instances": n_skipped,
        "iterations": iterations,
    }
    model.freeze()
    return model
