"""Synthetic two-domain tasks, JSONL ingestion, and few-shot sampling.

Two task families share the Example schema:

* token-stats: the label is the majority class among class-indicator tokens.
  Each class owns a vocabulary block plus a disjoint synonym block; the
  domain shift remaps a fraction `shift` of each block's ids to their
  synonyms in the target domain, so shift=0 keeps the domains identical and
  shift=1 makes the indicator vocabularies disjoint.
* toy2d: one Gaussian cluster per class; the target domain is the source
  rotated by shift * 90 degrees plus a small translation.

Generated target pools carry no labels (the Example.label field is None);
the true labels are returned separately and are used only by evaluation and
by the few-shot sampler.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .frontend import DOMAIN_SOURCE, DOMAIN_TARGET, Example

TASKS = ("token-stats", "toy2d")

# token-stats composition: per example, half the tokens indicate the true
# class, a quarter are distractors from other classes, the rest are neutral.
INDICATOR_FRAC = 0.5
DISTRACTOR_FRAC = 0.25

TOY2D_RADIUS = 1.5
TOY2D_STD = 0.35
TOY2D_SHIFT_TRANSLATION = (0.25, 0.1)


def verbalizer_table(n_classes: int) -> tuple[str, ...]:
    if n_classes == 2:
        return ("Yes", "No")
    if n_classes == 3:
        return ("Yes", "Neutral", "No")
    return tuple(f"Class{i}" for i in range(n_classes))


@dataclass(frozen=True)
class DomainPairSpec:
    task: str = "token-stats"
    vocab_size: int = 64
    seq_len: int = 16
    n_classes: int = 3
    shift: float = 0.5
    n_source: int = 2000
    n_target: int = 2000
    n_eval: int = 600
    val_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise InputError(f"unknown task {self.task!r}; choose from {TASKS}")
        if not 0.0 <= self.shift <= 1.0:
            raise InputError("shift must lie in [0, 1]")
        if min(self.n_source, self.n_target, self.n_eval) <= 0:
            raise InputError("set sizes must be positive")
        if self.n_classes < 2:
            raise InputError("need at least two classes")
        if self.task == "token-stats" and self.vocab_size < 3 * self.n_classes + 1:
            raise InputError("vocab too small for per-class indicator and synonym blocks")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("task", "vocab_size", "seq_len", "n_classes", "shift",
                 "n_source", "n_target", "n_eval", "val_frac", "seed")}


@dataclass
class DomainPair:
    spec: DomainPairSpec
    source_train: list[Example]
    source_val: list[Example]
    target_pool: list[Example]          # unlabeled
    target_pool_labels: np.ndarray      # kept aside for sampling/evaluation
    target_eval: list[Example]          # labeled, disjoint draw

    @property
    def labels(self) -> tuple[str, ...]:
        return verbalizer_table(self.spec.n_classes)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Class counts within +/-1 of n / n_classes, order shuffled."""
    base = n // n_classes
    counts = np.full(n_classes, base, dtype=np.int64)
    counts[:n - base * n_classes] += 1
    labels = np.repeat(np.arange(n_classes), counts)
    rng.shuffle(labels)
    return labels


class TokenBlocks:
    """Vocabulary layout: per-class indicator and synonym blocks plus a
    shared neutral block."""

    def __init__(self, spec: DomainPairSpec):
        V, C = spec.vocab_size, spec.n_classes
        block = V // (2 * C + 1)
        self.block_size = block
        self.indicator = [np.arange(c * block, (c + 1) * block) for c in range(C)]
        self.synonym = [np.arange((C + c) * block, (C + c + 1) * block)
                        for c in range(C)]
        self.neutral = np.arange(2 * C * block, V)
        n_remap = int(round(spec.shift * block))
        # target block: the first n_remap ids of each class swap to synonyms
        self.target_block = []
        for c in range(C):
            shifted = self.indicator[c].copy()
            shifted[:n_remap] = self.synonym[c][:n_remap]
            self.target_block.append(shifted)

    def class_block(self, c: int, domain: str) -> np.ndarray:
        return self.indicator[c] if domain == DOMAIN_SOURCE else self.target_block[c]

    def prototype_ids(self) -> list[int]:
        """One designated verbalizer token per class (tied-embedding readout)."""
        return [int(block[0]) for block in self.indicator]


def _token_example(spec: DomainPairSpec, blocks: _TokenBlocks, label: int,
                   domain: str, rng: np.random.Generator) -> tuple[int, ...]:
    n = spec.seq_len
    n_ind = max(1, int(round(INDICATOR_FRAC * n)))
    n_dis = int(round(DISTRACTOR_FRAC * n))
    others = [c for c in range(spec.n_classes) if c != label]
    # keep the true class a strict majority among indicator tokens
    per_other = min(n_dis // max(len(others), 1), n_ind - 1)
    tokens = [rng.choice(blocks.class_block(label, domain)) for _ in range(n_ind)]
    for c in others:
        tokens.extend(rng.choice(blocks.class_block(c, domain))
                      for _ in range(per_other))
    while len(tokens) < n:
        tokens.append(rng.choice(blocks.neutral))
    tokens = np.asarray(tokens[:n], dtype=np.int64)
    rng.shuffle(tokens)
    return tuple(int(t) for t in tokens)


def toy2d_class_means(n_classes: int, radius: float = TOY2D_RADIUS) -> np.ndarray:
    """Cluster centers spread over a half circle (never antipodal)."""
    angles = np.pi * (np.arange(n_classes) + 0.5) / n_classes - np.pi / 2
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def toy2d_target_transform(shift: float) -> tuple[np.ndarray, np.ndarray]:
    theta = shift * math.pi / 2.0
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    translation = shift * np.asarray(TOY2D_SHIFT_TRANSLATION)
    return rot, translation


def _point_example(spec: DomainPairSpec, means: np.ndarray, label: int,
                   domain: str, rng: np.random.Generator) -> tuple[float, float]:
    point = means[label] + rng.normal(0.0, TOY2D_STD, size=2)
    if domain == DOMAIN_TARGET:
        rot, translation = toy2d_target_transform(spec.shift)
        point = rot @ point + translation
    return (float(point[0]), float(point[1]))


def _generate_set(spec: DomainPairSpec, n: int, domain: str, labeled: bool,
                  rng: np.random.Generator) -> tuple[list[Example], np.ndarray]:
    labels = _balanced_labels(n, spec.n_classes, rng)
    blocks = TokenBlocks(spec) if spec.task == "token-stats" else None
    means = toy2d_class_means(spec.n_classes) if spec.task == "toy2d" else None
    examples = []
    for y in labels:
        y = int(y)
        if spec.task == "token-stats":
            examples.append(Example(tokens=_token_example(spec, blocks, y, domain, rng),
                                    label=y if labeled else None, domain=domain))
        else:
            examples.append(Example(point=_point_example(spec, means, y, domain, rng),
                                    label=y if labeled else None, domain=domain))
    return examples, labels


def generate_pair(spec: DomainPairSpec) -> DomainPair:
    """Labeled source train/val, unlabeled target pool, labeled target eval."""
    rng_source = np.random.default_rng([spec.seed, 0x50])
    rng_target = np.random.default_rng([spec.seed, 0x51])
    rng_eval = np.random.default_rng([spec.seed, 0x52])

    source, _ = _generate_set(spec, spec.n_source, DOMAIN_SOURCE, True, rng_source)
    n_val = max(1, int(round(spec.val_frac * spec.n_source)))
    source_train, source_val = source[:-n_val], source[-n_val:]
    target_pool, target_labels = _generate_set(spec, spec.n_target, DOMAIN_TARGET,
                                               False, rng_target)
    target_eval, _ = _generate_set(spec, spec.n_eval, DOMAIN_TARGET, True, rng_eval)
    return DomainPair(spec=spec, source_train=source_train, source_val=source_val,
                      target_pool=target_pool, target_pool_labels=target_labels,
                      target_eval=target_eval)


@dataclass
class FewShotSplit:
    """8-per-class train and dev sets drawn disjointly from the target pool."""

    train: list[Example]
    dev: list[Example]
    sample_index: int
    seed: int


def sample_fewshot(pool: list[Example], pool_labels: np.ndarray, n_classes: int,
                   sample_index: int, seed: int, shots: int = 8) -> FewShotSplit:
    """Stratified sampling without replacement, reproducible from
    (seed, sample_index)."""
    pool_labels = np.asarray(pool_labels)
    if len(pool) != pool_labels.shape[0]:
        raise InputError("pool and label array lengths differ")
    rng = np.random.default_rng([seed, 0xF5, sample_index])
    train, dev = [], []
    for c in range(n_classes):
        members = np.flatnonzero(pool_labels == c)
        if members.size < 2 * shots:
            raise InputError(
                f"class {c} has {members.size} examples; needs {2 * shots}")
        picked = rng.choice(members, size=2 * shots, replace=False)
        for i in picked[:shots]:
            train.append(_with_label(pool[int(i)], c))
        for i in picked[shots:]:
            dev.append(_with_label(pool[int(i)], c))
    return FewShotSplit(train=train, dev=dev, sample_index=sample_index, seed=seed)


def _with_label(ex: Example, label: int) -> Example:
    return Example(tokens=ex.tokens, point=ex.point, label=label, domain=ex.domain)


def labels_of(examples: list[Example]) -> np.ndarray:
    out = []
    for i, ex in enumerate(examples):
        if ex.label is None:
            raise InputError(f"example {i} has no label")
        out.append(ex.label)
    return np.asarray(out, dtype=np.int64)


def save_jsonl(path, examples: list[Example], verbalizers: tuple[str, ...]) -> None:
    lines = []
    for ex in examples:
        obj: dict = {"domain": ex.domain}
        if ex.tokens is not None:
            obj["tokens"] = list(ex.tokens)
        else:
            obj["point"] = [ex.point[0], ex.point[1]]
        if ex.label is not None:
            obj["label"] = verbalizers[ex.label]
        lines.append(json.dumps(obj, sort_keys=True))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_jsonl(path, verbalizers: tuple[str, ...]) -> list[Example]:
    """Parse the JSONL example schema; errors carry the offending line number."""
    label_ids = {name: i for i, name in enumerate(verbalizers)}
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise InputError(f"{path}:{lineno}: malformed JSON ({err.msg})")
            label = None
            if "label" in obj:
                if obj["label"] not in label_ids:
                    raise InputError(
                        f"{path}:{lineno}: unknown label {obj['label']!r}; "
                        f"expected one of {list(verbalizers)}")
                label = label_ids[obj["label"]]
            try:
                examples.append(Example(
                    tokens=tuple(obj["tokens"]) if "tokens" in obj else None,
                    point=tuple(obj["point"]) if "point" in obj else None,
                    label=label,
                    domain=obj.get("domain", DOMAIN_SOURCE)))
            except InputError as err:
                raise InputError(f"{path}:{lineno}: {err}")
    return examples
