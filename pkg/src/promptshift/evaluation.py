"""Metrics, significance testing, class-level analyses, and aggregation.

Reports follow one schema for every method: accuracy, F1 (positive-class
for binary tasks, macro otherwise), per-class precision/recall/F1, and the
full confusion matrix.  Few-shot aggregation averages the pretraining seeds
within each sampled split first, then summarizes across splits; the
protocol is complete at 16 splits x 3 seeds = 48 runs per method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as sp_special

from .errors import InputError

POSITIVE_CLASS = 0  # binary F1 scores the first verbalizer ("Yes")

EXPECTED_SPLITS = 16
EXPECTED_SEEDS = 3


@dataclass
class RunReport:
    """Structured record of one training/evaluation run."""

    method: str
    config_hash: str
    seed: int
    metrics: dict[str, float]
    per_class: list[dict]
    confusion: list[list[int]]
    n_examples: int
    sample_index: int | None = None
    predictions_ref: str | None = None

    def to_dict(self) -> dict:
        return {"method": self.method, "config_hash": self.config_hash,
                "seed": self.seed, "sample_index": self.sample_index,
                "metrics": self.metrics, "per_class": self.per_class,
                "confusion": self.confusion, "n_examples": self.n_examples,
                "predictions_ref": self.predictions_ref}

    @classmethod
    def from_dict(cls, obj: dict) -> "RunReport":
        return cls(method=obj["method"], config_hash=obj["config_hash"],
                   seed=obj["seed"], sample_index=obj.get("sample_index"),
                   metrics=obj["metrics"], per_class=obj["per_class"],
                   confusion=obj["confusion"], n_examples=obj["n_examples"],
                   predictions_ref=obj.get("predictions_ref"))


def confusion_matrix(predictions: np.ndarray, gold: np.ndarray,
                     n_classes: int) -> np.ndarray:
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (gold, predictions), 1)
    return matrix


def compute_metrics(predictions, gold, n_classes: int | None = None,
                    method: str = "", config_hash: str = "", seed: int = 0,
                    sample_index: int | None = None,
                    predictions_ref: str | None = None) -> RunReport:
    """Accuracy, F1, per-class precision/recall/F1, and the confusion matrix."""
    predictions = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if predictions.shape != gold.shape:
        raise InputError(f"prediction/gold length mismatch "
                         f"{predictions.shape} vs {gold.shape}")
    if predictions.size == 0:
        raise InputError("empty prediction set")
    if n_classes is None:
        n_classes = int(max(predictions.max(), gold.max())) + 1
    if predictions.max() >= n_classes or gold.max() >= n_classes:
        raise InputError("class id outside [0, n_classes)")

    matrix = confusion_matrix(predictions, gold, n_classes)
    total = int(matrix.sum())
    accuracy = float(np.trace(matrix)) / total

    per_class = []
    f1s = []
    for c in range(n_classes):
        tp = float(matrix[c, c])
        fp = float(matrix[:, c].sum() - tp)
        fn = float(matrix[c, :].sum() - tp)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        f1s.append(f1)
        per_class.append({"label": c, "precision": precision, "recall": recall,
                          "f1": f1, "support": int(matrix[c, :].sum())})

    f1_score = f1s[POSITIVE_CLASS] if n_classes == 2 else float(np.mean(f1s))
    metrics = {"accuracy": accuracy, "f1": f1_score,
               "macro_f1": float(np.mean(f1s))}
    return RunReport(method=method, config_hash=config_hash, seed=seed,
                     sample_index=sample_index, metrics=metrics,
                     per_class=per_class, confusion=matrix.tolist(),
                     n_examples=total, predictions_ref=predictions_ref)


def _moments(sample) -> tuple[int, float, float]:
    arr = np.asarray(sample, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise InputError("t-test samples need at least 2 values each")
    return arr.size, float(arr.mean()), float(arr.var(ddof=1))


def ttest(sample_a, sample_b, variant: str = "welch") -> tuple[float, float]:
    """Two-sample two-sided t-test; Welch by default, pooled optional.

    Degenerate zero-variance pairs return (0, 1) for equal means and
    (+/-inf, 0) otherwise.
    """
    na, ma, va = _moments(sample_a)
    nb, mb, vb = _moments(sample_b)
    diff = ma - mb
    if variant == "welch":
        se2 = va / na + vb / nb
        if se2 == 0.0:
            return (0.0, 1.0) if diff == 0.0 else (math.copysign(math.inf, diff), 0.0)
        df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    elif variant == "pooled":
        sp2 = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        se2 = sp2 * (1.0 / na + 1.0 / nb)
        if se2 == 0.0:
            return (0.0, 1.0) if diff == 0.0 else (math.copysign(math.inf, diff), 0.0)
        df = na + nb - 2
    else:
        raise InputError(f"unknown t-test variant {variant!r}")
    t = diff / math.sqrt(se2)
    p = 2.0 * float(sp_special.stdtr(df, -abs(t)))
    return t, p


def ttest_paired(sample_a, sample_b) -> tuple[float, float]:
    """Paired two-sided t-test on per-index differences."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("paired t-test needs equal-length samples")
    n, md, vd = _moments(a - b)
    if vd == 0.0:
        return (0.0, 1.0) if md == 0.0 else (math.copysign(math.inf, md), 0.0)
    t = md / math.sqrt(vd / n)
    p = 2.0 * float(sp_special.stdtr(n - 1, -abs(t)))
    return t, p


def tfidf_class_similarity(corpus_a: dict, corpus_b: dict
                           ) -> tuple[list, list, np.ndarray]:
    """Cosine similarities between per-class TF-IDF documents of two corpora.

    Each class's token sequences are concatenated into one document; vectors
    use raw term counts weighted by smoothed IDF over the joint document
    collection, then L2-normalized.  Returns (classes_a, classes_b, matrix).
    """
    def build_docs(corpus, side):
        docs = {}
        for cls in sorted(corpus):
            tokens = [t for seq in corpus[cls] for t in seq]
            if not tokens:
                raise InputError(f"class {cls!r} of corpus {side} is empty")
            docs[cls] = tokens
        return docs

    docs_a = build_docs(corpus_a, "a")
    docs_b = build_docs(corpus_b, "b")
    all_docs = list(docs_a.values()) + list(docs_b.values())
    vocab = sorted({t for doc in all_docs for t in doc})
    index = {t: i for i, t in enumerate(vocab)}

    counts = np.zeros((len(all_docs), len(vocab)), dtype=np.float64)
    for i, doc in enumerate(all_docs):
        for t in doc:
            counts[i, index[t]] += 1.0
    n_docs = len(all_docs)
    df = np.count_nonzero(counts > 0, axis=0)
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
    vectors = counts * idf
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)

    va = vectors[:len(docs_a)]
    vb = vectors[len(docs_a):]
    return list(docs_a), list(docs_b), va @ vb.T


@dataclass
class AggregateReport:
    """Per-method summary plus pairwise significance against a reference."""

    grouping: str                      # "fewshot" | "zeroshot"
    reference: str
    methods: dict[str, dict] = field(default_factory=dict)
    ttests: dict[str, dict] = field(default_factory=dict)
    complete: bool = True
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"grouping": self.grouping, "reference": self.reference,
                "methods": self.methods, "ttests": self.ttests,
                "complete": self.complete, "notes": sorted(self.notes)}


def _fewshot_split_averages(reports: list[RunReport], metric: str
                            ) -> tuple[list[float], list[str]]:
    """Seed-first averaging: mean over seeds within each sampled split.

    Values are summed in seed order so the result is independent of the
    order reports arrive in.
    """
    by_split: dict[int, dict[int, float]] = {}
    for rep in reports:
        by_split.setdefault(rep.sample_index, {})[rep.seed] = rep.metrics[metric]
    notes = []
    for idx, by_seed in sorted(by_split.items()):
        if len(by_seed) != EXPECTED_SEEDS:
            notes.append(f"split {idx}: {len(by_seed)} seeds")
    values = [float(np.mean([by_split[idx][s] for s in sorted(by_split[idx])]))
              for idx in sorted(by_split)]
    return values, notes


def aggregate(reports: list[RunReport], grouping: str = "fewshot",
              reference: str = "optima", metric: str = "accuracy",
              paired: bool = False, ttest_variant: str = "welch"
              ) -> AggregateReport:
    """Mean +/- sample std per method plus t-tests against the reference.

    Incomplete protocols still aggregate but set complete=False and record
    what is missing.
    """
    if grouping not in ("fewshot", "zeroshot"):
        raise InputError(f"unknown grouping {grouping!r}")
    out = AggregateReport(grouping=grouping, reference=reference)
    by_method: dict[str, list[RunReport]] = {}
    for rep in reports:
        by_method.setdefault(rep.method, []).append(rep)

    samples: dict[str, list[float]] = {}
    for method in sorted(by_method):
        reps = by_method[method]
        if grouping == "fewshot":
            values, notes = _fewshot_split_averages(reps, metric)
            out.notes.extend(f"{method}: {n}" for n in notes)
            if len(reps) != EXPECTED_SPLITS * EXPECTED_SEEDS:
                out.complete = False
                out.notes.append(f"{method}: {len(reps)} runs, expected "
                                 f"{EXPECTED_SPLITS * EXPECTED_SEEDS}")
            if len(values) != EXPECTED_SPLITS or notes:
                out.complete = False
        else:
            values = [rep.metrics[metric] for rep in
                      sorted(reps, key=lambda r: (r.seed, r.sample_index or 0))]
            if len(reps) != EXPECTED_SEEDS:
                out.complete = False
                out.notes.append(f"{method}: {len(reps)} runs, expected "
                                 f"{EXPECTED_SEEDS}")
        samples[method] = values
        degenerate = len(values) < 2
        std = 0.0 if degenerate else float(np.std(values, ddof=1))
        out.methods[method] = {
            "metric": metric,
            "mean": float(np.mean(values)),
            "std": std,
            "n_runs": len(reps),
            "n_values": len(values),
            "degenerate_std": degenerate,
        }

    if reference in samples:
        ref_values = samples[reference]
        for method in sorted(samples):
            if method == reference or len(samples[method]) < 2 or len(ref_values) < 2:
                continue
            if paired and len(samples[method]) == len(ref_values):
                t, p = ttest_paired(ref_values, samples[method])
            else:
                t, p = ttest(ref_values, samples[method], variant=ttest_variant)
            out.ttests[method] = {"t": _json_float(t), "p": p}
    return out


def _json_float(x: float) -> float | str:
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")
