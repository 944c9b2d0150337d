"""Tour of the synthetic two-domain tasks.

Generates a token-stats pair, inspects how the vocabulary shift moves the
target domain away from the source, round-trips everything through JSONL,
and draws a few-shot split the way the evaluation protocol does.
"""

import collections
import pathlib
import tempfile

import numpy as np

import promptshift as ps
from promptshift.data import TokenBlocks

spec = ps.DomainPairSpec(n_source=600, n_target=600, n_eval=300, seed=7)
pair = ps.generate_pair(spec)
print(f"task={spec.task} V={spec.vocab_size} n={spec.seq_len} "
      f"C={spec.n_classes} shift={spec.shift}")
print(f"source train/val: {len(pair.source_train)}/{len(pair.source_val)}  "
      f"target pool (unlabeled): {len(pair.target_pool)}  "
      f"target eval: {len(pair.target_eval)}")

# The vocabulary is organized in per-class indicator blocks plus disjoint
# synonym blocks; the shift remaps half of each block in the target domain.
blocks = TokenBlocks(spec)
for c in range(spec.n_classes):
    src_block = {int(t) for t in blocks.indicator[c]}
    tgt_block = {int(t) for t in blocks.target_block[c]}
    overlap = len(src_block & tgt_block) / len(src_block)
    print(f"class {pair.labels[c]:8s} source ids {sorted(src_block)} "
          f"target overlap {overlap:.2f}")

# Labels follow the majority indicator block; verify on a handful.
ex = pair.source_train[0]
counts = collections.Counter()
for tok in ex.tokens:
    for c in range(spec.n_classes):
        if tok in set(blocks.indicator[c]):
            counts[c] += 1
print(f"example tokens={ex.tokens} indicator-counts={dict(counts)} "
      f"label={pair.labels[ex.label]}")

# Target pool ships without labels; they live in a separate array that
# only evaluation and the few-shot sampler may touch.
assert all(e.label is None for e in pair.target_pool)
print("target pool labels held aside:", pair.target_pool_labels[:10], "...")

# JSONL round trip is exact.
with tempfile.TemporaryDirectory() as tmp:
    path = pathlib.Path(tmp) / "source_train.jsonl"
    ps.save_jsonl(path, pair.source_train, pair.labels)
    again = ps.load_jsonl(path, pair.labels)
    print("jsonl round trip exact:", again == pair.source_train)

# One few-shot split: 8 train + 8 dev per class, disjoint, reproducible.
split = ps.sample_fewshot(pair.target_pool, pair.target_pool_labels,
                          spec.n_classes, sample_index=1, seed=0)
hist = np.bincount([e.label for e in split.train], minlength=spec.n_classes)
print(f"few-shot split 1: train per class {hist.tolist()}, "
      f"dev size {len(split.dev)}")
