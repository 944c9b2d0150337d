import numpy as np
import pytest

import promptshift as ps
from promptshift.frontend import assemble_batch


def relerr(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))


def central_diff(f, x, eps=1e-5):
    """Elementwise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        out[idx] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return out


class SmallInstance:
    """A random tiny model + batch for gradient and invariant checks."""

    def __init__(self, seed, dim=8, n=4, n_classes=3, m=2, k=1, batch=2,
                 vocab=12, var_len=False, lengths=None):
        rng = np.random.default_rng(seed)
        self.rng = rng
        self.dim, self.n, self.C, self.m, self.k = dim, n, n_classes, m, k
        self.table = ps.EmbeddingTable.create(vocab, dim, k, seed=seed)
        self.head = ps.VerbalizerHead.create(
            ps.verbalizer_table(n_classes), dim, seed=seed)
        self.backbone = ps.BackboneWeights.create(dim, seed=seed)
        self.prompt = ps.PromptParameters(rng.normal(0.0, 0.4, (m, dim)))
        self.disc = ps.DiscriminatorParams.create(dim, seed=seed)
        if lengths is None:
            lengths = (rng.integers(1, n, batch) if var_len
                       else np.full(batch, n))
        self.examples = [
            ps.Example(tokens=tuple(int(t) for t in rng.integers(0, vocab, ln)))
            for ln in lengths]
        self.labels = rng.integers(0, n_classes, batch)
        self.total_len = m + k + n + 1

    def batch(self, prompt=None):
        return assemble_batch(prompt or self.prompt, self.table, self.examples,
                              total_len=self.total_len)

    def forward(self, prompt=None, embeddings=None, backbone=None):
        batch = self.batch(prompt)
        if embeddings is not None:
            batch.embeddings[:] = embeddings
        return ps.forward(batch, backbone or self.backbone, self.head), batch


@pytest.fixture
def small():
    return SmallInstance(seed=0)


@pytest.fixture
def tiny_pair():
    spec = ps.DomainPairSpec(n_source=240, n_target=240, n_eval=120, seed=11)
    return ps.generate_pair(spec)


@pytest.fixture
def tiny_cfg():
    return ps.TrainConfig(max_steps=6, eval_interval=3, batch_size=4, seed=1,
                          fewshot_steps=4, fewshot_eval_interval=2)
