"""Frozen prediction backbone: one self-attention block plus verbalizer readout.

The network is a single-head transformer block over the assembled input,
with layer-scale residuals and a tanh feed-forward (smooth everywhere, so
central-difference gradient checks are meaningful).  Class scores are read
at the mask position through a fixed C x d verbalizer matrix; the pooled
representation fed to the domain discriminator is the mean of final hidden
states over input-role positions.

All arithmetic is float64.  backward() is exact reverse-mode accumulation
written out by hand; it returns gradients with respect to every embedding
row, every backbone matrix, and the readout, and callers select the slices
their training mode is allowed to touch.

Shapes: X (B,L,d) embeddings, A (B,L,L) attention, U (B,L,4d) ffn hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .frontend import EmbeddedBatch
from .serialize import digest_arrays, load_arrays, save_arrays

NEG_MASK = -1e30  # exp(NEG_MASK - rowmax) underflows to exactly 0.0


@dataclass
class BackboneWeights:
    """Fixed encoder parameters, regenerable from (seed, dim)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    scale_attn: np.ndarray
    scale_ffn: np.ndarray
    seed: int

    @classmethod
    def create(cls, dim: int, seed: int, attn_scale: float = 1.0,
               value_residual_noise: float | None = None) -> "BackboneWeights":
        """Seeded weights.  attn_scale < 1 tempers query/key magnitudes
        toward uniform attention; value_residual_noise, when given, makes
        the value and output projections near-identity copy circuits
        (identity plus scaled noise), as pretrained attention tends to be.
        """
        if dim <= 0:
            raise InputError("dim must be positive")
        rng = np.random.default_rng([seed, 0xBB0E])
        s = 1.0 / np.sqrt(dim)
        hidden = 4 * dim
        weights = cls(
            wq=rng.normal(0.0, s, (dim, dim)) * attn_scale,
            wk=rng.normal(0.0, s, (dim, dim)) * attn_scale,
            wv=rng.normal(0.0, s, (dim, dim)),
            wo=rng.normal(0.0, s, (dim, dim)),
            w1=rng.normal(0.0, s, (dim, hidden)),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim)),
            scale_attn=np.ones(dim),
            scale_ffn=np.ones(dim),
            seed=seed,
        )
        if value_residual_noise is not None:
            rng_vo = np.random.default_rng([seed, 0xB0])
            eye = np.eye(dim)
            sv = value_residual_noise / np.sqrt(dim)
            weights.wv = eye + rng_vo.normal(0.0, sv, (dim, dim))
            weights.wo = eye + rng_vo.normal(0.0, sv, (dim, dim))
        return weights

    ARRAY_FIELDS = ("wq", "wk", "wv", "wo", "w1", "w2", "scale_attn", "scale_ffn")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_FIELDS}

    def digest(self) -> str:
        return digest_arrays(self.as_dict())

    def copy(self) -> "BackboneWeights":
        return BackboneWeights(
            **{n: getattr(self, n).copy() for n in self.ARRAY_FIELDS}, seed=self.seed)

    def save(self, path) -> None:
        save_arrays(path, self.as_dict(), meta={"kind": "backbone", "seed": self.seed})

    @classmethod
    def load(cls, path) -> "BackboneWeights":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "backbone":
            raise InputError(f"{path}: not a backbone snapshot")
        return cls(**arrays, seed=int(meta["seed"]))


@dataclass
class VerbalizerHead:
    """C x d readout selecting one logit per verbalizer label."""

    matrix: np.ndarray
    labels: tuple[str, ...]

    @classmethod
    def create(cls, labels: tuple[str, ...], dim: int, seed: int) -> "VerbalizerHead":
        if len(labels) < 2:
            raise InputError("need at least two verbalizer labels")
        rng = np.random.default_rng([seed, 0x4EAD])
        matrix = rng.normal(0.0, 1.0 / np.sqrt(dim), (len(labels), dim))
        return cls(matrix=matrix, labels=tuple(labels))

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    def digest(self) -> str:
        return digest_arrays({"head": self.matrix})


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """d loss / d logits given d loss / d probs, rowwise."""
    inner = np.sum(dprobs * probs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


@dataclass
class ForwardResult:
    probs: np.ndarray       # B x C
    pooled: np.ndarray      # B x d
    logits: np.ndarray      # B x C
    hidden: np.ndarray      # B x L x d final hidden states
    cache: dict

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]


@dataclass
class Gradients:
    d_embeddings: np.ndarray            # B x L x d
    d_weights: dict[str, np.ndarray]    # keyed like BackboneWeights.as_dict()
    d_head: np.ndarray                  # C x d


def forward(batch: EmbeddedBatch, weights: BackboneWeights,
            head: VerbalizerHead) -> ForwardResult:
    X = batch.embeddings
    B, L, d = X.shape
    if d != weights.dim:
        raise InputError(f"batch dim {d} != backbone dim {weights.dim}")
    valid = batch.valid_mask  # pad positions never act as keys

    Q = X @ weights.wq
    K = X @ weights.wk
    V = X @ weights.wv
    S = (Q @ K.transpose(0, 2, 1)) / np.sqrt(d)
    S = np.where(valid[:, None, :], S, NEG_MASK)
    A = softmax(S, axis=-1)
    AV = A @ V
    attn = AV @ weights.wo
    H1 = X + weights.scale_attn * attn
    U = np.tanh(H1 @ weights.w1)
    Fo = U @ weights.w2
    H2 = H1 + weights.scale_ffn * Fo

    idx = np.arange(B)
    h_mask = H2[idx, batch.mask_position]
    logits = h_mask @ head.matrix.T
    probs = softmax(logits, axis=-1)

    input_mask = batch.input_mask
    n_inputs = np.maximum(input_mask.sum(axis=1), 1)
    pooled = (H2 * input_mask[:, :, None]).sum(axis=1) / n_inputs[:, None]

    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(pooled))):
        raise NumericalError(
            "non-finite activations in forward pass",
            max_abs_embedding=float(np.max(np.abs(X))),
            max_abs_logit=float(np.max(np.abs(logits[np.isfinite(logits)]), initial=0.0)),
        )

    cache = {"X": X, "Q": Q, "K": K, "V": V, "A": A, "AV": AV, "attn": attn,
             "H1": H1, "U": U, "Fo": Fo, "H2": H2, "h_mask": h_mask,
             "input_mask": input_mask, "n_inputs": n_inputs,
             "mask_position": batch.mask_position}
    return ForwardResult(probs=probs, pooled=pooled, logits=logits,
                         hidden=H2, cache=cache)


def backward(result: ForwardResult, weights: BackboneWeights, head: VerbalizerHead,
             dlogits: np.ndarray | None = None,
             dpooled: np.ndarray | None = None) -> Gradients:
    """Exact gradients of a scalar loss seeded by dlogits and/or dpooled."""
    c = result.cache
    X, A, V, U = c["X"], c["A"], c["V"], c["U"]
    B, L, d = X.shape
    idx = np.arange(B)

    dH2 = np.zeros_like(X)
    d_head = np.zeros_like(head.matrix)
    if dlogits is not None:
        dH2[idx, c["mask_position"]] += dlogits @ head.matrix
        d_head += dlogits.T @ c["h_mask"]
    if dpooled is not None:
        contrib = dpooled[:, None, :] / c["n_inputs"][:, None, None]
        dH2 += contrib * c["input_mask"][:, :, None]

    # FFN branch: H2 = H1 + scale_ffn * (tanh(H1 w1) w2)
    dFo = dH2 * weights.scale_ffn
    d_scale_ffn = np.sum(dH2 * c["Fo"], axis=(0, 1))
    dU = dFo @ weights.w2.T
    dZ = dU * (1.0 - U * U)
    dH1 = dH2 + dZ @ weights.w1.T
    d_w2 = np.einsum("blh,bld->hd", U, dFo)
    d_w1 = np.einsum("bld,blh->dh", c["H1"], dZ)

    # attention branch: H1 = X + scale_attn * ((A V) wo)
    dattn = dH1 * weights.scale_attn
    d_scale_attn = np.sum(dH1 * c["attn"], axis=(0, 1))
    dAV = dattn @ weights.wo.T
    d_wo = np.einsum("bld,ble->de", c["AV"], dattn)
    dA = dAV @ V.transpose(0, 2, 1)
    dV = np.einsum("bql,bqd->bld", A, dAV)
    dS = softmax_backward(A, dA)  # masked keys have A == 0, hence dS == 0
    scale = 1.0 / np.sqrt(d)
    dQ = (dS @ c["K"]) * scale
    dK = np.einsum("bql,bqd->bld", dS, c["Q"]) * scale

    dX = dH1 + dQ @ weights.wq.T + dK @ weights.wk.T + dV @ weights.wv.T
    d_weights = {
        "wq": np.einsum("bld,ble->de", X, dQ),
        "wk": np.einsum("bld,ble->de", X, dK),
        "wv": np.einsum("bld,ble->de", X, dV),
        "wo": d_wo,
        "w1": d_w1,
        "w2": d_w2,
        "scale_attn": d_scale_attn,
        "scale_ffn": d_scale_ffn,
    }
    return Gradients(d_embeddings=dX, d_weights=d_weights, d_head=d_head)
