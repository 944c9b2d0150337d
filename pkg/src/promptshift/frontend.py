"""Input assembly: raw examples -> embedded batches.

Every prediction runs on the concatenation <prompt rows; hard-prompt rows;
input rows; one mask row>, right-padded with zero rows to a fixed length.
Token examples look their ids up in a seeded embedding table; 2-D point
examples are lifted to a single input row by a fixed seeded 2xd matrix so
both task families share one prediction pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

ROLE_PROMPT = 0
ROLE_HARD = 1
ROLE_INPUT = 2
ROLE_MASK = 3
ROLE_PAD = 4

ROLE_NAMES = {
    ROLE_PROMPT: "prompt",
    ROLE_HARD: "hard",
    ROLE_INPUT: "input",
    ROLE_MASK: "mask",
    ROLE_PAD: "pad",
}

DOMAIN_SOURCE = "source"
DOMAIN_TARGET = "target"


@dataclass(frozen=True)
class Example:
    """One raw example: token ids or a 2-D point, optional label, domain tag."""

    tokens: tuple[int, ...] | None = None
    point: tuple[float, float] | None = None
    label: int | None = None
    domain: str = DOMAIN_SOURCE

    def __post_init__(self):
        if (self.tokens is None) == (self.point is None):
            raise InputError("example must carry exactly one of tokens / point")
        if self.tokens is not None:
            if len(self.tokens) == 0:
                raise InputError("token sequence is empty")
            if any(t < 0 for t in self.tokens):
                raise InputError(f"negative token id in {self.tokens}")
        if self.point is not None and len(self.point) != 2:
            raise InputError("point must have exactly 2 coordinates")
        if self.label is not None and self.label < 0:
            raise InputError(f"negative label id {self.label}")
        if self.domain not in (DOMAIN_SOURCE, DOMAIN_TARGET):
            raise InputError(f"unknown domain tag {self.domain!r}")

    @property
    def n_input(self) -> int:
        return len(self.tokens) if self.tokens is not None else 1


@dataclass
class EmbeddingTable:
    """Seeded V x d lookup plus reserved rows for hard-prompt and mask tokens.

    Rows [0, V) belong to the task vocabulary; the next k rows are the
    reserved hard-prompt tokens and the final row is the mask token.  The
    table is fixed after initialization in prompt-tuning modes.
    """

    matrix: np.ndarray
    vocab_size: int
    hard_len: int
    seed: int

    @classmethod
    def create(cls, vocab_size: int, dim: int, hard_len: int, seed: int,
               scale: float | None = None) -> "EmbeddingTable":
        if vocab_size <= 0 or dim <= 0 or hard_len < 0:
            raise InputError("vocab_size/dim must be positive, hard_len >= 0")
        rng = np.random.default_rng([seed, 0xE3B])
        scale = (1.0 / np.sqrt(dim)) if scale is None else float(scale)
        rows = vocab_size + hard_len + 1
        matrix = rng.normal(0.0, scale, size=(rows, dim)).astype(np.float64)
        return cls(matrix=matrix, vocab_size=vocab_size, hard_len=hard_len, seed=seed)

    @classmethod
    def create_clustered(cls, vocab_size: int, dim: int, hard_len: int,
                         seed: int, primary_groups: list, synonym_groups: list,
                         signal_scale: float, noise_scale: float,
                         synonym_correlation: float,
                         domain_offset: float = 0.0) -> "EmbeddingTable":
        """Pretrained-style table: tokens in a group share a unit direction.

        Semantically related tokens cluster in a real model's embedding
        space; here each primary group c gets direction u_c and its synonym
        group gets rho * u_c + sqrt(1 - rho^2) * fresh, so synonym clusters
        are related but displaced.  All synonym clusters share one extra
        offset of magnitude `domain_offset` along a common direction, the
        way one corpus's vocabulary sits displaced from another's.
        Per-token noise rides on top.
        """
        if len(primary_groups) != len(synonym_groups):
            raise InputError("primary and synonym group lists must pair up")
        rng_dir = np.random.default_rng([seed, 0xC1])
        table = cls.create(vocab_size, dim, hard_len, seed,
                           scale=noise_scale / np.sqrt(dim))
        rho = float(synonym_correlation)
        if not -1.0 <= rho <= 1.0:
            raise InputError("synonym_correlation must lie in [-1, 1]")
        offset_dir = rng_dir.normal(size=dim)
        offset_dir /= np.linalg.norm(offset_dir)
        for primary, synonym in zip(primary_groups, synonym_groups):
            u = rng_dir.normal(size=dim)
            u /= np.linalg.norm(u)
            fresh = rng_dir.normal(size=dim)
            fresh /= np.linalg.norm(fresh)
            w = rho * u + np.sqrt(1.0 - rho * rho) * fresh
            table.matrix[np.asarray(primary)] += signal_scale * u
            table.matrix[np.asarray(synonym)] += (signal_scale * w
                                                  + domain_offset * offset_dir)
        return table

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def hard_rows(self) -> np.ndarray:
        return self.matrix[self.vocab_size:self.vocab_size + self.hard_len]

    @property
    def mask_row(self) -> np.ndarray:
        return self.matrix[self.vocab_size + self.hard_len]


def lifting_matrix(dim: int, seed: int) -> np.ndarray:
    """Fixed 2 x d map taking raw 2-D points to one input-role row."""
    rng = np.random.default_rng([seed, 0x11F7])
    return rng.normal(0.0, 1.0 / np.sqrt(2.0), size=(2, dim)).astype(np.float64)


@dataclass
class PromptParameters:
    """Trainable m x d soft-prompt rows; the only trainable weights in
    prompt-tuning modes."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise InputError("prompt rows must be a 2-D matrix")
        if not np.all(np.isfinite(self.rows)):
            raise InputError("prompt rows contain non-finite entries")

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    def copy(self) -> "PromptParameters":
        return PromptParameters(self.rows.copy())


def init_prompt(table: EmbeddingTable, m: int, mode: str, seed: int) -> PromptParameters:
    """table_rows: copy the first m vocabulary rows; gaussian: seeded draw."""
    if m < 0:
        raise InputError("prompt length must be >= 0")
    if mode == "table_rows":
        if m > table.vocab_size:
            raise InputError(f"prompt length {m} exceeds vocab {table.vocab_size}")
        rows = table.matrix[:m].copy()
    elif mode == "gaussian":
        rng = np.random.default_rng([seed, 0x9A55])
        rows = rng.normal(0.0, 1.0 / np.sqrt(table.dim), size=(m, table.dim))
    else:
        raise InputError(f"unknown prompt_init {mode!r}")
    return PromptParameters(rows)


@dataclass
class EmbeddedBatch:
    """B x L x d embeddings with per-position role tags.

    Exactly one mask-tagged position per example; pad rows are zero; for an
    example with n input rows, L = m + k + n + 1 before padding.
    """

    embeddings: np.ndarray
    role_mask: np.ndarray
    mask_position: np.ndarray

    def __post_init__(self):
        if self.embeddings.ndim != 3 or self.role_mask.shape != self.embeddings.shape[:2]:
            raise InputError("embeddings must be B x L x d with matching role_mask")
        counts = np.sum(self.role_mask == ROLE_MASK, axis=1)
        if not np.all(counts == 1):
            raise InputError("each example needs exactly one mask position")

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    @property
    def input_mask(self) -> np.ndarray:
        return self.role_mask == ROLE_INPUT

    @property
    def valid_mask(self) -> np.ndarray:
        return self.role_mask != ROLE_PAD

    def input_counts(self) -> np.ndarray:
        return np.sum(self.input_mask, axis=1)

    def copy(self) -> "EmbeddedBatch":
        return EmbeddedBatch(self.embeddings.copy(), self.role_mask.copy(),
                             self.mask_position.copy())


def embed(example: Example, table: EmbeddingTable,
          lift: np.ndarray | None = None) -> np.ndarray:
    """Per-example n x d input matrix: row i is the table row of token i,
    or the lifted point for feature-mode examples."""
    if example.tokens is not None:
        ids = np.asarray(example.tokens, dtype=np.int64)
        if np.any(ids >= table.vocab_size):
            bad = ids[ids >= table.vocab_size][0]
            raise InputError(f"token id {bad} out of range [0, {table.vocab_size})")
        return table.matrix[ids].copy()
    if lift is None:
        raise InputError("feature-mode example needs a lifting matrix")
    point = np.asarray(example.point, dtype=np.float64)
    return (point @ lift)[None, :]


def assemble(prompt: PromptParameters, hard: np.ndarray, x: np.ndarray,
             mask_row: np.ndarray, total_len: int | None = None
             ) -> tuple[np.ndarray, np.ndarray, int]:
    """One batch row: [prompt; hard; input; mask; zero pads] plus role tags.

    Returns (L x d embeddings, L role tags, mask position).
    """
    hard = np.atleast_2d(np.asarray(hard, dtype=np.float64))
    if hard.size == 0:
        hard = hard.reshape(0, prompt.rows.shape[1] if prompt.length else x.shape[1])
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dims = {a.shape[1] for a in (prompt.rows, hard, x) if a.shape[0] > 0}
    dims.add(np.asarray(mask_row).shape[-1])
    if len(dims) != 1:
        raise InputError(f"inconsistent embedding dims {sorted(dims)}")
    d = dims.pop()

    m, k, n = prompt.length, hard.shape[0], x.shape[0]
    used = m + k + n + 1
    L = used if total_len is None else int(total_len)
    if L < used:
        raise InputError(f"total_len {L} too short for m+k+n+1 = {used}")

    row = np.zeros((L, d), dtype=np.float64)
    roles = np.full(L, ROLE_PAD, dtype=np.int8)
    row[:m] = prompt.rows
    roles[:m] = ROLE_PROMPT
    row[m:m + k] = hard
    roles[m:m + k] = ROLE_HARD
    row[m + k:m + k + n] = x
    roles[m + k:m + k + n] = ROLE_INPUT
    mask_pos = m + k + n
    row[mask_pos] = np.asarray(mask_row, dtype=np.float64)
    roles[mask_pos] = ROLE_MASK
    return row, roles, mask_pos


def assemble_batch(prompt: PromptParameters, table: EmbeddingTable,
                   examples: list[Example], lift: np.ndarray | None = None,
                   total_len: int | None = None) -> EmbeddedBatch:
    if not examples:
        raise InputError("empty example batch")
    mats = [embed(ex, table, lift) for ex in examples]
    if total_len is None:
        total_len = prompt.length + table.hard_len + max(m.shape[0] for m in mats) + 1
    rows, roles, positions = [], [], []
    for mat in mats:
        r, ro, mp = assemble(prompt, table.hard_rows, mat, table.mask_row, total_len)
        rows.append(r)
        roles.append(ro)
        positions.append(mp)
    return EmbeddedBatch(np.stack(rows), np.stack(roles),
                         np.asarray(positions, dtype=np.int64))


def strip_by_role(batch: EmbeddedBatch, index: int) -> dict[str, np.ndarray]:
    """Recover the concatenated parts of one example; inverse of assemble."""
    roles = batch.role_mask[index]
    emb = batch.embeddings[index]
    return {name: emb[roles == role]
            for role, name in ROLE_NAMES.items() if role != ROLE_PAD}


@dataclass
class PerturbationSlots:
    """Alignment between a B x n_max x d perturbation array and the
    input-role positions of an EmbeddedBatch."""

    positions: np.ndarray  # B x n_max position indices (padded with -1)
    valid: np.ndarray      # B x n_max slot validity

    @classmethod
    def for_batch(cls, batch: EmbeddedBatch) -> "PerturbationSlots":
        n_max = int(batch.input_counts().max())
        positions = np.full((batch.batch_size, n_max), -1, dtype=np.int64)
        valid = np.zeros((batch.batch_size, n_max), dtype=bool)
        for b in range(batch.batch_size):
            idx = np.flatnonzero(batch.input_mask[b])
            positions[b, :idx.size] = idx
            valid[b, :idx.size] = True
        return cls(positions=positions, valid=valid)

    @property
    def n_max(self) -> int:
        return self.positions.shape[1]


def apply_perturbation(batch: EmbeddedBatch, delta: np.ndarray,
                       slots: PerturbationSlots | None = None) -> EmbeddedBatch:
    """Add delta to input-role rows only; all other roles stay bitwise equal."""
    slots = slots or PerturbationSlots.for_batch(batch)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (batch.batch_size, slots.n_max, batch.dim):
        raise InputError(
            f"delta shape {delta.shape} does not match input slots "
            f"{(batch.batch_size, slots.n_max, batch.dim)}")
    out = batch.copy()
    for b in range(batch.batch_size):
        pos = slots.positions[b][slots.valid[b]]
        out.embeddings[b, pos] += delta[b, :pos.size]
    return out


def gather_input_rows(arr: np.ndarray, slots: PerturbationSlots) -> np.ndarray:
    """Collect B x L x d values at input-role positions into B x n_max x d."""
    b_count, n_max = slots.positions.shape
    out = np.zeros((b_count, n_max, arr.shape[2]), dtype=np.float64)
    for b in range(b_count):
        pos = slots.positions[b][slots.valid[b]]
        out[b, :pos.size] = arr[b, pos]
    return out
