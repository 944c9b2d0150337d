"""Alternating training loop: perturbation ascent, prompt step, probe step.

One generic step function drives every training mode.  A MethodSpec says
which parameter groups are trainable, which losses feed each group, and
whether target-domain batches, perturbations, or the domain probe are in
play.  The perturbation methods share a single projection/ascent code path
(perturb.py); the domain-reversal mode is the only one whose domain loss
gradient reaches the prompt.

Determinism: the run seed feeds separate named RNG streams for source batch
order, target batch order, and perturbation init, so modes that skip a
stream still consume the others identically.  Checkpoints carry the stream
states, letting a reloaded run continue bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import discriminator as probe
from . import losses, perturb
from .discriminator import SOURCE_COL, TARGET_COL, DiscriminatorParams
from .encoder import BackboneWeights, VerbalizerHead, backward, forward
from .errors import InputError, NumericalError
from .frontend import (EmbeddedBatch, EmbeddingTable, Example,
                       PerturbationSlots, PromptParameters, apply_perturbation,
                       assemble_batch, gather_input_rows, init_prompt,
                       lifting_matrix)
from .data import DomainPair, DomainPairSpec, FewShotSplit, labels_of, verbalizer_table
from .serialize import (load_arrays, rng_from_json, rng_state_to_json,
                        save_arrays)
from .optim import Optimizer


@dataclass(frozen=True)
class MethodSpec:
    """What a training mode may touch and which losses drive it."""

    name: str
    trainable: frozenset[str]            # subset of {"prompt", "backbone"}
    uses_target: bool = False
    uses_perturbation: bool = False
    ascent: str = "none"                 # none | kl | kl+adv | xent
    outer_kl: bool = False               # add clean->perturbed KL to the task loss
    outer_adv_xent: bool = False         # add perturbed cross entropy (freelb)
    uses_discriminator: bool = False
    dann: bool = False
    no_prompt: bool = False              # plain finetuning drops the soft prompt


METHODS: dict[str, MethodSpec] = {
    "frozen": MethodSpec("frozen", frozenset()),
    "pt": MethodSpec("pt", frozenset({"prompt"})),
    "ft": MethodSpec("ft", frozenset({"backbone"}), no_prompt=True),
    "pft": MethodSpec("pft", frozenset({"prompt", "backbone"})),
    "spot": MethodSpec("spot", frozenset({"prompt"})),
    "freelb": MethodSpec("freelb", frozenset({"prompt"}), uses_perturbation=True,
                         ascent="xent", outer_adv_xent=True),
    "vat": MethodSpec("vat", frozenset({"prompt"}), uses_perturbation=True,
                      ascent="kl", outer_kl=True),
    "dann": MethodSpec("dann", frozenset({"prompt"}), uses_target=True,
                       uses_discriminator=True, dann=True),
    "optima": MethodSpec("optima", frozenset({"prompt"}), uses_target=True,
                         uses_perturbation=True, ascent="kl+adv", outer_kl=True,
                         uses_discriminator=True),
}


def method_spec(name: str) -> MethodSpec:
    try:
        return METHODS[name]
    except KeyError:
        raise InputError(f"unknown method {name!r}; valid ids: "
                         f"{', '.join(sorted(METHODS))}")


@dataclass
class TrainConfig:
    """Hyperparameters for one run; every field is config-file exposed."""

    # frozen model
    dim: int = 32
    prompt_len: int = 8
    hard_len: int = 2
    model_seed: int = 0
    prompt_init: str = "table_rows"     # table_rows | gaussian
    # pretrained-style texture of the frozen model (calibrated once against
    # the frozen default generator, then pinned)
    emb_signal: float = 0.9             # shared direction per token cluster
    emb_noise: float = 0.55             # per-token noise around it
    synonym_correlation: float = 0.0    # cos(primary, synonym) cluster dirs
    domain_offset: float = 0.6          # shared displacement of synonym clusters
    attn_scale: float = 0.3             # query/key magnitude factor
    value_residual_noise: float = 0.3   # wv/wo = I + noise of this scale
    # optimization
    batch_size: int = 16
    max_steps: int = 500
    eval_interval: int = 50
    optimizer: str = "adam"             # sgd | sgd-momentum | adam
    prompt_lr: float = 0.05
    scheduler: str = "linear-decay"     # constant | linear-decay
    disc_lr: float = 0.01
    # inner maximization
    epsilon: float = 1.0
    ascent_steps: int = 3
    ascent_lr: float = 0.5              # K * ascent_lr spans the default ball
    ascent_objective: str = "adv"       # adv | disc (same delta-gradient; see docs)
    adv_weight: float = 1.0
    kl_weight: float = 1.0
    dann_weight: float = 1.0
    # few-shot stage
    fewshot_steps: int = 100
    fewshot_eval_interval: int = 4
    fewshot_batch_size: int = 8
    # selection & seeding
    selection_metric: str = "accuracy"  # accuracy | loss
    seed: int = 1

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_steps < 0:
            raise InputError("batch_size must be positive, max_steps >= 0")
        if min(self.prompt_lr, self.disc_lr, self.ascent_lr) <= 0:
            raise InputError("learning rates must be positive")
        if self.epsilon < 0 or self.ascent_steps < 0:
            raise InputError("epsilon and ascent_steps must be >= 0")
        if self.selection_metric not in ("accuracy", "loss"):
            raise InputError("selection_metric must be accuracy or loss")
        if self.ascent_objective not in ("adv", "disc"):
            raise InputError("ascent_objective must be adv or disc")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ModelBundle:
    """The frozen pieces shared by all methods for a given task.

    The stand-in for a pretrained model: token-cluster embeddings with a
    tied verbalizer readout (each class scored by its designated prototype
    token's embedding), tempered attention, and near-identity value/output
    circuits.  Everything regenerates from (model_seed, config).
    """

    table: EmbeddingTable
    head: VerbalizerHead
    lift: np.ndarray
    backbone_seed: int
    dim: int
    n_max: int                           # input rows per example
    labels: tuple[str, ...]
    attn_scale: float = 1.0
    value_residual_noise: float | None = None

    @classmethod
    def build(cls, cfg: TrainConfig, data_spec: DomainPairSpec) -> "ModelBundle":
        from .data import TokenBlocks, toy2d_class_means
        labels = verbalizer_table(data_spec.n_classes)
        lift = lifting_matrix(cfg.dim, cfg.model_seed)
        if data_spec.task == "token-stats":
            blocks = TokenBlocks(data_spec)
            table = EmbeddingTable.create_clustered(
                data_spec.vocab_size, cfg.dim, cfg.hard_len, cfg.model_seed,
                primary_groups=blocks.indicator, synonym_groups=blocks.synonym,
                signal_scale=cfg.emb_signal, noise_scale=cfg.emb_noise,
                synonym_correlation=cfg.synonym_correlation,
                domain_offset=cfg.domain_offset)
            head_rows = table.matrix[blocks.prototype_ids()].copy()
            n_max = data_spec.seq_len
        else:
            table = EmbeddingTable.create(data_spec.vocab_size, cfg.dim,
                                          cfg.hard_len, cfg.model_seed)
            means = toy2d_class_means(data_spec.n_classes)
            head_rows = (means / np.linalg.norm(means, axis=1, keepdims=True)
                         ) @ lift
            head_rows /= np.linalg.norm(head_rows, axis=1, keepdims=True)
            n_max = 1
        head = VerbalizerHead(matrix=head_rows, labels=labels)
        return cls(table=table, head=head, lift=lift,
                   backbone_seed=cfg.model_seed, dim=cfg.dim, n_max=n_max,
                   labels=labels, attn_scale=cfg.attn_scale,
                   value_residual_noise=cfg.value_residual_noise)

    def fresh_backbone(self) -> BackboneWeights:
        return BackboneWeights.create(self.dim, self.backbone_seed,
                                      attn_scale=self.attn_scale,
                                      value_residual_noise=self.value_residual_noise)

    def total_len(self, prompt_len: int) -> int:
        return prompt_len + self.table.hard_len + self.n_max + 1

    def fresh_prompt(self, cfg: TrainConfig, spec: MethodSpec) -> PromptParameters:
        m = 0 if spec.no_prompt else cfg.prompt_len
        return init_prompt(self.table, m, cfg.prompt_init, cfg.seed)


@dataclass
class Checkpoint:
    """Everything needed to evaluate or to continue training bitwise."""

    method: str
    prompt: PromptParameters
    best_prompt: PromptParameters
    backbone: BackboneWeights
    disc: DiscriminatorParams | None
    opt_arrays: dict
    opt_meta: dict
    step: int
    best_metric: float
    best_step: int
    seed: int
    aborted: bool = False
    rng_state: dict[str, str] = field(default_factory=dict)
    ball: dict = field(default_factory=dict)
    sampler_state: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {"prompt": self.prompt.rows, "best_prompt": self.best_prompt.rows}
        arrays.update({f"backbone.{k}": v for k, v in self.backbone.as_dict().items()})
        if self.disc is not None:
            arrays.update({f"disc.{k}": v for k, v in self.disc.as_dict().items()})
        arrays.update(self.opt_arrays)
        sampler_meta = {}
        for name, (order, cursor) in self.sampler_state.items():
            sampler_meta[name] = {"cursor": cursor, "has_order": order is not None}
            if order is not None:
                arrays[f"sampler.{name}"] = np.asarray(order, dtype=np.int64)
        meta = {"kind": "checkpoint", "method": self.method, "step": self.step,
                "best_metric": self.best_metric, "best_step": self.best_step,
                "seed": self.seed, "aborted": self.aborted,
                "backbone_seed": self.backbone.seed,
                "has_disc": self.disc is not None,
                "opt_meta": self.opt_meta, "rng_state": self.rng_state,
                "ball": self.ball, "sampler": sampler_meta}
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "checkpoint":
            raise InputError(f"{path}: not a checkpoint")
        backbone = BackboneWeights(
            **{k: arrays[f"backbone.{k}"] for k in BackboneWeights.ARRAY_FIELDS},
            seed=int(meta["backbone_seed"]))
        disc = None
        if meta["has_disc"]:
            disc = DiscriminatorParams(w=arrays["disc.w"], b=arrays["disc.b"])
        opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
        sampler_state = {}
        for name, info in meta.get("sampler", {}).items():
            order = arrays.get(f"sampler.{name}") if info["has_order"] else None
            sampler_state[name] = (order, int(info["cursor"]))
        return cls(method=meta["method"], prompt=PromptParameters(arrays["prompt"]),
                   best_prompt=PromptParameters(arrays["best_prompt"]),
                   backbone=backbone, disc=disc, opt_arrays=opt_arrays,
                   opt_meta=meta["opt_meta"], step=int(meta["step"]),
                   best_metric=float(meta["best_metric"]),
                   best_step=int(meta["best_step"]), seed=int(meta["seed"]),
                   aborted=bool(meta["aborted"]), rng_state=meta["rng_state"],
                   ball=meta["ball"], sampler_state=sampler_state)


class _EpochSampler:
    """Index stream reshuffled each pass; cycles forever."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = None
        self.cursor = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while len(out) < count:
            if self.order is None or self.cursor >= self.n:
                self.order = self.rng.permutation(self.n)
                self.cursor = 0
            out.append(self.order[self.cursor])
            self.cursor += 1
        return np.asarray(out, dtype=np.int64)

    def export_state(self) -> tuple[np.ndarray | None, int]:
        return self.order, self.cursor

    def restore_state(self, order: np.ndarray | None, cursor: int) -> None:
        self.order = None if order is None else np.asarray(order, dtype=np.int64)
        self.cursor = int(cursor)


@dataclass
class TrainState:
    spec: MethodSpec
    cfg: TrainConfig
    bundle: ModelBundle
    prompt: PromptParameters
    backbone: BackboneWeights
    disc: DiscriminatorParams | None
    opt: Optimizer
    rng_delta: np.random.Generator
    step: int = 0
    aborted: bool = False

    def trainable_params(self) -> dict[str, np.ndarray]:
        params = {}
        if "prompt" in self.spec.trainable and self.prompt.length:
            params["prompt"] = self.prompt.rows
        if "backbone" in self.spec.trainable:
            params.update({f"backbone.{k}": v
                           for k, v in self.backbone.as_dict().items()})
        return params

    def apply_params(self, params: dict[str, np.ndarray]) -> None:
        if "prompt" in params:
            self.prompt = PromptParameters(params["prompt"])
        if "backbone.wq" in params:
            for name in BackboneWeights.ARRAY_FIELDS:
                setattr(self.backbone, name, params[f"backbone.{name}"])


def _assemble(state: TrainState, examples: list[Example]) -> EmbeddedBatch:
    bundle, cfg = state.bundle, state.cfg
    return assemble_batch(state.prompt, bundle.table, examples, bundle.lift,
                          bundle.total_len(state.prompt.length))


def _prompt_slice(d_embeddings: np.ndarray, m: int) -> np.ndarray:
    return d_embeddings[:, :m, :].sum(axis=0)


def _ascend_delta(state: TrainState, batch: EmbeddedBatch,
                  slots: PerturbationSlots, p_clean: np.ndarray,
                  labels: np.ndarray) -> perturb.PerturbationBatch:
    """Inner maximization for the current source batch."""
    cfg, spec = state.cfg, state.spec
    shape = (batch.batch_size, slots.n_max, batch.dim)
    pb = perturb.init_delta(shape, cfg.epsilon, state.rng_delta,
                            step_size=cfg.ascent_lr, steps=cfg.ascent_steps,
                            valid=slots.valid)
    if cfg.epsilon == 0.0 or cfg.ascent_steps == 0:
        return pb

    def grad_fn(delta: np.ndarray) -> np.ndarray:
        fr = forward(apply_perturbation(batch, delta, slots),
                     state.backbone, state.bundle.head)
        if spec.ascent == "xent":
            dlogits = fr.probs - losses.onehot(labels, fr.probs.shape[1])
            dpooled = None
        else:
            dlogits = cfg.kl_weight * (fr.probs - p_clean)
            dpooled = None
            # ascent_objective "disc" selects the same update: the full
            # probe loss's only delta-dependent term is the adversarial one
            if "adv" in spec.ascent and cfg.adv_weight != 0.0:
                dprobs = probe.softmax_domain(fr.pooled, state.disc)
                dl = cfg.adv_weight * (dprobs - losses.onehot(
                    np.full(fr.batch_size, SOURCE_COL), 2))
                dpooled = probe.pooled_grads(dl, state.disc)
        grads = backward(fr, state.backbone, state.bundle.head,
                         dlogits=dlogits, dpooled=dpooled)
        return gather_input_rows(grads.d_embeddings, slots)

    return perturb.ascend(pb, grad_fn)


def domain_prompt_gradient(spec: MethodSpec, state: TrainState,
                           fr_source, fr_target, dann_weight: float) -> np.ndarray:
    """Prompt gradient contributed by the domain losses under this mode.

    Only the reversal mode routes domain losses through the encoder into the
    prompt; the perturbation modes aim them at delta and the probe, so their
    contribution to the prompt is identically zero.
    """
    m = state.prompt.length
    if not spec.dann:
        return np.zeros((m, state.bundle.dim))
    B_s = fr_source.batch_size
    B_t = fr_target.batch_size
    probs_s = probe.softmax_domain(fr_source.pooled, state.disc)
    probs_t = probe.softmax_domain(fr_target.pooled, state.disc)
    dl_s = probe.logit_grads(probs_s, SOURCE_COL)
    dl_t = probe.logit_grads(probs_t, TARGET_COL)
    seed_s = -dann_weight * probe.pooled_grads(dl_s, state.disc)
    seed_t = -dann_weight * probe.pooled_grads(dl_t, state.disc)
    g_s = backward(fr_source, state.backbone, state.bundle.head, dpooled=seed_s)
    g_t = backward(fr_target, state.backbone, state.bundle.head, dpooled=seed_t)
    return (_prompt_slice(g_s.d_embeddings, m) + _prompt_slice(g_t.d_embeddings, m))


def train_step(state: TrainState, source_examples: list[Example],
               target_examples: list[Example] | None) -> dict:
    """One alternating update; returns the step's loss terms."""
    spec, cfg, bundle = state.spec, state.cfg, state.bundle
    labels = labels_of(source_examples)
    if spec.uses_target and (target_examples is None or
                             len(target_examples) != len(source_examples)):
        raise InputError("paired source/target batches must have equal size")

    batch_s = _assemble(state, source_examples)
    fr_clean = forward(batch_s, state.backbone, bundle.head)
    terms = {"loss_xent": losses.xent_mean(fr_clean.probs, labels)}

    # inner maximization
    fr_pert = None
    perturbation_live = (spec.uses_perturbation and cfg.epsilon > 0.0)
    if spec.uses_perturbation:
        slots = PerturbationSlots.for_batch(batch_s)
        pb = _ascend_delta(state, batch_s, slots, fr_clean.probs, labels)
        if perturbation_live:
            fr_pert = forward(apply_perturbation(batch_s, pb.delta, slots),
                              state.backbone, bundle.head)

    fr_target = None
    if spec.uses_target:
        batch_t = _assemble(state, target_examples)
        fr_target = forward(batch_t, state.backbone, bundle.head)

    # outer loss gradients for the trainable sets
    grad_accum = _GradAccum(state)
    grad_accum.add_backward(fr_clean, dlogits=losses.xent_grad_logits(
        fr_clean.probs, labels))
    total = terms["loss_xent"]
    if spec.outer_kl:
        if fr_pert is not None:
            kl = losses.kl_consistency(fr_clean.probs, fr_pert.probs)
            grad_accum.add_backward(fr_pert, dlogits=cfg.kl_weight *
                                    losses.kl_grad_pert_logits(fr_clean.probs,
                                                               fr_pert.probs))
        else:
            kl = 0.0
        terms["loss_kl"] = kl
        total += cfg.kl_weight * kl
    if spec.outer_adv_xent:
        if fr_pert is not None:
            adv_xe = losses.xent_mean(fr_pert.probs, labels)
            grad_accum.add_backward(fr_pert, dlogits=losses.xent_grad_logits(
                fr_pert.probs, labels))
        else:
            adv_xe = terms["loss_xent"]
            grad_accum.add_backward(fr_clean, dlogits=losses.xent_grad_logits(
                fr_clean.probs, labels))
        terms["loss_adv_xent"] = adv_xe
        total += adv_xe
    if spec.dann:
        z_s = probe.discriminate(fr_clean.pooled, state.disc)
        z_t = probe.discriminate(fr_target.pooled, state.disc)
        dd = losses.domain_confusion_loss(z_s, z_t)
        terms["loss_domain"] = dd
        total -= cfg.dann_weight * dd
        grad_accum.add_prompt(domain_prompt_gradient(
            spec, state, fr_clean, fr_target, cfg.dann_weight))
    terms["loss_total"] = total
    if not np.isfinite(total):
        raise NumericalError("non-finite training loss", step=state.step)

    params = state.trainable_params()
    if params:
        state.apply_params(state.opt.step(params, grad_accum.collect(params)))

    # probe update with the perturbation held fixed
    if spec.uses_discriminator:
        probs_clean = probe.softmax_domain(fr_clean.pooled, state.disc)
        if spec.dann:
            seeds = [(fr_clean.pooled, probe.logit_grads(probs_clean, SOURCE_COL)),
                     (fr_target.pooled, probe.logit_grads(
                         probe.softmax_domain(fr_target.pooled, state.disc),
                         TARGET_COL))]
            terms["loss_disc"] = terms["loss_domain"]
        else:
            pooled_pert = fr_pert.pooled if fr_pert is not None else fr_clean.pooled
            probs_pert = probe.softmax_domain(pooled_pert, state.disc)
            probs_t = probe.softmax_domain(fr_target.pooled, state.disc)
            seeds = [(pooled_pert, probe.logit_grads(probs_pert, SOURCE_COL)),
                     (fr_clean.pooled, probe.logit_grads(probs_clean, SOURCE_COL)),
                     (fr_target.pooled, probe.logit_grads(probs_t, TARGET_COL))]
            terms["loss_disc"] = losses.disc_loss(
                probe.discriminate(fr_clean.pooled, state.disc),
                probe.discriminate(pooled_pert, state.disc),
                probe.discriminate(fr_target.pooled, state.disc))
        grads = {"w": np.zeros_like(state.disc.w), "b": np.zeros_like(state.disc.b)}
        for pooled, dl in seeds:
            part = probe.param_grads(pooled, dl)
            grads["w"] += part["w"]
            grads["b"] += part["b"]
        state.disc = probe.update(state.disc, grads, cfg.disc_lr)

    state.step += 1
    return terms


class _GradAccum:
    """Accumulates gradients for whatever parameter groups are trainable."""

    def __init__(self, state: TrainState):
        self.state = state
        self.d_prompt = np.zeros_like(state.prompt.rows)
        self.d_backbone = {k: np.zeros_like(v)
                           for k, v in state.backbone.as_dict().items()}
        self.track_backbone = "backbone" in state.spec.trainable

    def add_backward(self, fr, dlogits=None, dpooled=None) -> None:
        grads = backward(fr, self.state.backbone, self.state.bundle.head,
                         dlogits=dlogits, dpooled=dpooled)
        self.d_prompt += _prompt_slice(grads.d_embeddings,
                                       self.state.prompt.length)
        if self.track_backbone:
            for k in self.d_backbone:
                self.d_backbone[k] += grads.d_weights[k]

    def add_prompt(self, grad: np.ndarray) -> None:
        self.d_prompt += grad

    def collect(self, params: dict) -> dict[str, np.ndarray]:
        out = {}
        if "prompt" in params:
            out["prompt"] = self.d_prompt
        for name in params:
            if name.startswith("backbone."):
                out[name] = self.d_backbone[name[len("backbone."):]]
        return out


def predict_probs(examples: list[Example], prompt: PromptParameters,
                  bundle: ModelBundle, backbone: BackboneWeights,
                  batch_size: int = 64) -> np.ndarray:
    """Forward a dataset in fixed-size chunks; no parameters change."""
    chunks = []
    for start in range(0, len(examples), batch_size):
        batch = assemble_batch(prompt, bundle.table,
                               examples[start:start + batch_size], bundle.lift,
                               bundle.total_len(prompt.length))
        chunks.append(forward(batch, backbone, bundle.head).probs)
    return np.concatenate(chunks, axis=0)


def evaluate_split(examples: list[Example], prompt: PromptParameters,
                   bundle: ModelBundle, backbone: BackboneWeights) -> dict:
    probs = predict_probs(examples, prompt, bundle, backbone)
    labels = labels_of(examples)
    preds = np.argmax(probs, axis=1)
    return {"accuracy": float(np.mean(preds == labels)),
            "loss": losses.xent_mean(probs, labels)}


def _selection_value(metrics: dict, metric: str) -> float:
    # larger is better; flip sign for loss
    return metrics["accuracy"] if metric == "accuracy" else -metrics["loss"]


def run_training(spec: MethodSpec, cfg: TrainConfig, bundle: ModelBundle,
                 train_set: list[Example], val_set: list[Example],
                 target_pool: list[Example] | None = None,
                 init: Checkpoint | None = None,
                 resume: bool = False,
                 max_steps: int | None = None,
                 schedule_steps: int | None = None,
                 eval_interval: int | None = None,
                 batch_size: int | None = None,
                 log: list | None = None,
                 on_step=None) -> Checkpoint:
    """Train `spec` on train_set with periodic model selection on val_set.

    With resume=True the RNG streams, optimizer slots, step counter, and
    best-so-far record are restored from `init`, so a checkpointed run
    continues exactly as if it had never stopped.
    """
    if not train_set:
        raise InputError("empty training set")
    if spec.uses_target and not target_pool:
        raise InputError(f"method {spec.name} needs an unlabeled target pool")
    if resume and init is None:
        raise InputError("resume requires a checkpoint")
    max_steps = cfg.max_steps if max_steps is None else max_steps
    eval_interval = cfg.eval_interval if eval_interval is None else eval_interval
    batch_size = cfg.batch_size if batch_size is None else batch_size

    if resume and init.rng_state:
        rng_src = rng_from_json(init.rng_state["src"])
        rng_tgt = rng_from_json(init.rng_state["tgt"])
        rng_delta = rng_from_json(init.rng_state["delta"])
    else:
        rng_src = np.random.default_rng([cfg.seed, 0xB5])
        rng_tgt = np.random.default_rng([cfg.seed, 0xB7])
        rng_delta = np.random.default_rng([cfg.seed, 0xDE])

    if init is not None:
        prompt = init.prompt.copy()
        backbone = init.backbone.copy()
        disc = init.disc.copy() if init.disc is not None else None
        if spec.uses_discriminator and disc is None:
            disc = DiscriminatorParams.create(cfg.dim, cfg.seed)
    else:
        prompt = bundle.fresh_prompt(cfg, spec)
        backbone = bundle.fresh_backbone()
        disc = (DiscriminatorParams.create(cfg.dim, cfg.seed)
                if spec.uses_discriminator else None)

    opt = Optimizer(cfg.optimizer, cfg.prompt_lr, cfg.scheduler,
                    total_steps=max(schedule_steps or max_steps, 1))
    state = TrainState(spec=spec, cfg=cfg, bundle=bundle, prompt=prompt,
                       backbone=backbone, disc=disc, opt=opt,
                       rng_delta=rng_delta)
    if resume:
        opt.load_state(init.opt_arrays, init.opt_meta)
        state.step = init.step

    src_sampler = _EpochSampler(len(train_set), rng_src)
    tgt_sampler = (_EpochSampler(len(target_pool), rng_tgt)
                   if spec.uses_target else None)
    if resume:
        if "src" in init.sampler_state:
            src_sampler.restore_state(*init.sampler_state["src"])
        if tgt_sampler is not None and "tgt" in init.sampler_state:
            tgt_sampler.restore_state(*init.sampler_state["tgt"])

    ball_before = (perturb.ball_monitor.projections, perturb.ball_monitor.violations)
    if resume:
        best = {"metric": init.best_metric, "step": init.best_step,
                "prompt": init.best_prompt.rows.copy()}
    else:
        best = {"metric": -np.inf, "step": 0, "prompt": state.prompt.rows.copy()}

    def run_eval(step: int, record: dict | None) -> None:
        metrics = evaluate_split(val_set, state.prompt, bundle, state.backbone)
        value = _selection_value(metrics, cfg.selection_metric)
        if value > best["metric"]:
            best.update(metric=value, step=step, prompt=state.prompt.rows.copy())
        if record is not None:
            record["val_accuracy"] = metrics["accuracy"]
            record["val_loss"] = metrics["loss"]

    if max_steps == state.step:
        run_eval(state.step, None)
    while state.step < max_steps:
        src_idx = src_sampler.take(batch_size)
        source_batch = [train_set[i] for i in src_idx]
        target_batch = None
        if tgt_sampler is not None:
            target_batch = [target_pool[i] for i in tgt_sampler.take(batch_size)]
        try:
            terms = train_step(state, source_batch, target_batch)
            record = {"step": state.step,
                      **{k: float(v) for k, v in terms.items()}}
            if state.step % eval_interval == 0 or state.step == max_steps:
                run_eval(state.step, record)
        except NumericalError:
            state.aborted = True
            break
        if log is not None:
            log.append(record)
        if on_step is not None:
            on_step(state, record)
    if not state.aborted and state.step % eval_interval != 0:
        run_eval(state.step, None)

    ball_after = (perturb.ball_monitor.projections, perturb.ball_monitor.violations)
    sampler_state = {"src": src_sampler.export_state()}
    if tgt_sampler is not None:
        sampler_state["tgt"] = tgt_sampler.export_state()
    return Checkpoint(
        method=spec.name, prompt=state.prompt,
        best_prompt=PromptParameters(best["prompt"]),
        backbone=state.backbone, disc=state.disc,
        opt_arrays=opt.state_arrays(), opt_meta=opt.state_meta(),
        step=state.step, best_metric=float(best["metric"]),
        best_step=int(best["step"]), seed=cfg.seed, aborted=state.aborted,
        rng_state={"src": rng_state_to_json(rng_src),
                   "tgt": rng_state_to_json(rng_tgt),
                   "delta": rng_state_to_json(rng_delta)},
        ball={"projections": ball_after[0] - ball_before[0],
              "violations": ball_after[1] - ball_before[1]},
        sampler_state=sampler_state)


def pretrain(pair: DomainPair, method: str, cfg: TrainConfig,
             bundle: ModelBundle | None = None,
             log: list | None = None, on_step=None) -> Checkpoint:
    """Source-domain training (plus unlabeled target data when the method
    adapts domains), selecting on the source validation split."""
    spec = method_spec(method)
    bundle = bundle or ModelBundle.build(cfg, pair.spec)
    target = pair.target_pool if spec.uses_target else None
    return run_training(spec, cfg, bundle, pair.source_train, pair.source_val,
                        target_pool=target, log=log, on_step=on_step)


def fewshot_finetune(checkpoint: Checkpoint, split: FewShotSplit,
                     cfg: TrainConfig, bundle: ModelBundle,
                     log: list | None = None) -> Checkpoint:
    """Prompt-only tuning from a pretrained prompt on a few-shot split,
    selecting on the split's dev set."""
    for part, name in ((split.train, "train"), (split.dev, "dev")):
        present = {ex.label for ex in part}
        if present != set(range(bundle.head.n_classes)):
            raise InputError(f"few-shot {name} split missing classes "
                             f"{sorted(set(range(bundle.head.n_classes)) - present)}")
    spec = method_spec("pt")
    start = replace(checkpoint, prompt=checkpoint.best_prompt,
                    method="pt", opt_arrays={}, opt_meta={})
    if cfg.fewshot_steps == 0:
        return checkpoint
    return run_training(spec, cfg, bundle, split.train, split.dev,
                        init=start, max_steps=cfg.fewshot_steps,
                        eval_interval=cfg.fewshot_eval_interval,
                        batch_size=cfg.fewshot_batch_size, log=log)
