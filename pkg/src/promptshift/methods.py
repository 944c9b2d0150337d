"""Method-level entry points and the few-shot evaluation protocol.

All comparison methods share the trainer, model, data, and metric stack;
they differ only in their MethodSpec wiring (see training.METHODS).  This
module adds the zero-training baseline, convenience trainers, checkpoint
evaluation into RunReports, and the 16-splits x 3-seeds protocol.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .data import DomainPair, FewShotSplit, labels_of, sample_fewshot
from .errors import InputError
from .evaluation import RunReport, compute_metrics
from .training import (Checkpoint, ModelBundle, TrainConfig, fewshot_finetune,
                       method_spec, predict_probs, pretrain, run_training,
                       domain_prompt_gradient, TrainState)
from .encoder import forward
from .frontend import Example, PromptParameters
from .optim import Optimizer


def frozen_eval(examples: list[Example], cfg: TrainConfig, bundle: ModelBundle,
                config_hash: str = "", predictions_ref: str | None = None
                ) -> RunReport:
    """No training: argmax prediction with the freshly initialized prompt."""
    spec = method_spec("frozen")
    prompt = bundle.fresh_prompt(cfg, spec)
    backbone = bundle.fresh_backbone()
    probs = predict_probs(examples, prompt, bundle, backbone)
    return compute_metrics(np.argmax(probs, axis=1), labels_of(examples),
                           n_classes=bundle.head.n_classes, method="frozen",
                           config_hash=config_hash, seed=cfg.seed,
                           predictions_ref=predictions_ref)


def train_single_domain(method: str, train_set: list[Example],
                        val_set: list[Example], cfg: TrainConfig,
                        bundle: ModelBundle, log: list | None = None
                        ) -> Checkpoint:
    """pt / ft / pft: supervised tuning with no transfer or target data."""
    if method not in ("pt", "ft", "pft"):
        raise InputError(f"{method!r} is not a single-domain trainer")
    return run_training(method_spec(method), cfg, bundle, train_set, val_set,
                        log=log)


def spot_transfer(pair: DomainPair, split: FewShotSplit, cfg: TrainConfig,
                  bundle: ModelBundle) -> Checkpoint:
    """Pretrain the prompt on source data only, then few-shot finetune."""
    pretrained = pretrain(pair, "spot", cfg, bundle)
    return fewshot_finetune(pretrained, split, cfg, bundle)


def evaluate_checkpoint(checkpoint: Checkpoint, examples: list[Example],
                        bundle: ModelBundle, config_hash: str = "",
                        sample_index: int | None = None,
                        predictions_ref: str | None = None,
                        use_best: bool = True) -> RunReport:
    prompt = checkpoint.best_prompt if use_best else checkpoint.prompt
    probs = predict_probs(examples, prompt, bundle, checkpoint.backbone)
    return compute_metrics(np.argmax(probs, axis=1), labels_of(examples),
                           n_classes=bundle.head.n_classes,
                           method=checkpoint.method, config_hash=config_hash,
                           seed=checkpoint.seed, sample_index=sample_index,
                           predictions_ref=predictions_ref)


def zero_shot_reports(checkpoints: dict[int, Checkpoint], pair: DomainPair,
                      bundle: ModelBundle, config_hash: str = ""
                      ) -> list[RunReport]:
    """Evaluate each pretrained seed's selected prompt on the target eval set."""
    return [evaluate_checkpoint(checkpoints[seed], pair.target_eval, bundle,
                                config_hash=config_hash)
            for seed in sorted(checkpoints)]


def _fewshot_job(args) -> RunReport:
    checkpoint, split, cfg, bundle, eval_examples, config_hash = args
    # key the finetuning streams to the pretraining seed so each of the
    # three models owns its trajectory, and reports carry that seed
    import dataclasses
    job_cfg = dataclasses.replace(cfg, seed=checkpoint.seed)
    tuned = fewshot_finetune(checkpoint, split, job_cfg, bundle)
    report = evaluate_checkpoint(tuned, eval_examples, bundle,
                                 config_hash=config_hash,
                                 sample_index=split.sample_index)
    # few-shot tuning itself is always prompt-only; the report identifies
    # the pipeline by its pretraining method
    report.method = checkpoint.method
    report.seed = checkpoint.seed
    return report


def fewshot_protocol(pair: DomainPair, checkpoints: dict[int, Checkpoint],
                     cfg: TrainConfig, bundle: ModelBundle,
                     n_splits: int = 16, split_seed: int = 0,
                     config_hash: str = "", workers: int = 1
                     ) -> list[RunReport]:
    """16 sampled splits x the pretrained seeds, one RunReport per run.

    Each job is independent; results are ordered by (sample_index, seed)
    regardless of worker scheduling.
    """
    jobs = []
    for sample_index in range(1, n_splits + 1):
        split = sample_fewshot(pair.target_pool, pair.target_pool_labels,
                               pair.spec.n_classes, sample_index, split_seed)
        for seed in sorted(checkpoints):
            jobs.append((checkpoints[seed], split, cfg, bundle,
                         pair.target_eval, config_hash))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_fewshot_job, jobs))
    else:
        reports = [_fewshot_job(job) for job in jobs]
    return sorted(reports, key=lambda r: (r.sample_index, r.seed))


def prompt_domain_grad(method: str, cfg: TrainConfig, bundle: ModelBundle,
                       prompt: PromptParameters, backbone, disc,
                       source_examples: list[Example],
                       target_examples: list[Example]) -> np.ndarray:
    """Gradient the domain losses contribute to the prompt under `method`.

    Exercises the same assembly the trainer uses: zero by construction for
    the perturbation methods, encoder-backpropagated for the reversal mode.
    """
    spec = method_spec(method)
    state = TrainState(spec=spec, cfg=cfg, bundle=bundle, prompt=prompt,
                       backbone=backbone, disc=disc,
                       opt=Optimizer(cfg.optimizer, cfg.prompt_lr),
                       rng_delta=np.random.default_rng(0))
    from .training import _assemble
    fr_s = forward(_assemble(state, source_examples), backbone, bundle.head)
    fr_t = forward(_assemble(state, target_examples), backbone, bundle.head)
    return domain_prompt_gradient(spec, state, fr_s, fr_t, cfg.dann_weight)
