"""promptshift: a desk-scale lab for domain-adaptive soft-prompt tuning.

A frozen single-block attention encoder is steered by trainable soft-prompt
rows; unlabeled target-domain data shapes adversarially optimized input
perturbations that regularize the prompt toward decision boundaries that
survive the domain shift.  The package ships the trainer, the comparison
methods, synthetic two-domain task generators, and the few-shot evaluation
protocol, all reproducible bit-for-bit from seeds.
"""

from .data import (DomainPair, DomainPairSpec, FewShotSplit, generate_pair,
                   load_jsonl, sample_fewshot, save_jsonl, verbalizer_table)
from .discriminator import DiscriminatorParams, discriminate
from .encoder import BackboneWeights, VerbalizerHead, backward, forward
from .errors import ConfigError, InputError, NumericalError
from .evaluation import (AggregateReport, RunReport, aggregate,
                         compute_metrics, tfidf_class_similarity, ttest)
from .frontend import (EmbeddedBatch, EmbeddingTable, Example,
                       PromptParameters, apply_perturbation, assemble,
                       assemble_batch, embed, init_prompt, strip_by_role)
from .methods import (evaluate_checkpoint, fewshot_protocol, frozen_eval,
                      spot_transfer, train_single_domain, zero_shot_reports)
from .perturb import PerturbationBatch, ascend, init_delta, project
from .training import (METHODS, Checkpoint, MethodSpec, ModelBundle,
                       TrainConfig, fewshot_finetune, method_spec, pretrain,
                       run_training, train_step)

__version__ = "0.1.0"
