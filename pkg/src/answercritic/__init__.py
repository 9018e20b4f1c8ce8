"""Self-critical, semi-supervised answer+rationale training on a synthetic
shape-world VQA task, with a brute-force verification oracle."""

from .decoding import Candidate, CandidateSet, beam_search, build_candidate_set, greedy
from .estimator import SelfCriticalExplainer, check_samples, world_from_samples
from .losses import LossBreakdown, RewardRecord
from .metrics import EvalPair, MetricReport, accuracy, bleu, build_report, cider, rouge_l
from .microworld import (
    Sample,
    Scene,
    SceneObject,
    WorldConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .model import FeatureSpace, ModelConfig, PrefixLM
from .prompts import PromptSequence, TemplateKind
from .runconfig import RunConfig, TrainConfig, load_run_config
from .trainer import EvalOutcome, InferResult, Trainer, evaluate, infer, predict_batch
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CandidateSet",
    "EvalOutcome",
    "EvalPair",
    "FeatureSpace",
    "InferResult",
    "LossBreakdown",
    "MetricReport",
    "ModelConfig",
    "PrefixLM",
    "PromptSequence",
    "RewardRecord",
    "RunConfig",
    "Sample",
    "Scene",
    "SceneObject",
    "SelfCriticalExplainer",
    "TemplateKind",
    "TrainConfig",
    "Trainer",
    "Vocabulary",
    "WorldConfig",
    "accuracy",
    "beam_search",
    "bleu",
    "build_candidate_set",
    "build_report",
    "check_samples",
    "cider",
    "evaluate",
    "generate_dataset",
    "greedy",
    "infer",
    "load_dataset",
    "load_run_config",
    "predict_batch",
    "rouge_l",
    "save_dataset",
    "world_from_samples",
    "__version__",
]
