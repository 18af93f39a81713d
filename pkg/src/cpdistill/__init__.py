"""Consistency-distilled few-step policies at desk scale.

Train an EDM-style multi-step diffusion teacher on scripted-expert data,
distill it into a one/few-step consistency student, and verify closed-loop
parity while cutting network evaluations per action by orders of magnitude.
"""

from .data import ExpertDataset, NormStats, bimodal_dataset, generate_dataset
from .distill import DistillConfig, Triple, Variant, combined_loss, ctm_loss, distill, sample_triple
from .envs import EnvSpec, make_env, scripted_expert
from .nets import CondMlp, NumericsError, TimeEmbedding
from .optim import AdamState, adam_step, gradients
from .rollout import EpisodeResult, ExpertPolicy, StudentPolicy, TeacherPolicy, evaluate, rollout
from .sampler import InferenceReport, NfeMeter, SamplerConfig, bench, chain_times, multi_step, single_step
from .schedule import ConfigError, NoiseSchedule
from .student import StudentModel, warm_start
from .teacher import TeacherModel, dsm_loss, heun_step, huber_c, noise_sample, pfode_derivative, pseudo_huber, solve, train_teacher

__all__ = [
    "AdamState",
    "CondMlp",
    "ConfigError",
    "DistillConfig",
    "EnvSpec",
    "EpisodeResult",
    "ExpertDataset",
    "ExpertPolicy",
    "InferenceReport",
    "NfeMeter",
    "NoiseSchedule",
    "NormStats",
    "NumericsError",
    "SamplerConfig",
    "StudentModel",
    "StudentPolicy",
    "TeacherModel",
    "TeacherPolicy",
    "TimeEmbedding",
    "Triple",
    "Variant",
    "adam_step",
    "bench",
    "bimodal_dataset",
    "chain_times",
    "combined_loss",
    "ctm_loss",
    "distill",
    "dsm_loss",
    "evaluate",
    "generate_dataset",
    "gradients",
    "heun_step",
    "huber_c",
    "make_env",
    "multi_step",
    "noise_sample",
    "pfode_derivative",
    "pseudo_huber",
    "rollout",
    "sample_triple",
    "scripted_expert",
    "single_step",
    "solve",
    "train_teacher",
    "warm_start",
]
