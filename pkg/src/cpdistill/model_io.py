"""Self-describing model checkpoints on top of the binary parameter format.

Network weights live under ``param/``; the schedule, architecture, and (for
students) the distillation configuration are embedded as reserved scalar
entries so a checkpoint alone reconstructs the model. ``meta/kind``
distinguishes teacher from student files.
"""

from __future__ import annotations

import torch

from .checkpoint import CheckpointError, load_into, load_params, save_params, scalar
from .distill import DistillConfig, Variant
from .schedule import NoiseSchedule
from .student import StudentModel
from .teacher import TeacherModel

KIND_TEACHER = 0.0
KIND_STUDENT = 1.0
_VARIANTS = list(Variant)


def _common_entries(model) -> dict:
    sched = model.schedule
    return {
        "schedule/t_min": sched.t_min,
        "schedule/t_max": sched.t_max,
        "schedule/rho": sched.rho,
        "schedule/n": float(sched.n),
        "schedule/sigma_data": sched.sigma_data,
        "arch/obs_dim": float(model.obs_dim),
        "arch/action_dim": float(model.action_dim),
        "arch/emb_width": float(model.emb_width),
        "arch/dropout": model.net.p,
        "arch/hidden": torch.tensor(
            [float(lin.out_features) for lin in model.net.layers]
        ),
    }


def _param_entries(model) -> dict:
    return {f"param/{k}": v for k, v in model.named_parameters()}


def save_teacher(model: TeacherModel, path) -> None:
    entries = {"meta/kind": KIND_TEACHER, **_common_entries(model), **_param_entries(model)}
    save_params(entries, path)


def save_student(model: StudentModel, cfg: DistillConfig, path) -> None:
    entries = {
        "meta/kind": KIND_STUDENT,
        **_common_entries(model),
        "arch/s_emb_width": float(model.s_emb_width),
        "distill/alpha": cfg.alpha,
        "distill/beta": cfg.beta,
        "distill/variant": float(_VARIANTS.index(cfg.variant)),
        "distill/max_span": float(cfg.max_span),
        "distill/dropout_s0": float(cfg.dropout_s0),
        **_param_entries(model),
    }
    save_params(entries, path)


def checkpoint_kind(path) -> str:
    params = load_params(path)
    return "student" if scalar(params, "meta/kind") == KIND_STUDENT else "teacher"


def _schedule_from(params) -> NoiseSchedule:
    return NoiseSchedule(
        t_min=scalar(params, "schedule/t_min"),
        t_max=scalar(params, "schedule/t_max"),
        rho=scalar(params, "schedule/rho"),
        n=int(scalar(params, "schedule/n")),
        sigma_data=scalar(params, "schedule/sigma_data"),
    )


def _weights_from(params) -> dict:
    return {k[len("param/") :]: v for k, v in params.items() if k.startswith("param/")}


def load_teacher(path) -> TeacherModel:
    params = load_params(path)
    if scalar(params, "meta/kind") != KIND_TEACHER:
        raise CheckpointError(f"{path}: not a teacher checkpoint")
    if "arch/hidden" not in params:
        raise CheckpointError(f"{path}: checkpoint is missing entry 'arch/hidden'")
    model = TeacherModel(
        _schedule_from(params),
        obs_dim=int(scalar(params, "arch/obs_dim")),
        action_dim=int(scalar(params, "arch/action_dim")),
        hidden=[int(v) for v in params["arch/hidden"].tolist()],
        emb_width=int(scalar(params, "arch/emb_width")),
        p=scalar(params, "arch/dropout"),
        rng=torch.Generator().manual_seed(0),
    )
    load_into(model, _weights_from(params))
    return model


def load_student(path) -> tuple[StudentModel, DistillConfig]:
    params = load_params(path)
    if scalar(params, "meta/kind") != KIND_STUDENT:
        raise CheckpointError(f"{path}: not a student checkpoint")
    if "arch/hidden" not in params:
        raise CheckpointError(f"{path}: checkpoint is missing entry 'arch/hidden'")
    model = StudentModel(
        _schedule_from(params),
        obs_dim=int(scalar(params, "arch/obs_dim")),
        action_dim=int(scalar(params, "arch/action_dim")),
        hidden=[int(v) for v in params["arch/hidden"].tolist()],
        emb_width=int(scalar(params, "arch/emb_width")),
        s_emb_width=int(scalar(params, "arch/s_emb_width")),
        p=scalar(params, "arch/dropout"),
        rng=torch.Generator().manual_seed(0),
    )
    load_into(model, _weights_from(params))
    cfg = DistillConfig(
        alpha=scalar(params, "distill/alpha"),
        beta=scalar(params, "distill/beta"),
        variant=_VARIANTS[int(scalar(params, "distill/variant"))],
        max_span=int(scalar(params, "distill/max_span")),
        dropout_s0=bool(scalar(params, "distill/dropout_s0")),
    )
    return model, cfg
