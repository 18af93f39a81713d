"""End-to-end workflows: data generation, teacher training, distillation,
closed-loop evaluation, latency benchmarking, and the six ablation studies.

Every command reads one config file, derives all randomness from the run seed,
and writes its artifacts under --out together with a manifest of content
hashes; re-running a command with the same config and seed reproduces its
artifacts bit-exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import RunConfig, parse_config
from .data import ExpertDataset, bimodal_dataset, generate_dataset
from .distill import DistillConfig, Variant, distill
from .envs import make_env
from .model_io import (
    checkpoint_kind,
    load_student,
    load_teacher,
    save_student,
    save_teacher,
)
from .nets import NumericsError
from .rollout import StudentPolicy, TeacherPolicy, evaluate
from .sampler import InferenceReport, LatencyStats, bench, multi_step
from .schedule import ConfigError
from .teacher import TeacherModel, train_teacher

STUDIES = (
    "objective",
    "init-variance",
    "chaining",
    "teacher-quality",
    "dropout",
    "consistency-training",
)


class MetricsLog:
    """Append-only CSV with one flush per row."""

    def __init__(self, path: Path, fieldnames: list[str]):
        self.fieldnames = fieldnames
        self.fh = open(path, "w")
        self.fh.write(",".join(fieldnames) + "\n")
        self.fh.flush()

    def write(self, row: dict) -> None:
        self.fh.write(",".join(_fmt(row[k]) for k in self.fieldnames) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(out: Path, cfg: RunConfig, command: str, artifacts: list[Path]) -> None:
    manifest_path = out / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    entries = manifest.setdefault("artifacts", {})
    for p in artifacts:
        entries[str(p.relative_to(out))] = _sha256(p)
    manifest["last_command"] = command
    manifest["config_digest"] = cfg.digest()
    manifest["seed"] = cfg.seed
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing prerequisite artifact {path.name!r}: {hint}")
    return path


def _load_dataset(out: Path) -> ExpertDataset:
    return ExpertDataset.load(_require(out / "dataset.bin", "run gen-data first"))


def _eval_threads() -> int:
    return max(1, int(os.environ.get("CP_THREADS", "1")))


def cmd_gen_data(cfg: RunConfig, out: Path) -> Path:
    if cfg.task_id == "bimodal1d":
        ds = bimodal_dataset(
            cfg.bimodal_samples, cfg.seed, mu=cfg.bimodal_mu,
            sigma=cfg.bimodal_sigma, weight=cfg.bimodal_weight,
        )
    else:
        env = make_env(cfg.task_id)
        ds = generate_dataset(env, cfg.episodes, cfg.seed, horizon=cfg.horizon)
    path = out / "dataset.bin"
    ds.save(path)
    print(f"wrote {path} ({len(ds.obs)} pairs, sigma_data={ds.sigma_data:.4f})")
    _update_manifest(out, cfg, "gen-data", [path])
    return path


def _train_teacher_on(
    cfg: RunConfig, ds: ExpertDataset, snapshot_fracs=()
) -> tuple[TeacherModel, list[dict], dict]:
    x0, obs = ds.pools()
    schedule = cfg.schedule(sigma_data=ds.sigma_data)
    return train_teacher(
        x0, obs, schedule,
        hidden=cfg.hidden, emb_width=cfg.emb_width, dropout_p=cfg.teacher_dropout,
        lr=cfg.teacher_lr, batch_size=cfg.teacher_batch, steps=cfg.teacher_steps,
        seed=cfg.seed, snapshot_fracs=snapshot_fracs,
    )


def cmd_train_teacher(cfg: RunConfig, out: Path) -> Path:
    ds = _load_dataset(out)
    model, metrics, _ = _train_teacher_on(cfg, ds)
    path = out / "teacher.ckpt"
    save_teacher(model, path)
    log = MetricsLog(out / "teacher_metrics.csv", ["step", "loss_dsm", "grad_norm", "wall_s"])
    for row in metrics:
        log.write(row)
    log.close()
    print(f"wrote {path} (final DSM loss {metrics[-1]['loss_dsm']:.5f})")
    _update_manifest(out, cfg, "train-teacher", [path, out / "teacher_metrics.csv"])
    return path


def _distill_on(
    cfg: RunConfig,
    ds: ExpertDataset,
    teacher: TeacherModel | None,
    dcfg: DistillConfig,
    seed: int | None = None,
):
    x0, obs = ds.pools()
    return distill(
        teacher, x0, obs, dcfg,
        schedule=cfg.schedule(sigma_data=ds.sigma_data),
        hidden=cfg.hidden, emb_width=cfg.emb_width, s_emb_width=cfg.s_emb_width,
        dropout_p=cfg.teacher_dropout, lr=cfg.distill_lr,
        batch_size=cfg.distill_batch, steps=cfg.distill_steps,
        seed=cfg.seed if seed is None else seed,
    )


DISTILL_FIELDS = ["step", "loss_ctm", "loss_dsm", "loss_total", "teacher_nfe", "grad_norm", "wall_s"]


def cmd_distill(cfg: RunConfig, out: Path) -> Path:
    ds = _load_dataset(out)
    teacher_path = _require(out / "teacher.ckpt", "run train-teacher first")
    dcfg = cfg.distill_config()
    teacher = None if dcfg.variant is Variant.CT else load_teacher(teacher_path)
    student, metrics = _distill_on(cfg, ds, teacher, dcfg)
    path = out / "student.ckpt"
    save_student(student, dcfg, path)
    log = MetricsLog(out / "distill_metrics.csv", DISTILL_FIELDS)
    for row in metrics:
        log.write(row)
    log.close()
    print(f"wrote {path} (final loss {metrics[-1]['loss_total']:.5f})")
    _update_manifest(out, cfg, "distill", [path, out / "distill_metrics.csv"])
    return path


def _policy_for(cfg: RunConfig, ckpt: Path, k: int | None, mode: str | None):
    kind = checkpoint_kind(ckpt)
    if kind == "teacher":
        return TeacherPolicy(load_teacher(ckpt), cfg.horizon, _task_action_dim(cfg)), kind
    student, _ = load_student(ckpt)
    scfg = cfg.sampler_config(k=k, mode=mode)
    return StudentPolicy(student, scfg, cfg.horizon, _task_action_dim(cfg)), kind


def _task_action_dim(cfg: RunConfig) -> int:
    return make_env(cfg.task_id).spec.action_dim


def _run_eval(cfg: RunConfig, ckpt: Path, k: int | None, mode: str | None, out: Path, tag: str):
    env = make_env(cfg.task_id)
    ds = _load_dataset(out)
    policy, kind = _policy_for(cfg, ckpt, k, mode)
    summary, results = evaluate(
        env, policy, ds.obs_stats, ds.act_stats,
        n_seeds=cfg.eval_seeds, exec_horizon=cfg.exec_horizon, threads=_eval_threads(),
    )
    scfg = cfg.sampler_config(k=k, mode=mode)
    rows_path = out / f"eval_{tag}.csv"
    with open(rows_path, "w") as fh:
        fh.write(InferenceReport.CSV_HEADER + "\n")
        for seed, res in enumerate(results):
            for rep in res.reports:
                if kind == "teacher":
                    fh.write(rep.csv_row(cfg.task_id, seed, 0, "teacher-solve", cfg.t_max, res.success) + "\n")
                else:
                    fh.write(rep.csv_row(cfg.task_id, seed, scfg.k, scfg.mode, scfg.sigma_init, res.success) + "\n")
    return summary, rows_path


def cmd_eval(cfg: RunConfig, out: Path, ckpt: Path | None, k: int | None, mode: str | None) -> None:
    ckpt = ckpt or _require(out / "student.ckpt", "run distill first")
    tag = ckpt.stem
    summary, rows_path = _run_eval(cfg, ckpt, k, mode, out, tag)
    summary_path = out / f"eval_{tag}.json"
    summary_path.write_text(json.dumps(summary.__dict__, indent=2) + "\n")
    print(f"{ckpt.name}: {summary.line()}")
    _update_manifest(out, cfg, "eval", [rows_path, summary_path])


def cmd_bench(cfg: RunConfig, out: Path, ckpt: Path | None, repetitions: int) -> None:
    ckpt = ckpt or _require(out / "student.ckpt", "run distill first")
    ds = _load_dataset(out)
    obs_batch = ds.obs[: max(1, min(len(ds.obs), repetitions))]
    kind = checkpoint_kind(ckpt)
    if kind == "teacher":
        policy = TeacherPolicy(load_teacher(ckpt), ds.horizon, ds.action_dim)
        gen = torch.Generator().manual_seed(cfg.seed)
        infer = lambda o: policy.predict(o, gen)[1]  # noqa: E731
        label = "teacher-solve"
    else:
        student, _ = load_student(ckpt)
        scfg = cfg.sampler_config()
        gen = torch.Generator().manual_seed(cfg.seed)
        infer = lambda o: multi_step(  # noqa: E731
            student, o.astype(np.float32), scfg, gen,
            action_shape=(ds.horizon, ds.action_dim),
        )
        label = f"student-k{scfg.k}"
    stats = bench(infer, obs_batch, repetitions)
    path = out / f"bench_{ckpt.stem}.csv"
    with open(path, "w") as fh:
        fh.write(LatencyStats.CSV_HEADER + "\n")
        fh.write(stats.csv_row(label) + "\n")
    print(
        f"{label}: NFE={stats.nfe} median net {stats.median_net_ms:.3f} ms,"
        f" median total {stats.median_total_ms:.3f} ms over {stats.runs} runs"
    )
    _update_manifest(out, cfg, "bench", [path])


ABLATE_HEADER = "study,variant,success_rate,stderr,nfe,k,train_ms_per_step,teacher_nfe_per_step,wall_s"


def _eval_policy(cfg: RunConfig, env, ds, policy) -> tuple[float, float, float]:
    summary, _ = evaluate(
        env, policy, ds.obs_stats, ds.act_stats,
        n_seeds=cfg.eval_seeds, exec_horizon=cfg.exec_horizon, threads=_eval_threads(),
    )
    return summary.success_rate, summary.stderr, summary.mean_nfe


def _student_policy(cfg: RunConfig, student, k: int | None = None, mode: str | None = None, sigma_init: float | None = None):
    scfg = cfg.sampler_config(k=k, mode=mode)
    if sigma_init is not None:
        scfg = replace(scfg, sigma_init=sigma_init)
    return StudentPolicy(student, scfg, cfg.horizon, _task_action_dim(cfg))


def _train_stats(metrics: list[dict]) -> tuple[float, float]:
    if not metrics:
        return 0.0, 0.0
    ms_per_step = metrics[-1]["wall_s"] / len(metrics) * 1e3
    nfe_per_step = float(np.mean([m.get("teacher_nfe", 0) for m in metrics]))
    return ms_per_step, nfe_per_step


def cmd_ablate(cfg: RunConfig, out: Path, study: str) -> None:
    if cfg.task_id == "bimodal1d":
        raise ConfigError("ablation studies need a closed-loop task, not bimodal1d")
    env = make_env(cfg.task_id)
    ds = _load_dataset(out)
    rows: list[str] = []
    t0 = time.perf_counter()

    def row(variant: str, rate: float, err: float, nfe: float, k: int, tms: float = 0.0, tnfe: float = 0.0) -> None:
        rows.append(
            f"{study},{variant},{rate:.4f},{err:.4f},{nfe:.1f},{k},"
            f"{tms:.2f},{tnfe:.2f},{time.perf_counter() - t0:.1f}"
        )

    if study == "objective":
        teacher = load_teacher(_require(out / "teacher.ckpt", "run train-teacher first"))
        for variant in (Variant.CD, Variant.CTM, Variant.CTM_LOCAL):
            dcfg = replace(cfg.distill_config(), variant=variant)
            student, metrics = _distill_on(cfg, ds, teacher, dcfg)
            rate, err, nfe = _eval_policy(cfg, env, ds, _student_policy(cfg, student, k=1))
            tms, tnfe = _train_stats(metrics)
            label = {"cd": "CD", "ctm": "CTM", "ctm-local": "CTM-local"}[variant.value]
            row(label, rate, err, nfe, k=1, tms=tms, tnfe=tnfe)
    elif study == "init-variance":
        student, _ = load_student(_require(out / "student.ckpt", "run distill first"))
        for sigma in (1.0, cfg.t_max):
            for k in (1, 3):
                pol = _student_policy(cfg, student, k=k, sigma_init=sigma)
                rate, err, nfe = _eval_policy(cfg, env, ds, pol)
                row(f"sigma{sigma:g}-k{k}", rate, err, nfe, k=k)
    elif study == "chaining":
        student, _ = load_student(_require(out / "student.ckpt", "run distill first"))
        for mode in ("discretized", "continuous"):
            pol = _student_policy(cfg, student, k=3, mode=mode)
            rate, err, nfe = _eval_policy(cfg, env, ds, pol)
            row(mode, rate, err, nfe, k=3)
    elif study == "teacher-quality":
        _, _, snapshots = _train_teacher_on(cfg, ds, snapshot_fracs=(0.25, 0.5, 1.0))
        for frac in (0.25, 0.5, 1.0):
            gen = torch.Generator().manual_seed(cfg.seed)
            teacher = TeacherModel(
                cfg.schedule(sigma_data=ds.sigma_data), ds.obs.shape[1], ds.flat_dim,
                hidden=cfg.hidden, emb_width=cfg.emb_width,
                p=cfg.teacher_dropout, rng=gen,
            )
            teacher.load_state_dict(snapshots[frac])
            t_rate, t_err, t_nfe = _eval_policy(
                cfg, env, ds, TeacherPolicy(teacher, cfg.horizon, env.spec.action_dim)
            )
            row(f"teacher@{frac:g}", t_rate, t_err, t_nfe, k=0)
            student, _ = _distill_on(cfg, ds, teacher, cfg.distill_config())
            rate, err, nfe = _eval_policy(cfg, env, ds, _student_policy(cfg, student, k=1))
            row(f"student@{frac:g}", rate, err, nfe, k=1)
    elif study == "dropout":
        teacher = load_teacher(_require(out / "teacher.ckpt", "run train-teacher first"))
        for enabled in (True, False):
            dcfg = replace(cfg.distill_config(), dropout_s0=enabled)
            student, _ = _distill_on(cfg, ds, teacher, dcfg)
            rate, err, nfe = _eval_policy(cfg, env, ds, _student_policy(cfg, student, k=1))
            row("enabled" if enabled else "disabled", rate, err, nfe, k=1)
    elif study == "consistency-training":
        teacher = load_teacher(_require(out / "teacher.ckpt", "run train-teacher first"))
        ct_cfg = replace(cfg.distill_config(), variant=Variant.CT)
        ct_student, _ = _distill_on(cfg, ds, None, ct_cfg)
        rate, err, nfe = _eval_policy(cfg, env, ds, _student_policy(cfg, ct_student, k=1))
        row("CT", rate, err, nfe, k=1)
        cp_student, _ = _distill_on(cfg, ds, teacher, cfg.distill_config())
        rate, err, nfe = _eval_policy(cfg, env, ds, _student_policy(cfg, cp_student, k=1))
        row("CP", rate, err, nfe, k=1)
    else:
        raise ConfigError(f"unknown ablation study {study!r}, expected one of {STUDIES}")

    path = out / f"ablate_{study.replace('-', '_')}.csv"
    with open(path, "w") as fh:
        fh.write(ABLATE_HEADER + "\n")
        for r in rows:
            fh.write(r + "\n")
    print(f"wrote {path}")
    for r in rows:
        parts = r.split(",")
        rate, err = float(parts[2]), float(parts[3])
        print(f"  {parts[1]:>16}: {rate:.3f} (95% CI +/- {1.96 * err:.3f})")
    _update_manifest(out, cfg, f"ablate-{study}", [path])


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cp-distill",
        description="Train a multi-step diffusion teacher, distill a few-step "
        "consistency student, and evaluate both on desk-scale tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="config file (flat key=value or JSON)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default="out", help="output directory")

    common(sub.add_parser("gen-data", help="generate an expert dataset file"))
    common(sub.add_parser("train-teacher", help="train the diffusion teacher"))
    common(sub.add_parser("distill", help="distill the consistency student"))
    p_eval = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None, help="defaults to <out>/student.ckpt")
    p_eval.add_argument("--k", type=int, default=None, help="override sampler.k")
    p_eval.add_argument("--mode", default=None, help="override sampler.mode")
    p_bench = sub.add_parser("bench", help="latency benchmark of a checkpoint")
    common(p_bench)
    p_bench.add_argument("--checkpoint", default=None)
    p_bench.add_argument("--repetitions", type=int, default=50)
    p_ablate = sub.add_parser("ablate", help="run an ablation study")
    common(p_ablate)
    p_ablate.add_argument("--study", required=True, choices=STUDIES + ("all",))

    args = parser.parse_args(argv)
    torch.set_num_threads(1)  # fixed reduction order for bit-exact reruns
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train-teacher":
            cmd_train_teacher(cfg, out)
        elif args.command == "distill":
            cmd_distill(cfg, out)
        elif args.command == "eval":
            ckpt = Path(args.checkpoint) if args.checkpoint else None
            cmd_eval(cfg, out, ckpt, args.k, args.mode)
        elif args.command == "bench":
            ckpt = Path(args.checkpoint) if args.checkpoint else None
            cmd_bench(cfg, out, ckpt, args.repetitions)
        elif args.command == "ablate":
            studies = STUDIES if args.study == "all" else (args.study,)
            for study in studies:
                cmd_ablate(cfg, out, study)
    except (ConfigError, CheckpointError, NumericsError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
