"""Two-stage training loops and passkey retrieval evaluation.

Stage 1 freezes the backbone and fits the per-layer hybrid branches to the
teacher's attention outputs; stage 2 fine-tunes on next-token prediction with
low-rank adapters on the Q/K/V projections (optionally full fine-tuning, and
optionally freezing the stage-1 modules). Every run is reproducible bitwise
from (seed, config) on one lane.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ContractError
from .model import (
    ModelConfig,
    Transformer,
    build_student,
    greedy_generate,
    lm_loss,
    stage1_mse_loss,
)
from .optim import AdamW, lr_schedule


@dataclass
class TrainConfig:
    stage: str = "stage1"
    peak_lr: float = 1e-3
    warmup_frac: float = 0.10
    min_lr_ratio: float = 0.1
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    grad_clip: float = 1.0
    global_batch: int = 8
    micro_batch: int = 4
    epochs: int = 2
    weight_decay: float = 0.0
    seed: int = 0
    max_steps: int = 0  # 0 = run every batch

    def __post_init__(self):
        if self.global_batch % self.micro_batch != 0:
            raise ContractError("global_batch must be a multiple of micro_batch")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def stage2_defaults(**kw):
    base = dict(stage="stage2", peak_lr=5e-4)
    base.update(kw)
    return TrainConfig(**base)


def _step_groups(batches, cfg: TrainConfig):
    """Group micro-batches into optimizer steps of global_batch rows."""
    per_step = cfg.global_batch // cfg.micro_batch
    group = []
    out = []
    for b in batches:
        group.append(b)
        if len(group) == per_step:
            out.append(group)
            group = []
            if cfg.max_steps and len(out) >= cfg.max_steps:
                break
    return out


def _run_loop(loss_fn, params, groups, cfg: TrainConfig):
    """Shared optimizer loop: gradient accumulation over micro-batches,
    global-norm clipping, AdamW with the cosine schedule. Returns trace rows
    of (step, lr, loss, grad_norm)."""
    opt = AdamW(params, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    total = len(groups)
    if total == 0:
        raise ContractError("no training steps: dataset smaller than one batch")
    rows = []
    for step, group in enumerate(groups):
        opt.zero_grad()
        losses = []
        for micro in group:
            loss = loss_fn(micro)
            (loss * (1.0 / len(group))).backward()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise ContractError(f"non-finite loss at step {step}")
        norm = opt.clip_global_norm(cfg.grad_clip)
        lr = lr_schedule(step, total, cfg.peak_lr, cfg.warmup_frac, cfg.min_lr_ratio)
        opt.step(lr)
        rows.append({"step": step, "lr": lr, "loss": mean_loss, "grad_norm": norm})
    return rows


def write_trace(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "grad_norm"])
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return path


def pretrain_teacher(model_cfg: ModelConfig, batches, cfg: TrainConfig):
    """Train the softmax teacher from scratch on next-token prediction."""
    teacher = Transformer(model_cfg, kind="softmax", seed=cfg.seed)
    params = [t for _, t in teacher.named_base_params()]
    groups = _step_groups(batches, cfg)
    rows = _run_loop(lambda b: lm_loss(teacher.forward(b), b), params, groups, cfg)
    return teacher, rows


def train_stage1(teacher: Transformer, batches, cfg: TrainConfig, student_seed=1, **overrides):
    """Fit hybrid branches against frozen-teacher attention records."""
    teacher.freeze_base()
    student = build_student(teacher, seed=student_seed, **overrides)
    params = student.stage1_params()
    if not params:
        raise ContractError("student has no trainable stage-1 modules")

    def loss_fn(batch):
        records = teacher.forward_collect(batch)
        return stage1_mse_loss(records, student)

    groups = _step_groups(batches, cfg)
    rows = _run_loop(loss_fn, params, groups, cfg)
    return student, rows


def train_stage2(
    student: Transformer,
    batches,
    cfg: TrainConfig,
    use_lora=True,
    train_stage1_modules=True,
    lora_seed=2,
):
    """Autoregressive fine-tuning of the linearized student.

    use_lora=False is the full fine-tune ablation: the backbone unfreezes and
    trains directly with no adapters.
    """
    params = []
    if use_lora:
        student.attach_lora(seed=lora_seed)
        params.extend(student.lora_params())
    else:
        student.unfreeze_base()
        params.extend(t for _, t in student.named_base_params())
    if train_stage1_modules:
        params.extend(student.stage1_params())
    groups = _step_groups(batches, cfg)
    rows = _run_loop(lambda b: lm_loss(student.forward(b), b), params, groups, cfg)
    final_ppl = float(np.exp(rows[-1]["loss"]))
    return rows, final_ppl


# -- passkey evaluation ------------------------------------------------------


def passkey_exact_match(model: Transformer, example):
    """Greedy-decode the answer span and require exact token equality."""
    answer = example.answer
    gen, _ = greedy_generate(model, example.prompt, len(answer))
    return bool(np.array_equal(gen, answer))


def evaluate_passkey(model: Transformer, eval_sets):
    """Accuracy per (sequence length, needle depth decile).

    eval_sets: {length: [PasskeyExample, ...]}. Returns one row per
    (length, decile) cell, a |lengths| x 10 grid.
    """
    cells = {}
    for length, examples in sorted(eval_sets.items()):
        for ex in examples:
            dec = ex.meta.get("decile", int(min(9, ex.meta.get("depth", 0.0) * 10)))
            key = (length, dec)
            n, c = cells.get(key, (0, 0))
            cells[key] = (n + 1, c + (1 if passkey_exact_match(model, ex) else 0))
    rows = []
    for length in sorted(eval_sets):
        for dec in range(10):
            n, c = cells.get((length, dec), (0, 0))
            rows.append(
                {
                    "length": length,
                    "decile": dec,
                    "n": n,
                    "correct": c,
                    "accuracy": (c / n) if n else float("nan"),
                }
            )
    return rows


def grid_accuracy(rows, length=None):
    """Overall exact-match accuracy, optionally restricted to one length."""
    n = sum(r["n"] for r in rows if length is None or r["length"] == length)
    c = sum(r["correct"] for r in rows if length is None or r["length"] == length)
    return c / n if n else float("nan")


def write_grid(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["length", "decile", "n", "correct", "accuracy"])
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return path
