"""Training recipe for the passkey length-generalization acceptance test.

Teacher: curriculum pretraining on passkey data (single-key micro sequences,
then two-key, then the full five-key task with dense retrieval rounds); the
copy circuit forms on the micro phases and transfers. Students: the standard
two-stage pipeline on the official single-query dataset at the train length,
one with gates and one gate-ablated. Deterministic from the fixed seeds.

Kept out of the library: this is a test fixture describing one concrete
desk-scale experiment, not product surface.
"""

from linattn.data import generate_passkey_dataset, lm_batches_from_examples
from linattn.model import ModelConfig, Transformer, lm_loss
from linattn.optim import AdamW, lr_schedule
from linattn.swa import SwaConfig
from linattn.train import (
    TrainConfig,
    stage2_defaults,
    train_stage1,
    train_stage2,
)

TRAIN_LEN = 256
EVAL_LENS = (256, 1024)

MODEL = dict(
    d_model=128,
    n_heads=8,
    n_layers=3,
    feature_dim=32,
    mlp_ratio=2,
    swa=SwaConfig(window=32, meta_tokens=4),
    chunk_size=64,
)

# (steps, dataset kwargs, dataset size, micro batch)
CURRICULUM = [
    (1500, dict(seq_len=56, n_keys=1, queries=1), 4000, 16),
    (1500, dict(seq_len=128, n_keys=2, queries=2), 4000, 12),
    (8000, dict(seq_len=256, n_keys=5, queries=5), 8000, 8),
]
TEACHER_PEAK_LR = 2e-3
STAGE1_STEPS = 1200
STAGE2_STEPS = 1500


def build_teacher(log=print, curriculum=None, peak_lr=TEACHER_PEAK_LR):
    """Curriculum LM pretraining of the softmax teacher."""
    curriculum = curriculum or CURRICULUM
    cfg = ModelConfig(**MODEL)
    teacher = Transformer(cfg, kind="softmax", seed=0)
    opt = AdamW([t for _, t in teacher.named_base_params()])
    total = sum(steps for steps, _, _, _ in curriculum)
    gstep = 0
    for pi, (steps, kw, n, micro) in enumerate(curriculum):
        data = generate_passkey_dataset(n, seed=8 + pi, **kw)
        batches = list(lm_batches_from_examples(data, batch=micro, epochs=200, seed=pi))
        it = iter(batches)
        last = float("nan")
        for _ in range(steps):
            try:
                b = next(it)
            except StopIteration:
                it = iter(batches)
                b = next(it)
            opt.zero_grad()
            loss = lm_loss(teacher.forward(b), b)
            loss.backward()
            opt.clip_global_norm(1.0)
            opt.step(lr_schedule(gstep, total, peak_lr))
            gstep += 1
            last = loss.item()
        log(f"teacher phase {pi}: {steps} steps, final batch loss {last:.3f}")
    return teacher


def distill_student(teacher, use_gate, log=print, stage1_steps=STAGE1_STEPS,
                    stage2_steps=STAGE2_STEPS):
    """Stage 1 + stage 2 on the single-query dataset at the train length."""
    single = generate_passkey_dataset(4000, TRAIN_LEN, seed=9)
    s1_batches = list(lm_batches_from_examples(single, batch=8, epochs=8, seed=1))
    student, rows1 = train_stage1(
        teacher,
        s1_batches,
        TrainConfig(max_steps=stage1_steps, micro_batch=8, global_batch=8, seed=0),
        student_seed=1,
        use_gate=use_gate,
    )
    log(f"stage1 (gate={use_gate}): mse {rows1[0]['loss']:.1f} -> {rows1[-1]['loss']:.1f}")
    s2_batches = list(lm_batches_from_examples(single, batch=8, epochs=8, seed=2))
    rows2, _ = train_stage2(
        student,
        s2_batches,
        stage2_defaults(max_steps=stage2_steps, micro_batch=8, global_batch=8, seed=0),
    )
    log(f"stage2 (gate={use_gate}): lm {rows2[0]['loss']:.3f} -> {rows2[-1]['loss']:.3f}")
    return student


def eval_sets(per_decile=3):
    return {
        L: generate_passkey_dataset(
            per_decile * 10, L, seed=1000 + L, stratify_depth=True
        )
        for L in EVAL_LENS
    }


def train_passkey_student(log=print):
    teacher = build_teacher(log)
    teacher.freeze_base()
    full = distill_student(teacher, use_gate=True, log=log)
    ablated = distill_student(teacher, use_gate=False, log=log)
    return full, ablated, eval_sets()
