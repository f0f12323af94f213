"""The two-stage linearization pipeline, end to end at toy scale.

Stage 1 freezes the pretrained backbone and trains the added modules (feature
maps, gates, mixing scalars) to reproduce each layer's attention outputs.
Stage 2 swaps the trained hybrid modules in for softmax attention and
fine-tunes on next-token prediction with low-rank adapters. Takes ~1 minute.
"""

import numpy as np

from linattn.data import lm_batches_from_text, load_corpus
from linattn.model import ModelConfig, stage1_mse_loss
from linattn.swa import SwaConfig
from linattn.train import TrainConfig, pretrain_teacher, stage2_defaults, train_stage1, train_stage2

cfg = ModelConfig(
    d_model=32, n_heads=2, n_layers=2, feature_dim=8,
    swa=SwaConfig(window=8, meta_tokens=2), chunk_size=16,
)
text = load_corpus()


def batches(seed, epochs=8):
    return list(lm_batches_from_text(text, 64, 4, epochs, seed, 2))


print("pretraining the softmax teacher...")
teacher, rows = pretrain_teacher(cfg, batches(0, 2), TrainConfig(max_steps=60))
print(f"  lm loss {rows[0]['loss']:.3f} -> {rows[-1]['loss']:.3f}")

print("stage 1: matching attention outputs with a frozen backbone...")
before = teacher.base_hash()
student, rows1 = train_stage1(teacher, batches(1), TrainConfig(max_steps=250))
print(f"  mse {rows1[0]['loss']:.1f} -> {rows1[-1]['loss']:.1f}")
print(f"  backbone bitwise unchanged: {teacher.base_hash() == before}")

eval_batch = batches(9, 1)[0]
records = teacher.forward_collect(eval_batch)
print(f"  held-out mse after stage 1: {stage1_mse_loss(records, student).item():.1f}")

print("stage 2: fine-tuning on next-token prediction with adapters...")
rows2, ppl = train_stage2(student, batches(2), stage2_defaults(max_steps=120))
print(f"  lm loss {rows2[0]['loss']:.3f} -> {rows2[-1]['loss']:.3f} (perplexity {ppl:.1f})")
print(f"  backbone still frozen under adapters: {student.base_hash() == before}")
