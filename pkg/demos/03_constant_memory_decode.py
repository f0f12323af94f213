"""Constant-memory autoregressive decoding.

A linearized student carries one fixed-size recurrent state plus a bounded
window cache per layer, so its decode session occupies the same number of
floats at step 1 and step 1000. The softmax teacher's key/value cache grows
with every token. Streaming greedy decode exactly matches the argmax trace of
a batched forward pass over the same tokens.
"""

import numpy as np

from linattn.model import (
    ModelConfig,
    Transformer,
    build_student,
    decode_prefill,
    greedy_generate,
    student_decode_step,
)
from linattn.swa import SwaConfig

cfg = ModelConfig(
    d_model=32, n_heads=2, n_layers=2, feature_dim=8,
    swa=SwaConfig(window=8, meta_tokens=2), chunk_size=16,
)
teacher = Transformer(cfg, kind="softmax", seed=3)
student = build_student(teacher, seed=4)

prompt = np.array([258, 259, 256] + [104, 101, 108, 108, 111])  # metas, BOS, "hello"

for name, model in (("student", student), ("teacher", teacher)):
    session = decode_prefill(model, prompt)
    logits = session.last_logits
    sizes = []
    for step in range(48):
        logits, session = student_decode_step(session, int(np.argmax(logits)))
        sizes.append(session.float_count())
    print(f"{name}: session floats step1={sizes[0]} step48={sizes[-1]} "
          f"({'constant' if sizes[0] == sizes[-1] else 'growing'})")

gen, _ = greedy_generate(student, prompt, 40)
batched = student.forward(np.concatenate([prompt, gen])).data
match = all(int(np.argmax(batched[len(prompt) - 1 + j])) == gen[j] for j in range(40))
print(f"streaming greedy == batched argmax over 40 tokens: {match}")
