"""Three ways to compute gated linear attention, one answer.

The recurrent form updates a fixed-size state token by token; the parallel
form builds the full masked interaction matrix; the chunkwise form absorbs
re-anchored cumulative gates into the feature-map exponentials so each block
is a single masked matmul plus a carried state. They agree to float precision
-- and once gates decay hard enough, only the chunkwise form survives.
"""

import numpy as np

import linattn.numcore as nc
from linattn.errors import PrecisionError
from linattn.features import FeatureMap, GateValues, cumulative_log_gates, feature_apply
from linattn.gla import ChunkPlan, gla_chunkwise, gla_parallel, gla_recurrent

rng = np.random.default_rng(0)
L, d, f = 48, 16, 8

q = nc.tensor(rng.normal(size=(L, d)).astype(np.float32))
k = nc.tensor(rng.normal(size=(L, d)).astype(np.float32))
v = nc.tensor(rng.normal(size=(L, d)).astype(np.float32))
maps = (
    FeatureMap(nc.Tensor(rng.normal(0, d**-0.5, size=(d, f)).astype(np.float32))),
    FeatureMap(nc.Tensor(rng.normal(0, d**-0.5, size=(d, f)).astype(np.float32))),
)
gamma = nc.tensor(rng.uniform(0.8, 1.0, size=(L, 1)).astype(np.float32))
gates = GateValues(gamma, cumulative_log_gates(gamma))

phi_q, phi_k = feature_apply(maps[0], q), feature_apply(maps[1], k)
y_rec, _ = gla_recurrent(phi_q, phi_k, v, gates)
y_par = gla_parallel(phi_q, phi_k, v, gates)
y_chu = gla_chunkwise(q, k, v, gates.log_c, maps, ChunkPlan(chunk_size=16))

scale = np.abs(y_rec.data).max()
print(f"recurrent vs parallel : {np.abs(y_rec.data - y_par.data).max() / scale:.2e}")
print(f"recurrent vs chunkwise: {np.abs(y_rec.data - y_chu.data).max() / scale:.2e}")

# Now the regime the reparameterization exists for: gates near 0.5 drive the
# cumulative product to ~exp(-350) by position 512. The parallel form refuses
# (its C matrix would underflow); the chunkwise form stays finite.
L = 512
q, k, v = (nc.tensor(rng.normal(size=(L, d)).astype(np.float32)) for _ in range(3))
gamma = nc.tensor(np.full((L, 1), 0.5, dtype=np.float32))
gates = GateValues(gamma, cumulative_log_gates(gamma))
print(f"\nmin cumulative log-gate at L=512, gamma=0.5: {gates.log_c.data.min():.0f}")

try:
    gla_parallel(feature_apply(maps[0], q), feature_apply(maps[1], k), v, gates)
except PrecisionError as e:
    print(f"parallel form refused: {e}")

y = gla_chunkwise(q, k, v, gates.log_c, maps, ChunkPlan(chunk_size=64))
print(f"chunkwise output finite: {np.isfinite(y.data).all()}, max |y| = {np.abs(y.data).max():.3f}")
