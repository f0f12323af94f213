"""Work scaling of the kernels: measured time and exact multiply counts.

The chunkwise form does O(L) multiplies at fixed chunk size where the masked
softmax reference does O(L^2); doubling the sequence roughly doubles one and
quadruples the other. Timings carry desk noise; the instrumented counts are
exact, so their fits are too.
"""

import numpy as np

from linattn.bench import bench_kernel, fit_r_squared, multiply_counts

lengths = [512, 1024, 2048]
print("timings (median of 5, 2 warmups):")
for r in bench_kernel(lengths, chunk_size=64, d=64, f=64, trials=5):
    print(f"  {r.kind:14s} L={r.L:<6d} {r.ms_median:9.2f} ms   {r.tok_per_s:12.0f} tok/s")

counts = multiply_counts([256, 512, 1024, 2048, 4096], chunk_size=64)
xs = [c["L"] for c in counts]
print("\nmultiply counts:")
for c in counts:
    print(f"  L={c['L']:<6d} chunkwise {c['chunkwise']:>13,d}   softmax {c['softmax']:>15,d}")
print(f"chunkwise linear fit  R^2 = {fit_r_squared(xs, [c['chunkwise'] for c in counts], 1):.6f}")
print(f"softmax quadratic fit R^2 = {fit_r_squared(xs, [c['softmax'] for c in counts], 2):.6f}")
