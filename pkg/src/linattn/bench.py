"""Kernel and generation microbenchmarks with CSV/JSON emission.

Timing protocol: 2 warmups, 5 timed trials on a monotonic clock, median with
p10/p90. No timing is reported unless the numerical cross-check between
contestants passed in the same process run. Memory is reported as counted
live floats of the algorithm's working state (exact and portable), not RSS.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from .errors import ContractError, PrecisionError
from .features import FeatureMap, GateValues, cumulative_log_gates, feature_apply
from .gla import ChunkPlan, gla_chunkwise, gla_parallel, gla_recurrent
from .model import Transformer, decode_prefill, student_decode_step
from .reference import causal_softmax_attention


def thread_cap():
    """Lane cap from the environment; this build always runs one lane, the
    cap is honored as an upper bound."""
    try:
        return max(1, int(os.environ.get("LIZARD_THREADS", "1")))
    except ValueError:
        return 1


CSV_COLUMNS = ["kind", "L", "batch", "ms_median", "ms_p10", "ms_p90", "peak_floats", "tok_per_s"]


@dataclass
class BenchRecord:
    kind: str
    L: int
    batch: int
    ms_median: float
    ms_p10: float
    ms_p90: float
    peak_floats: int
    tok_per_s: float
    trials: int = 5
    warmups: int = 2

    def row(self):
        return {
            "kind": self.kind,
            "L": self.L,
            "batch": self.batch,
            "ms_median": f"{self.ms_median:.4f}",
            "ms_p10": f"{self.ms_p10:.4f}",
            "ms_p90": f"{self.ms_p90:.4f}",
            "peak_floats": self.peak_floats,
            "tok_per_s": f"{self.tok_per_s:.2f}",
        }


def _time_call(fn, warmups=2, trials=5):
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    times = np.array(sorted(times))
    return (
        float(np.median(times)),
        float(np.percentile(times, 10)),
        float(np.percentile(times, 90)),
    )


def _kernel_inputs(L, d, f, seed, dtype=np.float32):
    """Shared per-length inputs. Gates are sampled mild enough that the
    parallel contestant stays inside its underflow guard at every L used."""
    rng = np.random.default_rng(seed)
    q = nc.tensor(rng.normal(size=(L, d)).astype(dtype))
    k = nc.tensor(rng.normal(size=(L, d)).astype(dtype))
    v = nc.tensor(rng.normal(size=(L, d)).astype(dtype))
    maps = (
        FeatureMap(nc.Tensor(rng.normal(0, 1 / np.sqrt(d), size=(d, f)).astype(dtype))),
        FeatureMap(nc.Tensor(rng.normal(0, 1 / np.sqrt(d), size=(d, f)).astype(dtype))),
    )
    log_gamma = rng.uniform(-50.0 / L, 0.0, size=(L, 1)).astype(dtype)
    gamma = nc.tensor(np.exp(log_gamma))
    gates = GateValues(gamma=gamma, log_c=cumulative_log_gates(gamma))
    return q, k, v, maps, gates


def kernel_peak_floats(kind, L, d, f, chunk):
    """Working-set floats of each contestant's dominant intermediates."""
    if kind == "softmax":
        return L * L + 2 * L * d  # score matrix + rotated q/k
    if kind == "gla-parallel":
        return L * L + 4 * L * f  # full masked weight matrix + features
    if kind == "gla-chunkwise":
        return chunk * chunk + 4 * chunk * f + 2 * f * (d + 1)  # block + carried state
    raise ContractError(f"unknown kernel kind {kind}")


def bench_kernel(lengths, chunk_size=64, d=64, f=64, seed=0, check_tol=1e-3,
                 warmups=2, trials=5, include_recurrent_check_below=256):
    """Compare gla-parallel (guard permitting), gla-chunkwise and the
    reference softmax forward at each length.

    The two GLA contestants must agree within check_tol before any timing is
    recorded (they compute the same function; softmax is the complexity
    baseline, checked against its own oracle in the test suite).
    """
    records = []
    for L in lengths:
        q, k, v, maps, gates = _kernel_inputs(L, d, f, seed + L)
        plan = ChunkPlan(chunk_size=chunk_size)

        def run_chunk():
            return gla_chunkwise(q, k, v, gates.log_c, maps, plan)

        def run_parallel():
            phi_q = feature_apply(maps[0], q)
            phi_k = feature_apply(maps[1], k)
            return gla_parallel(phi_q, phi_k, v, gates)

        def run_softmax():
            return causal_softmax_attention(q, k, v, 1.0 / np.sqrt(d))

        y_chunk = run_chunk()
        contestants = [("gla-chunkwise", run_chunk)]
        try:
            y_par = run_parallel()
            err = float(np.abs(y_par.data - y_chunk.data).max()) / max(
                1e-12, float(np.abs(y_chunk.data).max())
            )
            if err > check_tol:
                raise ContractError(
                    f"benchmark invalid at L={L}: contestants diverge ({err:.2e})"
                )
            contestants.append(("gla-parallel", run_parallel))
        except PrecisionError:
            pass  # guard tripped: parallel sits this length out
        if L <= include_recurrent_check_below:
            phi_q = feature_apply(maps[0], q)
            phi_k = feature_apply(maps[1], k)
            y_rec, _ = gla_recurrent(phi_q, phi_k, v, gates)
            err = float(np.abs(y_rec.data - y_chunk.data).max()) / max(
                1e-12, float(np.abs(y_chunk.data).max())
            )
            if err > check_tol:
                raise ContractError(f"benchmark invalid at L={L}: recurrent oracle disagrees")
        contestants.append(("softmax", run_softmax))

        for kind, fn in contestants:
            med, p10, p90 = _time_call(fn, warmups, trials)
            records.append(
                BenchRecord(
                    kind=kind,
                    L=L,
                    batch=1,
                    ms_median=med,
                    ms_p10=p10,
                    ms_p90=p90,
                    peak_floats=kernel_peak_floats(kind, L, d, f, chunk_size),
                    tok_per_s=L / med * 1000.0,
                    trials=trials,
                    warmups=warmups,
                )
            )
    return records


def multiply_counts(lengths, chunk_size=64, d=64, f=64, seed=0):
    """Instrumented multiply counts of the chunkwise and softmax forwards."""
    out = []
    for L in lengths:
        q, k, v, maps, gates = _kernel_inputs(L, d, f, seed + L)
        with nc.multiply_counter as c:
            gla_chunkwise(q, k, v, gates.log_c, maps, ChunkPlan(chunk_size=chunk_size))
        chunk_mults = c.multiplies
        with nc.multiply_counter as c:
            causal_softmax_attention(q, k, v, 1.0 / np.sqrt(d))
        out.append({"L": L, "chunkwise": chunk_mults, "softmax": c.multiplies})
    return out


def fit_r_squared(xs, ys, degree):
    """R^2 of a least-squares polynomial fit of the given degree."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < degree + 2:
        return 1.0  # underdetermined: the fit is exact by construction
    coeffs = np.polyfit(xs, ys, degree)
    pred = np.polyval(coeffs, xs)
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def bench_generate(model: Transformer, lengths, sample_tokens=16, warmups=2, trials=5,
                   prompt_token=65):
    """Per-token decode latency and counted session floats at each context
    depth: prefill to length L, then time sample_tokens streaming steps."""
    records = []
    cfg = model.cfg
    base = [258 + i for i in range(min(cfg.swa.meta_tokens, cfg.vocab_size - 258))] + [256]
    for L in lengths:
        prompt = np.array(base + [prompt_token] * (L - len(base)), dtype=np.int64)
        try:
            session = decode_prefill(model, prompt)
        except MemoryError:
            # out-of-memory on the growing-cache path is a data point
            records.append(
                BenchRecord(
                    kind="hybrid" if model.kind == "hybrid" else "softmax",
                    L=L, batch=1, ms_median=float("nan"), ms_p10=float("nan"),
                    ms_p90=float("nan"),
                    peak_floats=2 * L * cfg.d_model * cfg.n_layers,
                    tok_per_s=0.0, trials=0, warmups=0,
                )
            )
            continue
        peak = session.float_count()

        # time steps at depth L using one long-lived session
        times = []
        for trial in range(warmups + trials):
            t0 = time.perf_counter()
            for _ in range(sample_tokens):
                _, session = student_decode_step(session, prompt_token)
            dt = (time.perf_counter() - t0) * 1000.0 / sample_tokens
            if trial >= warmups:
                times.append(dt)
            peak = max(peak, session.float_count())
        times = np.array(sorted(times))
        med = float(np.median(times))
        records.append(
            BenchRecord(
                kind="hybrid" if model.kind == "hybrid" else "softmax",
                L=L,
                batch=1,
                ms_median=med,
                ms_p10=float(np.percentile(times, 10)),
                ms_p90=float(np.percentile(times, 90)),
                peak_floats=peak,
                tok_per_s=1000.0 / med,
                trials=trials,
                warmups=warmups,
            )
        )
    return records


def emit_metrics(records, csv_path, json_path=None, config=None):
    """Stable-column CSV plus a JSON mirror with the config snapshot."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in records:
            writer.writerow(r.row())
    if json_path is not None:
        payload = {
            "config": config or {},
            "records": [asdict(r) for r in records],
        }
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2)
    return csv_path


def read_metrics(csv_path):
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))
