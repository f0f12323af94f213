"""Command-line orchestration: training stages, evaluation, benchmarks,
parameter sweeps, and the verification suite.

Every run reads one JSON config (flags override individual keys), writes its
artifacts under a run directory together with the resolved config snapshot,
and seals the directory with a manifest of content hashes on completion. A
directory that already holds a manifest is treated as immutable and refused.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys

from .data import (
    generate_passkey_dataset,
    lm_batches_from_examples,
    lm_batches_from_text,
    load_corpus,
    write_jsonl,
)
from .errors import LinAttnError
from .model import (
    META_BASE,
    ModelConfig,
    Transformer,
    build_student,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    TrainConfig,
    evaluate_passkey,
    grid_accuracy,
    pretrain_teacher,
    train_stage1,
    train_stage2,
    write_grid,
    write_trace,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "model": {
        "d_model": 64,
        "n_heads": 4,
        "n_layers": 3,
        "feature_dim": 32,
        "mlp_ratio": 2,
        "swa": {"window": 16, "meta_tokens": 4},
        "gate_variant": "scalar",
        "retain_full": [],
        "algo": "chunkwise",
        "chunk_size": 64,
        "lora_rank": 8,
        "lora_alpha": 16.0,
    },
    "data": {
        "kind": "corpus",  # corpus | passkey
        "seq_len": 128,
        "train_examples": 512,
        "dataset_seed": 7,
        "meta_tokens": None,  # None -> model.swa.meta_tokens
    },
    "teacher": {"peak_lr": 1e-3, "epochs": 2, "global_batch": 8, "micro_batch": 4, "max_steps": 60},
    "stage1": {"peak_lr": 1e-3, "epochs": 2, "global_batch": 8, "micro_batch": 4, "max_steps": 60},
    "stage2": {"peak_lr": 5e-4, "epochs": 2, "global_batch": 8, "micro_batch": 4, "max_steps": 60},
    "ablation": {
        "no_swa": False,
        "no_gate": False,
        "no_approx": False,
        "no_lora": False,
        "freeze_stage1": False,
    },
    "eval": {"lengths": [256], "per_decile": 2, "eval_seed": 1009},
    "bench": {"lengths": [512, 1024], "chunk_size": 64, "d": 64, "f": 64, "trials": 5,
              "gen_lengths": [256, 1024], "sample_tokens": 8},
}


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as fh:
        return _deep_merge(DEFAULT_CONFIG, json.load(fh))


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
    m = cfg["model"]
    if getattr(args, "algo", None):
        m["algo"] = args.algo
    if getattr(args, "chunk_size", None):
        m["chunk_size"] = args.chunk_size
    if getattr(args, "window", None):
        m["swa"]["window"] = args.window
    if getattr(args, "meta", None) is not None:
        m["swa"]["meta_tokens"] = args.meta
    if getattr(args, "gate", None):
        m["gate_variant"] = args.gate
    if getattr(args, "retain_full", None):
        if args.retain_full == "half":
            m["retain_full"] = list(range(1, m["n_layers"], 2))
        else:
            m["retain_full"] = [int(x) for x in args.retain_full.split(",") if x != ""]
    if getattr(args, "lora_rank", None):
        m["lora_rank"] = args.lora_rank
    ab = cfg["ablation"]
    for flag in ("no_swa", "no_gate", "no_approx", "no_lora"):
        if getattr(args, flag, False):
            ab[flag] = True
    return cfg


def resolve_model_config(cfg):
    m = dict(cfg["model"])
    # spec'd flat config sections override the nested model block:
    #   gla.algo / gla.chunk_size / gla.normalize, gate.variant,
    #   swa.window / swa.meta_tokens
    gla = cfg.get("gla", {})
    if "algo" in gla:
        m["algo"] = gla["algo"]
    if "chunk_size" in gla:
        m["chunk_size"] = gla["chunk_size"]
    if "normalize" in gla:
        m["normalize"] = gla["normalize"]
    if "variant" in cfg.get("gate", {}):
        m["gate_variant"] = cfg["gate"]["variant"]
    swa = cfg.get("swa", {})
    m["swa"] = dict(m["swa"])
    if "window" in swa:
        m["swa"]["window"] = swa["window"]
    if "meta_tokens" in swa:
        m["swa"]["meta_tokens"] = swa["meta_tokens"]
    data_meta = cfg["data"].get("meta_tokens")
    if data_meta is None:
        data_meta = m["swa"]["meta_tokens"]
    m["vocab_size"] = max(
        m.get("vocab_size", 0), META_BASE + data_meta, META_BASE + m["swa"]["meta_tokens"]
    )
    ab = cfg["ablation"]
    m["use_swa"] = not ab["no_swa"]
    m["use_gate"] = not ab["no_gate"]
    return ModelConfig.from_dict(m)


def data_meta_tokens(cfg):
    d = cfg["data"].get("meta_tokens")
    if d is not None:
        return d
    if "meta_tokens" in cfg.get("swa", {}):
        return cfg["swa"]["meta_tokens"]
    return cfg["model"]["swa"]["meta_tokens"]


def build_batches(cfg, stage_key, run_dir=None):
    """Materialize micro-batches for one training stage."""
    d = cfg["data"]
    t = cfg[stage_key]
    meta = data_meta_tokens(cfg)
    micro = t.get("micro_batch", 4)
    epochs = t.get("epochs", 2)
    seed = cfg["seed"] + {"teacher": 11, "stage1": 22, "stage2": 33}[stage_key]
    if d["kind"] == "corpus":
        return list(
            lm_batches_from_text(load_corpus(), d["seq_len"], micro, epochs, seed, meta)
        )
    examples = generate_passkey_dataset(
        d["train_examples"], d["seq_len"], d["dataset_seed"], meta_tokens=meta
    )
    if run_dir is not None:
        path = os.path.join(run_dir, "train_data.jsonl")
        if not os.path.exists(path):
            write_jsonl(examples, path)
    return list(lm_batches_from_examples(examples, micro, epochs, seed))


def train_cfg(cfg, stage_key, stage_tag):
    t = dict(cfg[stage_key])
    t.setdefault("seed", cfg["seed"])
    t["stage"] = stage_tag
    return TrainConfig(**t)


# -- run directories -----------------------------------------------------------


def config_digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]


def prepare_run_dir(args, cfg, subcommand):
    run_dir = args.out or os.path.join("runs", f"{subcommand}-{config_digest(cfg)}")
    manifest = os.path.join(run_dir, "manifest.json")
    if os.path.exists(manifest):
        raise LinAttnError(
            f"run directory {run_dir} is sealed by a manifest; completed runs are immutable"
        )
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return run_dir


def seal_run_dir(run_dir):
    """Write the content-hash manifest; the directory is immutable after."""
    entries = {}
    for name in sorted(os.listdir(run_dir)):
        if name == "manifest.json":
            continue
        path = os.path.join(run_dir, name)
        if os.path.isfile(path):
            entries[name] = hashlib.sha256(open(path, "rb").read()).hexdigest()
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump({"files": entries}, fh, indent=2, sort_keys=True)
    return entries


def check_run_dir(run_dir):
    """Recompute hashes against the manifest; returns list of mismatches."""
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        manifest = json.load(fh)["files"]
    bad = []
    for name, digest in manifest.items():
        path = os.path.join(run_dir, name)
        if not os.path.isfile(path):
            bad.append(name)
            continue
        if hashlib.sha256(open(path, "rb").read()).hexdigest() != digest:
            bad.append(name)
    return bad


# -- subcommands -----------------------------------------------------------------


def cmd_pretrain_teacher(args):
    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = prepare_run_dir(args, cfg, "pretrain-teacher")
    model_cfg = resolve_model_config(cfg)
    batches = build_batches(cfg, "teacher", run_dir)
    teacher, rows = pretrain_teacher(model_cfg, batches, train_cfg(cfg, "teacher", "teacher"))
    save_checkpoint(teacher, os.path.join(run_dir, "teacher.lzrd"))
    write_trace(rows, os.path.join(run_dir, "trace_teacher.csv"))
    _write_summary(run_dir, {"final_loss": rows[-1]["loss"], "steps": len(rows)})
    seal_run_dir(run_dir)
    print(f"teacher: {len(rows)} steps, final loss {rows[-1]['loss']:.4f} -> {run_dir}")
    return 0


def cmd_distill(args):
    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = prepare_run_dir(args, cfg, "distill")
    teacher = load_checkpoint(args.teacher)
    batches = build_batches(cfg, "stage1", run_dir)
    student, rows = train_stage1(
        teacher,
        batches,
        train_cfg(cfg, "stage1", "stage1"),
        student_seed=cfg["seed"] + 1,
        **_student_overrides(cfg),
    )
    save_checkpoint(student, os.path.join(run_dir, "student_stage1.lzrd"))
    write_trace(rows, os.path.join(run_dir, "trace_stage1.csv"))
    _write_summary(
        run_dir,
        {
            "initial_mse": rows[0]["loss"],
            "final_mse": rows[-1]["loss"],
            "base_hash": student.base_hash(),
            "teacher_hash": teacher.base_hash(),
        },
    )
    seal_run_dir(run_dir)
    print(f"stage1: mse {rows[0]['loss']:.4f} -> {rows[-1]['loss']:.4f} -> {run_dir}")
    return 0


def _student_overrides(cfg):
    model_cfg = resolve_model_config(cfg)
    return dict(
        use_swa=model_cfg.use_swa,
        use_gate=model_cfg.use_gate,
        gate_variant=model_cfg.gate_variant,
        algo=model_cfg.algo,
        chunk_size=model_cfg.chunk_size,
        swa=model_cfg.swa,
        retain_full=model_cfg.retain_full,
        lora_rank=model_cfg.lora_rank,
        lora_alpha=model_cfg.lora_alpha,
    )


def cmd_finetune(args):
    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = prepare_run_dir(args, cfg, "finetune")
    ab = cfg["ablation"]
    if args.student:
        student = load_checkpoint(args.student)
    elif ab["no_approx"] and args.teacher:
        teacher = load_checkpoint(args.teacher)
        student = build_student(teacher, seed=cfg["seed"] + 1, **_student_overrides(cfg))
    else:
        raise LinAttnError("finetune needs --student, or --no-approx with --teacher")
    batches = build_batches(cfg, "stage2", run_dir)
    rows, ppl = train_stage2(
        student,
        batches,
        train_cfg(cfg, "stage2", "stage2"),
        use_lora=not ab["no_lora"],
        train_stage1_modules=not ab["freeze_stage1"],
        lora_seed=cfg["seed"] + 2,
    )
    save_checkpoint(student, os.path.join(run_dir, "student.lzrd"))
    write_trace(rows, os.path.join(run_dir, "trace_stage2.csv"))
    _write_summary(
        run_dir,
        {"initial_loss": rows[0]["loss"], "final_loss": rows[-1]["loss"], "perplexity": ppl},
    )
    seal_run_dir(run_dir)
    print(f"stage2: lm {rows[0]['loss']:.4f} -> {rows[-1]['loss']:.4f} (ppl {ppl:.2f}) -> {run_dir}")
    return 0


def cmd_eval_passkey(args):
    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = prepare_run_dir(args, cfg, "eval-passkey")
    model = load_checkpoint(args.model)
    ev = cfg["eval"]
    meta = data_meta_tokens(cfg)
    sets = {
        L: generate_passkey_dataset(
            ev["per_decile"] * 10, L, ev["eval_seed"] + L, meta_tokens=meta, stratify_depth=True
        )
        for L in ev["lengths"]
    }
    rows = evaluate_passkey(model, sets)
    write_grid(rows, os.path.join(run_dir, "passkey_grid.csv"))
    summary = {f"acc@{L}": grid_accuracy(rows, L) for L in ev["lengths"]}
    _write_summary(run_dir, summary)
    seal_run_dir(run_dir)
    print("passkey:", " ".join(f"{k}={v:.3f}" for k, v in summary.items()), "->", run_dir)
    return 0


def cmd_bench_kernel(args):
    from .bench import bench_kernel, emit_metrics, fit_r_squared, multiply_counts

    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = prepare_run_dir(args, cfg, "bench-kernel")
    b = cfg["bench"]
    chunk = args.chunk_size or b["chunk_size"]
    records = bench_kernel(
        b["lengths"], chunk_size=chunk, d=b["d"], f=b["f"], seed=cfg["seed"], trials=b["trials"]
    )
    counts = multiply_counts(b["lengths"], chunk_size=chunk, d=b["d"], f=b["f"], seed=cfg["seed"])
    emit_metrics(
        records,
        os.path.join(run_dir, "bench_kernel.csv"),
        os.path.join(run_dir, "bench_kernel.json"),
        config=cfg,
    )
    xs = [c["L"] for c in counts]
    summary = {
        "multiply_counts": counts,
        "chunkwise_linear_r2": fit_r_squared(xs, [c["chunkwise"] for c in counts], 1),
        "softmax_quadratic_r2": fit_r_squared(xs, [c["softmax"] for c in counts], 2),
    }
    _write_summary(run_dir, summary)
    seal_run_dir(run_dir)
    for r in records:
        print(f"{r.kind:14s} L={r.L:<6d} {r.ms_median:9.3f} ms")
    return 0


def cmd_bench_generate(args):
    from .bench import bench_generate, emit_metrics

    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = prepare_run_dir(args, cfg, "bench-generate")
    model_cfg = resolve_model_config(cfg)
    if args.model:
        student = load_checkpoint(args.model)
        teacher = None
    else:
        teacher = Transformer(model_cfg, kind="softmax", seed=cfg["seed"])
        student = build_student(teacher, seed=cfg["seed"] + 1)
    b = cfg["bench"]
    records = bench_generate(student, b["gen_lengths"], sample_tokens=b["sample_tokens"])
    if teacher is not None:
        records += bench_generate(teacher, b["gen_lengths"], sample_tokens=b["sample_tokens"])
    emit_metrics(
        records,
        os.path.join(run_dir, "bench_generate.csv"),
        os.path.join(run_dir, "bench_generate.json"),
        config=cfg,
    )
    seal_run_dir(run_dir)
    for r in records:
        print(f"{r.kind:8s} L={r.L:<7d} {r.ms_median:8.3f} ms/token  floats={r.peak_floats}")
    return 0


def _parse_grid(tokens):
    grid = {}
    for tok in tokens:
        if "=" not in tok:
            raise LinAttnError(f"bad grid term {tok!r}; expected key=v1,v2,...")
        key, vals = tok.split("=", 1)
        grid[key.strip()] = [int(v) for v in vals.split(",") if v != ""]
    if not grid:
        raise LinAttnError("empty sweep grid")
    return grid


def cmd_sweep(args):
    """Full mini-pipeline per grid cell; one CSV row each."""
    import csv as _csv
    import itertools

    cfg = _apply_overrides(load_config(args.config), args)
    grid = _parse_grid(args.grid)
    run_dir = prepare_run_dir(args, cfg, "sweep")
    keys = sorted(grid)
    # Data and teacher stay fixed across cells: the data meta prefix uses the
    # largest swept m so every cell shares one vocabulary.
    if "m" in grid:
        cfg["data"]["meta_tokens"] = max(grid["m"])
    model_cfg = resolve_model_config(cfg)
    teacher_batches = build_batches(cfg, "teacher", run_dir)
    teacher, _ = pretrain_teacher(model_cfg, teacher_batches, train_cfg(cfg, "teacher", "teacher"))
    rows_out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, combo))
        cell_cfg = copy.deepcopy(cfg)
        if "w" in cell:
            cell_cfg["model"]["swa"]["window"] = cell["w"]
        if "m" in cell:
            cell_cfg["model"]["swa"]["meta_tokens"] = cell["m"]
        if "r" in cell:
            cell_cfg["model"]["lora_rank"] = cell["r"]
        s1_batches = build_batches(cell_cfg, "stage1")
        student, r1 = train_stage1(
            teacher, s1_batches, train_cfg(cell_cfg, "stage1", "stage1"),
            student_seed=cfg["seed"] + 1, **_student_overrides(cell_cfg),
        )
        s2_batches = build_batches(cell_cfg, "stage2")
        r2, ppl = train_stage2(
            student, s2_batches, train_cfg(cell_cfg, "stage2", "stage2"),
            use_lora=not cell_cfg["ablation"]["no_lora"],
        )
        row = dict(cell)
        row.update(
            {
                "stage1_final_mse": f"{r1[-1]['loss']:.6f}",
                "stage2_final_loss": f"{r2[-1]['loss']:.6f}",
                "perplexity": f"{ppl:.4f}",
            }
        )
        rows_out.append(row)
        print("cell", cell, "->", row["stage2_final_loss"])
    fieldnames = keys + ["stage1_final_mse", "stage2_final_loss", "perplexity"]
    with open(os.path.join(run_dir, "sweep.csv"), "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows_out)
    seal_run_dir(run_dir)
    print(f"{len(rows_out)} cells -> {run_dir}/sweep.csv")
    return 0


def cmd_verify(args):
    """Run the oracle/invariant suite (fast tests); nonzero exit on failure."""
    import pytest

    here = os.path.dirname(os.path.abspath(__file__))
    candidates = [
        os.path.join(os.getcwd(), "tests"),
        os.path.abspath(os.path.join(here, "..", "..", "tests")),
    ]
    tests_dir = next((c for c in candidates if os.path.isdir(c)), None)
    if tests_dir is None:
        print("verify: no tests directory found", file=sys.stderr)
        return 1
    argv = [tests_dir, "-q", "-m", "not slow"]
    if args.full:
        argv = [tests_dir, "-q"]
    return int(pytest.main(argv))


def _write_summary(run_dir, payload):
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)


# -- argument parsing ----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="linattn",
        description="gated linear attention: training stages, benchmarks, verification",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="run directory")
        sp.add_argument("--algo", choices=["recurrent", "parallel", "chunkwise"], default=None)
        sp.add_argument("--chunk-size", dest="chunk_size", type=int, default=None)
        sp.add_argument("--window", type=int, default=None)
        sp.add_argument("--meta", type=int, default=None)
        sp.add_argument("--gate", choices=["scalar", "mamba2", "low_rank", "pooling"], default=None)
        sp.add_argument("--retain-full", dest="retain_full", default=None,
                        help="'half' or comma-separated layer indices")
        sp.add_argument("--lora-rank", dest="lora_rank", type=int, default=None)
        sp.add_argument("--no-lora", dest="no_lora", action="store_true")
        sp.add_argument("--no-approx", dest="no_approx", action="store_true")
        sp.add_argument("--no-swa", dest="no_swa", action="store_true")
        sp.add_argument("--no-gate", dest="no_gate", action="store_true")

    sp = sub.add_parser("pretrain-teacher", help="train the softmax teacher")
    common(sp)
    sp = sub.add_parser("distill", help="stage 1: fit hybrid branches to the teacher")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp = sub.add_parser("finetune", help="stage 2: language-model fine-tuning")
    common(sp)
    sp.add_argument("--student", default=None, help="stage-1 student checkpoint")
    sp.add_argument("--teacher", default=None, help="teacher checkpoint (with --no-approx)")
    sp = sub.add_parser("eval-passkey", help="passkey retrieval accuracy grid")
    common(sp)
    sp.add_argument("--model", required=True, help="model checkpoint")
    sp = sub.add_parser("bench-kernel", help="kernel forward benchmarks")
    common(sp)
    sp = sub.add_parser("bench-generate", help="decode latency/memory benchmarks")
    common(sp)
    sp.add_argument("--model", default=None, help="model checkpoint (fresh models if omitted)")
    sp = sub.add_parser("sweep", help="grid sweep of window/meta/rank")
    common(sp)
    sp.add_argument("--grid", nargs="+", required=True, help="e.g. w=32,64,128 m=2,4,6")
    sp = sub.add_parser("verify", help="run the oracle/invariant test suite")
    sp.add_argument("--full", action="store_true", help="include slow acceptance tests")
    return p


HANDLERS = {
    "pretrain-teacher": cmd_pretrain_teacher,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval-passkey": cmd_eval_passkey,
    "bench-kernel": cmd_bench_kernel,
    "bench-generate": cmd_bench_generate,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    if getattr(args, "config", None) and not os.path.isfile(args.config):
        parser.print_usage(sys.stderr)
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](args)
    except LinAttnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
