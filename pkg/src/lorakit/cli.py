"""Command-line entry point: ``python -m lorakit <command>``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis, bench, budget, checkpoint
from .adapters import AdaptationStrategy, StrategyError, lora_merge, lora_unmerge
from .config import PRESETS, ModelConfig
from .model import (PRETRAIN_HYPER, TrainHyper, TrainingError, adapt, default_hyper, evaluate, forward,
                    merge_all, pretrain)
from .tasks import make_task, reverse_task
from .tensor_core import NumericError

log = logging.getLogger("lorakit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BOUND = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "reverse"
    n_examples: int = 2000
    eval_examples: int = 1000
    noise: float = 0.1
    data_seed: int = 2
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 0
    vocab_size: int = 64
    max_seq_len: int = 32
    strategy: str = "lora:r=4:qv"
    lr: float = 0.0
    weight_decay: float = -1.0
    batch_size: int = 32
    epochs: int = 0
    warmup_steps: int = -1
    schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "f64"
    out_dir: str = "out"
    extra: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls) if f.name != "extra"}
        kw = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                kw[key] = conv(val)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value {val!r} for {key}") from None
        return cls(**kw)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
                           vocab_size=self.vocab_size, max_seq_len=self.max_seq_len, d_ffn=self.d_ffn or None)

    def parsed_strategy(self) -> AdaptationStrategy:
        return AdaptationStrategy.parse(self.strategy)

    def hyper(self, pretraining: bool = False) -> TrainHyper:
        base = PRETRAIN_HYPER if pretraining else default_hyper(self.parsed_strategy())
        return TrainHyper(lr=self.lr or base.lr, epochs=self.epochs or base.epochs, batch_size=self.batch_size,
                          weight_decay=base.weight_decay if self.weight_decay < 0 else self.weight_decay,
                          beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                          warmup_steps=base.warmup_steps if self.warmup_steps < 0 else self.warmup_steps,
                          schedule=self.schedule, seed=self.seed)

    def datasets(self, cfg: ModelConfig):
        if self.task == "reverse":
            train = reverse_task(self.n_examples, cfg.vocab_size, noise=self.noise, seed=self.data_seed)
            test = reverse_task(self.eval_examples, cfg.vocab_size, noise=self.noise, seed=self.data_seed + 1000)
        else:
            train = make_task(self.task, self.n_examples, cfg.vocab_size, seed=self.data_seed)
            test = make_task(self.task, self.eval_examples, cfg.vocab_size, seed=self.data_seed + 1000)
        return train, test


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "trainable_params", "wall_ms"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "loss": f"{r['loss']:.6f}", "wall_ms": f"{r['wall_ms']:.1f}"})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(rc: RunConfig, out: Path) -> dict:
    cfg = rc.model_config()
    corpus = make_task("copy", rc.n_examples, cfg.vocab_size, seed=rc.data_seed)
    model = pretrain(cfg, corpus, rc.hyper(pretraining=True))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "base.ckpt"
    checkpoint.save_model(path, model, seed=rc.seed, dtype=rc.dtype)
    rows = [{"epoch": i + 1, "loss": l, "trainable_params": model.num_params(), "wall_ms": 0.0}
            for i, l in enumerate(model.pretrain_losses)]
    write_metrics(out / "pretrain_metrics.csv", rows)
    return {"checkpoint": str(path), "final_loss": model.pretrain_losses[-1]}


def cmd_adapt(rc: RunConfig, base_path, out: Path) -> dict:
    if not Path(base_path).exists():
        raise FileNotFoundError(f"base checkpoint {base_path} does not exist")
    base = checkpoint.load_model(base_path)
    strategy = rc.parsed_strategy()
    train, test = rc.datasets(base.config)
    res = adapt(base, train, strategy, rc.hyper())
    out.mkdir(parents=True, exist_ok=True)
    if strategy.kind == "LoRA":
        path = out / "delta.ckpt"
        checkpoint.save_lora_delta(path, res.model, strategy, seed=rc.seed, dtype=rc.dtype)
    else:
        path = out / "model.ckpt"
        merge_all(res.model)
        checkpoint.save_model(path, res.model, strategy, seed=rc.seed, dtype=rc.dtype)
    write_metrics(out / "metrics.csv", res.metrics)
    b = budget.count(base.config, strategy)
    ev = evaluate(res.model, test)
    print(f"strategy {strategy.to_string()}: trainable {b.trainable_params} ({budget.fmt_millions(b.trainable_params)}), "
          f"checkpoint fp16 {b.checkpoint_bytes_fp16} B, optimizer state {b.optimizer_state_scalars} scalars")
    return {"checkpoint": str(path), "trainable_params": res.trainable_params, "train_loss": res.epoch_losses[-1],
            "eval_loss": ev["loss"], "eval_accuracy": ev["accuracy"]}


def _apply_delta(model, mods, sign: int):
    for m in mods:
        name = f"blocks.{m.layer}.attn.{m.target}"
        if name not in model.params or model.params[name].shape != (m.B.shape[0], m.A.shape[1]):
            raise checkpoint.CheckpointError(f"delta target {name} does not match the base model")
        if sign > 0:
            model.params[name] = lora_merge(m, model.params[name])
        else:
            m.merged = True
            model.params[name] = lora_unmerge(m, model.params[name])


def _check_compatible(model, delta_ck):
    if delta_ck.config != model.config:
        raise checkpoint.CheckpointError("delta was trained for a different model configuration")


def cmd_merge(base_path, delta_path, out_path) -> dict:
    model = checkpoint.load_model(base_path)
    ck, mods = checkpoint.load_lora_delta(delta_path)
    _check_compatible(model, ck)
    _apply_delta(model, mods, +1)
    checkpoint.save_model(out_path, model.detached(), ck.strategy, seed=ck.header["seed"],
                          extra={"merged_delta": checkpoint.delta_digest(ck)})
    return {"checkpoint": str(out_path)}


def cmd_switch(base_path, old_path, new_path, out_path) -> dict:
    """``base_path`` is a deployed model with ``old_path`` merged in."""
    model = checkpoint.load_model(base_path)
    old_ck, old = checkpoint.load_lora_delta(old_path)
    new_ck, new = checkpoint.load_lora_delta(new_path)
    _check_compatible(model, old_ck)
    _check_compatible(model, new_ck)
    recorded = getattr(model, "header", {}).get("merged_delta")
    old_digest, new_digest = checkpoint.delta_digest(old_ck), checkpoint.delta_digest(new_ck)
    if recorded is not None and recorded != old_digest:
        raise checkpoint.CheckpointError("the model does not contain the delta being switched out")
    if new_digest != old_digest:
        _apply_delta(model, old, -1)
        _apply_delta(model, new, +1)
    checkpoint.save_model(out_path, model.detached(), new_ck.strategy, seed=new_ck.header["seed"],
                          extra={"merged_delta": new_digest})
    return {"checkpoint": str(out_path)}


def load_any(model_path, delta_path=None):
    model = checkpoint.load_model(model_path)
    if delta_path:
        ck, mods = checkpoint.load_lora_delta(delta_path)
        _check_compatible(model, ck)
        for m in mods:
            model.adaptation.lora[(m.layer, m.target)] = m
    return model


def cmd_eval(rc: RunConfig, model_path, delta_path=None) -> dict:
    model = load_any(model_path, delta_path)
    _, test = rc.datasets(model.config)
    ev = evaluate(model, test)
    return {"eval_loss": ev["loss"], "eval_accuracy": ev["accuracy"]}


def _grid_out(report: analysis.SubspaceReport, out: Path, stem: str):
    report.to_csv(out / f"{stem}.csv")
    analysis.write_pgm(report.grid, out / f"{stem}.pgm", cell=4)


def cmd_analyze(mode: str, inputs: list[str], out: Path, rc: RunConfig | None = None, ranks=None,
                draws: int = 100) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    if mode in ("subspace", "seedpair"):
        if len(inputs) not in (1, 2):
            raise ConfigError(f"{mode} needs one or two lora_delta checkpoints")
        _, ma = checkpoint.load_lora_delta(inputs[0])
        _, mb = checkpoint.load_lora_delta(inputs[-1])
        fa = {(m.layer, m.target): m.A for m in ma}
        fb = {(m.layer, m.target): m.A for m in mb}
        if mode == "subspace":
            summary = {}
            for k in fa:
                rep = analysis.subspace_grid(fa[k], fb[k], left_label=inputs[0], right_label=inputs[-1])
                _grid_out(rep, out, f"phi_{k[0]}_{k[1]}")
                summary[f"{k[0]}.{k[1]}"] = float(rep.grid[0, 0])
            return {"top1_phi": summary}
        res = analysis.seed_pair_study(fa, fb, draws=draws)
        for k, rep in res.reports.items():
            _grid_out(rep, out, f"seedpair_{k[0]}_{k[1]}")
        _grid_out(res.baseline_report, out, "seedpair_random_baseline")
        with open(out / "seedpair_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "target", "top1_phi", "baseline_q99", "exceeds"])
            for k, v in res.top1().items():
                w.writerow([k[0], k[1], f"{v:.6f}", f"{res.threshold:.6f}", int(v > res.threshold)])
        return {"top1_phi": {f"{k[0]}.{k[1]}": v for k, v in res.top1().items()}, "baseline_q99": res.threshold}
    if mode == "projection":
        if len(inputs) < 2:
            raise ConfigError("projection needs a base full_model checkpoint and at least one lora_delta")
        base = checkpoint.load_model(inputs[0])
        rows = []
        for path in inputs[1:]:
            _, mods = checkpoint.load_lora_delta(path)
            for m in mods:
                W = base.params[f"blocks.{m.layer}.attn.{m.target}"]
                row = analysis.projection_study(W, m.delta(), m.r).row()
                rows.append({"layer": m.layer, "target": m.target, **row})
        with open(out / "projection.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return {"rows": len(rows)}
    if mode == "ranksweep":
        if len(inputs) != 1:
            raise ConfigError("ranksweep needs one base full_model checkpoint")
        return cmd_ranksweep(rc or RunConfig(), inputs[0], out, ranks or (1, 2, 4, 8, 64))
    raise ConfigError(f"unknown analyze mode {mode!r}")


def cmd_ranksweep(rc: RunConfig, base_path, out: Path, ranks, targets_variants=(("W_q",), ("W_q", "W_v"),
                                                                                   ("W_q", "W_k", "W_v", "W_o"))):
    base = checkpoint.load_model(base_path)
    train, test = rc.datasets(base.config)
    hyper = rc.hyper()
    cells = analysis.rank_sweep(base, train, test, ranks, targets_variants, hyper)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ranksweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(cells[0].row()), lineterminator="\n")
        w.writeheader()
        for c in cells:
            w.writerow(c.row())
    rows, cols, grid = analysis.sweep_grid(cells, "eval_loss")
    with open(out / "ranksweep_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["targets"] + [f"r={c}" for c in cols])
        for name, vals in zip(rows, grid):
            w.writerow([name] + [f"{v:.6f}" for v in vals])
    return {"cells": len(cells)}


def cmd_budget(preset: str, strategies: list[str], out: Path | None = None) -> list[dict]:
    try:
        cfg = PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    rows = budget.budget_table(cfg, strategies)
    print(budget.table_text(rows))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "budget.csv").write_text(budget.table_csv(rows))
    return rows


def cmd_bench(out: Path | None, cells, sizes, trials: int, preset: str = "bench", dtype: str = "f32",
              seed: int = 0) -> tuple[list, bool]:
    cfg = PRESETS[preset] if preset in PRESETS else None
    if cfg is None:
        raise ConfigError(f"unknown preset {preset!r}")
    recs = bench.run_latency(cfg, cells=cells, sizes=sizes, trials=trials, seed=seed,
                             dtype=np.float32 if dtype == "f32" else np.float64)
    text = bench.records_csv(recs)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "latency.csv").write_text(text)
    print(text, end="")
    return recs, bench.merged_within_bound(recs)


# ---------------------------------------------------------------------------
# argparse plumbing
# ---------------------------------------------------------------------------

def _cells(text: str):
    out = []
    for part in text.split(","):
        b, s = part.lower().split("x")
        out.append((int(b), int(s)))
    return out


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so that a flag
    # given before the subcommand is not reset by the subparser.
    dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", type=Path, default=dflt(None), help="flat key = value run config")
    g.add_argument("--seed", type=int, default=dflt(None))
    g.add_argument("--out", type=Path, default=dflt(None))
    g.add_argument("--threads", type=int, default=dflt(1), help="analysis workers (currently serial)")
    g.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    p = argparse.ArgumentParser(prog="lorakit", description=__doc__, parents=[_global_options(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common])
    a = sub.add_parser("adapt", parents=[common])
    a.add_argument("--base", required=True)
    e = sub.add_parser("eval", parents=[common])
    e.add_argument("model")
    e.add_argument("--delta")
    m = sub.add_parser("merge", parents=[common])
    m.add_argument("base")
    m.add_argument("delta")
    m.add_argument("output")
    s = sub.add_parser("switch", parents=[common])
    s.add_argument("base")
    s.add_argument("delta_old")
    s.add_argument("delta_new")
    s.add_argument("output")
    an = sub.add_parser("analyze", parents=[common])
    an.add_argument("mode", choices=["subspace", "seedpair", "projection", "ranksweep"])
    an.add_argument("inputs", nargs="+")
    an.add_argument("--ranks", default="1,2,4,8,64")
    an.add_argument("--draws", type=int, default=100)
    b = sub.add_parser("budget", parents=[common])
    b.add_argument("preset")
    b.add_argument("strategies", nargs="*")
    be = sub.add_parser("bench", parents=[common])
    be.add_argument("--cells", default="1x128,32x8", help="comma-separated BATCHxSEQ grid points")
    be.add_argument("--sizes", default="8")
    be.add_argument("--trials", type=int, default=100)
    be.add_argument("--preset", default="bench")
    be.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    rs = sub.add_parser("ranksweep", parents=[common])
    rs.add_argument("base")
    rs.add_argument("--ranks", default="1,2,4,8,64")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        rc = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.seed is not None:
            rc.seed = args.seed
        out = args.out or Path(rc.out_dir)
        cmd = args.command
        if cmd == "pretrain":
            result = cmd_pretrain(rc, out)
        elif cmd == "adapt":
            result = cmd_adapt(rc, args.base, out)
        elif cmd == "eval":
            result = cmd_eval(rc, args.model, args.delta)
        elif cmd == "merge":
            result = cmd_merge(args.base, args.delta, args.output)
        elif cmd == "switch":
            result = cmd_switch(args.base, args.delta_old, args.delta_new, args.output)
        elif cmd == "analyze":
            ranks = tuple(int(r) for r in args.ranks.split(","))
            result = cmd_analyze(args.mode, args.inputs, out, rc, ranks, args.draws)
        elif cmd == "ranksweep":
            result = cmd_ranksweep(rc, args.base, out, tuple(int(r) for r in args.ranks.split(",")))
        elif cmd == "budget":
            cmd_budget(args.preset, args.strategies, args.out)
            return EXIT_OK
        elif cmd == "bench":
            _, ok = cmd_bench(args.out, _cells(args.cells), tuple(int(s) for s in args.sizes.split(",")),
                              args.trials, args.preset, args.dtype, rc.seed)
            if not ok:
                print("merged-LoRA latency exceeded the 2% bound", file=sys.stderr)
                return EXIT_BOUND
            return EXIT_OK
        print(json.dumps(result, indent=2, default=float))
        return EXIT_OK
    except (ConfigError, StrategyError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, ArithmeticError, bench.BenchmarkError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
