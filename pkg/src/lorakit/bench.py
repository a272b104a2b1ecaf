"""Inference-latency microbenchmark: base vs merged/unmerged LoRA vs adapters."""
from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor_core as tc
from .adapters import AdaptationStrategy, adapter_attach, lora_attach
from .config import ModelConfig
from .model import TransformerModel, adapt, forward, merge_all

VARIANTS = ("base", "lora_merged", "lora_unmerged", "adapter_H", "adapter_L")
CSV_FIELDS = ("variant", "batch", "seq_len", "size", "trials", "mean_ms", "std_ms", "slowdown_pct")


class BenchmarkError(RuntimeError):
    pass


@dataclass
class LatencyRecord:
    variant: str
    batch: int
    seq_len: int
    bottleneck_or_rank: int
    trials: int
    mean_ms: float
    std_ms: float
    median_of_means_ms: float
    slowdown_pct: float = 0.0

    def csv_row(self) -> dict:
        return {"variant": self.variant, "batch": self.batch, "seq_len": self.seq_len,
                "size": self.bottleneck_or_rank, "trials": self.trials, "mean_ms": f"{self.mean_ms:.4f}",
                "std_ms": f"{self.std_ms:.4f}", "slowdown_pct": f"{self.slowdown_pct:.3f}"}


def median_of_means(samples: np.ndarray, groups: int = 10) -> float:
    chunks = np.array_split(np.asarray(samples), min(groups, len(samples)))
    return float(np.median([c.mean() for c in chunks]))


def paired_slowdown(samples: np.ndarray, base: np.ndarray) -> float:
    """Percent slowdown from the median of per-trial ratios.

    Each trial times every variant back to back, so dividing by the base time
    of the same trial cancels slow drifts in machine load."""
    return 100.0 * (float(np.median(np.asarray(samples) / np.asarray(base))) - 1.0)


def build_variant(base: TransformerModel, variant: str, size: int, seed: int = 0) -> TransformerModel:
    """A model for one benchmark variant; weights are random since latency only
    depends on shapes."""
    m = base.detached()
    rng = np.random.default_rng(seed)
    if variant == "base":
        return m
    if variant in ("lora_merged", "lora_unmerged"):
        for mod in lora_attach(m, ("W_q", "W_v"), size, seed=seed):
            dtype = base.params["tok_emb"].dtype
            mod.A = mod.A.astype(dtype)
            mod.B = rng.normal(0.0, 0.02, size=mod.B.shape).astype(dtype)
        if variant == "lora_merged":
            merge_all(m)
        return m
    if variant in ("adapter_H", "adapter_L"):
        dtype = base.params["tok_emb"].dtype
        for a in adapter_attach(m, variant[-1], size, seed=seed):
            a.W_up = rng.normal(0.0, 0.02, size=a.W_up.shape)
            for name, arr in a.parameters().items():
                setattr(a, name, arr.astype(dtype))
        return m
    raise BenchmarkError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def op_profile(model: TransformerModel, tokens: np.ndarray):
    """Primitive-operation counts of one forward pass."""
    with tc.count_ops() as counts:
        forward(model, tokens)
    return dict(counts)


def run_latency(config: ModelConfig, batches=(1, 32), seq_lens=(128,), variants=VARIANTS,
                sizes=(8,), trials: int = 100, warmup: int = 5, seed: int = 0,
                dtype=np.float64, cells=None, timer=time.perf_counter) -> list[LatencyRecord]:
    """Time single forward passes; all variants of one (batch, seq) cell are
    interleaved trial by trial so slow drifts hit every variant equally."""
    if config.n_layers < 1:
        raise BenchmarkError("model has no layers; nothing to time")
    if trials < 100:
        raise BenchmarkError("at least 100 trials are required")
    base = TransformerModel.init(config, seed=seed, dtype=dtype)
    models = {("base", 0): base}
    for v in variants:
        if v != "base":
            for s in sizes:
                models[(v, s)] = build_variant(base, v, s, seed=seed)
    rng = np.random.default_rng(seed)
    records = []
    if cells is None:
        cells = [(b, s) for b in batches for s in seq_lens]
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    for batch, seq in cells:
        tokens = rng.integers(0, config.vocab_size, size=(batch, seq))
        samples = _time_interleaved(models, tokens, trials, warmup, timer)
        if samples[("base", 0)].mean() < 100 * resolution_ms:
            raise BenchmarkError("forward pass too fast for the timer; use a larger model or sequence")
        base_arr = samples[("base", 0)]
        for (v, s), arr in samples.items():
            records.append(LatencyRecord(v, batch, seq, s, trials, float(arr.mean()), float(arr.std(ddof=1)),
                                         median_of_means(arr), paired_slowdown(arr, base_arr)))
    return records


def _time_interleaved(models: dict, tokens, trials: int, warmup: int, timer) -> dict:
    for m in models.values():
        for _ in range(warmup):
            forward(m, tokens)
    samples = {k: np.empty(trials) for k in models}
    keys = list(models)
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for t in range(trials):
            for k in (keys if t % 2 == 0 else keys[::-1]):
                t0 = timer()
                forward(models[k], tokens)
                samples[k][t] = (timer() - t0) * 1e3
    finally:
        if gc_was:
            gc.enable()
    return samples


def records_csv(records: list[LatencyRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def merged_within_bound(records: list[LatencyRecord], bound_pct: float = 2.0) -> bool:
    return all(abs(r.slowdown_pct) <= bound_pct for r in records if r.variant == "lora_merged")


def throughput_probe(model: TransformerModel, dataset, strategy: AdaptationStrategy, steps: int,
                     hyper=None) -> dict:
    """Training tokens per second and the number of scalars that receive gradients."""
    from .model import TrainHyper

    if steps < 1:
        raise ValueError("steps must be positive")
    hyper = hyper or TrainHyper(epochs=1)
    hyper = TrainHyper(**{**asdict(hyper), "epochs": max(1, -(-steps * hyper.batch_size // len(dataset)))})
    t0 = time.perf_counter()
    res = adapt(model, dataset, strategy, hyper, max_steps=steps)
    wall = time.perf_counter() - t0
    per_example = np.mean([len(x) + len(y) - 1 for x, y in dataset.pairs])
    tokens = steps * hyper.batch_size * per_example
    return {"strategy": strategy.to_string(), "steps": steps, "tokens_per_sec": tokens / wall,
            "grad_scalars": res.trainable_params}
