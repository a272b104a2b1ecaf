import numpy as np
import pytest

from lorakit import bench
from lorakit.adapters import AdaptationStrategy
from lorakit.config import ModelConfig
from lorakit.model import TransformerModel
from lorakit.tasks import reverse_task

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=32, max_seq_len=32)


def test_run_latency_records():
    recs = bench.run_latency(TINY, cells=[(1, 8), (4, 8)], sizes=(2,), trials=100, warmup=1)
    assert len(recs) == 10
    assert {r.variant for r in recs} == set(bench.VARIANTS)
    for r in recs:
        assert r.trials == 100 and r.mean_ms > 0 and r.std_ms >= 0
        if r.variant == "base":
            assert r.slowdown_pct == 0.0
    text = bench.records_csv(recs)
    assert text.splitlines()[0] == ",".join(bench.CSV_FIELDS) and len(text.splitlines()) == 11


def test_grid_from_batches_and_seq_lens():
    recs = bench.run_latency(TINY, batches=(1, 2), seq_lens=(4, 6), variants=("base", "adapter_H"), sizes=(2, 4))
    assert {(r.batch, r.seq_len) for r in recs} == {(1, 4), (1, 6), (2, 4), (2, 6)}
    assert sorted(r.bottleneck_or_rank for r in recs if r.batch == 1 and r.seq_len == 4) == [0, 2, 4]


def test_benchmark_errors():
    with pytest.raises(bench.BenchmarkError):
        bench.run_latency(ModelConfig(n_layers=0), cells=[(1, 4)])
    with pytest.raises(bench.BenchmarkError):
        bench.run_latency(TINY, cells=[(1, 4)], trials=10)
    with pytest.raises(bench.BenchmarkError):
        bench.run_latency(TINY, cells=[(1, 4)], variants=("base",), timer=lambda: 0.0)
    with pytest.raises(bench.BenchmarkError):
        bench.build_variant(TransformerModel.init(TINY), "lora_sideways", 2)


def test_estimators():
    assert bench.median_of_means(np.arange(100.0)) == pytest.approx(49.5)
    base = np.array([10.0, 20.0, 10.0, 20.0])
    assert bench.paired_slowdown(base * 1.1, base) == pytest.approx(10.0)
    # drifting load cancels in the paired ratio
    drift = np.linspace(10, 30, 101)
    assert bench.paired_slowdown(drift * 1.05, drift) == pytest.approx(5.0)


def test_merged_bound():
    rec = lambda v, s: bench.LatencyRecord(v, 1, 8, 8, 100, 1.0, 0.1, 1.0, s)
    assert bench.merged_within_bound([rec("lora_merged", 1.9), rec("adapter_H", 30.0)])
    assert not bench.merged_within_bound([rec("lora_merged", -2.1)])


def test_merged_variant_is_structurally_identical_to_base():
    base = TransformerModel.init(TINY, seed=0)
    tokens = np.zeros((1, 8), dtype=int)
    assert bench.op_profile(bench.build_variant(base, "lora_merged", 4), tokens) == bench.op_profile(base, tokens)


def test_adapters_add_two_sequential_matmuls_per_layer():
    base = TransformerModel.init(TINY, seed=0)
    tokens = np.zeros((1, 8), dtype=int)
    ref = bench.op_profile(base, tokens)["matmul"]
    h = bench.op_profile(bench.build_variant(base, "adapter_H", 4), tokens)["matmul"]
    low = bench.op_profile(bench.build_variant(base, "adapter_L", 4), tokens)["matmul"]
    assert h - ref == 2 * 2 * TINY.n_layers
    assert low - ref == 2 * TINY.n_layers


def test_variant_dtype_follows_base():
    base = TransformerModel.init(TINY, seed=0, dtype=np.float32)
    m = bench.build_variant(base, "lora_unmerged", 2)
    assert all(x.A.dtype == np.float32 and x.B.dtype == np.float32 for x in m.adaptation.lora.values())


def test_throughput_probe_grad_counts():
    base = TransformerModel.init(TINY, seed=0)
    data = reverse_task(32, 32, length=4)
    ft = bench.throughput_probe(base, data, AdaptationStrategy.parse("ft"), steps=2)
    lora = bench.throughput_probe(base, data, AdaptationStrategy.parse("lora:r=2:qv"), steps=2)
    assert lora["grad_scalars"] == 2 * 2 * 2 * 16 * 2
    assert ft["grad_scalars"] == base.num_params() > lora["grad_scalars"]
    assert ft["tokens_per_sec"] > 0 and lora["tokens_per_sec"] > 0
    with pytest.raises(ValueError):
        bench.throughput_probe(base, data, AdaptationStrategy.parse("ft"), steps=0)
