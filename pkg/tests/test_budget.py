import numpy as np
import pytest

from lorakit import budget
from lorakit.adapters import AdaptationStrategy, StrategyError
from lorakit.config import PRESETS, ModelConfig
from lorakit.model import TrainHyper, TransformerModel, adapt
from lorakit.tasks import reverse_task

GPT3 = PRESETS["gpt3-175b"]


def n(config, text):
    return budget.count(config, AdaptationStrategy.parse(text)).trainable_params


def test_exact_reference_counts():
    assert n(GPT3, "lora:r=2:v") == 4_718_592
    assert n(GPT3, "adapterh:r=1") == 7_078_080
    assert n(GPT3, "preembed:lp=256:li=8") == 3_244_032
    assert n(PRESETS["roberta-base"], "lora:r=8:qv") == 294_912
    assert n(GPT3, "lora:r=8:q") == 18_874_368
    assert n(GPT3, "lora:r=8:qv") == 37_748_736


@pytest.mark.parametrize("text, millions", [
    ("lora:r=2:v", 4.7), ("lora:r=1:qv", 4.7), ("lora:r=2:qv", 9.4), ("lora:r=1:qkvo", 9.4),
    ("lora:r=4:qv", 18.8), ("lora:r=2:qkvo", 18.8), ("lora:r=8:qv", 37.7), ("lora:r=4:qkvo", 37.7),
    ("lora:r=64:qv", 301.9), ("lora:r=64:qkvo", 603.8),
    ("adapterh:r=4", 21.2), ("adapterh:r=8", 40.1), ("adapterh:r=16", 77.9), ("adapterh:r=64", 304.4),
    ("preembed:lp=32:li=8", 0.4), ("preembed:lp=512:li=8", 6.4),
])
def test_counts_agree_with_rounded_references(text, millions):
    # reference values are rounded or truncated to one decimal; the largest one
    # is reported as twice its rounded half, hence the relative allowance
    assert abs(n(GPT3, text) / 1e6 - millions) <= max(0.1, 1e-3 * millions)


def test_prelayer_formula_is_normative():
    assert n(GPT3, "prelayer:lp=8:li=8") == 96 * 12288 * 16


def test_toy_counts(toy_config):
    assert n(toy_config, "lora:r=4:qv") == 2048
    assert n(toy_config, "preembed:lp=2:li=2") == 256
    assert n(toy_config, "prelayer:lp=2:li=2") == 512
    assert n(toy_config, "lora+pe:r=4:q:lp=2:li=2") == 1024 + 256
    assert n(toy_config, "adapterl:r=4") == 2 * (2 * 64 * 4 + 4 + 64) + 2 * 2 * 64
    m = TransformerModel.init(toy_config)
    assert n(toy_config, "ft") == m.num_params()


def test_zero_rank_and_errors(toy_config):
    assert budget.count(toy_config, AdaptationStrategy("LoRA", r=0, targets=("W_q",))).trainable_params == 0
    with pytest.raises(StrategyError):
        n(toy_config, "lora:r=65:q")
    with pytest.raises(StrategyError):
        n(toy_config, "preembed:lp=30:li=2")
    with pytest.raises(StrategyError):
        n(ModelConfig(n_layers=1), "fttop2")


def test_checkpoint_arithmetic():
    b = budget.count(GPT3, AdaptationStrategy.parse("lora:r=4:qv"))
    assert budget.checkpoint_size(b) == 37_748_736
    assert budget.checkpoint_size(b, "fp32", header_bytes=100) == 4 * 18_874_368 + 100
    assert b.optimizer_state_scalars == 2 * b.trainable_params
    zero = budget.count(GPT3, AdaptationStrategy("LoRA", r=0, targets=("W_q",)))
    assert budget.checkpoint_size(zero, header_bytes=64) == 64
    with pytest.raises(ValueError):
        budget.checkpoint_size(b, "int3")


def test_table_output():
    rows = budget.budget_table(GPT3, ["lora:r=8:qv", "adapterh:r=1"])
    assert rows[0]["display"] == "37.7M" and rows[1]["trainable_params"] == 7_078_080
    csv_text = budget.table_csv(rows)
    assert csv_text.splitlines()[0] == ",".join(budget.COLUMNS) and len(csv_text.splitlines()) == 3
    assert budget.table_csv([]).strip() == ",".join(budget.COLUMNS)
    assert "37748736" in budget.table_text(rows)


@pytest.mark.parametrize("text", ["ft", "fttop2", "bitfit", "lora:r=4:qv", "lora:r=2:qkvo:bias", "adapterh:r=3",
                                  "adapterl:r=3", "preembed:lp=2:li=1", "prelayer:lp=1:li=2",
                                  "lora+pl:r=2:v:lp=1:li=1"])
def test_formula_matches_gradient_census(text):
    cfg = ModelConfig(n_layers=3, d_model=16, n_heads=2, vocab_size=24, max_seq_len=24)
    base = TransformerModel.init(cfg, seed=0)
    s = AdaptationStrategy.parse(text)
    res = adapt(base, reverse_task(8, 24, length=4), s, TrainHyper(epochs=1, batch_size=8), max_steps=1)
    params = {**res.model.params, **res.state.named_parameters()}
    assert sum(params[g].size for g in res.grad_names) == budget.count(cfg, s).trainable_params
