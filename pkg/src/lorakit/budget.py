"""Closed-form trainable-parameter, checkpoint-size and optimizer-state accounting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .adapters import AdaptationStrategy, StrategyError
from .config import ModelConfig
from .model import is_bias, param_shapes, trainable_names

BYTES_PER_SCALAR = {"fp16": 2, "fp32": 4, "fp64": 8}


@dataclass(frozen=True)
class ParamBudget:
    strategy: AdaptationStrategy
    trainable_params: int
    checkpoint_bytes_fp16: int
    checkpoint_bytes_fp32: int
    optimizer_state_scalars: int


def _census(shapes: dict, names) -> int:
    total = 0
    for n in names:
        size = 1
        for s in shapes[n]:
            size *= s
        total += size
    return total


def lora_params(config: ModelConfig, r: int, n_targets: int) -> int:
    """2 x (adapted matrices) x d_model x r."""
    return 2 * (config.n_layers * n_targets) * config.d_model * r


def adapter_params(config: ModelConfig, r: int, n_adapters: int, n_layernorms: int) -> int:
    d = config.d_model
    return n_adapters * (2 * d * r + r + d) + 2 * n_layernorms * d


def prefix_params(config: ModelConfig, kind: str, l_p: int, l_i: int) -> int:
    per_layer = config.d_model * (l_p + l_i)
    return per_layer if kind == "embed" else config.n_layers * per_layer


def count(config: ModelConfig, strategy: AdaptationStrategy) -> ParamBudget:
    """Exact number of scalars a strategy trains on ``config``."""
    k = strategy.kind
    shapes = param_shapes(config)
    if k in ("FT", "FTTop2", "BitFit"):
        if k == "FTTop2" and config.n_layers < 2:
            raise StrategyError("FTTop2 needs at least two layers")
        n = _census(shapes, trainable_names(config, strategy))
    elif k == "AdapterH":
        n = adapter_params(config, strategy.r_b, 2 * config.n_layers, 0)
    elif k == "AdapterL":
        n = adapter_params(config, strategy.r_b, config.n_layers, config.n_layers)
    elif k in ("PreEmbed", "PreLayer"):
        n = prefix_params(config, strategy.prefix_kind, strategy.l_p, strategy.l_i)
    else:
        if strategy.r < 0 or strategy.r > config.d_model:
            raise StrategyError(f"LoRA rank r={strategy.r} outside [0, {config.d_model}]")
        n = lora_params(config, strategy.r, len(strategy.targets))
        if strategy.train_bias:
            n += _census(shapes, [s for s in shapes if is_bias(s)])
        if strategy.prefix_kind:
            n += prefix_params(config, strategy.prefix_kind, strategy.l_p, strategy.l_i)
    if strategy.prefix_kind and strategy.l_p + strategy.l_i >= config.max_seq_len:
        raise StrategyError(f"l_p + l_i = {strategy.l_p + strategy.l_i} exhausts max_seq_len")
    return ParamBudget(strategy=strategy, trainable_params=n, checkpoint_bytes_fp16=2 * n,
                       checkpoint_bytes_fp32=4 * n, optimizer_state_scalars=2 * n)


def checkpoint_size(budget: ParamBudget, precision: str = "fp16", header_bytes: int = 0) -> int:
    try:
        width = BYTES_PER_SCALAR[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; choose from {sorted(BYTES_PER_SCALAR)}") from None
    return width * budget.trainable_params + header_bytes


def fmt_millions(n: int) -> str:
    return f"{n / 1e6:.1f}M"


COLUMNS = ("strategy", "trainable_params", "display", "ckpt_fp16_bytes", "ckpt_fp32_bytes",
           "optimizer_state_scalars")


def budget_table(config: ModelConfig, strategies) -> list[dict]:
    rows = []
    for s in strategies:
        if isinstance(s, str):
            s = AdaptationStrategy.parse(s)
        b = count(config, s)
        rows.append({"strategy": s.to_string(), "trainable_params": b.trainable_params,
                     "display": fmt_millions(b.trainable_params),
                     "ckpt_fp16_bytes": b.checkpoint_bytes_fp16, "ckpt_fp32_bytes": b.checkpoint_bytes_fp32,
                     "optimizer_state_scalars": b.optimizer_state_scalars})
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def table_text(rows: list[dict]) -> str:
    cells = [list(COLUMNS)] + [[str(r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
