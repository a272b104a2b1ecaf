"""Adaptation strategies as attachments to a :class:`~lorakit.model.TransformerModel`.

LoRA modules add a scaled low-rank update ``(alpha / r) * B @ A`` next to a
frozen attention weight.  Adapters insert a bottleneck MLP into the residual
stream.  Prefix methods reserve sequence slots whose activations are trained.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .config import ATTN_WEIGHTS, ModelConfig
from .tensor_core import ContractError, DimensionError

if TYPE_CHECKING:
    from .model import TransformerModel

KINDS = ("FT", "FTTop2", "BitFit", "PreEmbed", "PreLayer", "AdapterH", "AdapterL",
         "LoRA", "LoRAPlusPE", "LoRAPlusPL")
_LORA_KINDS = {"LoRA", "LoRAPlusPE", "LoRAPlusPL"}
_PREFIX_KINDS = {"PreEmbed": "embed", "PreLayer": "layer", "LoRAPlusPE": "embed", "LoRAPlusPL": "layer"}
_TARGET_LETTERS = {"q": "W_q", "k": "W_k", "v": "W_v", "o": "W_o"}


class StrategyError(ValueError):
    """A strategy is malformed or does not fit the model configuration."""


@dataclass(frozen=True)
class AdaptationStrategy:
    kind: str
    r: int = 0
    alpha: float | None = None
    targets: tuple[str, ...] = ()
    l_p: int = 0
    l_i: int = 0
    r_b: int = 0
    train_bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StrategyError(f"unknown strategy kind {self.kind!r}")
        bad = [t for t in self.targets if t not in ATTN_WEIGHTS]
        if bad:
            raise StrategyError(f"unknown LoRA target(s) {bad}; expected a subset of {ATTN_WEIGHTS}")
        object.__setattr__(self, "targets", tuple(sorted(set(self.targets), key=ATTN_WEIGHTS.index)))

    @property
    def uses_lora(self) -> bool:
        return self.kind in _LORA_KINDS

    @property
    def prefix_kind(self) -> str | None:
        return _PREFIX_KINDS.get(self.kind)

    @property
    def n_slots(self) -> int:
        return self.l_p + self.l_i if self.prefix_kind else 0

    @property
    def lora_alpha(self) -> float:
        return float(self.r if self.alpha is None else self.alpha)

    def validate(self, config: ModelConfig) -> None:
        if self.uses_lora:
            if not self.targets:
                raise StrategyError("LoRA strategy needs at least one target weight")
            if not 1 <= self.r <= config.d_model:
                raise StrategyError(f"LoRA rank r={self.r} outside [1, {config.d_model}]")
        if self.kind in ("AdapterH", "AdapterL") and self.r_b < 1:
            raise StrategyError("adapter bottleneck r_b must be >= 1")
        if self.prefix_kind:
            if self.l_p < 0 or self.l_i < 0:
                raise StrategyError("prefix lengths must be non-negative")
            if self.l_p + self.l_i >= config.max_seq_len:
                raise StrategyError(
                    f"l_p + l_i = {self.l_p + self.l_i} leaves no room in max_seq_len={config.max_seq_len}")
        if self.kind == "FTTop2" and config.n_layers < 2:
            raise StrategyError("FTTop2 needs at least two layers")

    # -- string form used by the CLI and checkpoint headers --------------------

    def to_string(self) -> str:
        k = self.kind
        if k in ("FT", "FTTop2", "BitFit"):
            return k.lower()
        parts = []
        if self.uses_lora:
            parts += [f"r={self.r}", "".join(t[-1] for t in self.targets)]
            if self.alpha is not None:
                parts.append(f"alpha={self.alpha:g}")
            if self.train_bias:
                parts.append("bias")
        if self.prefix_kind:
            parts += [f"lp={self.l_p}", f"li={self.l_i}"]
        if k in ("AdapterH", "AdapterL"):
            parts.append(f"r={self.r_b}")
        name = {"LoRAPlusPE": "lora+pe", "LoRAPlusPL": "lora+pl"}.get(k, k.lower())
        return ":".join([name] + parts)

    @classmethod
    def parse(cls, text: str) -> "AdaptationStrategy":
        """Parse e.g. ``lora:r=8:qv``, ``adapterh:r=4``, ``preembed:lp=4:li=0``."""
        head, *fields = text.strip().split(":")
        names = {k.lower(): k for k in KINDS}
        names.update({"lora+pe": "LoRAPlusPE", "lora+pl": "LoRAPlusPL", "adapter_h": "AdapterH",
                      "adapter_l": "AdapterL"})
        kind = names.get(head.lower())
        if kind is None:
            raise StrategyError(f"unknown strategy {head!r}")
        kw: dict = {}
        for f in fields:
            if "=" in f:
                key, val = f.split("=", 1)
                key = key.lower()
                if key == "r":
                    kw["r_b" if kind in ("AdapterH", "AdapterL") else "r"] = int(val)
                elif key == "alpha":
                    kw["alpha"] = float(val)
                elif key in ("lp", "l_p"):
                    kw["l_p"] = int(val)
                elif key in ("li", "l_i"):
                    kw["l_i"] = int(val)
                else:
                    raise StrategyError(f"unknown strategy field {key!r} in {text!r}")
            elif f == "bias":
                kw["train_bias"] = True
            elif re.fullmatch(r"[qkvo]+", f):
                kw["targets"] = tuple(_TARGET_LETTERS[c] for c in f)
            else:
                raise StrategyError(f"cannot parse strategy field {f!r} in {text!r}")
        return cls(kind=kind, **kw)


def compose(lora_cfg: AdaptationStrategy, prefix_cfg: AdaptationStrategy) -> AdaptationStrategy:
    """Combine a LoRA strategy with a PreEmbed or PreLayer strategy."""
    if lora_cfg.kind != "LoRA":
        raise StrategyError(f"first argument must be a LoRA strategy, got {lora_cfg.kind}")
    kind = {"PreEmbed": "LoRAPlusPE", "PreLayer": "LoRAPlusPL"}.get(prefix_cfg.kind)
    if kind is None:
        raise StrategyError(f"second argument must be PreEmbed or PreLayer, got {prefix_cfg.kind}")
    return AdaptationStrategy(kind=kind, r=lora_cfg.r, alpha=lora_cfg.alpha, targets=lora_cfg.targets,
                              train_bias=lora_cfg.train_bias, l_p=prefix_cfg.l_p, l_i=prefix_cfg.l_i)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

@dataclass
class LoraModule:
    layer: int
    target: str
    A: np.ndarray  # r x k
    B: np.ndarray  # d x r
    r: int
    alpha: float
    merged: bool = False

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def key(self) -> str:
        return f"lora.{self.layer}.{self.target}"

    def delta(self) -> np.ndarray:
        """Effective update ``(alpha / r) * B @ A``."""
        return self.scaling * (self.B @ self.A)


def lora_attach(model: "TransformerModel", targets: Iterable[str], r: int, alpha: float | None = None,
                seed: int = 0) -> list[LoraModule]:
    """Attach one LoRA module per (layer, target) with A ~ N(0, 1/r) and B = 0."""
    cfg = model.config
    targets = tuple(sorted(set(targets), key=lambda t: ATTN_WEIGHTS.index(t) if t in ATTN_WEIGHTS else -1))
    bad = [t for t in targets if t not in ATTN_WEIGHTS]
    if bad:
        raise StrategyError(f"unknown LoRA target(s) {bad}")
    d = k = cfg.d_model
    if not 1 <= r <= min(d, k):
        raise StrategyError(f"LoRA rank r={r} outside [1, {min(d, k)}]")
    if r > min(d, k) / 4:
        warnings.warn(f"LoRA rank r={r} is not small relative to min(d, k)={min(d, k)}", stacklevel=2)
    alpha = float(r if alpha is None else alpha)
    rng = np.random.default_rng(seed)
    modules = []
    for layer in range(cfg.n_layers):
        for t in targets:
            A = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, k))
            m = LoraModule(layer=layer, target=t, A=A, B=np.zeros((d, r)), r=r, alpha=alpha)
            model.adaptation.lora[(layer, t)] = m
            modules.append(m)
    return modules


def lora_forward(module: LoraModule, W0: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``h = W0 x + (alpha / r) B (A x)`` for column inputs ``x`` (k x n)."""
    if module.merged:
        raise ContractError(f"{module.key} is merged; its update is already inside the host weight")
    W0, x = np.asarray(W0, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if W0.shape != (module.B.shape[0], module.A.shape[1]) or x.shape[0] != W0.shape[1]:
        raise DimensionError(f"lora_forward shapes: W0 {W0.shape}, A {module.A.shape}, "
                             f"B {module.B.shape}, x {x.shape}")
    return W0 @ x + module.scaling * (module.B @ (module.A @ x))


def lora_merge(module: LoraModule, host_weight: np.ndarray) -> np.ndarray:
    if module.merged:
        raise ContractError(f"{module.key} is already merged")
    out = (host_weight + module.delta()).astype(host_weight.dtype, copy=False)
    module.merged = True
    return out


def lora_unmerge(module: LoraModule, host_weight: np.ndarray) -> np.ndarray:
    if not module.merged:
        raise ContractError(f"{module.key} is not merged")
    out = (host_weight - module.delta()).astype(host_weight.dtype, copy=False)
    module.merged = False
    return out


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------

@dataclass
class AdapterModule:
    layer: int
    placement: str  # "after_attention" | "after_mlp"
    W_down: np.ndarray  # d_model x r_b
    b_down: np.ndarray
    W_up: np.ndarray  # r_b x d_model
    b_up: np.ndarray
    ln_gamma: np.ndarray | None = None
    ln_beta: np.ndarray | None = None

    @property
    def key(self) -> str:
        return f"adapter.{self.layer}.{self.placement}"

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"W_down": self.W_down, "b_down": self.b_down, "W_up": self.W_up, "b_up": self.b_up}
        if self.ln_gamma is not None:
            out["ln_gamma"] = self.ln_gamma
            out["ln_beta"] = self.ln_beta
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Residual bottleneck on row inputs, without the optional LayerNorm."""
        return x + np.maximum(x @ self.W_down + self.b_down, 0.0) @ self.W_up + self.b_up


def adapter_attach(model: "TransformerModel", variant: str, r_b: int, seed: int = 0) -> list[AdapterModule]:
    """Adapter^H: after attention and after MLP in every block.  Adapter^L: after
    the MLP only, behind an extra trainable LayerNorm."""
    variant = variant.upper().removeprefix("ADAPTER")
    if variant not in ("H", "L"):
        raise StrategyError(f"adapter variant must be 'H' or 'L', got {variant!r}")
    d = model.config.d_model
    if r_b < 1:
        raise StrategyError("adapter bottleneck r_b must be >= 1")
    if r_b >= d:
        warnings.warn(f"adapter bottleneck r_b={r_b} is not below d_model={d}", stacklevel=2)
    rng = np.random.default_rng(seed)
    placements = ("after_attention", "after_mlp") if variant == "H" else ("after_mlp",)
    mods = []
    for layer in range(model.config.n_layers):
        for place in placements:
            m = AdapterModule(layer=layer, placement=place,
                              W_down=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r_b)),
                              b_down=np.zeros(r_b), W_up=np.zeros((r_b, d)), b_up=np.zeros(d))
            if variant == "L":
                m.ln_gamma, m.ln_beta = np.ones(d), np.zeros(d)
            model.adaptation.adapters[(layer, place)] = m
            mods.append(m)
    return mods


# ---------------------------------------------------------------------------
# Prefix / infix slots
# ---------------------------------------------------------------------------

@dataclass
class PrefixState:
    kind: str  # "embed" | "layer"
    l_p: int
    l_i: int
    vectors: list[np.ndarray]  # one (l_p + l_i) x d_model array; one per layer for "layer"

    @property
    def n_slots(self) -> int:
        return self.l_p + self.l_i

    def usable_length(self, max_seq_len: int) -> int:
        return max_seq_len - self.n_slots


def prefix_attach(model: "TransformerModel", kind: str, l_p: int, l_i: int, seed: int = 0) -> PrefixState:
    cfg = model.config
    if kind not in ("embed", "layer"):
        raise StrategyError(f"prefix kind must be 'embed' or 'layer', got {kind!r}")
    if l_p < 0 or l_i < 0 or l_p + l_i >= cfg.max_seq_len:
        raise StrategyError(f"l_p + l_i = {l_p + l_i} exhausts max_seq_len={cfg.max_seq_len}")
    rng = np.random.default_rng(seed)
    n = 1 if kind == "embed" else cfg.n_layers
    state = PrefixState(kind=kind, l_p=l_p, l_i=l_i,
                        vectors=[rng.normal(0.0, 0.02, size=(l_p + l_i, cfg.d_model)) for _ in range(n)])
    model.adaptation.prefix = state
    return state


# ---------------------------------------------------------------------------
# Everything attached to one model
# ---------------------------------------------------------------------------

@dataclass
class AdaptationState:
    lora: dict[tuple[int, str], LoraModule] = field(default_factory=dict)
    adapters: dict[tuple[int, str], AdapterModule] = field(default_factory=dict)
    prefix: PrefixState | None = None

    def is_empty(self) -> bool:
        return not self.lora and not self.adapters and self.prefix is None

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.lora.values():
            out[m.key + ".A"] = m.A
            out[m.key + ".B"] = m.B
        for a in self.adapters.values():
            for name, arr in a.parameters().items():
                out[f"{a.key}.{name}"] = arr
        if self.prefix is not None:
            for i, v in enumerate(self.prefix.vectors):
                out[f"prefix.{self.prefix.kind}.{i}"] = v
        return out

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        for m in self.lora.values():
            if m.key + ".A" in params or m.key + ".B" in params:
                if m.merged:
                    raise ContractError(f"{m.key} is merged; unmerge before updating its factors")
                m.A = params.get(m.key + ".A", m.A)
                m.B = params.get(m.key + ".B", m.B)
        for a in self.adapters.values():
            for name in a.parameters():
                key = f"{a.key}.{name}"
                if key in params:
                    setattr(a, name, params[key])
        if self.prefix is not None:
            for i in range(len(self.prefix.vectors)):
                key = f"prefix.{self.prefix.kind}.{i}"
                if key in params:
                    self.prefix.vectors[i] = params[key]

    def copy(self) -> "AdaptationState":
        return AdaptationState(
            lora={k: replace(m) for k, m in self.lora.items()},
            adapters={k: replace(a) for k, a in self.adapters.items()},
            prefix=None if self.prefix is None else replace(self.prefix, vectors=list(self.prefix.vectors)),
        )


def stack_lora_states(states: list[AdaptationState]) -> AdaptationState:
    """Batch per-sample LoRA sets: row ``i`` of a batch uses ``states[i]``.

    All sets must cover the same (layer, target) keys with the same rank and
    be unmerged.
    """
    if not states:
        raise StrategyError("need at least one LoRA state")
    keys = set(states[0].lora)
    for s in states:
        if set(s.lora) != keys:
            raise StrategyError("per-sample LoRA sets must target the same weights")
        if s.adapters or s.prefix is not None:
            raise StrategyError("per-sample selection supports LoRA-only states")
    out = AdaptationState()
    for key in keys:
        mods = [s.lora[key] for s in states]
        if any(m.merged for m in mods):
            raise ContractError("per-sample LoRA selection requires unmerged modules")
        if len({m.r for m in mods}) != 1:
            raise StrategyError("per-sample LoRA sets must share the rank")
        # Fold alpha/r into B so one batched module carries per-row scaling.
        out.lora[key] = LoraModule(layer=key[0], target=key[1],
                                   A=np.stack([m.A for m in mods]),
                                   B=np.stack([m.scaling * m.B for m in mods]),
                                   r=mods[0].r, alpha=float(mods[0].r))
    return out


def attach_strategy(model: "TransformerModel", strategy: AdaptationStrategy, seed: int = 0) -> AdaptationState:
    """Attach everything a strategy needs; returns the model's adaptation state."""
    strategy.validate(model.config)
    if strategy.uses_lora:
        lora_attach(model, strategy.targets, strategy.r, strategy.alpha, seed=seed)
    if strategy.kind in ("AdapterH", "AdapterL"):
        adapter_attach(model, strategy.kind[-1], strategy.r_b, seed=seed)
    if strategy.prefix_kind and strategy.n_slots > 0:
        prefix_attach(model, strategy.prefix_kind, strategy.l_p, strategy.l_i, seed=seed + 1)
    return model.adaptation
