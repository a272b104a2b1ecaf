from __future__ import annotations

from dataclasses import asdict, dataclass

ATTN_WEIGHTS = ("W_q", "W_k", "W_v", "W_o")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 32
    d_ffn: int | None = None

    def __post_init__(self):
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)
        for name in ("d_model", "n_heads", "vocab_size", "max_seq_len", "d_ffn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Architecture presets used for parameter accounting.
PRESETS = {
    "gpt3-175b": ModelConfig(n_layers=96, d_model=12288, n_heads=96, vocab_size=50257, max_seq_len=2048),
    "roberta-base": ModelConfig(n_layers=12, d_model=768, n_heads=12, vocab_size=50265, max_seq_len=512),
    "roberta-large": ModelConfig(n_layers=24, d_model=1024, n_heads=16, vocab_size=50265, max_seq_len=512),
    "gpt2-medium": ModelConfig(n_layers=24, d_model=1024, n_heads=16, vocab_size=50257, max_seq_len=1024),
    "toy": ModelConfig(),
    "bench": ModelConfig(n_layers=12, d_model=512, n_heads=8, vocab_size=64, max_seq_len=128),
}
