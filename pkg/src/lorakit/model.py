"""Toy pre-LayerNorm decoder-only Transformer and its training loops."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .adapters import AdaptationState, AdaptationStrategy, attach_strategy
from .config import ATTN_WEIGHTS, ModelConfig
from .tasks import TaskDataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every base-model tensor and its shape, in a fixed order."""
    d, f, V = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        for w in ATTN_WEIGHTS:
            shapes[p + "attn." + w] = (d, d)
            shapes[p + "attn.b_" + w[-1]] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.W_1"] = (f, d)
        shapes[p + "mlp.b_1"] = (f,)
        shapes[p + "mlp.W_2"] = (d, f)
        shapes[p + "mlp.b_2"] = (d,)
    shapes["ln_f.gamma"] = (d,)
    shapes["ln_f.beta"] = (d,)
    shapes["head.W"] = (V, d)
    shapes["head.b"] = (V,)
    return shapes


def is_bias(name: str) -> bool:
    """Bias vectors and LayerNorm shifts (the BitFit set)."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b_") or leaf in ("beta", "b")


def trainable_names(cfg: ModelConfig, strategy: AdaptationStrategy) -> list[str]:
    """Base-model tensors a strategy updates."""
    names = list(param_shapes(cfg))
    if strategy.kind == "FT":
        return names
    if strategy.kind == "FTTop2":
        top = tuple(f"blocks.{i}." for i in range(cfg.n_layers - 2, cfg.n_layers))
        return [n for n in names if n.startswith(top) or n.startswith(("ln_f.", "head."))]
    if strategy.kind == "BitFit" or (strategy.uses_lora and strategy.train_bias):
        return [n for n in names if is_bias(n)]
    return []


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adaptation: AdaptationState = field(default_factory=AdaptationState)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        resid_std = 0.02 / math.sqrt(2 * max(config.n_layers, 1))
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                arr = np.ones(shape)
            elif is_bias(name):
                arr = np.zeros(shape)
            elif leaf in ("W_o", "W_2"):
                arr = rng.normal(0.0, resid_std, size=shape)
            else:
                arr = rng.normal(0.0, 0.02, size=shape)
            params[name] = arr.astype(dtype)
        return cls(config=config, params=params)

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, dict(self.params), self.adaptation.copy())

    def detached(self) -> "TransformerModel":
        """Same frozen weights, no attachments."""
        return TransformerModel(self.config, dict(self.params))

    def weights_hash(self, names=None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n]).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray       # (B, T) input ids
    targets: np.ndarray      # (B, T) next-token ids
    weights: np.ndarray      # (B, T) 1.0 on scored (target-span) positions
    slots: np.ndarray | None  # (B, T) slot index, -1 for ordinary tokens


def encode_batch(pairs, cfg: ModelConfig, l_p: int = 0, l_i: int = 0) -> Batch:
    """Lay out ``[prefix slots] x [infix slots] y`` and shift for next-token prediction."""
    n_slots = l_p + l_i
    rows, slot_rows, score_rows = [], [], []
    for x, y in pairs:
        if not y:
            raise tc.ContractError("empty target span")
        seq = [0] * l_p + list(x) + [0] * l_i + list(y)
        slot = list(range(l_p)) + [-1] * len(x) + list(range(l_p, n_slots)) + [-1] * len(y)
        scored = [0] * (l_p + len(x) + l_i) + [1] * len(y)
        rows.append(seq)
        slot_rows.append(slot)
        score_rows.append(scored)
    T = max(len(s) for s in rows) - 1
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence of {T} positions exceeds max_seq_len={cfg.max_seq_len} "
                         f"({n_slots} reserved for prefix/infix slots)")
    B = len(rows)
    tokens = np.zeros((B, T), dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    weights = np.zeros((B, T))
    slots = np.full((B, T), -1, dtype=np.int64)
    for b, (seq, slot, scored) in enumerate(zip(rows, slot_rows, score_rows)):
        n = len(seq) - 1
        tokens[b, :n] = seq[:-1]
        targets[b, :n] = seq[1:]
        weights[b, :n] = scored[1:]
        slots[b, :n] = slot[:-1]
    return Batch(tokens, targets, weights, slots if n_slots else None)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _linear(x, p, prefix: str, w: str, b: str, lora=None):
    y = tc.add(tc.matmul(x, tc.transpose(p[prefix + w])), p[prefix + b])
    if lora is not None and not lora.merged:
        A, B = p[lora.key + ".A"], p[lora.key + ".B"]
        delta = tc.matmul(tc.matmul(x, tc.transpose(A)), tc.transpose(B))
        y = tc.add(y, tc.scale(delta, lora.scaling))
    return y


def _adapter(x, p, module):
    k = module.key + "."
    inner = x
    if module.ln_gamma is not None:
        inner = tc.layernorm(x, p[k + "ln_gamma"], p[k + "ln_beta"])
    hidden = tc.relu(tc.add(tc.matmul(inner, p[k + "W_down"]), p[k + "b_down"]))
    return tc.add(x, tc.add(tc.matmul(hidden, p[k + "W_up"]), p[k + "b_up"]))


def _replace_slots(h, p, prefix, index: int, slots: np.ndarray, pos=None):
    vals = tc.embedding(p[f"prefix.{prefix.kind}.{index}"], np.maximum(slots, 0))
    if pos is not None:
        vals = tc.add(vals, pos)
    return tc.where((slots >= 0)[..., None], vals, h)


def forward_nodes(cfg: ModelConfig, p: dict, tokens: np.ndarray, state: AdaptationState | None = None,
                  slots: np.ndarray | None = None) -> tc.Node:
    """Logits node of shape (B, T, vocab) built from parameter nodes ``p``."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    Bsz, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len={cfg.max_seq_len}")
    if T < 1:
        raise ValueError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    state = state or AdaptationState()
    prefix = state.prefix
    if prefix is not None and slots is None:
        raise ValueError("prefix state attached but no slot layout given")
    if prefix is not None and slots is not None:
        slots = np.broadcast_to(np.asarray(slots), tokens.shape)

    H, dh = cfg.n_heads, cfg.head_dim
    pos = tc.embedding(p["pos_emb"], np.arange(T))
    h = tc.add(tc.embedding(p["tok_emb"], tokens), pos)
    if prefix is not None and prefix.kind == "embed":
        h = _replace_slots(h, p, prefix, 0, slots, pos)
    causal = np.tril(np.ones((T, T), dtype=bool))

    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        if prefix is not None and prefix.kind == "layer":
            h = _replace_slots(h, p, prefix, i, slots)
        x = tc.layernorm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        heads = []
        for w in ("W_q", "W_k", "W_v"):
            proj = _linear(x, p, pre + "attn.", w, "b_" + w[-1], state.lora.get((i, w)))
            heads.append(tc.transpose(tc.reshape(proj, (Bsz, T, H, dh)), (0, 2, 1, 3)))
        q, k, v = heads
        scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(dh))
        att = tc.softmax(scores, mask=causal)
        o = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (Bsz, T, cfg.d_model))
        a = _linear(o, p, pre + "attn.", "W_o", "b_o", state.lora.get((i, "W_o")))
        if (i, "after_attention") in state.adapters:
            a = _adapter(a, p, state.adapters[(i, "after_attention")])
        h = tc.add(h, a)
        x = tc.layernorm(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        m = _linear(tc.gelu(_linear(x, p, pre + "mlp.", "W_1", "b_1")), p, pre + "mlp.", "W_2", "b_2")
        if (i, "after_mlp") in state.adapters:
            m = _adapter(m, p, state.adapters[(i, "after_mlp")])
        h = tc.add(h, m)

    h = tc.layernorm(h, p["ln_f.gamma"], p["ln_f.beta"])
    return tc.add(tc.matmul(h, tc.transpose(p["head.W"])), p["head.b"])


def all_parameters(model: TransformerModel, state: AdaptationState | None = None) -> dict[str, np.ndarray]:
    state = model.adaptation if state is None else state
    return {**model.params, **state.named_parameters()}


def forward(model: TransformerModel, tokens, strategy_state: AdaptationState | None = None,
            slots: np.ndarray | None = None) -> np.ndarray:
    """Logits (T x vocab for 1-D input, B x T x vocab for 2-D)."""
    state = model.adaptation if strategy_state is None else strategy_state
    p = {k: tc.Node(v) for k, v in all_parameters(model, state).items()}
    out = forward_nodes(model.config, p, tokens, state, slots).value
    return out[0] if np.asarray(tokens).ndim == 1 else out


def loss(logits, targets, weights=None) -> float:
    """Mean negative log-likelihood over the scored positions."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if weights is None:
        weights = np.ones(targets.shape)
    return float(tc.cross_entropy(logits, targets, weights).value)


def evaluate(model: TransformerModel, dataset: TaskDataset, state: AdaptationState | None = None,
             batch_size: int = 256) -> dict:
    """Target-span loss and token accuracy over a dataset."""
    state = model.adaptation if state is None else state
    l_p, l_i = (state.prefix.l_p, state.prefix.l_i) if state.prefix else (0, 0)
    tot_loss = tot_w = correct = 0.0
    for s in range(0, len(dataset.pairs), batch_size):
        batch = encode_batch(dataset.pairs[s:s + batch_size], model.config, l_p, l_i)
        logits = forward(model, batch.tokens, state, batch.slots)
        w = batch.weights.sum()
        tot_loss += loss(logits, batch.targets, batch.weights) * w
        correct += float(((logits.argmax(-1) == batch.targets) * batch.weights).sum())
        tot_w += w
    return {"loss": tot_loss / tot_w, "accuracy": correct / tot_w}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainHyper:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    schedule: str = "linear"
    seed: int = 0

    def adamw(self) -> tc.AdamWHyper:
        return tc.AdamWHyper(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                             weight_decay=self.weight_decay)

    def lr_at(self, step: int, total: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "constant":
            return self.lr
        span = max(total - self.warmup_steps, 1)
        return self.lr * max(0.0, 1.0 - (step - self.warmup_steps) / span)


PRETRAIN_HYPER = TrainHyper(lr=3e-3, epochs=10, batch_size=32, weight_decay=0.01, warmup_steps=30)


def default_hyper(strategy: AdaptationStrategy, seed: int = 0) -> TrainHyper:
    """Shipped adaptation defaults: AdamW, linear decay, short warmup.  Methods
    that touch full weight matrices take a smaller learning rate."""
    full = strategy.kind in ("FT", "FTTop2")
    return TrainHyper(lr=1e-3 if full else 1e-2, epochs=8, batch_size=32, weight_decay=0.1,
                      warmup_steps=30, seed=seed)


@dataclass
class AdaptResult:
    model: TransformerModel
    strategy: AdaptationStrategy
    epoch_losses: list[float]
    trainable_params: int
    optimizer_state_scalars: int
    metrics: list[dict]
    grad_names: list[str] = field(default_factory=list)

    @property
    def state(self) -> AdaptationState:
        return self.model.adaptation


def _train(model: TransformerModel, dataset: TaskDataset, names: list[str], hyper: TrainHyper,
           max_steps: int | None = None):
    """Minibatch AdamW on the named tensors of ``model`` (base or attached)."""
    if not dataset.pairs:
        raise TrainingError("empty dataset")
    state = model.adaptation
    l_p, l_i = (state.prefix.l_p, state.prefix.l_i) if state.prefix else (0, 0)
    rng = np.random.default_rng(hyper.seed)
    n = len(dataset.pairs)
    steps_per_epoch = max(1, math.ceil(n / hyper.batch_size))
    total = steps_per_epoch * hyper.epochs
    opt_state = tc.AdamWState()
    adam = hyper.adamw()
    epoch_losses, metrics, grad_names = [], [], []
    step = 0
    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * hyper.batch_size:(s + 1) * hyper.batch_size]
            batch = encode_batch([dataset.pairs[j] for j in idx], model.config, l_p, l_i)
            arrays = all_parameters(model)
            tape = tc.Tape()
            p = tape.params(arrays, trainable=names)
            logits = forward_nodes(model.config, p, batch.tokens, state, batch.slots)
            loss_node = tc.cross_entropy(logits, batch.targets, batch.weights)
            value = float(loss_node.value)
            if not math.isfinite(value):
                raise TrainingError(f"loss became {value} at step {step}", step)
            grads = tc.backward(tape, loss_node)
            if not grad_names:
                grad_names = sorted(grads)
            new, opt_state = tc.adamw_step({k: arrays[k] for k in grads}, grads, opt_state, adam,
                                           lr=hyper.lr_at(step, total))
            for k, v in new.items():
                if k in model.params:
                    model.params[k] = v
            state.load_parameters({k: v for k, v in new.items() if k not in model.params})
            losses.append(value)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        epoch_losses.append(float(np.mean(losses)))
        metrics.append({"epoch": epoch + 1, "loss": epoch_losses[-1], "trainable_params": None,
                        "wall_ms": (time.perf_counter() - t0) * 1e3})
        log.debug("epoch %d loss %.4f", epoch + 1, epoch_losses[-1])
        if max_steps is not None and step >= max_steps:
            break
    return epoch_losses, metrics, opt_state, grad_names


def pretrain(config: ModelConfig, dataset: TaskDataset, hyper: TrainHyper) -> TransformerModel:
    """Train every parameter of a freshly initialized model on ``dataset``."""
    if not dataset.pairs:
        raise TrainingError("pre-training dataset is empty")
    model = TransformerModel.init(config, seed=hyper.seed)
    losses, _, _, _ = _train(model, dataset, list(model.params), hyper)
    model.pretrain_losses = losses  # type: ignore[attr-defined]
    return model


def adapt(model: TransformerModel, dataset: TaskDataset, strategy: AdaptationStrategy,
          hyper: TrainHyper, max_steps: int | None = None) -> AdaptResult:
    """Train only the parameters owned by ``strategy``; ``model`` is left untouched."""
    strategy.validate(model.config)
    if not model.adaptation.is_empty():
        raise ValueError("adapt() expects a model without attachments")
    l_slots = strategy.n_slots
    dataset.check(model.config.vocab_size, model.config.max_seq_len - l_slots)
    work = model.copy()
    attach_strategy(work, strategy, seed=hyper.seed)
    names = trainable_names(model.config, strategy) + list(work.adaptation.named_parameters())
    losses, metrics, opt_state, grad_names = _train(work, dataset, names, hyper, max_steps)
    count = sum(all_parameters(work)[n].size for n in names)
    for row in metrics:
        row["trainable_params"] = count
    return AdaptResult(model=work, strategy=strategy, epoch_losses=losses, trainable_params=count,
                       optimizer_state_scalars=opt_state.num_scalars(), metrics=metrics,
                       grad_names=grad_names)


def merge_all(model: TransformerModel) -> TransformerModel:
    """Fold every unmerged LoRA module into its host weight (in place)."""
    from .adapters import lora_merge

    for (layer, target), m in model.adaptation.lora.items():
        if not m.merged:
            name = f"blocks.{layer}.attn.{target}"
            model.params[name] = lora_merge(m, model.params[name])
    return model


def unmerge_all(model: TransformerModel) -> TransformerModel:
    from .adapters import lora_unmerge

    for (layer, target), m in model.adaptation.lora.items():
        if m.merged:
            name = f"blocks.{layer}.attn.{target}"
            model.params[name] = lora_unmerge(m, model.params[name])
    return model


def deepcopy_model(model: TransformerModel) -> TransformerModel:
    return copy.deepcopy(model)
