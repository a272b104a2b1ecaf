"""Single-file checkpoints: 8-byte little-endian header length, a JSON header,
then the raw little-endian tensor payload.

Two kinds exist.  ``full_model`` holds every base tensor (and any non-LoRA
attachments).  ``lora_delta`` holds only the A/B factors of each LoRA module;
rank, alpha and target live in the header.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdaptationStrategy, LoraModule, adapter_attach, prefix_attach
from .config import ModelConfig
from .model import TransformerModel

FORMAT_VERSION = 1
DTYPES = {"f64": "<f8", "f32": "<f4", "f16": "<f2"}
_HEADER_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.header["kind"]

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["model_config"])

    @property
    def strategy(self) -> AdaptationStrategy | None:
        s = self.header.get("strategy")
        return AdaptationStrategy.parse(s) if s else None


def encode(kind: str, config: ModelConfig, tensors: dict[str, np.ndarray], strategy: str | None = None,
           seed: int = 0, dtype: str = "f64", extra: dict | None = None) -> bytes:
    if kind not in ("full_model", "lora_delta"):
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    if dtype not in DTYPES:
        raise CheckpointError(f"unknown dtype {dtype!r}; choose from {sorted(DTYPES)}")
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=DTYPES[dtype]))
        rows, cols = (a.shape[0], a.shape[1]) if a.ndim == 2 else (a.size, 1)
        index.append({"name": name, "rows": int(rows), "cols": int(cols), "shape": list(a.shape),
                      "dtype": dtype, "byte_offset": offset})
        b = a.tobytes()
        chunks.append(b)
        offset += len(b)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "model_config": config.to_dict(),
              "strategy": strategy, "seed": seed, "tensor_index": index}
    if extra:
        header.update(extra)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER_LEN.pack(len(hbytes)) + hbytes + b"".join(chunks)


def decode(data: bytes) -> Checkpoint:
    if len(data) < _HEADER_LEN.size:
        raise CheckpointError("file too short for a header length prefix")
    (hlen,) = _HEADER_LEN.unpack_from(data)
    start = _HEADER_LEN.size + hlen
    if start > len(data):
        raise CheckpointError("header length runs past end of file")
    header = json.loads(data[_HEADER_LEN.size:start].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {header.get('format_version')}")
    payload = memoryview(data)[start:]
    tensors, spans = {}, []
    for e in header["tensor_index"]:
        dt = np.dtype(DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if n != e["rows"] * e["cols"]:
            raise CheckpointError(f"tensor {e['name']}: shape {e['shape']} disagrees with rows x cols")
        lo, hi = e["byte_offset"], e["byte_offset"] + n * dt.itemsize
        if lo < 0 or hi > len(payload):
            raise CheckpointError(f"tensor {e['name']} extends past end of file")
        spans.append((lo, hi, e["name"]))
        tensors[e["name"]] = np.frombuffer(payload[lo:hi], dtype=dt).reshape(e["shape"]).astype(np.float64)
    spans.sort()
    for (_, hi, a), (lo, _, b) in zip(spans, spans[1:]):
        if lo < hi:
            raise CheckpointError(f"tensors {a} and {b} overlap")
    return Checkpoint(header, tensors)


def write(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def header_size(path) -> int:
    with open(path, "rb") as fh:
        (hlen,) = _HEADER_LEN.unpack(fh.read(_HEADER_LEN.size))
    return _HEADER_LEN.size + hlen


# ---------------------------------------------------------------------------
# Models and LoRA deltas
# ---------------------------------------------------------------------------

def delta_digest(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.tensors):
        h.update(name.encode())
        h.update(ckpt.tensors[name].tobytes())
    h.update(json.dumps(ckpt.header.get("modules"), sort_keys=True).encode())
    return h.hexdigest()


def save_model(path, model: TransformerModel, strategy: AdaptationStrategy | None = None, seed: int = 0,
               dtype: str = "f64", extra: dict | None = None) -> None:
    """Write base tensors plus any adapter/prefix attachments; LoRA modules must be merged."""
    if any(not m.merged for m in model.adaptation.lora.values()):
        raise CheckpointError("unmerged LoRA modules belong in a lora_delta checkpoint")
    tensors = dict(model.params)
    state = model.adaptation
    attach = {}
    if state.adapters:
        first = next(iter(state.adapters.values()))
        attach["adapters"] = {"variant": "L" if first.ln_gamma is not None else "H",
                              "r_b": int(first.W_down.shape[1])}
    if state.prefix is not None:
        attach["prefix"] = {"kind": state.prefix.kind, "l_p": state.prefix.l_p, "l_i": state.prefix.l_i}
    for name, arr in state.named_parameters().items():
        if not name.startswith("lora."):
            tensors[name] = arr
    ex = dict(extra or {})
    if attach:
        ex["attachments"] = attach
    write(path, encode("full_model", model.config, tensors, strategy.to_string() if strategy else None,
                       seed, dtype, ex))


def load_model(path) -> TransformerModel:
    ck = read(path)
    if ck.kind != "full_model":
        raise CheckpointError(f"{path} is a {ck.kind} checkpoint, expected full_model")
    cfg = ck.config
    from .model import param_shapes

    missing = [n for n in param_shapes(cfg) if n not in ck.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks base tensors: {missing[:3]}")
    model = TransformerModel(cfg, {n: ck.tensors[n] for n in param_shapes(cfg)})
    attach = ck.header.get("attachments", {})
    if "adapters" in attach:
        adapter_attach(model, attach["adapters"]["variant"], attach["adapters"]["r_b"])
    if "prefix" in attach:
        p = attach["prefix"]
        prefix_attach(model, p["kind"], p["l_p"], p["l_i"])
    model.adaptation.load_parameters({k: v for k, v in ck.tensors.items() if k not in model.params})
    model.header = ck.header  # type: ignore[attr-defined]
    return model


def save_lora_delta(path, model: TransformerModel, strategy: AdaptationStrategy | None = None, seed: int = 0,
                    dtype: str = "f64") -> None:
    mods = sorted(model.adaptation.lora.values(), key=lambda m: (m.layer, m.target))
    if not mods:
        raise CheckpointError("model has no LoRA modules")
    tensors, meta = {}, []
    for m in mods:
        tensors[m.key + ".A"] = m.A
        tensors[m.key + ".B"] = m.B
        meta.append({"layer": m.layer, "target": m.target, "r": m.r, "alpha": m.alpha})
    write(path, encode("lora_delta", model.config, tensors, strategy.to_string() if strategy else None,
                       seed, dtype, {"modules": meta}))


def load_lora_delta(path) -> tuple[Checkpoint, list[LoraModule]]:
    ck = read(path)
    if ck.kind != "lora_delta":
        raise CheckpointError(f"{path} is a {ck.kind} checkpoint, expected lora_delta")
    mods = []
    for m in ck.header["modules"]:
        key = f"lora.{m['layer']}.{m['target']}"
        mods.append(LoraModule(layer=m["layer"], target=m["target"], A=ck.tensors[key + ".A"],
                               B=ck.tensors[key + ".B"], r=m["r"], alpha=m["alpha"]))
    return ck, mods
