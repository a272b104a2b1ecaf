import json
import struct

import numpy as np
import pytest

from lorakit import budget, checkpoint
from lorakit.adapters import AdaptationStrategy, attach_strategy, lora_attach
from lorakit.model import forward, merge_all


def _trained_lora(model, rng, targets=("W_q", "W_v"), r=2):
    m = model.detached()
    for mod in lora_attach(m, targets, r=r, seed=1):
        mod.B = rng.standard_normal(mod.B.shape) * 0.1
    return m


def test_write_read_write_is_byte_identical(tmp_path, small_model):
    checkpoint.save_model(tmp_path / "a.ckpt", small_model, seed=7)
    blob = (tmp_path / "a.ckpt").read_bytes()
    ck = checkpoint.decode(blob)
    again = checkpoint.encode(ck.kind, ck.config, ck.tensors, ck.header["strategy"], ck.header["seed"])
    assert again == blob


def test_header_layout(tmp_path, small_model):
    path = tmp_path / "a.ckpt"
    checkpoint.save_model(path, small_model)
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + hlen])
    assert header["format_version"] == 1 and header["kind"] == "full_model"
    assert set(header) >= {"model_config", "strategy", "seed", "tensor_index"}
    entry = header["tensor_index"][0]
    assert set(entry) >= {"name", "rows", "cols", "dtype", "byte_offset"}
    assert checkpoint.header_size(path) == 8 + hlen
    arr = np.frombuffer(blob[8 + hlen + entry["byte_offset"]:], dtype="<f8", count=entry["rows"] * entry["cols"])
    np.testing.assert_array_equal(arr.reshape(entry["shape"]), small_model.params[entry["name"]])


def test_full_model_round_trip_with_attachments(tmp_path, small_model, rng):
    m = small_model.detached()
    attach_strategy(m, AdaptationStrategy.parse("adapterl:r=3"))
    for a in m.adaptation.adapters.values():
        a.W_up = rng.standard_normal(a.W_up.shape)
    checkpoint.save_model(tmp_path / "m.ckpt", m)
    back = checkpoint.load_model(tmp_path / "m.ckpt")
    tokens = rng.integers(0, 32, size=(2, 6))
    np.testing.assert_array_equal(forward(back, tokens), forward(m, tokens))

    p = small_model.detached()
    attach_strategy(p, AdaptationStrategy.parse("prelayer:lp=2:li=1"))
    checkpoint.save_model(tmp_path / "p.ckpt", p)
    back = checkpoint.load_model(tmp_path / "p.ckpt")
    np.testing.assert_array_equal(back.adaptation.prefix.vectors[1], p.adaptation.prefix.vectors[1])


def test_full_model_refuses_unmerged_lora(tmp_path, small_model, rng):
    m = _trained_lora(small_model, rng)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.save_model(tmp_path / "x.ckpt", m)
    merge_all(m)
    checkpoint.save_model(tmp_path / "x.ckpt", m)


def test_lora_delta_purity_and_size(tmp_path, small_model, rng):
    m = _trained_lora(small_model, rng)
    s = AdaptationStrategy.parse("lora:r=2:qv")
    path = tmp_path / "d.ckpt"
    checkpoint.save_lora_delta(path, m, s, dtype="f16")
    ck = checkpoint.read(path)
    assert ck.kind == "lora_delta"
    names = [e["name"] for e in ck.header["tensor_index"]]
    assert all(n.startswith("lora.") and n.endswith((".A", ".B")) for n in names)
    assert not set(names) & set(small_model.params)
    b = budget.count(small_model.config, s)
    assert path.stat().st_size == budget.checkpoint_size(b, "fp16", checkpoint.header_size(path))
    _, mods = checkpoint.load_lora_delta(path)
    assert [(x.layer, x.target, x.r, x.alpha) for x in mods] == [(0, "W_q", 2, 2.0), (0, "W_v", 2, 2.0),
                                                                 (1, "W_q", 2, 2.0), (1, "W_v", 2, 2.0)]


def test_lora_delta_f64_is_exact(tmp_path, small_model, rng):
    m = _trained_lora(small_model, rng)
    checkpoint.save_lora_delta(tmp_path / "d.ckpt", m)
    _, mods = checkpoint.load_lora_delta(tmp_path / "d.ckpt")
    for mod in mods:
        np.testing.assert_array_equal(mod.B, m.adaptation.lora[(mod.layer, mod.target)].B)


def test_kind_mismatch_errors(tmp_path, small_model, rng):
    checkpoint.save_model(tmp_path / "m.ckpt", small_model)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_lora_delta(tmp_path / "m.ckpt")
    checkpoint.save_lora_delta(tmp_path / "d.ckpt", _trained_lora(small_model, rng))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_model(tmp_path / "d.ckpt")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.save_lora_delta(tmp_path / "e.ckpt", small_model)


def _rewrite_header(blob, edit):
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + hlen])
    edit(header)
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<Q", len(h)) + h + blob[8 + hlen:]


def test_corrupt_files_are_rejected(small_model):
    blob = checkpoint.encode("full_model", small_model.config, {"a": np.ones((2, 3)), "b": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:5])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(struct.pack("<Q", 10**6) + blob[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(_rewrite_header(blob, lambda h: h.update(format_version=99)))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-8])

    def overlap(h):
        h["tensor_index"][1]["byte_offset"] = 8
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(_rewrite_header(blob, overlap))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.encode("weird", small_model.config, {})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.encode("full_model", small_model.config, {}, dtype="bf16")
