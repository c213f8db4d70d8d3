import struct

import numpy as np
import pytest

from conftest import ROOT, SMOKE
from xferlab.arithmetic import task_vector
from xferlab.config import load_config, parse_config
from xferlab.data import DataFormatError
from xferlab.model import ConfigurationError, ModelConfig, init_parameters, make_head
from xferlab.storage import (ChecksumError, decode_records, encode_records, format_sidecar,
                             load_checkpoint, load_task_vector, parse_sidecar, read_sidecar,
                             save_checkpoint, save_task_vector, write_sidecar)

CFG = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=1, num_heads=2,
                  mlp_ratio=2, seed=2)


def test_record_layout_by_hand():
    raw = encode_records([("w", np.array([[1.5, -2.0]]))])
    body = (b"SEVX" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w"
            + struct.pack("<I", 2) + struct.pack("<QQ", 1, 2) + struct.pack("<dd", 1.5, -2.0))
    assert raw[:-8] == body
    name, arr = decode_records(raw)[0]
    assert name == "w" and arr.tolist() == [[1.5, -2.0]]


def test_checkpoint_round_trip(tmp_path):
    theta = init_parameters(CFG)
    head = make_head(["zebra", "owl", "ünïcode"], CFG.embed_dim)
    path = save_checkpoint(tmp_path / "m.sevx", theta, head)
    back, hb = load_checkpoint(path)
    assert back.values.tobytes() == theta.values.tobytes()
    assert back.layout == theta.layout
    assert hb.class_names == head.class_names
    assert hb.W.tobytes() == head.W.tobytes()
    bare, none = load_checkpoint(save_checkpoint(tmp_path / "n.sevx", theta))
    assert none is None and bare.content_fingerprint == theta.content_fingerprint


def test_task_vector_round_trip_keeps_residual(tmp_path):
    base = init_parameters(CFG)
    ft = base.with_values(base.values + np.random.default_rng(0).normal(size=base.size) * 1e-3)
    tau = task_vector(ft, base)
    path = save_task_vector(tmp_path / "t.sevx", tau)
    back = load_task_vector(path, {"delta": tau.delta, "base_id": tau.base_id,
                                   "finetuned_id": tau.finetuned_id})
    assert back.values.tobytes() == tau.values.tobytes()
    assert back.residual.tobytes() == tau.residual.tobytes()
    assert back.provenance == tau.provenance
    assert back.layout_fingerprint == tau.layout_fingerprint


def test_corruption_is_detected(tmp_path):
    path = save_checkpoint(tmp_path / "m.sevx", init_parameters(CFG))
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_bad_magic_and_truncation():
    raw = encode_records([("a", np.zeros(3))])
    with pytest.raises(DataFormatError, match="magic"):
        decode_records(b"XXXX" + raw[4:])
    with pytest.raises(DataFormatError):
        decode_records(raw[:10])


def test_sidecar_round_trip(tmp_path):
    sections = {"train": {"alpha": "0.5", "Name": "x=y"}, "fp": {"base": "abc"}}
    text = format_sidecar(sections)
    assert parse_sidecar(text) == sections
    assert read_sidecar(write_sidecar(tmp_path / "s.ini", sections)) == sections
    with pytest.raises(DataFormatError):
        parse_sidecar("no section header\n")


# configuration files --------------------------------------------------------------------

def test_smoke_config_loads():
    cfg = load_config(SMOKE)
    assert cfg.source == "s-a" and cfg.target == "s-b"
    assert cfg.model.num_patches == 4
    assert cfg.transfer.alpha_grid == (0.3, 0.7)
    assert cfg.transfer.lambda2_grid == (0.0, 0.5, 1.0)
    assert cfg.domains["b-a"].spec.texture == "strokes-clutter"
    assert cfg.domains["s-a"].spec.class_names == ("strokes-0", "strokes-1")


def test_shipped_configs_load():
    for name in ("default.ini", "pair_study.ini"):
        cfg = load_config(ROOT / "configs" / name)
        assert cfg.transfer.lambda1 == 1.0
        assert min(cfg.transfer.lambda2_grid) == 0.0


def test_seed_override_rederives_seeds():
    cfg = load_config(SMOKE)
    other = cfg.with_seed(4)
    assert other.seed == 4 and other.model.seed != cfg.model.seed
    assert other.domains["s-a"].spec.seed != cfg.domains["s-a"].spec.seed
    assert cfg.with_seed(3).domains["s-a"].spec == cfg.domains["s-a"].spec


@pytest.mark.parametrize("extra, match", [
    ("[run]\nbogus = 1\n", "bogus"),
    ("[mystery]\nx = 1\n", "mystery"),
    ("[domain.z]\nfamily = strokes\nclasses = 0, 1\nflavour = 3\n", "flavour"),
])
def test_unknown_keys_and_sections_rejected(extra, match):
    text = open(SMOKE).read()
    if extra.startswith("[run]"):
        text = text.replace("[run]\n", extra, 1)
    else:
        text += "\n" + extra
    with pytest.raises(ConfigurationError, match=match):
        parse_config(text)


@pytest.mark.parametrize("old, new", [
    ("source = s-a", "source = nowhere"),
    ("alpha_grid = 0.3, 0.7", "alpha_grid = 0.3, 1.0"),
    ("source_method = kernel", "source_method = lime"),
    ("epochs = 3\n\n[explain]", "epochs = three\n\n[explain]"),
    ("families = strokes, blobs", "families = strokes"),
])
def test_invalid_values_rejected(old, new):
    text = open(SMOKE).read()
    assert old in text
    with pytest.raises(ConfigurationError):
        parse_config(text.replace(old, new, 1))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.ini")
