import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from dlclab.checkpoint import (CheckpointError, decode, encode, load_checkpoint, save_checkpoint,
                               select)
from dlclab.codec import SemConfig, SemEncoder
from dlclab.diffusion import LabelEmbedder, ScoreNet
from dlclab.discrete import DlcPredictor
from dlclab.nn import make_rng


def _models(rng):
    return {
        "score": ScoreNet(rng, hidden=16, depth=3, time_dim=8, conditioner=LabelEmbedder(4, 6, rng)),
        "prior": DlcPredictor(3, 5, rng, width=8, heads=2, blocks=1, prompt_len=2, n_prompt_labels=3),
        "enc": SemEncoder(SemConfig(L=2, V=4, d=8, hidden=16, factorized=True), rng),
    }


def test_round_trip_is_bit_exact(tmp_path, rng):
    models = _models(rng)
    cfg = "seed = 3\nprior.steps = 12\n# ünïcode survives\n"
    save_checkpoint(tmp_path / "m.dlck", models, cfg)
    ck = load_checkpoint(tmp_path / "m.dlck")
    assert ck.config_text == cfg
    for key, mod in models.items():
        for name, arr in mod.named_parameters(key + "."):
            assert ck.arrays[name].dtype == np.float32
            assert ck.arrays[name].tobytes() == arr.tobytes(), name


def test_reloaded_models_give_identical_outputs(tmp_path, rng):
    models = _models(rng)
    save_checkpoint(tmp_path / "m.dlck", models)
    ck = load_checkpoint(tmp_path / "m.dlck")
    fresh = _models(make_rng(999))
    for key, mod in fresh.items():
        mod.load_parameters(select(ck.arrays, key), strict=True)
    x = rng.standard_normal((7, 2)).astype(np.float32)
    c = rng.integers(4, size=7)
    codes = rng.integers(6, size=(7, 3))
    assert (fresh["score"].forward(x, 0.3, c).tobytes()
            == models["score"].forward(x, 0.3, c).tobytes())
    assert fresh["prior"].logits(codes).tobytes() == models["prior"].logits(codes).tobytes()
    assert fresh["enc"].forward(x).tobytes() == models["enc"].forward(x).tobytes()


def test_identity_payload_layout():
    buf = encode({"I": np.eye(2, dtype=np.float32)})
    # magic, version, config length (0), array count, name length, name, ndim, dims
    header = 4 + 4 + 8 + 4 + 4 + 1 + 4 + 16
    assert buf[:4] == b"DLCK"
    assert struct.unpack("<I", buf[4:8]) == (1,)
    assert struct.unpack("<2Q", buf[header - 16:header]) == (2, 2)
    payload = buf[header:header + 8]
    assert payload == b"\x00\x00\x80\x3f\x00\x00\x00\x00"
    assert struct.unpack("<f", payload[:4]) == (1.0,)
    assert len(buf) == header + 16


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4)),
                       max_size=4),
       st.text(max_size=40))
def test_encode_decode_property(arrs, cfg):
    ck = decode(encode(arrs, cfg))
    assert ck.config_text == cfg
    assert list(ck.arrays) == list(arrs)
    for k, v in arrs.items():
        assert ck.arrays[k].shape == v.shape
        assert ck.arrays[k].tobytes() == v.tobytes()


def test_every_truncation_is_refused(rng):
    buf = encode({"a": rng.standard_normal((2, 3)).astype(np.float32),
                  "b": np.ones(1, np.float32)}, "x = 1\n")
    fields = set()
    for cut in range(len(buf)):
        with pytest.raises(CheckpointError) as e:
            decode(buf[:cut])
        fields.add(e.value.field.split()[-1] if e.value.field != "magic" else "magic")
    assert {"magic", "version", "payload"} <= fields


def test_bad_magic_and_version():
    buf = encode({"a": np.zeros(2, np.float32)})
    with pytest.raises(CheckpointError) as e:
        decode(b"XLCK" + buf[4:])
    assert e.value.field == "magic"
    with pytest.raises(CheckpointError) as e:
        decode(buf[:4] + struct.pack("<I", 2) + buf[8:])
    assert e.value.field == "version"
    with pytest.raises(CheckpointError) as e:
        decode(buf + b"\x00")
    assert e.value.field == "trailer"


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.dlck")


def test_failed_write_leaves_no_partial_file(tmp_path, rng):
    target = tmp_path / "m.dlck"
    save_checkpoint(target, {"w": np.ones(3, np.float32)})
    before = target.read_bytes()

    class Boom:
        def named_parameters(self, prefix):
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        save_checkpoint(target, {"w": Boom()})
    assert target.read_bytes() == before
    assert os.listdir(tmp_path) == ["m.dlck"]


def test_strict_load_rejects_missing_parameters(rng):
    net = DlcPredictor(2, 3, rng, width=8, heads=2, blocks=1)
    arrays = dict(net.named_parameters())
    arrays.pop("head.b")
    with pytest.raises(Exception):
        DlcPredictor(2, 3, rng, width=8, heads=2, blocks=1).load_parameters(arrays, strict=True)
