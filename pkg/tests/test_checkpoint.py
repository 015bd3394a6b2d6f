"""Checkpoint binary format and CSV persistence tests."""

import numpy as np
import pytest

from flowlab.checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_load,
    checkpoint_save,
)
from flowlab.csvio import read_csv, write_csv
from flowlab.network import NetLayout
from flowlab.optim import OptimizerState


def _layout(scalars=("s", "t")):
    return NetLayout(dim=2, hidden=16, depth=2, scalars=scalars, emb_dim=8)


def _ckpt(rng, with_g=True, with_opt=True):
    n = 64
    f = rng.standard_normal(n)
    return Checkpoint(
        f_layout=_layout(),
        f_params=f,
        ema=f + 1e-3 * rng.standard_normal(n),
        step=123,
        config_hash="cafe0123",
        g_layout=_layout(("t", "tprime")) if with_g else None,
        g_params=rng.standard_normal(n) if with_g else None,
        f_opt=OptimizerState(rng.standard_normal(n), rng.random(n), 123)
        if with_opt
        else None,
        g_opt=OptimizerState(rng.standard_normal(n), rng.random(n), 7)
        if (with_g and with_opt)
        else None,
    )


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    ckpt = _ckpt(rng)
    path = str(tmp_path / "a.fck")
    checkpoint_save(path, ckpt)
    back = checkpoint_load(path)
    assert np.array_equal(back.f_params, ckpt.f_params)
    assert np.array_equal(back.ema, ckpt.ema)
    assert np.array_equal(back.g_params, ckpt.g_params)
    assert np.array_equal(back.f_opt.m, ckpt.f_opt.m)
    assert np.array_equal(back.f_opt.v, ckpt.f_opt.v)
    assert back.f_opt.count == 123 and back.g_opt.count == 7
    assert back.step == 123 and back.config_hash == "cafe0123"
    assert back.f_layout == ckpt.f_layout
    assert back.g_layout == ckpt.g_layout


def test_optional_sections_absent(tmp_path):
    rng = np.random.default_rng(1)
    ckpt = _ckpt(rng, with_g=False, with_opt=False)
    path = str(tmp_path / "b.fck")
    checkpoint_save(path, ckpt)
    back = checkpoint_load(path)
    assert back.g_params is None and back.g_layout is None
    assert back.f_opt is None and back.g_opt is None


def test_flipped_magic_rejected(tmp_path):
    rng = np.random.default_rng(2)
    path = str(tmp_path / "c.fck")
    checkpoint_save(path, _ckpt(rng))
    raw = bytearray(open(path, "rb").read())
    raw[0] ^= 0xFF
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(path)


def test_future_version_rejected_with_message(tmp_path):
    rng = np.random.default_rng(3)
    path = str(tmp_path / "d.fck")
    checkpoint_save(path, _ckpt(rng))
    raw = bytearray(open(path, "rb").read())
    raw[4] = 2  # version field, little-endian
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointError, match="version 2"):
        checkpoint_load(path)


def test_truncated_payload_rejected(tmp_path):
    rng = np.random.default_rng(4)
    path = str(tmp_path / "e.fck")
    checkpoint_save(path, _ckpt(rng))
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[: len(raw) - 16])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(path)


def test_nan_payload_rejected(tmp_path):
    rng = np.random.default_rng(5)
    ckpt = _ckpt(rng, with_g=False, with_opt=False)
    ckpt.f_params[3] = np.nan
    path = str(tmp_path / "f.fck")
    checkpoint_save(path, ckpt)
    with pytest.raises(CheckpointError, match="non-finite"):
        checkpoint_load(path)


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_load(str(tmp_path / "nope.fck"))


def test_csv_round_trip_full_precision(tmp_path):
    path = str(tmp_path / "t.csv")
    value = 0.1234567890123456789
    rows = [(1, "fm", value), (2, "fm", -1e-300)]
    write_csv(path, ("step", "objective", "loss"), rows, {"config_hash": "ab", "seed": 7})
    header, parsed, meta = read_csv(path)
    assert header == ["step", "objective", "loss"]
    assert float(parsed[0][2]) == value
    assert float(parsed[1][2]) == -1e-300
    assert meta == {"config_hash": "ab", "seed": "7"}


def test_csv_header_only(tmp_path):
    path = str(tmp_path / "empty.csv")
    write_csv(path, ("a", "b"), [], {"seed": 0})
    header, parsed, meta = read_csv(path)
    assert header == ["a", "b"] and parsed == [] and meta["seed"] == "0"
