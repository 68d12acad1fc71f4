import numpy as np
import pytest

from ifladder import io
from ifladder.seeding import derive_seed, rng, seed_sequence


def test_rng_streams_are_reproducible_and_labelled():
    a = rng(3, "init").standard_normal(5)
    assert a.tobytes() == rng(3, "init").standard_normal(5).tobytes()
    assert not np.array_equal(a, rng(3, "shuffle").standard_normal(5))
    assert not np.array_equal(a, rng(4, "init").standard_normal(5))


def test_rng_is_philox():
    assert isinstance(rng(0).bit_generator, np.random.Philox)


def test_derive_seed_range_and_negative_rejected():
    s = derive_seed(0, "elso-seed", 3)
    assert 0 <= s < 2 ** 63
    assert s == derive_seed(0, "elso-seed", 3)
    with pytest.raises(ValueError):
        seed_sequence(-1)


def test_array_roundtrip(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 4))
    digest = io.write_array(tmp_path / "a.bin", a, {"kind": "ggn"})
    assert digest == io.sha256_file(tmp_path / "a.bin")
    b, header = io.read_array(tmp_path / "a.bin")
    assert b.tobytes() == a.tobytes()
    assert header == {"kind": "ggn", "shape": [3, 4]}
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:8] == b"IFLADDR1"


def test_read_array_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError, match="not an ifladder"):
        io.read_array(tmp_path / "x.bin")


def test_csv_float_roundtrip_and_line_endings(tmp_path):
    vals = [0.1, 1 / 3, -2.5e-300, float("nan")]
    io.write_csv(tmp_path / "t.csv", ("i", "v"), enumerate(vals))
    raw = (tmp_path / "t.csv").read_bytes()
    assert b"\r" not in raw and raw.startswith(b"i,v\n")
    back = [float(r["v"]) for r in io.read_csv(tmp_path / "t.csv")]
    assert back[:3] == vals[:3] and np.isnan(back[3])


def test_canonical_json_is_order_independent():
    assert io.canonical_json({"b": 1, "a": (1, 2)}) == io.canonical_json({"a": [1, 2], "b": 1})
