import numpy as np
import pytest

from flier.io import (ArtifactError, canonical_json, dump_tensors, load_tensors, parse_tensors,
                      read_json, save_tensors, write_json)


def sample():
    rng = np.random.default_rng(0)
    return {"b": rng.normal(size=(2, 3)), "a": np.array(np.pi), "c": np.zeros((0, 4))}


def test_round_trip_is_bit_exact(tmp_path):
    t = sample()
    save_tensors(tmp_path / "x.bin", t, {"k": [1, 2]})
    back, meta = load_tensors(tmp_path / "x.bin")
    assert list(back) == ["b", "a", "c"]
    for k in t:
        assert back[k].shape == t[k].shape and back[k].tobytes() == t[k].tobytes()
    assert meta == {"k": [1, 2]}
    save_tensors(tmp_path / "y.bin", back, meta)
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()


def test_special_values_survive():
    t = {"v": np.array([-0.0, np.inf, -np.inf, 5e-324])}
    back, _ = parse_tensors(dump_tensors(t))
    assert back["v"].tobytes() == t["v"].tobytes()


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"NOTMAGIC" + b[8:], "magic"),
    (lambda b: b[:-3], "length"),
    (lambda b: b[:-1] + bytes([b[-1] ^ 1]), "checksum"),
    (lambda b: b[:20], "truncated"),
])
def test_corruption_is_detected(mutate, match):
    blob = dump_tensors(sample())
    with pytest.raises(ArtifactError, match=match):
        parse_tensors(mutate(blob), "f.bin")


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(ArtifactError, match="nope.bin"):
        load_tensors(tmp_path / "nope.bin")


def test_json_helpers(tmp_path):
    write_json(tmp_path / "a.json", {"z": 1, "a": [0.5]})
    assert read_json(tmp_path / "a.json") == {"z": 1, "a": [0.5]}
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ArtifactError, match="parse"):
        read_json(tmp_path / "bad.json")
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_atomic_write_leaves_no_temp_file(tmp_path):
    save_tensors(tmp_path / "d" / "x.bin", sample())
    assert [p.name for p in (tmp_path / "d").iterdir()] == ["x.bin"]
