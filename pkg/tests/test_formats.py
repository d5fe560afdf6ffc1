import numpy as np
import pytest

from veinfpn.errors import FormatError, VersionError
from veinfpn.formats import (
    ScoreRow,
    config_hash,
    decode_template,
    encode_template,
    read_scores,
    read_tensors,
    write_scores,
    write_tensors,
)


def test_tensor_container_round_trip():
    rng = np.random.default_rng(0)
    tensors = [("a", rng.standard_normal((2, 3, 4, 5)).astype(np.float32)), ("b.c", np.zeros(7, np.float32))]
    blob = write_tensors({"k": [1, 2]}, tensors)
    meta, out = read_tensors(blob)
    assert meta == {"k": [1, 2]}
    np.testing.assert_array_equal(out["a"], tensors[0][1])
    assert out["b.c"].shape == (1, 1, 1, 7)
    with pytest.raises(FormatError, match="trailing"):
        read_tensors(blob + b"x")
    with pytest.raises(FormatError, match="offset"):
        read_tensors(blob[:30])


def test_tensor_container_header_layout():
    blob = write_tensors({}, [("w", np.ones((1, 1, 1, 1), np.float32))])
    assert blob[:8] == b"VFPNCKPT"
    assert int.from_bytes(blob[8:12], "little") == 1
    with pytest.raises(VersionError):
        read_tensors(blob[:8] + (2).to_bytes(4, "little") + blob[12:])


def test_template_round_trip():
    rng = np.random.default_rng(1)
    m = (rng.random((13, 17)) > 0.5).astype(np.uint8)
    data = encode_template(m, "probe_1")
    out, sid = decode_template(data)
    np.testing.assert_array_equal(out, m)
    assert sid == "probe_1"
    assert len(data) == 8 + 12 + len("probe_1") + (13 * 17 + 7) // 8
    with pytest.raises(FormatError):
        decode_template(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError):
        decode_template(data[:-1])
    with pytest.raises(VersionError):
        decode_template(data[:8] + (9).to_bytes(2, "little") + data[10:])


def test_scores_csv(tmp_path):
    rows = [ScoreRow("p2", "m1", 0.25, False), ScoreRow("p1", "m2", 1 / 3, True)]
    path = tmp_path / "s.csv"
    write_scores(path, rows, comment="config_hash=abc")
    text = path.read_text()
    assert text.splitlines() == [
        "# config_hash=abc",
        "probe_id,model_id,score,is_genuine",
        "p1,m2,0.333333,1",
        "p2,m1,0.250000,0",
    ]
    back = read_scores(path)
    assert back[0] == ScoreRow("p1", "m2", 0.333333, True)
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(FormatError):
        read_scores(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("probe_id,model_id,score,is_genuine\np,m,x,1\n")
    with pytest.raises(FormatError):
        read_scores(tmp_path / "bad2.csv")


def test_config_hash_key_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
