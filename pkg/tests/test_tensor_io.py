import numpy as np
import pytest
import yaml

from utils.errors import MissingArtifact, ParseError
from utils.tensor_io import MAGIC, decode_tensor, encode_tensor, load_checkpoint, load_tensor, save_checkpoint, save_tensor


def test_header_layout():
    blob = encode_tensor(np.arange(6.0).reshape(2, 3))
    assert blob[:4] == MAGIC
    assert blob[4] == 1 and blob[5] == 2
    assert np.frombuffer(blob[6:14], dtype="<u4").tolist() == [2, 3]
    assert len(blob) == 14 + 6 * 8


def test_file_round_trip_is_bit_exact(tmp_path, rng):
    array = rng.normal(size=(3, 4, 2))
    save_tensor(tmp_path / "t.atrt", array)
    loaded = load_tensor(tmp_path / "t.atrt")
    assert loaded.dtype == np.float64
    assert loaded.tobytes() == array.tobytes()


@pytest.mark.parametrize("blob", [b"", b"XXXX\x01\x00", b"ATRT\x02\x00", b"ATRT\x01\x02\x02\x00\x00\x00"])
def test_malformed_blobs(blob):
    with pytest.raises(ParseError):
        decode_tensor(blob)


def test_truncated_payload():
    blob = encode_tensor(np.ones(4))
    with pytest.raises(ParseError):
        decode_tensor(blob[:-8])


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifact):
        load_tensor(tmp_path / "absent.atrt")


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"s1.stage0.weight": rng.normal(size=(2, 3, 3, 3)), "s1.stage0.bias": np.zeros(2)}
    save_checkpoint(tmp_path / "ckpt", params, {"phase": "stream1"})
    loaded, config = load_checkpoint(tmp_path / "ckpt")
    assert config == {"phase": "stream1"}
    assert set(loaded) == set(params)
    np.testing.assert_array_equal(loaded["s1.stage0.weight"], params["s1.stage0.weight"])


def test_checkpoint_shape_disagreement(tmp_path):
    save_checkpoint(tmp_path / "ckpt", {"w": np.ones(3)})
    manifest = tmp_path / "ckpt" / "manifest.yaml"
    data = yaml.safe_load(manifest.read_text())
    data["parameters"][0]["shape"] = [4]
    manifest.write_text(yaml.safe_dump(data))
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "ckpt")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingArtifact):
        load_checkpoint(tmp_path / "nowhere")
