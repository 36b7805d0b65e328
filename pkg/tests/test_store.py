import json

import numpy as np
import pytest

from treesum import encdec, store
from treesum.corpus import Example
from treesum.encdec import ModelConfig, build_model
from treesum.store import CorruptCheckpoint, UnsupportedVersion, load_checkpoint, save_checkpoint

CFG = ModelConfig(vocab_size=25, d=6, layers=2, mode="lir", seed=11)
DOC = Example("d", [[4, 5, 6], [7, 8]], [4, 7])


def fresh_model():
    model = build_model(CFG)
    rng = np.random.default_rng(99)
    for p in model.params.values():
        p += rng.normal(scale=0.01, size=p.shape)  # move off the seeded init
    return model


class TestRoundTrip:
    def test_bit_exact_parameters(self, tmp_path):
        model = fresh_model()
        save_checkpoint(model, tmp_path / "ckpt", step=7)
        loaded, step = load_checkpoint(tmp_path / "ckpt")
        assert step == 7
        assert loaded.config == model.config
        assert set(loaded.params) == set(model.params)
        for name in model.params:
            assert loaded.params[name].tobytes() == model.params[name].tobytes()

    def test_forward_outputs_match_bitwise(self, tmp_path):
        model = fresh_model()
        save_checkpoint(model, tmp_path / "ckpt")
        loaded, _ = load_checkpoint(tmp_path / "ckpt")
        a, _ = encdec.teacher_forced_nll(model, DOC)
        b, _ = encdec.teacher_forced_nll(loaded, DOC)
        assert a == b
        ga = encdec.greedy_decode(model, DOC)
        gb = encdec.greedy_decode(loaded, DOC)
        assert ga.tokens == gb.tokens

    def test_file_pair_exists(self, tmp_path):
        save_checkpoint(fresh_model(), tmp_path / "ckpt")
        assert (tmp_path / "ckpt.manifest.json").exists()
        assert (tmp_path / "ckpt.bin").exists()
        assert not list(tmp_path.glob("*.tmp"))


class TestCorruption:
    def test_truncated_blob(self, tmp_path):
        save_checkpoint(fresh_model(), tmp_path / "ckpt")
        blob = tmp_path / "ckpt.bin"
        blob.write_bytes(blob.read_bytes()[:100])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "ckpt")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(fresh_model(), tmp_path / "ckpt")
        mpath = tmp_path / "ckpt.manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["format_version"] = 99
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(UnsupportedVersion):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_tensor_in_index(self, tmp_path):
        save_checkpoint(fresh_model(), tmp_path / "ckpt")
        mpath = tmp_path / "ckpt.manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["tensors"] = [t for t in manifest["tensors"] if t["name"] != "out.w"]
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "ckpt")

    def test_extra_tensor_warns_and_loads(self, tmp_path):
        model = fresh_model()
        save_checkpoint(model, tmp_path / "ckpt")
        mpath = tmp_path / "ckpt.manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["tensors"].append(
            {"name": "ghost", "shape": [1], "dtype": "float64", "byte_offset": 0}
        )
        mpath.write_text(json.dumps(manifest))
        with pytest.warns(UserWarning, match="ghost"):
            loaded, _ = load_checkpoint(tmp_path / "ckpt")
        assert loaded.params["out.w"].tobytes() == model.params["out.w"].tobytes()

    def test_empty_manifest(self, tmp_path):
        save_checkpoint(fresh_model(), tmp_path / "ckpt")
        (tmp_path / "ckpt.manifest.json").write_text("")
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_files(self, tmp_path):
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "nothing")
