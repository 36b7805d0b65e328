import json
from pathlib import Path

import numpy as np
import pytest

from treesum import cli, corpus, store
from treesum.cli import main

FIXTURES = Path(__file__).parent / "fixtures" / "metrics_pairs.jsonl"


def run(argv):
    return main(argv)


def synth_corpus(tmp_path, n_docs=6, seed=0, name="corpus.jsonl"):
    out = tmp_path / name
    code = run([
        "synth", "--out", str(out), "--n-docs", str(n_docs), "--seed", str(seed),
        "--vocab-size", "60",
    ])
    assert code == 0
    return out


def small_config(tmp_path, **over):
    cfg = {"d": 12, "L": 1, "mode": "lsr", "epsilon": 1e-6, "vocab_size": 80,
           "lr": 0.3, "clip": 2.0, "steps": 25, "seed": 1, "batch_size": 4}
    cfg.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestSynth:
    def test_line_count(self, tmp_path):
        out = synth_corpus(tmp_path, n_docs=7)
        lines = [l for l in out.read_text().splitlines() if l.strip()]
        assert len(lines) == 7

    def test_same_seed_identical_bytes(self, tmp_path):
        a = synth_corpus(tmp_path, seed=5, name="a.jsonl")
        b = synth_corpus(tmp_path, seed=5, name="b.jsonl")
        assert a.read_bytes() == b.read_bytes()

    def test_seed_recorded(self, tmp_path):
        out = synth_corpus(tmp_path, seed=9, name="c.jsonl")
        meta = json.loads((tmp_path / "c.jsonl.meta.json").read_text())
        assert meta["seed"] == 9

    def test_bad_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["synth", "--no-such-flag"])
        assert exc.value.code == 2


class TestTrain:
    def test_memorization_loss_halves(self, tmp_path):
        data = synth_corpus(tmp_path, n_docs=8, seed=2)
        cfg = small_config(tmp_path, steps=150, lr=1.0, d=16)
        code = run(["train", "--config", str(cfg), "--data", str(data),
                    "--out", str(tmp_path / "ckpt")])
        assert code == 0
        losses = [json.loads(l)["loss"]
                  for l in (tmp_path / "ckpt.loss.jsonl").read_text().splitlines()]
        assert losses[-1] <= 0.5 * losses[0]

    def test_zero_lr_keeps_init(self, tmp_path):
        data = synth_corpus(tmp_path, n_docs=4, seed=3)
        cfg = small_config(tmp_path, lr=0.0, steps=5)
        assert run(["train", "--config", str(cfg), "--data", str(data),
                    "--out", str(tmp_path / "ckpt")]) == 0
        model, step = store.load_checkpoint(tmp_path / "ckpt")
        fresh = __import__("treesum.encdec", fromlist=["build_model"]).build_model(model.config)
        assert step == 5
        for name in fresh.params:
            assert model.params[name].tobytes() == fresh.params[name].tobytes()

    def test_missing_data_exits_2(self, tmp_path):
        cfg = small_config(tmp_path)
        assert run(["train", "--config", str(cfg), "--data", str(tmp_path / "nope.jsonl"),
                    "--out", str(tmp_path / "ckpt")]) == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        data = synth_corpus(tmp_path, n_docs=4)
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"d": 8, "warmup": 10}))
        assert run(["train", "--config", str(path), "--data", str(data),
                    "--out", str(tmp_path / "ckpt")]) == 2

    def test_flags_override_config(self, tmp_path):
        data = synth_corpus(tmp_path, n_docs=4, seed=4)
        cfg = small_config(tmp_path, steps=50)
        assert run(["train", "--config", str(cfg), "--data", str(data),
                    "--out", str(tmp_path / "ckpt"), "--steps", "3"]) == 0
        _, step = store.load_checkpoint(tmp_path / "ckpt")
        assert step == 3


class TestInduce:
    def trained_ckpt(self, tmp_path):
        data = synth_corpus(tmp_path, n_docs=4, seed=6)
        cfg = small_config(tmp_path, steps=3)
        run(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "ckpt")])
        return data, tmp_path / "ckpt"

    def test_single_sentence_doc(self, tmp_path):
        _, ckpt = self.trained_ckpt(tmp_path)
        single = tmp_path / "single.jsonl"
        single.write_text(json.dumps({"doc_id": "one", "article": "W3 w4 w5.", "summary": "w3"}) + "\n")
        out = tmp_path / "graphs"
        assert run(["induce", "--checkpoint", str(ckpt), "--data", str(single),
                    "--out", str(out)]) == 0
        graph = json.loads((out / "one.json").read_text())
        assert graph["m"] == 1
        assert graph["root"] == [1.0]

    def test_high_threshold_edgeless_dot(self, tmp_path):
        data, ckpt = self.trained_ckpt(tmp_path)
        out = tmp_path / "graphs"
        assert run(["induce", "--checkpoint", str(ckpt), "--data", str(data),
                    "--out", str(out), "--dot-threshold", "1.1"]) == 0
        for dot in out.glob("*.dot"):
            assert "->" not in dot.read_text()

    def test_emitted_graph_invariants(self, tmp_path):
        data, ckpt = self.trained_ckpt(tmp_path)
        out = tmp_path / "graphs"
        assert run(["induce", "--checkpoint", str(ckpt), "--data", str(data),
                    "--out", str(out)]) == 0
        files = sorted(out.glob("*.json"))
        assert len(files) == 4
        for f in files:
            obj = json.loads(f.read_text())
            m = obj["m"]
            adj = np.array(obj["adj"]).reshape(m, m)
            root = np.array(obj["root"])
            assert abs(root.sum() - 1.0) < 1e-8
            np.testing.assert_allclose(root + adj.sum(axis=0), np.ones(m), atol=1e-8)

    def test_corrupt_checkpoint_exits_4(self, tmp_path):
        data = synth_corpus(tmp_path, n_docs=2, seed=7)
        assert run(["induce", "--checkpoint", str(tmp_path / "missing"), "--data", str(data),
                    "--out", str(tmp_path / "g")]) == 4

    def test_decode_out(self, tmp_path):
        data, ckpt = self.trained_ckpt(tmp_path)
        decode_path = tmp_path / "decode.jsonl"
        assert run(["induce", "--checkpoint", str(ckpt), "--data", str(data),
                    "--out", str(tmp_path / "g"), "--decode-out", str(decode_path)]) == 0
        records = corpus.read_jsonl(decode_path)
        assert len(records) == 4
        assert all("graph_attention_trace" in r for r in records)


class TestAnalyze:
    def test_fixture_pairs(self, tmp_path):
        out = tmp_path / "metrics.jsonl"
        assert run(["analyze", "--pairs", str(FIXTURES), "--out", str(out)]) == 0
        rows = corpus.read_jsonl(out)
        assert rows[-1]["doc_id"] == "__aggregate__"
        by_id = {r["doc_id"]: r for r in rows}
        assert by_id["p01"]["coverage"] == 50.0
        assert by_id["p01"]["copy_length"] == 4.5
        assert by_id["p04"]["fusion"]["compression_pct"] == 100.0
        assert by_id["__aggregate__"]["fusion"]["classified"] == 10

    def test_empty_summary_zero_coverage(self, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(json.dumps({"doc_id": "e", "article": "Aircraft engines roar loudly.",
                                     "summary": ""}) + "\n")
        out = tmp_path / "m.jsonl"
        assert run(["analyze", "--pairs", str(pairs), "--out", str(out)]) == 0
        rows = corpus.read_jsonl(out)
        assert rows[0]["coverage"] == 0.0

    def test_identical_article_summary_full_coverage(self, tmp_path):
        text = "Solar farms expanded rapidly. Wind turbines spun all night."
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(json.dumps({"doc_id": "i", "article": text, "summary": text}) + "\n")
        out = tmp_path / "m.jsonl"
        assert run(["analyze", "--pairs", str(pairs), "--out", str(out)]) == 0
        assert corpus.read_jsonl(out)[0]["coverage"] == 100.0

    def test_malformed_line_skipped_exit_4(self, tmp_path, capsys):
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(
            json.dumps({"doc_id": "ok", "article": "Dogs bark loudly.", "summary": "dogs bark"})
            + "\nnot json at all\n"
        )
        out = tmp_path / "m.jsonl"
        assert run(["analyze", "--pairs", str(pairs), "--out", str(out)]) == 4
        err = capsys.readouterr().err
        assert "skipping line 2" in err
        rows = corpus.read_jsonl(out)
        assert rows[0]["doc_id"] == "ok"

    def test_diversity_with_checkpoint(self, tmp_path):
        data = synth_corpus(tmp_path, n_docs=4, seed=8)
        cfg = small_config(tmp_path, steps=3, mode="lir", L=2)
        run(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "ckpt")])
        out = tmp_path / "m.jsonl"
        assert run(["analyze", "--pairs", str(data), "--out", str(out),
                    "--checkpoint", str(tmp_path / "ckpt")]) == 0
        rows = corpus.read_jsonl(out)
        div = rows[0]["diversity"]
        assert div is not None
        assert len(div["per_layer"]) == 2
        assert div["js_root"] is not None


class TestVerifyCommand:
    def test_unknown_suite_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["verify", "--suite", "bogus"])
        assert exc.value.code == 2

    def test_oracle_suite_passes(self, capsys):
        assert run(["verify", "--suite", "oracle"]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out
