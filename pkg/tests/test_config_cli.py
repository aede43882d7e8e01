import io
import json

import pytest

from breakdown_lab.cli import main
from breakdown_lab.config import ConfigError, validate_config
from breakdown_lab.synthetic import write_corpus

TINY = """\
[paths]
train = train
valid = valid
test = test
reddit = reddit.jsonl

[tokenizer]
vocab_size = 300

[model]
max_len = 24
hidden_dim = 16
num_layers = 1
num_heads = 2
ffn_dim = 32
dropout_rate = 0.0

[pretrain]
epochs = 2
batch_size = 16
learning_rate = 1e-3
pairs_limit = 200

[finetune]
epochs = 2
batch_size = 16
learning_rate = 1e-3

[ensemble]
members = 2
top = 1
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    c = write_corpus(root, num_dialogues=60, num_reddit_pairs=200, seed=1)
    (root / "tiny.cfg").write_text(TINY)
    return c


def errors_of(path, **kw):
    with pytest.raises(ConfigError) as err:
        validate_config(path, **kw)
    return err.value.errors


class TestValidateConfig:
    def test_divisibility_names_both_keys(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("[model]\nhidden_dim = 6\nnum_heads = 4\n")
        errs = errors_of(path, need_inputs=False)
        assert any("model.hidden_dim" in e and "model.num_heads" in e for e in errs)

    def test_empty_file_reports_required_paths(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("")
        errs = errors_of(path)
        assert sorted(errs) == ["paths.reddit: required (or paths.pairs)", "paths.train: required", "paths.valid: required"]
        cfg = validate_config(path, need_inputs=False)
        assert cfg.model.hidden_dim == 128 and cfg.run.seed == 0

    def test_mask_fractions(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("[mask]\nmask_frac = 0.8\nrandom_frac = 0.3\nkeep_frac = 0.1\n")
        errs = errors_of(path, need_inputs=False)
        assert any(e.startswith("mask.") and "sum to 1" in e and "1.2" in e for e in errs)

    def test_all_errors_aggregated(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("[model]\nhidden_dim = x\nbogus = 1\n[ensemble]\ntop = 9\n[nope]\na = 1\n")
        errs = errors_of(path, need_inputs=False)
        joined = "\n".join(errs)
        for key in ("model.hidden_dim", "model.bogus", "ensemble.top", "nope"):
            assert key in joined

    def test_overrides_win_and_paths_resolve(self, corpus):
        cfg = validate_config(corpus.root / "tiny.cfg", {"model": {"hidden_dim": "32"}, "run": {"seed": "7"}})
        assert cfg.model.hidden_dim == 32 and cfg.run.seed == 7
        assert cfg.paths.train == str(corpus.root / "train")

    def test_missing_input_path(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("[paths]\ntrain = nowhere\nvalid = v\nreddit = r\n")
        errs = errors_of(path)
        assert any(e.startswith("paths.train:") and "does not exist" in e for e in errs)


class TestCli:
    def test_usage_errors_exit_1(self, capsys):
        assert main(["frobnicate"]) == 1
        assert main(["eval", "--pred"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_eval_missing_file(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(["eval", "--pred", str(tmp_path / "missing.jsonl"), "--gold", str(tmp_path), "--out", str(out)])
        assert code == 1
        assert "missing.jsonl" in capsys.readouterr().err
        assert not out.exists()

    def test_bad_config_exit_1(self, tmp_path, capsys):
        path = tmp_path / "c.cfg"
        path.write_text("[model]\nhidden_dim = 6\n")
        assert main(["pipeline", "--config", str(path)]) == 1
        assert "model.hidden_dim" in capsys.readouterr().err

    def test_stage_commands(self, corpus, tmp_path, capsys):
        cfg = str(corpus.root / "tiny.cfg")
        w = lambda name: str(tmp_path / name)  # noqa: E731
        assert main(["extract-reddit", "--dump", str(corpus.reddit), "--out", w("pairs.jsonl"), "--limit", "150"]) == 0
        assert len((tmp_path / "pairs.jsonl").read_text().splitlines()) == 150
        (tmp_path / "corpus.txt").write_text("\n".join(
            json.loads(line)["parent"] for line in (tmp_path / "pairs.jsonl").read_text().splitlines()))
        assert main(["tok", "train", "--corpus", w("corpus.txt"), str(corpus.root / "reddit.jsonl"),
                     "--vocab-size", "400", "--out", w("vocab.txt")]) == 0
        assert main(["pretrain", "--pairs", w("pairs.jsonl"), "--vocab", w("vocab.txt"), "--config", cfg,
                     "--epochs", "1", "--out", w("pre.ckpt")]) == 0
        assert (tmp_path / "pre.loss.csv").exists()
        common = ["--valid", str(corpus.valid), "--vocab", w("vocab.txt"), "--config", cfg]
        assert main(["finetune", "--train", str(corpus.train), "--init", w("pre.ckpt"), *common,
                     "--out", w("teacher.ckpt")]) == 0
        assert main(["augment", "--train", str(corpus.train), "--teacher", w("teacher.ckpt"), "--recon", w("pre.ckpt"),
                     "--vocab", w("vocab.txt"), "--strategy", "topk:3", "--out", w("aug.jsonl")]) == 0
        for seed in ("1", "2"):
            assert main(["finetune", "--train", str(corpus.train), "--augmented", w("aug.jsonl"), "--init", w("pre.ckpt"),
                         *common, "--seed", seed, "--out", w(f"m{seed}.ckpt")]) == 0
            assert main(["predict", "--ckpt", w(f"m{seed}.ckpt"), "--vocab", w("vocab.txt"), "--data", str(corpus.valid),
                         "--out", w(f"m{seed}.jsonl")]) == 0
        assert main(["ensemble", "--members", w("m1.jsonl"), w("m2.jsonl"), "--valid", str(corpus.valid), "--top", "2",
                     "--out", w("ens.jsonl")]) == 0
        capsys.readouterr()
        assert main(["eval", "--pred", w("ens.jsonl"), "--gold", str(corpus.valid), "--base", "e"]) == 0
        report = json.loads(capsys.readouterr().out.splitlines()[0])
        assert report["js_base"] == "e" and 0 <= report["accuracy"] <= 1
        assert main(["augment", "--train", str(corpus.train), "--teacher", w("teacher.ckpt"), "--recon", w("pre.ckpt"),
                     "--vocab", w("vocab.txt"), "--strategy", "beam", "--out", w("x.jsonl")]) == 1

    def test_tok_encode(self, tmp_path, monkeypatch, capsys):
        vocab = tmp_path / "v.txt"
        (tmp_path / "c.txt").write_text("hello world\n")
        assert main(["tok", "train", "--corpus", str(tmp_path / "c.txt"), "--vocab-size", "40", "--out", str(vocab)]) == 0
        monkeypatch.setattr("sys.stdin", io.StringIO("hello\tworld\n"))
        capsys.readouterr()
        assert main(["tok", "encode", "--vocab", str(vocab), "--pair", "--max-len", "8"]) == 0
        enc = json.loads(capsys.readouterr().out)
        assert enc["token_ids"][0] == 2 and len(enc["token_ids"]) == 8

    def test_pipeline_smoke(self, corpus, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["--threads", "1", "pipeline", "--config", str(corpus.root / "tiny.cfg"), "--seed", "3",
                     "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"]["members"] == [3, 4]
        assert manifest["counts"]["augmented_rows"] == manifest["counts"]["train"] * 3
        assert str(out) not in (out / "manifest.json").read_text()
        for rel in manifest["outputs"]:
            assert (out / rel).exists()
        reports = json.loads((out / "reports.json").read_text())
        assert len(reports["valid"]["members"]) == 2 and len(reports["summary"]["ensemble_members"]) == 1
