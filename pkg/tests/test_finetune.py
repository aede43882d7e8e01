from dataclasses import replace

import numpy as np
import pytest
import torch

from breakdown_lab.data import Example, LabelDistribution, tie_broken_argmax
from breakdown_lab.evaluation import evaluate
from breakdown_lab.finetune import FinetunePlan, encode_examples, predict, run_finetune, select_best, write_train_log
from breakdown_lab.model import ModelError, collate, forward_classify, init_params, kl_loss, loss_kl, save_checkpoint

SENTENCES = ["the cat sat on the mat", "hello world", "the dog is running", "unable to run", "cat and dog"]


def make_examples(n, seed=0, prefix="d"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        ctx, utt = SENTENCES[int(rng.integers(5))], SENTENCES[int(rng.integers(5))]
        counts = rng.multinomial(15, [0.5, 0.1, 0.4])
        out.append(Example(ctx, utt, LabelDistribution.from_counts(counts), f"{prefix}{i}:1"))
    return out


@pytest.fixture
def model(small_vocab, tiny_cfg):
    return init_params(replace(tiny_cfg, vocab_size=len(small_vocab), max_len=24))


def test_select_best_tie_rule():
    assert select_best([100, 200, 300], [0.6, 0.8, 0.8], "accuracy") == 200
    assert select_best([100, 200, 300], [0.3, 0.1, 0.1], "js_div") == 200


def test_batch_loss_is_mean_of_example_kl(model, small_vocab):
    examples = make_examples(4, seed=3)
    batch = collate(encode_examples(examples, small_vocab, model.cfg.max_len))
    model.eval()
    logits = model.classify_logits(batch).to(torch.float64)
    targets = torch.tensor([ex.target.p for ex in examples], dtype=torch.float64)
    outs = forward_classify(model, batch)
    ref = np.mean([loss_kl(o, ex.target) for o, ex in zip(outs, examples)])
    assert kl_loss(logits, targets).item() == pytest.approx(ref, abs=1e-6)


def test_zero_lr(model, small_vocab):
    before = {k: v.clone() for k, v in model.state_dict().items()}
    plan = FinetunePlan(epochs=3, batch_size=8, learning_rate=0.0, reinit_head=False)
    res = run_finetune(plan, model, make_examples(24), make_examples(10, 1, "v"), small_vocab)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    accs = [row[2] for row in res.log_rows]
    assert len(accs) == 3 and len(set(accs)) == 1
    assert res.best_step == res.log_rows[0][0]


def test_deterministic_and_log(model, small_vocab, tmp_path):
    plan = FinetunePlan(epochs=2, batch_size=8, learning_rate=1e-3, seed=5, eval_every=2)
    train, valid = make_examples(24), make_examples(10, 1, "v")
    for name in ("a", "b"):
        m = init_params(model.cfg)
        run_finetune(plan, m, train, valid, small_vocab, tmp_path / f"{name}.csv")
        save_checkpoint(m, tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "step,train_kl,valid_acc,valid_f1,valid_jsd"
    assert [int(line.split(",")[0]) for line in lines[1:]] == [2, 4, 6]


def test_keeps_best_checkpoint(model, small_vocab):
    plan = FinetunePlan(epochs=4, batch_size=8, learning_rate=5e-3, seed=1, eval_every=1)
    valid = make_examples(10, 1, "v")
    res = run_finetune(plan, model, make_examples(16), valid, small_vocab)
    assert evaluate(predict(model, valid, small_vocab), valid).accuracy == res.best_report.accuracy
    assert res.best_report.accuracy == max(row[2] for row in res.log_rows)


def test_augmented_targets_use_same_loss(model, small_vocab):
    pseudo = [Example(ex.context, ex.utterance, LabelDistribution.from_probs((0.2, 0.3, 0.5)), ex.origin + "#aug0")
              for ex in make_examples(8)]
    res = run_finetune(FinetunePlan(epochs=1, batch_size=8, learning_rate=1e-3), model, make_examples(8) + pseudo,
                       make_examples(4, 1, "v"), small_vocab)
    assert np.isfinite(res.log_rows[-1][1])


def test_predict(model, small_vocab):
    examples = make_examples(30, seed=2)
    a, b = predict(model, examples, small_vocab), predict(model, examples, small_vocab)
    assert a == b and len(a) == len(examples)
    assert [r.origin for r in a] == [ex.origin for ex in examples]
    for r in a:
        assert abs(sum(r.probs) - 1) < 1e-9
        assert r.predicted == ("B", "SB", "NB")[tie_broken_argmax(r.probs)]


def test_vocab_mismatch(model, small_vocab, tiny_cfg):
    other = init_params(tiny_cfg)
    with pytest.raises(ModelError):
        run_finetune(FinetunePlan(), other, make_examples(4), make_examples(2), small_vocab)


def test_write_train_log(tmp_path):
    write_train_log(tmp_path / "log.csv", [(10, 0.5, 0.7, 0.6, 0.1)])
    assert (tmp_path / "log.csv").read_text().splitlines()[1] == "10,0.5,0.7,0.6,0.1"
