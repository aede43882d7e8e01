from dataclasses import replace

import numpy as np
import pytest
import torch

from breakdown_lab.data import RedditPair
from breakdown_lab.model import CheckpointError, ModelConfig, init_params, save_checkpoint
from breakdown_lab.pretrain import MaskPolicy, PretrainPlan, apply_mask, run_pretrain, windowed_permutation
from breakdown_lab.tokenizer import CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, layout_pair, train_wordpiece


def template_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    animals = ["cat", "dog", "bird", "fish", "horse"]
    colors = ["red", "blue", "green", "yellow", "black"]
    out = []
    for i in range(n):
        a, c = animals[int(rng.integers(5))], colors[int(rng.integers(5))]
        out.append(RedditPair(f"my {a} is {c}", f"your {c} {a} is nice", f"p{i}"))
    return out


def mc_counts(policy, n_pairs, seed=0):
    rng = np.random.default_rng(seed)
    eligible = selected = masked = randomized = kept = 0
    for _ in range(n_pairs):
        pair = layout_pair(list(range(10, 70)), list(range(70, 130)), 128)
        res = apply_mask(policy, pair, rng, vocab_size=500)
        eligible += 120
        selected += len(res.positions)
        for pos in res.positions:
            tok = res.corrupted.token_ids[pos]
            if tok == MASK_ID:
                masked += 1
            elif tok == pair.token_ids[pos]:
                kept += 1  # a random draw equal to the original also lands here (p = 1/495)
            else:
                randomized += 1
    return eligible, selected, masked, randomized, kept


class TestMasking:
    def test_select_zero_is_identity(self):
        pair = layout_pair([10, 11, 12], [13, 14], 16)
        res = apply_mask(MaskPolicy(select_prob=0.0), pair, np.random.default_rng(0), 100)
        assert res.corrupted == pair and res.positions == ()

    def test_full_masking_leaves_specials(self):
        pair = layout_pair([10, 11, 12], [13, 14], 16)
        res = apply_mask(MaskPolicy(1.0, 1.0, 0.0, 0.0), pair, np.random.default_rng(0), 100)
        ids = res.corrupted.token_ids
        assert ids[0] == CLS_ID and ids[4] == SEP_ID and ids[7] == SEP_ID
        assert all(t == PAD_ID for t in ids[8:])
        assert [ids[i] for i in (1, 2, 3, 5, 6)] == [MASK_ID] * 5
        assert res.original_ids == (10, 11, 12, 13, 14)

    def test_statistics(self):
        eligible, selected, masked, randomized, kept = mc_counts(MaskPolicy(), 1000)
        assert eligible >= 100_000
        assert abs(selected / eligible - 0.15) < 0.01
        assert abs(masked / selected - 0.8) < 0.02
        assert abs(randomized / selected - 0.1) < 0.02
        assert abs(kept / selected - 0.1) < 0.02

    def test_property_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            c, u = int(rng.integers(0, 20)), int(rng.integers(0, 20))
            pair = layout_pair(rng.integers(NUM_SPECIAL, 50, c).tolist(), rng.integers(NUM_SPECIAL, 50, u).tolist(),
                               32, pad=bool(rng.integers(2)))
            res = apply_mask(MaskPolicy(0.5), pair, rng, 50)
            out = res.corrupted
            assert len(out.token_ids) == len(pair.token_ids) and out.segment_ids == pair.segment_ids
            for i, (a, b) in enumerate(zip(pair.token_ids, out.token_ids)):
                if a < NUM_SPECIAL:
                    assert a == b
                elif i not in res.positions:
                    assert a == b
            assert all(pair.token_ids[p] == o for p, o in zip(res.positions, res.original_ids))
            assert all(t < 50 for t in out.token_ids)

    def test_reproducible(self):
        pair = layout_pair(list(range(10, 30)), list(range(30, 50)), 64)
        a = apply_mask(MaskPolicy(), pair, np.random.default_rng(9), 100)
        b = apply_mask(MaskPolicy(), pair, np.random.default_rng(9), 100)
        assert a == b

    def test_policy_sum(self):
        assert MaskPolicy(0.15, 0.8, 0.3, 0.1).errors()
        with pytest.raises(ValueError, match="sum to 1"):
            MaskPolicy(0.15, 0.8, 0.3, 0.1).validate()


def test_windowed_permutation_is_permutation():
    perm = windowed_permutation(1003, 100, np.random.default_rng(0))
    assert sorted(perm.tolist()) == list(range(1003))


class TestRun:
    def setup_method(self):
        self.pairs = template_pairs(200)
        corpus = [t for p in self.pairs for t in (p.parent_text, p.child_text)]
        self.vocab = train_wordpiece(corpus, 60)
        self.cfg = ModelConfig(vocab_size=len(self.vocab), max_len=16, hidden_dim=32, num_layers=2, num_heads=4,
                               ffn_dim=64, dropout_rate=0.0, seed=0)

    def test_learnability(self):
        res = run_pretrain(PretrainPlan(epochs=30, batch_size=16, learning_rate=1e-3, seed=0), self.cfg, self.pairs,
                           self.vocab)
        assert len(res.epoch_losses) == 30
        assert res.epoch_losses[-1] < 0.5 * res.epoch_losses[0]
        assert all(torch.isfinite(p).all() for p in res.model.parameters())

    def test_zero_lr_is_noop(self, tmp_path):
        res = run_pretrain(PretrainPlan(epochs=1, learning_rate=0.0), self.cfg, self.pairs[:40], self.vocab,
                           log_path=tmp_path / "loss.csv")
        ref = init_params(self.cfg)
        for a, b in zip(res.model.parameters(), ref.parameters()):
            assert torch.equal(a, b)
        assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,step,mlm_loss"

    def test_deterministic(self):
        plan = PretrainPlan(epochs=2, learning_rate=1e-3, seed=4)
        a = run_pretrain(plan, self.cfg, self.pairs[:64], self.vocab)
        b = run_pretrain(plan, self.cfg, self.pairs[:64], self.vocab)
        assert a.epoch_losses == b.epoch_losses
        assert all(torch.equal(x, y) for x, y in zip(a.model.parameters(), b.model.parameters()))

    def test_max_steps(self):
        res = run_pretrain(PretrainPlan(epochs=5, batch_size=16, max_steps=3), self.cfg, self.pairs, self.vocab)
        assert res.log_rows[-1][1] == 3

    def test_empty_stream(self):
        with pytest.raises(ValueError, match="empty"):
            run_pretrain(PretrainPlan(), self.cfg, [], self.vocab)

    def test_warm_start_mismatch(self, tmp_path):
        other = replace(self.cfg, vocab_size=self.cfg.vocab_size + 3)
        path = tmp_path / "other.ckpt"
        save_checkpoint(init_params(other), path)
        with pytest.raises(CheckpointError, match="vocab_size"):
            run_pretrain(PretrainPlan(init=f"warm:{path}"), self.cfg, self.pairs, self.vocab)

    def test_warm_start_continues(self, tmp_path):
        first = run_pretrain(PretrainPlan(epochs=3, batch_size=16, learning_rate=1e-3), self.cfg, self.pairs, self.vocab)
        path = tmp_path / "warm.ckpt"
        save_checkpoint(first.model, path, self.vocab.sha256())
        second = run_pretrain(PretrainPlan(epochs=1, batch_size=16, learning_rate=0.0, init=f"warm:{path}"),
                              self.cfg, self.pairs, self.vocab)
        assert torch.equal(second.model.embeddings.token, first.model.embeddings.token)
