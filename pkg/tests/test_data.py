import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from breakdown_lab.data import (
    DataError,
    Dialogue,
    Example,
    ExtractStats,
    LabelDistribution,
    Turn,
    aggregate_votes,
    build_examples,
    extract_reddit_pairs,
    label_histogram,
    load_examples,
    majority_label,
    parse_dbdc,
    parse_dbdc_file,
    save_examples,
)


def dbdc(turns, dialogue_id="d1"):
    return {
        "dialogue-id": dialogue_id,
        "turns": [
            {"turn-index": i, "speaker": s, "utterance": u, "annotations": [{"breakdown": v} for v in votes]}
            for i, (s, u, votes) in enumerate(turns)
        ],
    }


def line(cid, parent, body):
    return json.dumps({"id": cid, "parent_id": parent, "body": body})


class TestDbdc:
    def test_parse_file(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps(dbdc([("U", "hi", []), ("S", "hello", ["O"] * 15)])))
        dlg = parse_dbdc_file(path)
        assert [t.speaker for t in dlg.turns] == ["user", "system"]
        ex = build_examples(dlg)
        assert len(ex) == 1 and ex[0].target.counts == (0, 0, 15)

    def test_vote_mapping(self):
        dlg = parse_dbdc(dbdc([("S", "x", ["O", "T", "X", "X"])]))
        assert dlg.turns[0].annotations == ("NB", "SB", "B", "B")

    def test_unknown_symbol(self):
        turns = [("U", "a", []), ("S", "b", ["O"]), ("U", "c", []), ("S", "d", ["O", "Z"])]
        with pytest.raises(DataError, match="unknown breakdown symbol Z at turn 3"):
            parse_dbdc(dbdc(turns))

    def test_malformed_json_reports_byte_offset(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"dialogue-id": "é", "turns": [}', encoding="utf-8")
        with pytest.raises(DataError, match="byte 32"):
            parse_dbdc_file(path)


class TestVotes:
    @pytest.mark.parametrize(
        "votes, p",
        [
            (["NB"] * 15, (0.0, 0.0, 1.0)),
            (["B"] * 6 + ["SB"] * 3 + ["NB"] * 6, (0.4, 0.2, 0.4)),
            (["B"] * 5 + ["SB"] * 5 + ["NB"] * 5, (1 / 3, 1 / 3, 1 / 3)),
        ],
    )
    def test_aggregate(self, votes, p):
        d = aggregate_votes(votes)
        assert d.p == pytest.approx(p, abs=1e-12)
        assert abs(sum(d.p) - 1) < 1e-9

    def test_empty_votes(self):
        with pytest.raises(DataError, match="no annotations"):
            aggregate_votes([])

    @pytest.mark.parametrize("counts, label", [((9, 3, 3), "B"), ((7, 7, 1), "B"), ((5, 5, 5), "B"),
                                               ((0, 4, 4), "SB"), ((1, 2, 12), "NB")])
    def test_majority(self, counts, label):
        assert majority_label(LabelDistribution.from_counts(counts)) == label

    @given(st.lists(st.sampled_from(["B", "SB", "NB"]), min_size=1, max_size=30), st.integers(1, 5))
    def test_scale_consistency(self, votes, k):
        a, b = aggregate_votes(votes), aggregate_votes(votes * k)
        assert a.p == pytest.approx(b.p, abs=1e-12)
        assert majority_label(a) == majority_label(b)


class TestBuildExamples:
    def test_simple(self):
        ex = build_examples(parse_dbdc(dbdc([("U", "hi", []), ("S", "hello", ["O"])])))
        assert [(e.context, e.utterance) for e in ex] == [("hi", "hello")]
        assert ex[0].origin == "d1:1"

    def test_system_first(self):
        ex = build_examples(parse_dbdc(dbdc([("S", "welcome", ["O"]), ("U", "hi", []), ("S", "ok", ["X"])])))
        assert [e.context for e in ex] == ["", "hi"]

    def test_previous_system_turn_skipped(self):
        turns = [("U", "hi", []), ("S", "first", []), ("S", "second", ["T"])]
        ex = build_examples(parse_dbdc(dbdc(turns)))
        assert [(e.context, e.utterance, e.majority) for e in ex] == [("hi", "second", "SB")]

    def test_annotated_user_turns_ignored(self):
        turns = [("U", "hi", ["O"]), ("S", "yo", ["X"])]
        ex = build_examples(parse_dbdc(dbdc(turns)))
        assert len(ex) == 1 and ex[0].utterance == "yo"

    def test_every_example_from_system_turn(self):
        dlg = Dialogue("z", (Turn("system", "a", ("B",)), Turn("user", "b"), Turn("system", "c", ("NB",))))
        for ex in build_examples(dlg):
            idx = int(ex.origin.split(":")[1])
            assert dlg.turns[idx].speaker == "system"

    def test_jsonl_round_trip(self, tmp_path):
        ex = build_examples(parse_dbdc(dbdc([("U", "hi", []), ("S", "hello", ["O", "X", "X"])])))
        save_examples(tmp_path / "e.jsonl", ex)
        assert load_examples(tmp_path / "e.jsonl") == ex


class TestHistogram:
    def _ex(self, counts):
        return Example("", "u", LabelDistribution.from_counts(counts), "o")

    def test_all_nb(self):
        assert label_histogram([self._ex((0, 0, 15))] * 3) == (0.0, 0.0, 1.0)

    def test_balanced(self):
        h = label_histogram([self._ex((15, 0, 0)), self._ex((0, 15, 0)), self._ex((0, 0, 15))])
        assert h == pytest.approx((1 / 3, 1 / 3, 1 / 3))

    def test_empty(self):
        with pytest.raises(DataError):
            label_histogram([])


class TestReddit:
    def test_direct_link(self):
        pairs = list(extract_reddit_pairs([line("a", "t3_x", "hello"), line("b", "t1_a", "world")]))
        assert [(p.parent_text, p.child_text, p.pair_id) for p in pairs] == [("hello", "world", "b")]

    def test_submission_parent(self):
        assert list(extract_reddit_pairs([line("a", "t3_a", "hello"), line("b", "t3_a", "world")])) == []

    @pytest.mark.parametrize("body", ["[deleted]", "[removed]", "", "   "])
    def test_placeholder_parent_and_child(self, body):
        assert list(extract_reddit_pairs([line("a", "t3_x", body), line("b", "t1_a", "world")])) == []
        assert list(extract_reddit_pairs([line("a", "t3_x", "hello"), line("b", "t1_a", body)])) == []

    def test_malformed_lines_skipped(self):
        stats = ExtractStats()
        lines = [line("a", "t3_x", "p"), "{oops", '{"id": "q"}', line("b", "t1_a", "c")]
        pairs = list(extract_reddit_pairs(lines, stats=stats))
        assert len(pairs) == 1 and stats.skipped == 2

    def test_limit_and_chains(self):
        lines = [line("a", "t3_x", "one"), line("b", "t1_a", "two"), line("c", "t1_b", "three"), line("d", "t1_a", "four")]
        assert [p.child_text for p in extract_reddit_pairs(lines)] == ["two", "three", "four"]
        assert [p.child_text for p in extract_reddit_pairs(lines, limit=2)] == ["two", "three"]

    def test_fifo_eviction(self):
        stats = ExtractStats()
        lines = [line("a", "t3_x", "one"), line("b", "t3_x", "two"), line("c", "t1_a", "three")]
        assert list(extract_reddit_pairs(lines, capacity=1, stats=stats)) == []
        assert stats.evicted == 2

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9),
                              st.sampled_from(["x", "[deleted]", "[removed]", "", "y z"])), max_size=40))
    def test_no_placeholders_property(self, rows):
        lines = [line(str(i), f"t1_{p}", b) for i, p, b in rows]
        pairs = list(extract_reddit_pairs(lines))
        assert len(pairs) <= len(lines)
        for p in pairs:
            for text in (p.parent_text, p.child_text):
                assert text.strip() and text not in ("[deleted]", "[removed]")
