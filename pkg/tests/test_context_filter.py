from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docnmt.context_filter import (
    DEFAULT_TOP_N, FilterMode, FilterSpec, MissingAnnotationError, TaggedSentence, ConllFormatError,
    apply_filter, build_frequency_table, filter_sentence, load_frequency_table, load_stoplist, load_tagsets,
    read_conll, retention_report, save_frequency_table, write_conll,
)

from _oracles import unigram_counts

FIX = Path(__file__).parent / "fixtures"

TABLE1_ROWS = {
    "stopwords": "recent years , I correctly foresaw absence stronger fiscal stimulus ( forthcoming Europe United "
                 "States ) , recovery Great Recession 2008 slow .",
    "topfreq": "recent correctly foresaw absence stronger fiscal stimulus forthcoming either States recovery Great "
               "Recession 2008 slow",
    "ner": "recent years Europe the United States the Great Recession 2008",
    "pos": "years I foresaw the absence stimulus was forthcoming either Europe or the United States recovery the "
           "Great Recession 2008 would be",
}


def table1_spec(mode):
    kw = {"frequency_table": load_frequency_table(FIX / "table1_top_frequent.txt")} if mode == "topfreq" else {}
    return FilterSpec.default(mode, **kw)


@pytest.fixture(scope="module")
def table1():
    return read_conll(FIX / "table1.conll")[0]


class TestFrequencyTable:
    def test_simple(self):
        assert build_frequency_table([["a", "a", "b"]]) == {"a": 1, "b": 2}

    def test_tie_lexicographic(self):
        assert build_frequency_table([["b", "b", "a", "a"]]) == {"a": 1, "b": 2}

    def test_matches_count_and_sort(self):
        corpus = [["the", "cat", "and", "the", "dog"], ["a", "dog", "and", "the", "cat", "ran"]]
        counts = unigram_counts(corpus)
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        assert build_frequency_table(corpus) == {w: i + 1 for i, w in enumerate(ranked)}

    def test_roundtrip(self, tmp_path):
        t = build_frequency_table([["x", "y", "y", "z", "z", "z"]])
        save_frequency_table(t, tmp_path / "f")
        assert load_frequency_table(tmp_path / "f") == t


class TestApplyFilter:
    @pytest.mark.parametrize("mode", sorted(TABLE1_ROWS))
    def test_table1_rows(self, table1, mode):
        assert apply_filter(table1_spec(mode), table1) == TABLE1_ROWS[mode].split()

    def test_all_stopwords_gives_empty_marker(self):
        spec = FilterSpec.default("stopwords")
        assert apply_filter(spec, ["the", "of", "and"]) == ["_EMPTY_"]

    def test_top_frequent_one(self):
        spec = FilterSpec(FilterMode.TOP_FREQUENT, n=1, frequency_table=build_frequency_table([["a", "a", "b"]]))
        assert apply_filter(spec, ["a", "b", "a"]) == ["b"]

    def test_top_zero_keeps_everything(self):
        spec = FilterSpec(FilterMode.TOP_FREQUENT, n=0, frequency_table={"a": 1})
        assert apply_filter(spec, ["a", "b"]) == ["a", "b"]

    def test_default_n(self):
        assert DEFAULT_TOP_N == 150 and FilterSpec().n == 150

    def test_tag_modes_need_tags(self):
        for mode in ("ner", "pos"):
            with pytest.raises(MissingAnnotationError):
                apply_filter(FilterSpec.default(mode), ["Europe"])

    def test_missing_resources(self):
        with pytest.raises(MissingAnnotationError):
            apply_filter(FilterSpec(FilterMode.STOPWORDS), ["a"])
        with pytest.raises(MissingAnnotationError):
            apply_filter(FilterSpec(FilterMode.TOP_FREQUENT), ["a"])

    def test_fold_case(self):
        assert apply_filter(FilterSpec.default("stopwords"), ["The", "cat"]) == ["The", "cat"]
        assert apply_filter(FilterSpec.default("stopwords", fold_case=True), ["The", "cat"]) == ["cat"]

    def test_keep_punct(self):
        spec = FilterSpec.default("stopwords", drop_dangling_punct=False)
        assert apply_filter(spec, ["cat", "that", ",", "dog"]) == ["cat", ",", "dog"]
        assert apply_filter(FilterSpec.default("stopwords"), ["cat", "that", ",", "dog"]) == ["cat", "dog"]

    def test_multiword_entity_kept_whole(self):
        s = TaggedSentence(["in", "New", "York", "today"], ["O", "B-GPE", "I-GPE", "B-DATE"])
        assert apply_filter(FilterSpec.default("ner"), s) == ["New", "York", "today"]

    def test_excluded_entity_types(self):
        s = TaggedSentence(["Hamlet", "5", "kg"], ["B-WORK_OF_ART", "B-QUANTITY", "I-QUANTITY"])
        assert apply_filter(FilterSpec.default("ner"), s) == ["_EMPTY_"]

    def test_bioes_tags(self):
        s = TaggedSentence(["a", "Paris", "b"], ["O", "S-GPE", "O"])
        assert apply_filter(FilterSpec.default("ner"), s) == ["Paris"]

    def test_tagsets(self):
        ts = load_tagsets()
        assert len(ts["ner"]) == 16 and "WORK_OF_ART" not in ts["ner"]
        assert len(ts["pos"]) == 20 and {"PRP$", "CODE", "NNPS"} <= ts["pos"]
        assert "IN" not in ts["pos"] and "JJ" not in ts["pos"]

    def test_stoplist_shipped(self):
        stop = load_stoplist()
        assert {"the", "i", "either", "not"} <= stop and "years" not in stop


sentences = st.lists(st.sampled_from(["the", "a", "cat", "dog", ",", ".", "of", "Europe", "ran", "I"]),
                     min_size=1, max_size=12)


class TestProperties:
    table = build_frequency_table([["the", "the", "a", ",", ",", "cat", "of", "of", "."]])

    def specs(self):
        return [FilterSpec.default("stopwords"), FilterSpec(FilterMode.TOP_FREQUENT, n=3, frequency_table=self.table),
                FilterSpec(FilterMode.NONE)]

    @settings(max_examples=100, deadline=None)
    @given(sentences)
    def test_idempotent_subsequence_nonempty(self, toks):
        for spec in self.specs():
            once = apply_filter(spec, toks)
            assert once and apply_filter(spec, once) == once
            if once != ["_EMPTY_"]:
                it = iter(toks)
                assert all(t in it for t in once)  # order-preserving subsequence
            else:
                assert once.count("_EMPTY_") == 1

    @settings(max_examples=50, deadline=None)
    @given(sentences, st.data())
    def test_tag_modes_idempotent(self, toks, data):
        ner = data.draw(st.lists(st.sampled_from(["O", "B-GPE", "I-GPE", "B-WORK_OF_ART"]),
                                 min_size=len(toks), max_size=len(toks)))
        pos = data.draw(st.lists(st.sampled_from(["NN", "IN", "DT", "JJ"]), min_size=len(toks), max_size=len(toks)))
        s = TaggedSentence(toks, ner, pos)
        for mode in ("ner", "pos"):
            spec = FilterSpec.default(mode)
            once = filter_sentence(spec, s)
            assert filter_sentence(spec, once).tokens == once.tokens


class TestRetention:
    def test_identity(self, table1):
        assert retention_report(FilterSpec(FilterMode.NONE), [table1]) == 1.0

    def test_all_stopwords(self):
        assert retention_report(FilterSpec.default("stopwords"), [["the", "of"], ["and"]]) == 0.0

    def test_ner_smallest_on_news_fixture(self):
        sents = read_conll(FIX / "news_1k.conll")
        assert len(sents) == 1000
        table = build_frequency_table(s.tokens for s in sents)
        r = {m: retention_report(FilterSpec.default(m, frequency_table=table if m == "topfreq" else None), sents)
             for m in ("stopwords", "topfreq", "ner", "pos")}
        assert r["ner"] < min(r["stopwords"], r["topfreq"], r["pos"])


class TestConll:
    def test_roundtrip(self, tmp_path, table1):
        write_conll([table1, table1], tmp_path / "x.conll")
        back = read_conll(tmp_path / "x.conll")
        assert len(back) == 2 and back[1] == table1

    def test_two_columns(self, tmp_path):
        (tmp_path / "a").write_text("Paris\tB-GPE\nis\tO\n\n")
        s = read_conll(tmp_path / "a")[0]
        assert s.pos_tags is None and s.ner_tags == ["B-GPE", "O"]

    def test_too_many_columns(self, tmp_path):
        (tmp_path / "a").write_text("a b c d\n")
        with pytest.raises(ConllFormatError, match=":1:"):
            read_conll(tmp_path / "a")

    def test_tag_length_checked(self):
        with pytest.raises(ValueError):
            TaggedSentence(["a", "b"], ["O"])
