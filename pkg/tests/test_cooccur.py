import math

import numpy as np
import pytest

from tweedievec.cooccur import (CooccurrenceStore, StaleCursorError,
                                StoreFormatError, Vocabulary, apply_log1p,
                                build_vocab, check_symmetry, compute_row_stats,
                                count_cooccurrences)


def brute_force_counts(sentences, vocab, window):
    """O(L^2) all-pairs oracle: test every position pair for distance,
    accumulating unordered keys in (first, second) position order."""
    acc = {}
    for sent in sentences:
        ids = [vocab.token_to_id.get(tok, -1) for tok in sent]
        L = len(ids)
        for s in range(L):
            for t in range(s + 1, L):
                if t - s > window:
                    continue
                a, b = ids[s], ids[t]
                if a < 0 or b < 0:
                    continue
                key = (min(a, b), max(a, b))
                w = 1.0 / (t - s)
                acc[key] = acc.get(key, 0.0) + (2.0 * w if a == b else w)
    return acc


def store_as_dict(store):
    out = {}
    for recs in store.iter_records():
        for r in recs:
            out[(int(r["row"]), int(r["col"]))] = float(r["weight"])
    return out


def random_sentences(rng, n_sentences, vocab_size, min_len=2, max_len=20):
    tokens = [f"w{k}" for k in range(vocab_size)]
    out = []
    for _ in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        out.append([tokens[int(rng.integers(0, vocab_size))] for _ in range(length)])
    return out


class TestVocabulary:
    def test_small_corpus(self):
        vocab = build_vocab([["a", "b", "a"]])
        assert vocab.tokens == ["a", "b"]
        assert vocab.counts == [2, 1]
        assert vocab.token_to_id == {"a": 0, "b": 1}

    def test_tie_broken_lexicographically(self):
        vocab = build_vocab([["zz", "aa", "mm"]])
        assert vocab.tokens == ["aa", "mm", "zz"]

    def test_min_count_and_max_size(self):
        sents = [["a"] * 5 + ["b"] * 3 + ["c"] * 3 + ["d"]]
        vocab = build_vocab(sents, max_size=2, min_count=2)
        assert vocab.tokens == ["a", "b"]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_matches_brute_force_frequency_sort(self, rng):
        sents = random_sentences(rng, 200, 40)
        vocab = build_vocab(sents, max_size=25)
        freq = {}
        for s in sents:
            for tok in s:
                freq[tok] = freq.get(tok, 0) + 1
        ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:25]
        assert vocab.tokens == [t for t, _ in ranked]
        assert vocab.counts == [c for _, c in ranked]

    def test_save_load_round_trip(self, tmp_path):
        vocab = build_vocab([["b", "a", "b"]])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        back = Vocabulary.load(path)
        assert back.tokens == vocab.tokens
        assert back.counts == vocab.counts


class TestCounting:
    def test_three_token_sentence(self, tmp_path):
        vocab = build_vocab([["a", "b", "c"]])
        store = count_cooccurrences([["a", "b", "c"]], vocab, window=2,
                                    out_path=tmp_path / "s.cooc")
        d = store_as_dict(store)
        a, b, c = vocab.id_of("a"), vocab.id_of("b"), vocab.id_of("c")
        assert d[(a, b)] == 1.0 and d[(b, a)] == 1.0
        assert d[(b, c)] == 1.0 and d[(c, b)] == 1.0
        assert d[(a, c)] == 0.5 and d[(c, a)] == 0.5
        assert len(d) == 6

    def test_window_one_drops_distant_pair(self, tmp_path):
        vocab = build_vocab([["a", "b", "c"]])
        store = count_cooccurrences([["a", "b", "c"]], vocab, window=1,
                                    out_path=tmp_path / "s.cooc")
        d = store_as_dict(store)
        assert (vocab.id_of("a"), vocab.id_of("c")) not in d

    def test_self_pair_on_diagonal(self, tmp_path):
        vocab = build_vocab([["a", "a"]])
        store = count_cooccurrences([["a", "a"]], vocab, window=1,
                                    out_path=tmp_path / "s.cooc")
        d = store_as_dict(store)
        assert d == {(0, 0): 2.0}

    def test_oov_occupies_positions(self, tmp_path):
        vocab = Vocabulary(["a", "c"], [1, 1])
        store = count_cooccurrences([["a", "b", "c"]], vocab, window=2,
                                    out_path=tmp_path / "s.cooc")
        d = store_as_dict(store)
        # "b" keeps a and c at distance 2; it forms no pairs itself
        assert d == {(0, 1): 0.5, (1, 0): 0.5}

    def test_pairs_never_cross_sentences(self, tmp_path):
        vocab = build_vocab([["a"], ["b"]])
        store = count_cooccurrences([["a"], ["b"]], vocab, window=5,
                                    out_path=tmp_path / "s.cooc")
        assert store.n_records == 0

    @pytest.mark.parametrize("window", [1, 5, 10])
    def test_exact_match_with_brute_force(self, rng, tmp_path, window):
        sents = random_sentences(rng, 100, 30)
        vocab = build_vocab(sents)
        store = count_cooccurrences(sents, vocab, window,
                                    out_path=tmp_path / f"w{window}.cooc")
        got = store_as_dict(store)
        want = brute_force_counts(sents, vocab, window)
        mirrored = {}
        for (a, b), w in want.items():
            mirrored[(a, b)] = w
            mirrored[(b, a)] = w
        assert got == mirrored  # exact floating equality

    def test_sharded_counting_agrees_with_direct(self, rng, tmp_path):
        sents = random_sentences(rng, 150, 25)
        vocab = build_vocab(sents)
        direct = count_cooccurrences(sents, vocab, 5, tmp_path / "direct.cooc")
        sharded = count_cooccurrences(sents, vocab, 5, tmp_path / "sharded.cooc",
                                      max_pending=50)
        a, b = store_as_dict(direct), store_as_dict(sharded)
        assert a.keys() == b.keys()
        for k in a:
            assert b[k] == pytest.approx(a[k], rel=1e-14)

    def test_weight_conservation(self, rng, tmp_path):
        sents = random_sentences(rng, 50, 15)
        vocab = build_vocab(sents)
        store = count_cooccurrences(sents, vocab, 4, tmp_path / "s.cooc")
        total = sum(store_as_dict(store).values())
        expected = 0.0
        for sent in sents:
            L = len(sent)
            for s in range(L):
                for t in range(L):
                    if t != s and abs(t - s) <= 4:
                        expected += 1.0 / abs(t - s)
        assert total == pytest.approx(expected, rel=1e-12)

    def test_symmetry_check_passes(self, rng, tmp_path):
        sents = random_sentences(rng, 60, 20)
        vocab = build_vocab(sents)
        store = count_cooccurrences(sents, vocab, 3, tmp_path / "s.cooc")
        check_symmetry(store)  # must not raise


class TestStoreIO:
    def test_header_round_trip(self, rng, tmp_path):
        sents = random_sentences(rng, 30, 10)
        vocab = build_vocab(sents)
        store = count_cooccurrences(sents, vocab, 7, tmp_path / "s.cooc")
        reopened = CooccurrenceStore(tmp_path / "s.cooc")
        assert reopened.n == len(vocab)
        assert reopened.window == 7
        assert reopened.n_records == store.n_records
        assert not reopened.log1p_applied

    def test_unsorted_records_rejected(self, tmp_path):
        import numpy as np
        from tweedievec.cooccur import RECORD_DTYPE
        recs = np.array([(1, 0, 1.0), (0, 1, 1.0)], dtype=RECORD_DTYPE)
        with pytest.raises(StoreFormatError):
            CooccurrenceStore.write(tmp_path / "bad.cooc", n=2, window=1,
                                    total_tokens=0, records=[recs], n_records=2)

    def test_truncated_file_rejected(self, rng, tmp_path):
        sents = random_sentences(rng, 10, 5)
        vocab = build_vocab(sents)
        count_cooccurrences(sents, vocab, 2, tmp_path / "s.cooc")
        data = (tmp_path / "s.cooc").read_bytes()
        (tmp_path / "cut.cooc").write_bytes(data[:-8])
        with pytest.raises(StoreFormatError):
            CooccurrenceStore(tmp_path / "cut.cooc")

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "junk.cooc").write_bytes(b"\x00" * 64)
        with pytest.raises(StoreFormatError):
            CooccurrenceStore(tmp_path / "junk.cooc")


class TestCursor:
    def _store(self, rng, tmp_path):
        sents = random_sentences(rng, 80, 20)
        vocab = build_vocab(sents)
        return count_cooccurrences(sents, vocab, 5, tmp_path / "s.cooc")

    def test_sequential_fetch_touches_each_record_once(self, rng, tmp_path):
        store = self._store(rng, tmp_path)
        cur = store.cursor()
        total = 0
        for i in range(store.n):
            row = cur.fetch(i)
            total += row.nnz
        assert total == store.n_records
        assert cur.records_read == store.n_records

    def test_rows_concatenated_equal_full_scan(self, rng, tmp_path):
        store = self._store(rng, tmp_path)
        cur = store.cursor()
        triplets = []
        for i in range(store.n):
            row = cur.fetch(i)
            triplets.extend((i, int(c), float(w))
                            for c, w in zip(row.cols, row.weights))
        scanned = []
        for recs in store.iter_records():
            scanned.extend((int(r["row"]), int(r["col"]), float(r["weight"]))
                           for r in recs)
        assert triplets == scanned

    def test_empty_row(self, tmp_path):
        from tweedievec.cooccur import RECORD_DTYPE
        recs = np.array([(0, 1, 1.0), (2, 0, 2.0)], dtype=RECORD_DTYPE)
        store = CooccurrenceStore.write(tmp_path / "s.cooc", n=3, window=1,
                                        total_tokens=0, records=[recs],
                                        n_records=2)
        cur = store.cursor()
        cur.fetch(0)
        row1 = cur.fetch(1)
        assert row1.nnz == 0
        assert cur.fetch(2).nnz == 1

    def test_out_of_order_fetch_is_an_error(self, rng, tmp_path):
        store = self._store(rng, tmp_path)
        cur = store.cursor()
        cur.fetch(3)  # skipping ahead is allowed
        with pytest.raises(StaleCursorError):
            cur.fetch(1)

    def test_random_access_matches_cursor(self, rng, tmp_path):
        store = self._store(rng, tmp_path)
        cur = store.cursor()
        for i in range(store.n):
            seq = cur.fetch(i)
            rand = store.row(i)
            assert np.array_equal(seq.cols, rand.cols)
            assert np.array_equal(seq.weights, rand.weights)


class TestLog1p:
    def test_values_and_flag(self, rng, tmp_path):
        sents = random_sentences(rng, 40, 12)
        vocab = build_vocab(sents)
        raw = count_cooccurrences(sents, vocab, 3, tmp_path / "raw.cooc")
        out = apply_log1p(raw, tmp_path / "log.cooc")
        assert out.log1p_applied
        assert out.n_records == raw.n_records
        a, b = store_as_dict(raw), store_as_dict(out)
        assert a.keys() == b.keys()  # zero pattern preserved
        for k in a:
            assert b[k] == np.log1p(a[k])

    def test_double_application_rejected(self, rng, tmp_path):
        sents = random_sentences(rng, 10, 6)
        vocab = build_vocab(sents)
        raw = count_cooccurrences(sents, vocab, 2, tmp_path / "raw.cooc")
        out = apply_log1p(raw, tmp_path / "log.cooc")
        with pytest.raises(StoreFormatError):
            apply_log1p(out, tmp_path / "log2.cooc")

    def test_boundary_values(self):
        assert math.log1p(0.0) == 0.0
        assert math.log1p(math.e - 1.0) == pytest.approx(1.0)


class TestRowStats:
    def test_all_zero_row(self, tmp_path):
        from tweedievec.cooccur import RECORD_DTYPE
        recs = np.array([(0, 0, 2.0)], dtype=RECORD_DTYPE)
        store = CooccurrenceStore.write(tmp_path / "s.cooc", n=3, window=1,
                                        total_tokens=0, records=[recs],
                                        n_records=1)
        stats = compute_row_stats(store)
        assert stats.mean[1] == 0.0
        assert stats.variance[1] == 0.0
        assert np.isnan(stats.skewness[1])

    def test_documented_example(self, tmp_path):
        from tweedievec.cooccur import RECORD_DTYPE
        recs = np.array([(0, 0, 2.0)], dtype=RECORD_DTYPE)
        store = CooccurrenceStore.write(tmp_path / "s.cooc", n=4, window=1,
                                        total_tokens=0, records=[recs],
                                        n_records=1)
        stats = compute_row_stats(store)
        # row (2, 0, 0, 0): mean 0.5, variance (2.25 + 3 * 0.25) / 4
        assert stats.mean[0] == pytest.approx(0.5)
        assert stats.variance[0] == pytest.approx(0.75)
        assert stats.n_positive[0] == 1

    def test_matches_dense_recomputation(self, rng, tmp_path):
        n = 12
        y = np.where(rng.random((n, n)) < 0.4, rng.gamma(2.0, 1.0, (n, n)), 0.0)
        from conftest import write_store_from_dense
        store = write_store_from_dense(y, tmp_path / "s.cooc")
        stats = compute_row_stats(store)
        assert stats.mean == pytest.approx(y.mean(axis=1), rel=1e-12)
        assert stats.variance == pytest.approx(y.var(axis=1), rel=1e-10)
        assert np.array_equal(stats.n_positive, (y > 0).sum(axis=1))
        m3 = ((y - y.mean(axis=1, keepdims=True)) ** 3).mean(axis=1)
        dense_skew = m3 / y.var(axis=1) ** 1.5
        assert stats.skewness == pytest.approx(dense_skew, rel=1e-8)
