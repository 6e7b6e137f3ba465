import numpy as np
import pytest

from sten import DataError
from sten.seqdata import (MultivariateSeries, SynthConfig, load_csv,
                          make_windows, save_csv, shuffle_with_labels,
                          split_subsequences, synth_generate, zscore_apply,
                          zscore_fit, _clean_signal)


class TestLoadCsv:
    def test_numeric_file(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("x,y\n1,2\n3,4\n5,6\n")
        s = load_csv(f)
        assert s.n == 3 and s.d == 2
        np.testing.assert_array_equal(s.values, [[1, 2], [3, 4], [5, 6]])
        assert s.labels is None

    def test_label_column(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("x,label\n1.5,0\n2.5,1\n")
        s = load_csv(f)
        assert s.d == 1
        np.testing.assert_array_equal(s.labels, [0, 1])

    def test_nan_rejected_with_line_number(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("x,y\n1,2\n3,NaN\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(f)

    def test_parse_failure_named(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("x\n1\nbogus\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(f)

    def test_ragged_rows(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("x,y\n1,2\n3\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(f)

    def test_empty_file(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_csv(f)

    def test_roundtrip_via_save(self, tmp_path):
        rng = np.random.default_rng(0)
        s = MultivariateSeries(values=rng.normal(size=(20, 3)),
                               labels=rng.integers(0, 2, 20))
        f = tmp_path / "b.csv"
        save_csv(s, f)
        back = load_csv(f)
        np.testing.assert_array_equal(back.values, s.values)
        np.testing.assert_array_equal(back.labels, s.labels)


class TestZscore:
    def test_constant_column_floored(self):
        s = MultivariateSeries(values=np.full((10, 2), 3.0))
        stats = zscore_fit(s)
        out = zscore_apply(s, stats)
        np.testing.assert_allclose(out.values, 0.0)

    def test_train_means_near_zero(self):
        rng = np.random.default_rng(1)
        s = MultivariateSeries(values=rng.normal(loc=5.0, size=(200, 3)))
        out = zscore_apply(s, zscore_fit(s))
        np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-6)

    def test_two_point_population_std(self):
        # mean 2, population std 1 => value 2 maps to 0
        train = MultivariateSeries(values=np.array([[1.0], [3.0]]))
        stats = zscore_fit(train)
        out = zscore_apply(MultivariateSeries(values=np.array([[2.0]])), stats)
        np.testing.assert_allclose(out.values, [[0.0]], atol=1e-7)

    def test_fit_needs_two_rows(self):
        with pytest.raises(DataError):
            zscore_fit(MultivariateSeries(values=np.ones((1, 2))))


def series_of(n, d=1, seed=0):
    return MultivariateSeries(values=np.random.default_rng(seed).normal(size=(n, d)))


class TestMakeWindows:
    def test_small_grid(self):
        ws = make_windows(series_of(5), 3, 1)
        assert [w.start for w in ws] == [0, 1, 2]

    def test_full_length_window(self):
        assert len(make_windows(series_of(5), 5, 1)) == 1

    def test_counts_at_boundaries(self):
        assert len(make_windows(series_of(100), 100, 10)) == 1
        assert len(make_windows(series_of(110), 100, 10)) == 2

    def test_closed_form_count(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(5, 300))
            L = int(rng.integers(1, n + 1))
            R = int(rng.integers(1, 20))
            assert len(make_windows(series_of(n), L, R)) == (n - L) // R + 1

    def test_window_too_long(self):
        with pytest.raises(DataError):
            make_windows(series_of(4), 5, 1)

    def test_cover_tail_reaches_every_timestamp(self):
        s = series_of(57)
        ws = make_windows(s, 10, 7, cover_tail=True)
        covered = np.zeros(57, dtype=bool)
        for w in ws:
            covered[w.start:w.start + 10] = True
        assert covered.all()
        assert ws[-1].start == 57 - 10


class TestSplitSubsequences:
    def test_paper_layout(self):
        w = make_windows(series_of(100), 100, 10)[0]
        subs = split_subsequences(w, 10, 10, 10)
        assert [s.offset for s in subs] == list(range(0, 100, 10))
        assert [s.position_label for s in subs] == list(range(10))

    def test_single_subsequence(self):
        w = make_windows(series_of(20), 20, 1)[0]
        subs = split_subsequences(w, 20, 1, 1)
        assert len(subs) == 1
        np.testing.assert_array_equal(subs[0].data, w.data)

    def test_overlapping_layout(self):
        w = make_windows(series_of(7), 7, 1)[0]
        subs = split_subsequences(w, 3, 2, 3)
        assert [s.offset for s in subs] == [0, 2, 4]

    def test_arithmetic_mismatch(self):
        w = make_windows(series_of(10), 10, 1)[0]
        with pytest.raises(DataError):
            split_subsequences(w, 3, 2, 3)

    def test_partition_provenance(self):
        w = make_windows(series_of(40, d=2), 20, 5)[1]
        subs = split_subsequences(w, 5, 5, 4)
        seen = set()
        for s in subs:
            for k in range(s.length):
                ts = s.parent_start + s.offset + k
                assert ts not in seen
                seen.add(ts)
        assert seen == set(range(w.start, w.start + 20))


class TestShuffle:
    def test_single_is_identity(self):
        w = make_windows(series_of(4), 4, 1)[0]
        subs = split_subsequences(w, 4, 1, 1)
        coll = shuffle_with_labels(subs, 123)
        assert coll.permutation.tolist() == [0]

    def test_same_seed_same_permutation(self):
        w = make_windows(series_of(12), 12, 1)[0]
        subs = split_subsequences(w, 2, 2, 6)
        a = shuffle_with_labels(subs, 99)
        b = shuffle_with_labels(subs, 99)
        assert a.permutation.tolist() == b.permutation.tolist()

    def test_uniform_over_permutations(self):
        w = make_windows(series_of(6), 6, 1)[0]
        subs = split_subsequences(w, 2, 2, 3)
        rng = np.random.default_rng(7)
        counts = {}
        n = 10_000
        for _ in range(n):
            perm = tuple(shuffle_with_labels(subs, rng).permutation.tolist())
            counts[perm] = counts.get(perm, 0) + 1
        assert len(counts) == 6
        for c in counts.values():
            assert abs(c / n - 1 / 6) < 0.02

    def test_unshuffle_recovers_window(self):
        rng = np.random.default_rng(8)
        w = make_windows(series_of(30, d=3, seed=5), 30, 1)[0]
        subs = split_subsequences(w, 5, 5, 6)
        coll = shuffle_with_labels(subs, rng)
        np.testing.assert_array_equal(coll.unshuffle(), w.data)

    def test_one_hot_labels_match_permutation(self):
        w = make_windows(series_of(8), 8, 1)[0]
        subs = split_subsequences(w, 2, 2, 4)
        coll = shuffle_with_labels(subs, 3)
        Y = coll.one_hot_labels()
        for slot in range(4):
            assert Y[slot].argmax() == coll.permutation[slot]
            assert coll.subseqs[slot].position_label == coll.permutation[slot]


class TestSynth:
    def test_zero_rate_no_labels(self):
        cfg = SynthConfig(n_train=500, n_test=300, dims=2, anomaly_rate=0.0, seed=1)
        train, test = synth_generate(cfg)
        assert train.labels.sum() == 0
        assert test.labels.sum() == 0

    def test_label_fraction_band(self):
        cfg = SynthConfig(n_train=2000, n_test=10000, dims=3, anomaly_rate=0.05, seed=2)
        _, test = synth_generate(cfg)
        assert 0.03 <= test.labels.mean() <= 0.07

    def test_reproducible(self):
        cfg = SynthConfig(n_train=800, n_test=400, dims=2, anomaly_rate=0.04, seed=3)
        a_train, a_test = synth_generate(cfg)
        b_train, b_test = synth_generate(cfg)
        np.testing.assert_array_equal(a_train.values, b_train.values)
        np.testing.assert_array_equal(a_test.values, b_test.values)
        np.testing.assert_array_equal(a_test.labels, b_test.labels)

    def test_segments_nonoverlapping(self):
        cfg = SynthConfig(n_train=500, n_test=5000, dims=2, anomaly_rate=0.08, seed=4)
        _, test = synth_generate(cfg)
        runs = np.flatnonzero(np.diff(np.concatenate([[0], test.labels, [0]])))
        starts, ends = runs[::2], runs[1::2]
        assert np.all(starts[1:] > ends[:-1])  # separated by at least one 0

    def test_spike_deviation_contract(self):
        cfg = SynthConfig(n_train=300, n_test=2000, dims=2, anomaly_rate=0.03,
                          seed=5, anomaly_types=("spike",))
        _, test = synth_generate(cfg)
        # Replay the generator's base-signal draws to recover the clean signal.
        rng = np.random.default_rng(cfg.seed)
        amps = rng.uniform(0.5, 1.0, size=(cfg.dims, cfg.n_components))
        periods = rng.uniform(cfg.period_min, cfg.period_max,
                              size=(cfg.dims, cfg.n_components))
        phases = rng.uniform(0.0, 2 * np.pi, size=(cfg.dims, cfg.n_components))
        t_all = np.arange(cfg.n_train + cfg.n_test, dtype=np.float64)
        clean = np.stack([_clean_signal(t_all, amps[j], periods[j], phases[j])
                          for j in range(cfg.dims)], axis=1)[cfg.n_train:]
        marked = test.labels.astype(bool)
        dev = np.abs(test.values[marked] - clean[marked])
        assert np.all(dev >= 6 * cfg.noise_sigma)

    def test_incompatible_rate_rejected(self):
        cfg = SynthConfig(n_train=100, n_test=100, dims=1, anomaly_rate=0.02,
                          seg_len_min=10, seg_len_max=20, seed=6)
        with pytest.raises(DataError, match="incompatible"):
            synth_generate(cfg)
