import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dygait import evaluation as E
from dygait.model import Embedding, ModelConfig
from dygait.preprocess import SilhouetteSequence
from dygait.train import init_params
from oracles import ap_inp_brute, cell_oracle, distance_loops, rank_k_brute, ranked, tied_instance


def embset(strips, subjects, views=None, conditions=None):
    n = len(strips)
    views = views if views is not None else ["000"] * n
    conditions = conditions if conditions is not None else ["nm-01"] * n
    return E.EmbeddingSet(Embedding(np.asarray(s), str(p), c, str(v))
                          for s, p, v, c in zip(strips, subjects, views, conditions))


class TestDistance:
    def test_identical_and_orthogonal(self):
        a = np.eye(3)[:, None, :]
        D = E.distance_matrix(a, a)
        assert np.all(np.diag(D) == 0)
        assert D[0, 1] == pytest.approx(math.sqrt(2), abs=1e-15)

    def test_matches_loop_oracle(self, rng):
        p, g = rng.standard_normal((20, 30)), rng.standard_normal((25, 30))
        np.testing.assert_allclose(E.distance_matrix(p, g, chunk=7), distance_loops(p, g), rtol=0, atol=1e-10)

    def test_symmetric_exactly(self, rng):
        a = rng.standard_normal((15, 3, 4)).astype(np.float32)
        D = E.distance_matrix(a, a)
        assert np.array_equal(D, D.T) and not np.diag(D).any()

    def test_squared_strip_sum_ranks_like_concatenation(self, rng):
        p, g = rng.standard_normal((30, 4, 3)), rng.standard_normal((40, 4, 3))
        concat = E.distance_matrix(p, g)
        squared_sum = (((p[:, None] - g[None]) ** 2).sum(-1)).sum(-1)
        np.testing.assert_allclose(squared_sum, concat**2, rtol=1e-12)
        assert np.array_equal(E.ranking(squared_sum), E.ranking(concat**2))

    def test_strip_sum_oracle(self, rng):
        p, g = rng.standard_normal((5, 3, 2)), rng.standard_normal((6, 3, 2))
        want = sum(distance_loops(p[:, s], g[:, s]) for s in range(3))
        np.testing.assert_allclose(E.distance_matrix(p, g, per_strip_sum=True), want, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            E.distance_matrix(rng.standard_normal((2, 3)), rng.standard_normal((2, 4)))


class TestRankK:
    def test_exact_duplicates(self, rng):
        g = rng.standard_normal((10, 5))
        assert E.rank_k(E.distance_matrix(g, g), np.arange(10), np.arange(10), 1) == 1.0

    def test_absent_labels(self, rng):
        D = rng.random((6, 8))
        assert E.rank_k(D, np.arange(6), np.arange(100, 108), 5) == 0.0

    @pytest.mark.parametrize("k", [1, 5])
    def test_brute_force_with_ties(self, k):
        p, g, pl, gl = tied_instance(np.random.default_rng(k))
        D = E.distance_matrix(p, g)
        assert (D[:, :, None] == D[:, None, :]).sum() > D.size  # ties are present
        assert E.rank_k(D, pl, gl, k) == rank_k_brute(D, pl, gl, k)

    def test_tie_break_by_index(self):
        D = np.array([[1.0, 0.5, 0.5, 0.5]])
        assert E.ranking(D).tolist() == [[1, 2, 3, 0]] == [ranked(D[0])]
        assert E.rank_k(D, np.array([7]), np.array([0, 1, 7, 7]), 1) == 0.0
        assert E.rank_k(D, np.array([7]), np.array([0, 1, 7, 7]), 2) == 1.0

    def test_probe_without_valid_gallery_is_excluded(self):
        D = np.zeros((2, 2))
        valid = np.array([[True, True], [False, False]])
        accs, excluded = E.cmc(D, np.array([0, 0]), np.array([0, 1]), (1,), valid)
        assert excluded == 1 and accs[1] == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        D = rng.integers(0, 4, (12, 25)).astype(float)
        accs, _ = E.cmc(D, rng.integers(0, 5, 12), rng.integers(0, 5, 25))
        values = [accs[k] for k in sorted(accs)]
        assert values == sorted(values)


class TestAPINP:
    def test_hand_examples(self):
        D = np.array([[0.1, 0.2, 0.3]])
        pl, gl = np.array([1]), np.array([1, 0, 1])
        assert E.mean_average_precision(D, pl, gl) == pytest.approx(5 / 6, abs=1e-15)
        assert E.mean_inverse_negative_penalty(D, pl, gl) == pytest.approx(2 / 3, abs=1e-15)

    def test_all_positives_first(self):
        D = np.array([[0.1, 0.2, 0.3, 0.4]])
        pl, gl = np.array([1]), np.array([1, 1, 0, 0])
        assert E.mean_average_precision(D, pl, gl) == 1.0
        assert E.mean_inverse_negative_penalty(D, pl, gl) == 1.0

    @pytest.mark.parametrize("r", [1, 2, 5])
    def test_single_positive(self, r):
        D = np.arange(5.0)[None]
        gl = np.zeros(5, dtype=int)
        gl[r - 1] = 9
        assert E.mean_average_precision(D, np.array([9]), gl) == pytest.approx(1 / r)
        assert E.mean_inverse_negative_penalty(D, np.array([9]), gl) == pytest.approx(1 / r)

    def test_brute_force_with_ties(self):
        p, g, pl, gl = tied_instance(np.random.default_rng(11))
        D = E.distance_matrix(p, g)
        want = ap_inp_brute(D, pl, gl)
        ap, inp = E.average_precisions(D, pl, gl), E.inverse_negative_penalties(D, pl, gl)
        for i, w in enumerate(want):
            if w is None:
                assert np.isnan(ap[i]) and np.isnan(inp[i])
            else:
                assert ap[i] == pytest.approx(w[0], abs=1e-12) and inp[i] == pytest.approx(w[1], abs=1e-12)
        kept = [w for w in want if w is not None]
        assert E.mean_average_precision(D, pl, gl) == pytest.approx(np.mean([w[0] for w in kept]), abs=1e-12)

    def test_inp_can_exceed_ap_when_first_positive_is_late(self):
        D = np.arange(22.0)[None]
        gl = np.zeros(22, dtype=int)
        gl[[19, 21]] = 1
        ap = E.mean_average_precision(D, np.array([1]), gl)
        inp = E.mean_inverse_negative_penalty(D, np.array([1]), gl)
        assert ap == pytest.approx((1 / 20 + 2 / 22) / 2) and inp == pytest.approx(2 / 22) and inp > ap

    def test_probe_without_positive_excluded(self):
        D = np.array([[0.1, 0.2], [0.1, 0.2]])
        assert E.mean_average_precision(D, np.array([0, 5]), np.array([1, 0])) == 0.5


class TestCrossView:
    def test_single_view_has_no_valid_pairs(self, rng):
        s = embset(rng.standard_normal((4, 2, 3)), [0, 1, 2, 3])
        report = E.cross_view_protocol(s, s)
        assert report.no_valid_pairs and "no valid pairs" in report.summary()

    def test_two_views_duplicated(self, rng):
        x = rng.standard_normal((5, 2, 3))
        probe = embset(np.concatenate([x, x]), list(range(5)) * 2, ["000"] * 5 + ["090"] * 5)
        report = E.cross_view_protocol(probe, probe)
        assert report.grand_mean == 1.0 and report.ranks[1] == 1.0

    def test_four_views_match_cell_oracle(self):
        rng = np.random.default_rng(3)
        views = ["000", "036", "072", "108"]
        subjects = np.repeat(np.arange(10), 4)
        vlist = views * 10
        ident = rng.standard_normal((10, 2, 3))
        shift = rng.standard_normal((4, 2, 3)) * 0.8
        def draw():
            return ident[subjects] + shift[np.arange(40) % 4] + rng.standard_normal((40, 2, 3)) * 0.6
        probe = embset(draw(), subjects, vlist, ["bg-01"] * 20 + ["nm-01"] * 20)
        gallery = embset(draw(), subjects, vlist)
        report = E.cross_view_protocol(probe, gallery)
        D = E.distance_matrix(probe, gallery)
        want = cell_oracle(D, probe.labels(), gallery.labels(), probe.views(), gallery.views())
        assert set(report.cells) == set(want)
        for key, acc in want.items():
            assert report.cells[key] == (pytest.approx(acc, abs=1e-15), 10)
        per_view = {a: np.mean([want[(a, b)] for b in views if b != a]) for a in views}
        assert report.grand_mean == pytest.approx(np.mean(list(per_view.values())), abs=1e-15)
        assert set(report.per_condition) == {"BG", "NM"}
        assert 0 < report.grand_mean < 1

    def test_absent_cell(self, rng):
        probe = embset(rng.standard_normal((4, 1, 2)), [0, 1, 0, 1], ["a", "a", "b", "b"])
        gallery = embset(rng.standard_normal((2, 1, 2)), [0, 1], ["b", "b"])
        report = E.cross_view_protocol(probe, gallery)
        assert report.cells[("a", "b")][1] == 2 and ("b", "a") not in report.cells
        assert report.grand_mean == report.per_view["a"]

    def test_empty(self, rng):
        s = embset(rng.standard_normal((2, 1, 2)), [0, 1])
        with pytest.raises(E.EmptyProtocolError):
            E.cross_view_protocol(E.EmbeddingSet(), s)

    def test_report_invariants_and_files(self, rng, tmp_path):
        p, g, pl, gl = tied_instance(rng, n=60, n_labels=6)
        probe, gallery = embset(p[:, None], pl), embset(g[:, None], gl)
        report = E.cross_view_protocol(probe, gallery, "plain")
        values = [report.ranks[k] for k in E.RANKS]
        assert values == sorted(values) and 0 <= report.mINP <= 1 and 0 <= report.mAP <= 1
        paths = E.write_report(report, str(tmp_path / "r_"))
        metrics = open(paths[0], encoding="utf-8").read().splitlines()
        assert metrics[0] == "metric,value" and metrics[1].startswith("rank_1,")


class TestEmbeddings:
    @pytest.fixture
    def params(self, tiny_config):
        return init_params(tiny_config, 0, dtype=np.float32)

    def test_embed_all(self, rng, tiny_config, params, caplog):
        frames = (rng.random((9, 8, 6)) < 0.5).astype(np.uint8)
        seqs = [SilhouetteSequence(frames, "a"), SilhouetteSequence(frames.copy(), "b"),
                SilhouetteSequence(frames[:2], "c")]
        out = E.embed_all(seqs, params, tiny_config)
        assert [e.subject for e in out] == ["a", "b"] and "skipped" in caplog.text
        np.testing.assert_array_equal(out[0].strips, out[1].strips)

    def test_dump_round_trip(self, rng, tmp_path):
        s = embset(rng.standard_normal((7, 3, 4)).astype(np.float32), list("abcdefg"))
        path = str(tmp_path / "e.csv")
        E.dump_embeddings(s, path)
        back = E.read_embeddings(path, (3, 4))
        assert len(back) == 7 and len(open(path).read().splitlines()) == 8
        for a, b in zip(s, back):
            assert a.strips.tobytes() == b.strips.tobytes()
        assert E.format_embeddings(back) == open(path).read()

    def test_mixed_shapes(self):
        with pytest.raises(ValueError):
            E.EmbeddingSet([Embedding(np.zeros((2, 3))), Embedding(np.zeros((3, 2)))])
