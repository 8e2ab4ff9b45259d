import itertools

import numpy as np
import pytest

from cady import causal
from cady.causal import (AttributionConfig, CausalMask, EdgeProbMatrix,
                         dag_count, graph_log_prob, integrated_gradients,
                         normalize_probabilities, sample_mask)
from cady.model import ModelSpec, build_model, forward


class TestEdgeProbMatrix:
    def test_rejects_unclipped(self):
        with pytest.raises(ValueError):
            EdgeProbMatrix(p=np.array([[0.001, 0.5]]), rho_min=0.02)

    def test_all_ones_exempt(self):
        pm = EdgeProbMatrix.all_ones(3, 2)
        assert np.all(pm.p == 1.0)

    def test_rho_min_bounds(self):
        with pytest.raises(ValueError):
            EdgeProbMatrix(p=np.full((2, 2), 0.5), rho_min=0.7)


class LinearModel:
    """Stand-in model with an analytically known mean head."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)  # (d, n)

        class _Spec:
            pass

        self.spec = _Spec()
        self.spec.input_dim, self.spec.n = self.w.shape

    def forward_taped(self, x, mask):
        from cady import autodiff as ad

        mus = [ad.select_col(ad.matmul(x, ad.Tensor(self.w)), j)
               for j in range(self.spec.n)]
        return mus, [None] * self.spec.n


class TestIntegratedGradients:
    def test_linear_exactness(self):
        w = np.array([[1.0, -2.0], [0.5, 3.0], [2.0, 0.0]])
        model = LinearModel(w)
        x = np.array([0.7, -1.3, 0.4])
        cfg = AttributionConfig(riemann_steps=8)
        for j in range(2):
            a = integrated_gradients(model, x, cfg, j)
            assert np.allclose(a, w[:, j] * x, atol=1e-12)

    def test_zero_path(self):
        model = LinearModel(np.ones((3, 1)))
        cfg = AttributionConfig()
        a = integrated_gradients(model, np.zeros(3), cfg, 0)
        assert np.allclose(a, 0.0)

    def test_output_index_out_of_range(self):
        model = LinearModel(np.ones((2, 1)))
        with pytest.raises(IndexError):
            integrated_gradients(model, np.ones(2), AttributionConfig(), 5)

    def test_completeness_on_mlp(self):
        spec = ModelSpec(n=2, p=1, decoder_hidden_size=4)
        model = build_model(spec, np.random.default_rng(0))
        cfg = AttributionConfig(riemann_steps=128)
        mask = np.ones((3, 2))
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.normal(size=3)
            mu_x = forward(model, x, mask).mean
            mu_0 = forward(model, np.zeros(3), mask).mean
            for j in range(2):
                a = integrated_gradients(model, x, cfg, j)
                assert abs(a.sum() - (mu_x[j] - mu_0[j])) < 1e-3


class TestEstimateEdgeScores:
    def _dataset(self, rows, rng):
        from cady.training import TransitionDataset

        ds = TransitionDataset(2, 1)
        states = rng.normal(size=(rows, 2))
        actions = rng.normal(size=(rows, 1))
        ds.extend(states, actions, states + 0.1 * actions)
        return ds

    def _trained_stub(self, rng):
        spec = ModelSpec(n=2, p=1, decoder_hidden_size=3)
        model = build_model(spec, rng)
        model.normalizer.fit(rng.normal(size=(20, 3)),
                             rng.normal(size=(20, 2)))
        return model

    def test_dead_input_gets_zero_score(self):
        rng = np.random.default_rng(2)
        model = self._trained_stub(rng)
        # Hard-zero every encoder weight leaving input 1.
        model.enc_w.data[1, :] = 0.0
        ds = self._dataset(50, rng)
        scores = causal.estimate_edge_scores(
            model, ds, AttributionConfig(riemann_steps=8, num_inputs=50),
            rng)
        assert np.all(scores[1, :] == 0.0)
        assert np.any(scores[0, :] != 0.0)

    def test_duplicates_match_dedup_when_all_rows_used(self):
        rng = np.random.default_rng(3)
        model = self._trained_stub(rng)
        ds = self._dataset(20, np.random.default_rng(4))
        dup = self._dataset(20, np.random.default_rng(4))
        dup.extend(ds.states, ds.actions, ds.next_states)
        cfg = AttributionConfig(riemann_steps=8, num_inputs=64)
        s1 = causal.estimate_edge_scores(model, ds, cfg,
                                         np.random.default_rng(0))
        s2 = causal.estimate_edge_scores(model, dup, cfg,
                                         np.random.default_rng(0))
        assert np.allclose(s1, s2, atol=1e-12)

    def test_empty_dataset_rejected(self):
        from cady.training import TransitionDataset

        rng = np.random.default_rng(5)
        model = self._trained_stub(rng)
        with pytest.raises(ValueError):
            causal.estimate_edge_scores(model, TransitionDataset(2, 1),
                                        AttributionConfig(), rng)


class TestNormalizeProbabilities:
    def test_cbrt_column(self):
        raw = np.array([[0.8], [0.1], [0.0]])
        pm = normalize_probabilities(raw, rho_min=0.02)
        cbrt = np.cbrt([0.8, 0.1, 0.0])
        expected = np.clip(cbrt / cbrt.max(), 0.02, 0.98)
        assert np.allclose(pm.p[:, 0], expected)
        assert pm.p[0, 0] == 0.98
        assert pm.p[2, 0] == 0.02

    def test_identity_smoothing(self):
        pm = normalize_probabilities(np.array([[4.0], [2.0]]),
                                     smoothing=lambda x: x, rho_min=0.02)
        assert np.allclose(pm.p[:, 0], [0.98, 0.5])

    def test_equal_scores_all_clipped_high(self):
        pm = normalize_probabilities(np.full((4, 1), 0.3), rho_min=0.02)
        assert np.all(pm.p == 0.98)

    def test_zero_column_floors_at_rho_min(self):
        pm = normalize_probabilities(np.zeros((3, 2)), rho_min=0.02)
        assert np.all(pm.p == 0.02)

    def test_max_entry_always_at_upper_clip(self):
        rng = np.random.default_rng(6)
        raw = rng.random((5, 3))
        pm = normalize_probabilities(raw)
        for j in range(3):
            assert pm.p[np.argmax(raw[:, j]), j] == 0.98
        assert np.all((pm.p >= 0.02) & (pm.p <= 0.98))


class TestSampleMask:
    def test_all_ones(self):
        pm = EdgeProbMatrix.all_ones(3, 2)
        rng = np.random.default_rng(0)
        for _ in range(5):
            assert np.all(sample_mask(pm, rng).M == 1.0)

    def test_half_probability_frequency(self):
        pm = EdgeProbMatrix(p=np.full((2, 2), 0.5))
        draws = causal.sample_mask_batch(pm, np.random.default_rng(1),
                                         10_000)
        freq = draws.mean(axis=0)
        assert np.all((freq >= 0.48) & (freq <= 0.52))

    def test_seeded_reproducible(self):
        pm = EdgeProbMatrix(p=np.full((3, 2), 0.3))
        a = [sample_mask(pm, np.random.default_rng(7)).M for _ in range(1)]
        b = [sample_mask(pm, np.random.default_rng(7)).M for _ in range(1)]
        assert np.array_equal(a[0], b[0])


class TestGraphLogProb:
    def test_single_cell(self):
        pm = EdgeProbMatrix(p=np.array([[0.5]]))
        for bit in (0.0, 1.0):
            lp = graph_log_prob(pm, CausalMask(M=np.array([[bit]])))
            assert lp == pytest.approx(np.log(0.5))

    def test_two_cell_column(self):
        pm = EdgeProbMatrix(p=np.array([[0.98], [0.02]]))
        lp = graph_log_prob(pm, CausalMask(M=np.array([[1.0], [0.0]])))
        assert lp == pytest.approx(2 * np.log(0.98), abs=1e-12)

    @pytest.mark.parametrize("shape", [(3, 1), (3, 2)])
    def test_enumeration_sums_to_one(self, shape):
        rng = np.random.default_rng(8)
        pm = EdgeProbMatrix(p=np.clip(rng.random(shape), 0.02, 0.98))
        cells = shape[0] * shape[1]
        total = 0.0
        for bits in itertools.product((0.0, 1.0), repeat=cells):
            mask = CausalMask(M=np.array(bits).reshape(shape))
            total += np.exp(graph_log_prob(pm, mask))
        assert total == pytest.approx(1.0, abs=1e-12)


class TestDagCount:
    @pytest.mark.parametrize("n,expected", [(1, 1), (2, 3), (3, 25),
                                            (4, 543), (5, 29281)])
    def test_known_values(self, n, expected):
        assert dag_count(n) == expected

    def test_invalid(self):
        with pytest.raises(ValueError):
            dag_count(0)


def test_export_csv(tmp_path):
    pm = EdgeProbMatrix(p=np.clip(np.random.default_rng(9).random((5, 3)),
                                  0.02, 0.98))
    path = tmp_path / "p.csv"
    causal.export_edge_prob_csv(pm, path,
                                parent_names=["x", "y", "th", "v", "w"],
                                output_names=["x_next", "y_next", "th_next"])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "parent,x_next,y_next,th_next"
    assert len(lines) == 6
    got = np.array([[float(v) for v in line.split(",")[1:]]
                    for line in lines[1:]])
    assert np.array_equal(got, pm.p)
