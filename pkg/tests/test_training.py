import numpy as np
import pytest

from cady import causal, envs, training
from cady.causal import AttributionConfig, EdgeProbMatrix
from cady.envs import CartpoleEnv, DiffDriveParams
from cady.model import ModelSpec, Normalizer, build_model, forward
from cady.planners import CemConfig, CemPlanner, cartpole_objective
from cady.training import (TrainConfig, TransitionDataset, finetune,
                           generate_diffdrive_dataset, mbrl_loop,
                           one_step_mse, train_contribution_model,
                           train_dynamics_model)


def linear_dataset(rows, rng, n=2, p=1):
    """Noiseless linear system s' = s + A s + B a."""
    a_mat = np.array([[0.05, -0.02], [0.01, 0.03]])
    b_mat = np.array([[0.1], [0.2]])
    ds = TransitionDataset(n, p)
    states = rng.uniform(-1, 1, size=(rows, n))
    actions = rng.uniform(-1, 1, size=(rows, p))
    ds.extend(states, actions, states + states @ a_mat.T + actions @ b_mat.T)
    return ds


SMALL_SPEC = ModelSpec(n=2, p=1, decoder_hidden_size=4)


class TestTransitionDataset:
    def test_dimension_mismatch_rejected(self):
        ds = TransitionDataset(2, 1)
        with pytest.raises(ValueError):
            ds.append([1.0, 2.0, 3.0], [0.0], [1.0, 2.0])

    def test_non_finite_rejected(self):
        ds = TransitionDataset(2, 1)
        with pytest.raises(ValueError):
            ds.append([np.inf, 0.0], [0.0], [0.0, 0.0])

    def test_csv_round_trip_bit_exact(self, tmp_path):
        ds = linear_dataset(37, np.random.default_rng(0))
        path = tmp_path / "d.csv"
        ds.to_csv(path)
        back = TransitionDataset.from_csv(path, 2, 1)
        assert np.array_equal(back.states, ds.states)
        assert np.array_equal(back.actions, ds.actions)
        assert np.array_equal(back.next_states, ds.next_states)
        assert np.array_equal(back.trials, ds.trials)

    def test_csv_header_validated(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            TransitionDataset.from_csv(path, 2, 1)

    def test_split_sizes(self):
        ds = linear_dataset(100, np.random.default_rng(1))
        train, val = ds.split(0.9, seed=3)
        assert len(train) == 90
        assert len(val) == 10
        # Same seed reproduces the same split.
        train2, _ = ds.split(0.9, seed=3)
        assert np.array_equal(train.states, train2.states)


class TestTrainContributionModel:
    def test_linear_system_fits_well(self):
        rng = np.random.default_rng(2)
        ds = linear_dataset(2000, rng)
        model = train_contribution_model(ds, SMALL_SPEC, TrainConfig(), rng)
        x = model.normalizer.normalize_input(ds.inputs())
        y = model.normalizer.normalize_delta(ds.deltas())
        pred = forward(model, x, np.ones((3, 2)))
        mse = float(((pred.mean - y) ** 2).mean())
        assert mse < 1e-2

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_contribution_model(TransitionDataset(2, 1), SMALL_SPEC,
                                     TrainConfig(), np.random.default_rng(0))

    def test_same_seed_identical_parameters(self):
        ds = linear_dataset(80, np.random.default_rng(3))
        cfg = TrainConfig(max_epochs=3)
        a = train_contribution_model(ds, SMALL_SPEC, cfg,
                                     np.random.default_rng(7))
        b = train_contribution_model(ds, SMALL_SPEC, cfg,
                                     np.random.default_rng(7))
        for (_, pa), (_, pb) in zip(a.named_parameters(),
                                    b.named_parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_attaches_all_ones_distribution(self):
        ds = linear_dataset(40, np.random.default_rng(4))
        model = train_contribution_model(ds, SMALL_SPEC,
                                         TrainConfig(max_epochs=1),
                                         np.random.default_rng(0))
        assert np.all(model.edge_probs.p == 1.0)


class TestTrainDynamicsModel:
    def test_all_ones_distribution_reduces_to_contribution_training(self):
        ds = linear_dataset(80, np.random.default_rng(5))
        cfg = TrainConfig(max_epochs=3)
        ones = EdgeProbMatrix.all_ones(3, 2)
        fc = train_contribution_model(ds, SMALL_SPEC, cfg,
                                      np.random.default_rng(9))
        fd = train_dynamics_model(ds, SMALL_SPEC, ones, cfg,
                                  np.random.default_rng(9))
        for (_, pa), (_, pb) in zip(fc.named_parameters(),
                                    fd.named_parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_one_mask_per_batch(self, monkeypatch):
        ds = linear_dataset(83, np.random.default_rng(6))  # 11 batches
        calls = []
        orig = causal.sample_mask

        def counting(pm, rng):
            calls.append(1)
            return orig(pm, rng)

        monkeypatch.setattr(training.causal, "sample_mask", counting)
        pm = EdgeProbMatrix(p=np.full((3, 2), 0.5))
        train_dynamics_model(ds, SMALL_SPEC, pm, TrainConfig(max_epochs=2),
                             np.random.default_rng(0))
        import math
        per_epoch = math.ceil(83 / 8)
        assert per_epoch == 11
        assert len(calls) == 2 * per_epoch

    def test_attaches_distribution(self):
        ds = linear_dataset(40, np.random.default_rng(7))
        pm = EdgeProbMatrix(p=np.full((3, 2), 0.5))
        fd = train_dynamics_model(ds, SMALL_SPEC, pm,
                                  TrainConfig(max_epochs=1),
                                  np.random.default_rng(0))
        assert fd.edge_probs is pm


class TestFinetune:
    def _trained(self, rng):
        ds = linear_dataset(200, rng)
        model = train_contribution_model(ds, SMALL_SPEC,
                                         TrainConfig(max_epochs=8), rng)
        return model, ds

    def test_zero_epochs_unchanged(self):
        rng = np.random.default_rng(8)
        model, ds = self._trained(rng)
        before = [p.data.copy() for p in model.parameters()]
        out = finetune(model, ds, TrainConfig(), rng, epochs=0)
        assert out is model
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.data, b)

    def test_empty_window_rejected(self):
        rng = np.random.default_rng(9)
        model, _ = self._trained(rng)
        with pytest.raises(ValueError):
            finetune(model, TransitionDataset(2, 1), TrainConfig(), rng)

    def test_normalizer_frozen(self):
        rng = np.random.default_rng(10)
        model, ds = self._trained(rng)
        in_mean = model.normalizer.in_mean.copy()
        window = linear_dataset(50, np.random.default_rng(11))
        finetune(model, window, TrainConfig(), rng, epochs=2)
        assert np.array_equal(model.normalizer.in_mean, in_mean)

    def test_nominal_window_does_not_hurt_much(self):
        rng = np.random.default_rng(12)
        model, ds = self._trained(rng)
        train, val = ds.split(0.9, seed=0)
        pre = one_step_mse(model, val, np.random.default_rng(0))
        finetune(model, train.subset(np.arange(50)), TrainConfig(), rng,
                 epochs=4)
        post = one_step_mse(model, val, np.random.default_rng(0))
        assert post["aggregate_expected"] \
            <= 1.2 * pre["aggregate_expected"] + 1e-9


class TestOneStepMse:
    def _constant_predictor(self):
        """Model whose raw-unit prediction is always s' = s (delta zero)."""
        model = build_model(ModelSpec(n=3, p=2, decoder_hidden_size=3),
                            np.random.default_rng(13))
        nz = Normalizer()
        nz.in_mean = np.zeros(5)
        nz.in_std = np.ones(5)
        nz.out_mean = np.zeros(3)
        nz.out_std = np.ones(3)
        model.normalizer = nz
        for layers in model.decoders:
            w, b = layers[-1]
            w.data[:] = 0.0
            b.data[:] = 0.0
        return model

    def _straight_line_dataset(self):
        params = DiffDriveParams()
        ds = TransitionDataset(3, 2)
        state = np.zeros(3)
        for _ in range(50):
            nxt = envs.diffdrive_step(state, [1.0, 0.0], params)
            ds.append(state, [1.0, 0.0], nxt)
            state = nxt
        return ds

    def test_constant_predictor_straight_line(self):
        model = self._constant_predictor()
        ds = self._straight_line_dataset()
        out = one_step_mse(model, ds, np.random.default_rng(0))
        assert out["per_dim"][0] == pytest.approx(0.01, abs=1e-12)
        assert out["per_dim"][1] == pytest.approx(0.0, abs=1e-12)
        assert out["per_dim"][2] == pytest.approx(0.0, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(14)
        ds = linear_dataset(60, rng)
        model = train_contribution_model(ds, SMALL_SPEC,
                                         TrainConfig(max_epochs=2), rng)
        out = one_step_mse(model, ds, rng)
        assert np.all(out["per_dim"] >= 0)
        assert out["aggregate"] >= 0

    def test_empty_split_rejected(self):
        model = self._constant_predictor()
        with pytest.raises(ValueError):
            one_step_mse(model, TransitionDataset(3, 2),
                         np.random.default_rng(0))

    def test_angle_wrap_in_residuals(self):
        model = self._constant_predictor()
        ds = TransitionDataset(3, 2)
        # True delta crosses the wrap; raw residual would be near 2*pi.
        ds.append([0.0, 0.0, np.pi - 0.01], [0.0, 0.5],
                  [0.0, 0.0, -np.pi + 0.01])
        plain = one_step_mse(model, ds, np.random.default_rng(0))
        wrapped = one_step_mse(model, ds, np.random.default_rng(0),
                               angle_dims=(2,))
        assert plain["per_dim"][2] == pytest.approx((2 * np.pi - 0.02) ** 2)
        assert wrapped["per_dim"][2] == pytest.approx(0.02 ** 2)


class TestMbrlLoop:
    def test_single_trial_collects_one_random_episode(self):
        env = CartpoleEnv()
        planner = CemPlanner(CemConfig(horizon=5, population=20,
                                       iterations=1), env.action_bounds)
        fd, pd, rewards, ds = mbrl_loop(
            env, planner, ModelSpec(n=4, p=1, decoder_hidden_size=3),
            trials=1, cfg=TrainConfig(), rng=np.random.default_rng(0),
            objective=cartpole_objective(env.params), max_steps=50)
        assert fd is None and pd is None
        assert len(rewards) == 1
        assert len(ds) == rewards[0]  # reward 1 per step
        assert np.all(ds.trials == 0)

    def test_reward_curve_length_and_dataset_growth(self):
        env = CartpoleEnv()
        planner = CemPlanner(CemConfig(horizon=5, population=20,
                                       iterations=1), env.action_bounds)
        fd, pd, rewards, ds = mbrl_loop(
            env, planner, ModelSpec(n=4, p=1, decoder_hidden_size=3),
            trials=3, cfg=TrainConfig(max_epochs=2),
            rng=np.random.default_rng(1),
            objective=cartpole_objective(env.params),
            attr_cfg=AttributionConfig(riemann_steps=8, num_inputs=32),
            max_steps=30)
        assert len(rewards) == 3
        assert fd is not None
        assert set(np.unique(ds.trials)) <= {0, 1, 2}
        assert len(ds) == sum(int(r) for r in rewards)

    def test_invalid_trials(self):
        env = CartpoleEnv()
        with pytest.raises(ValueError):
            mbrl_loop(env, None, ModelSpec(n=4, p=1, decoder_hidden_size=3),
                      trials=0, cfg=TrainConfig(),
                      rng=np.random.default_rng(0),
                      objective=cartpole_objective(env.params))


class TestGenerateDiffdriveDataset:
    def test_size_and_finiteness(self):
        ds = generate_diffdrive_dataset(203, np.random.default_rng(2))
        assert len(ds) == 203
        assert np.all(np.isfinite(ds.inputs()))

    def test_deltas_never_wrap(self):
        ds = generate_diffdrive_dataset(1000, np.random.default_rng(3))
        assert np.all(np.abs(ds.deltas()[:, 2]) < np.pi / 2)
