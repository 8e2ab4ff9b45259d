"""Dataset handling and the sequential training procedure.

Training is sequential: first the fully wired contribution model is fit on
the transition dataset, then integrated gradients over it yield the edge
probabilities, and finally the deployed dynamics model is trained with one
fresh causal mask sampled per batch. Also provides the MBRL loop
(plan-collect-retrain), post-intervention fine-tuning, and one-step MSE
evaluation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import causal, envs
from .model import build_model, nll_loss_taped
from .planners import RandomPlanner, RolloutEvaluator, ModelStep


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 64
    loss_delta_stop: float = 1e-3
    learning_rate: float = 3e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_delta_stop <= 0:
            raise ValueError("loss_delta_stop must be positive")


# Initial value for every p^D entry before estimation.
P_INIT = 0.5


class TransitionDataset:
    """Rows of (s_t, a_t, s_{t+1}) with per-row provenance (trial, step)."""

    def __init__(self, n, p):
        self.n = n
        self.p = p
        self.states = np.empty((0, n))
        self.actions = np.empty((0, p))
        self.next_states = np.empty((0, n))
        self.trials = np.empty((0,), dtype=np.int64)
        self.steps = np.empty((0,), dtype=np.int64)

    def __len__(self):
        return self.states.shape[0]

    def append(self, s, a, s_next, trial=0, step=0):
        s = np.asarray(s, dtype=np.float64).reshape(1, -1)
        a = np.asarray(a, dtype=np.float64).reshape(1, -1)
        s_next = np.asarray(s_next, dtype=np.float64).reshape(1, -1)
        if s.shape[1] != self.n or a.shape[1] != self.p \
                or s_next.shape[1] != self.n:
            raise ValueError("transition dimensions do not match the dataset")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))
                and np.all(np.isfinite(s_next))):
            raise ValueError("non-finite values in transition")
        self.states = np.vstack([self.states, s])
        self.actions = np.vstack([self.actions, a])
        self.next_states = np.vstack([self.next_states, s_next])
        self.trials = np.append(self.trials, trial)
        self.steps = np.append(self.steps, step)

    def extend(self, states, actions, next_states, trial=0, step0=0):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64).reshape(
            len(states), -1)
        next_states = np.asarray(next_states, dtype=np.float64)
        for arr in (states, actions, next_states):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite values in transitions")
        self.states = np.vstack([self.states, states])
        self.actions = np.vstack([self.actions, actions])
        self.next_states = np.vstack([self.next_states, next_states])
        self.trials = np.append(
            self.trials, np.full(len(states), trial, dtype=np.int64))
        self.steps = np.append(
            self.steps, step0 + np.arange(len(states), dtype=np.int64))

    def inputs(self):
        return np.concatenate([self.states, self.actions], axis=1)

    def deltas(self):
        return self.next_states - self.states

    def subset(self, idx):
        out = TransitionDataset(self.n, self.p)
        out.states = self.states[idx]
        out.actions = self.actions[idx]
        out.next_states = self.next_states[idx]
        out.trials = self.trials[idx]
        out.steps = self.steps[idx]
        return out

    def split(self, train_frac=0.9, seed=0):
        """Seed-fixed train/validation split by row."""
        perm = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(train_frac * len(self)))
        return self.subset(perm[:cut]), self.subset(perm[cut:])

    def to_csv(self, path):
        header = [f"s{i}" for i in range(self.n)] \
            + [f"a{i}" for i in range(self.p)] \
            + [f"s{i}_next" for i in range(self.n)] + ["trial", "step"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for i in range(len(self)):
                row = [repr(float(v)) for v in self.states[i]] \
                    + [repr(float(v)) for v in self.actions[i]] \
                    + [repr(float(v)) for v in self.next_states[i]] \
                    + [int(self.trials[i]), int(self.steps[i])]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, n, p):
        expected = [f"s{i}" for i in range(n)] + [f"a{i}" for i in range(p)] \
            + [f"s{i}_next" for i in range(n)] + ["trial", "step"]
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != expected:
                raise ValueError(f"unexpected dataset header in {path}")
            ds = cls(n, p)
            rows = [row for row in reader]
        if rows:
            data = np.array([[float(v) for v in row] for row in rows])
            if not np.all(np.isfinite(data)):
                raise ValueError(f"non-finite values in {path}")
            ds.states = data[:, :n]
            ds.actions = data[:, n:n + p]
            ds.next_states = data[:, n + p:2 * n + p]
            ds.trials = data[:, -2].astype(np.int64)
            ds.steps = data[:, -1].astype(np.int64)
        return ds


def _train_loop(dataset, spec, cfg, rng, edge_probs, model=None):
    """Shared NLL training loop; one mask sampled from `edge_probs` per batch."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model is None:
        model = build_model(spec, rng)
        model.normalizer.fit(dataset.inputs(), dataset.deltas())
    if not model.normalizer.fitted:
        raise RuntimeError("normalizer must be fitted before training")
    x_all = model.normalizer.normalize_input(dataset.inputs())
    y_all = model.normalizer.normalize_delta(dataset.deltas())
    params = model.parameters()
    opt = ad.AdamState(params, lr=cfg.learning_rate)
    prev_loss = None
    n_rows = len(dataset)
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n_rows)
        losses = []
        for start in range(0, n_rows, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            mask = causal.sample_mask(edge_probs, rng)
            loss = nll_loss_taped(
                model, ad.Tensor(x_all[idx]), ad.Tensor(y_all[idx]), mask.M)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"divergent training loss at epoch {epoch}")
            tape = ad.Tape([loss])
            ad.backward(tape, np.asarray(1.0))
            ad.adam_step(params, [p.grad for p in params], opt)
            losses.append(float(loss.data))
        epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss):
            raise RuntimeError(f"divergent training loss at epoch {epoch}")
        if prev_loss is not None \
                and abs(epoch_loss - prev_loss) < cfg.loss_delta_stop:
            break
        prev_loss = epoch_loss
    return model


def train_contribution_model(dataset, spec, cfg, rng):
    """Train the fully wired contribution model (all-ones mask each batch)."""
    ones = causal.EdgeProbMatrix.all_ones(spec.input_dim, spec.n)
    model = _train_loop(dataset, spec, cfg, rng, ones)
    model.edge_probs = ones
    return model


def estimate_distribution(contrib_model, dataset, attr_cfg, rng,
                          rho_min=causal.DEFAULT_RHO_MIN,
                          smoothing=causal.cube_root):
    """Integrated-gradients scores -> smoothed, clipped edge probabilities."""
    raw = causal.estimate_edge_scores(contrib_model, dataset, attr_cfg, rng)
    return causal.normalize_probabilities(raw, smoothing, rho_min)


def train_dynamics_model(dataset, spec, edge_probs, cfg, rng):
    """Train the deployed model; a fresh mask is sampled per batch."""
    model = _train_loop(dataset, spec, cfg, rng, edge_probs)
    model.edge_probs = edge_probs
    return model


def finetune(model, window, cfg, rng, epochs=16):
    """Continue NLL training on a recent-trajectory window.

    The normalizer stays frozen and the edge distribution is unchanged.
    Zero epochs leaves the model untouched.
    """
    if len(window) == 0:
        raise ValueError("fine-tuning window is empty")
    if epochs == 0:
        return model
    cfg = replace(cfg, max_epochs=epochs)
    edge_probs = model.edge_probs
    if edge_probs is None:
        edge_probs = causal.EdgeProbMatrix.all_ones(
            model.spec.input_dim, model.spec.n)
    return _train_loop(window, model.spec, cfg, rng, edge_probs, model=model)


def one_step_mse(model, dataset, rng, mask_draws=16, angle_dims=()):
    """Mean-only one-step prediction MSE in raw units.

    One fresh mask per row per draw. Residuals for dimensions listed in
    `angle_dims` are wrapped to (-pi, pi]. Returns per-dimension and
    aggregate MSE for a single draw and the expectation over `mask_draws`.
    """
    if len(dataset) == 0:
        raise ValueError("one_step_mse: empty dataset split")
    edge_probs = model.edge_probs
    if edge_probs is None:
        edge_probs = causal.EdgeProbMatrix.all_ones(
            model.spec.input_dim, model.spec.n)
    x = model.normalizer.normalize_input(dataset.inputs())
    per_draw = []
    from .model import forward as model_forward
    for _ in range(mask_draws):
        masks = causal.sample_mask_batch(edge_probs, rng, len(dataset))
        pred = model_forward(model, x, masks)
        pred_next = dataset.states \
            + model.normalizer.denormalize_delta(pred.mean)
        resid = pred_next - dataset.next_states
        for d in angle_dims:
            resid[:, d] = envs.wrap_angle(resid[:, d])
        per_draw.append((resid ** 2).mean(axis=0))
    per_draw = np.array(per_draw)
    return {
        "per_dim": per_draw[0],
        "aggregate": float(per_draw[0].mean()),
        "per_dim_expected": per_draw.mean(axis=0),
        "aggregate_expected": float(per_draw.mean()),
    }


def collect_episode(env, planner, evaluator, rng, max_steps, dataset,
                    trial_idx):
    """Run one episode, append its transitions, return the episode reward."""
    state = env.reset(rng)
    total = 0.0
    for t in range(max_steps):
        action = planner.plan(evaluator, state, rng)
        next_state, reward, done = env.step(action)
        dataset.append(state, action, next_state, trial=trial_idx, step=t)
        total += reward
        state = next_state
        if done:
            break
    return total


def mbrl_loop(env, planner, spec, trials, cfg, rng, objective,
              attr_cfg=None, rho_min=causal.DEFAULT_RHO_MIN,
              max_steps=200):
    """Alternate model training and planned data collection.

    Trial 0 collects a random-policy episode; every later trial retrains the
    contribution model, re-estimates the edge distribution and retrains the
    dynamics model on all data so far, then collects one planned episode.
    Returns (dynamics model, edge probabilities, per-trial rewards, dataset).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    attr_cfg = attr_cfg or causal.AttributionConfig()
    reward_fn, alive_fn = objective
    dataset = TransitionDataset(spec.n, spec.p)
    random_planner = RandomPlanner(env.action_bounds)
    rewards = [collect_episode(env, random_planner, None, rng, max_steps,
                               dataset, trial_idx=0)]
    fd, pd = None, None
    for trial in range(1, trials):
        fc = train_contribution_model(dataset, spec, cfg, rng)
        pd = estimate_distribution(fc, dataset, attr_cfg, rng,
                                   rho_min=rho_min)
        fd = train_dynamics_model(dataset, spec, pd, cfg, rng)
        evaluator = RolloutEvaluator(ModelStep(fd, pd), reward_fn, alive_fn)
        planner.reset()
        rewards.append(collect_episode(env, planner, evaluator, rng,
                                       max_steps, dataset, trial_idx=trial))
    return fd, pd, rewards, dataset


def generate_diffdrive_dataset(n_transitions, rng, params=None,
                               rollout_len=5):
    """System-identification data: uniformly random controls from random poses.

    Rollouts are kept short and initial headings inside +-0.8 pi so the wrap
    of theta to (-pi, pi] can never fire mid-rollout; state deltas therefore
    stay small and well-behaved for delta learning.
    """
    params = params or envs.DiffDriveParams()
    dataset = TransitionDataset(3, 2)
    trial = 0
    while len(dataset) < n_transitions:
        state = np.array([
            rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
            rng.uniform(-0.8 * np.pi, 0.8 * np.pi)])
        steps = min(rollout_len, n_transitions - len(dataset))
        states, actions, next_states = [], [], []
        for _ in range(steps):
            action = np.array([
                rng.uniform(params.v_low, params.v_high),
                rng.uniform(params.w_low, params.w_high)])
            nxt = envs.diffdrive_step(state, action, params)
            states.append(state)
            actions.append(action)
            next_states.append(nxt)
            state = nxt
        dataset.extend(states, actions, next_states, trial=trial)
        trial += 1
    return dataset
