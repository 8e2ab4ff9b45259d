"""Distribution over bipartite causal graphs and its estimation.

Edges run only from time-t state/action nodes to time-(t+1) state nodes, so a
graph is a binary (n+p) x n matrix and the distribution is an independent
Bernoulli per cell. Edge probabilities are estimated from a fully wired
contribution model via integrated gradients, smoothed, column-normalized and
clipped away from 0 and 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


DEFAULT_RHO_MIN = 0.02


def cube_root(x):
    return np.cbrt(x)


@dataclass
class EdgeProbMatrix:
    p: np.ndarray              # (n+p, n) Bernoulli parameters
    rho_min: float = DEFAULT_RHO_MIN

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if not 0.0 < self.rho_min < 0.5:
            raise ValueError(f"rho_min must be in (0, 0.5), got {self.rho_min}")
        clipped = np.all((self.p >= self.rho_min)
                         & (self.p <= 1.0 - self.rho_min))
        if not (clipped or np.all(self.p == 1.0)):
            raise ValueError(
                "edge probabilities must lie in [rho_min, 1-rho_min] "
                "(all-ones contribution matrices exempt)")

    @classmethod
    def all_ones(cls, n_inputs, n_outputs):
        """The fully wired matrix used by the contribution model."""
        return cls(p=np.ones((n_inputs, n_outputs)))

    @property
    def shape(self):
        return self.p.shape


@dataclass
class CausalMask:
    M: np.ndarray  # (n+p, n) binary

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        if not np.all((self.M == 0.0) | (self.M == 1.0)):
            raise ValueError("mask entries must be binary")


@dataclass
class AttributionConfig:
    riemann_steps: int = 64
    num_inputs: int = 256
    null_input: np.ndarray = None  # defaults to zeros in normalized space

    def __post_init__(self):
        if self.riemann_steps < 8:
            raise ValueError("riemann_steps must be >= 8")


def integrated_gradients(model, x, cfg, output_index):
    """Attribution of the mean head mu_j to each input coordinate.

    Midpoint Riemann approximation of the straight-line path integral from
    the null input to x, evaluated with the all-ones mask. Returns a vector
    of length n+p.
    """
    x = np.asarray(x, dtype=np.float64)
    d = model.spec.input_dim
    if not 0 <= output_index < model.spec.n:
        raise IndexError(f"output index {output_index} out of range")
    base = np.zeros(d) if cfg.null_input is None else \
        np.asarray(cfg.null_input, dtype=np.float64)
    m = cfg.riemann_steps
    alphas = (np.arange(m) + 0.5) / m
    points = base[None, :] + alphas[:, None] * (x - base)[None, :]
    xt = ad.Tensor(points)
    mask = np.ones((d, model.spec.n))
    mus, _ = model.forward_taped(xt, mask)
    tape = ad.Tape([mus[output_index]])
    ad.backward(tape, np.ones(m))
    return (x - base) * xt.grad.mean(axis=0)


def estimate_edge_scores(contrib_model, dataset, cfg, rng):
    """Raw (n+p) x n score matrix: mean |IG| over sampled dataset inputs.

    Uses every row when the dataset has at most cfg.num_inputs rows,
    otherwise a without-replacement sample. The contribution model's fitted
    normalizer maps raw inputs into the model's input space.
    """
    if len(dataset) == 0:
        raise ValueError("estimate_edge_scores: empty dataset")
    raw_inputs = dataset.inputs()
    if len(raw_inputs) > cfg.num_inputs:
        idx = rng.choice(len(raw_inputs), size=cfg.num_inputs, replace=False)
        raw_inputs = raw_inputs[np.sort(idx)]
    xs = contrib_model.normalizer.normalize_input(raw_inputs)

    d, n = contrib_model.spec.input_dim, contrib_model.spec.n
    base = np.zeros(d) if cfg.null_input is None else \
        np.asarray(cfg.null_input, dtype=np.float64)
    m = cfg.riemann_steps
    alphas = (np.arange(m) + 0.5) / m
    # All path points for all inputs in one batch: (num_inputs * m, d).
    diffs = xs - base[None, :]
    points = (base[None, None, :]
              + alphas[None, :, None] * diffs[:, None, :]).reshape(-1, d)
    xt = ad.Tensor(points)
    mask = np.ones((d, n))
    mus, _ = contrib_model.forward_taped(xt, mask)
    scores = np.zeros((d, n))
    for j in range(n):
        tape = ad.Tape([mus[j]])
        ad.backward(tape, np.ones(points.shape[0]))
        grads = xt.grad.reshape(len(xs), m, d).mean(axis=1)
        scores[:, j] = np.abs(diffs * grads).mean(axis=0)
    return scores


def normalize_probabilities(raw, smoothing=cube_root,
                            rho_min=DEFAULT_RHO_MIN):
    """Smooth, column-max-normalize and clip raw scores into edge probs.

    Per column j: p_ij = clamp(s(|raw_ij|) / max_i s(|raw_ij|),
    rho_min, 1 - rho_min). An all-zero column falls back to rho_min
    everywhere (maximal uncertainty floor).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("normalize_probabilities: raw scores must be >= 0")
    smoothed = smoothing(np.abs(raw))
    p = np.empty_like(smoothed)
    for j in range(smoothed.shape[1]):
        col_max = smoothed[:, j].max()
        if col_max == 0.0:
            p[:, j] = rho_min
        else:
            p[:, j] = np.clip(smoothed[:, j] / col_max,
                              rho_min, 1.0 - rho_min)
    return EdgeProbMatrix(p=p, rho_min=rho_min)


def sample_mask(pm, rng):
    """Draw one causal graph, each edge an independent Bernoulli."""
    return CausalMask(M=(rng.random(pm.p.shape) < pm.p).astype(np.float64))


def sample_mask_batch(pm, rng, count):
    """Draw `count` independent graphs as a (count, n+p, n) array."""
    return (rng.random((count,) + pm.p.shape) < pm.p).astype(np.float64)


def graph_log_prob(pm, mask):
    """Log joint PMF of one sampled graph under the edge distribution."""
    e = mask.M if isinstance(mask, CausalMask) else np.asarray(mask)
    if e.shape != pm.p.shape:
        raise ValueError(
            f"graph_log_prob: mask shape {e.shape} != {pm.p.shape}")
    return float(np.sum(e * np.log(pm.p) + (1.0 - e) * np.log(1.0 - pm.p)))


def threshold_mask(pm, threshold=0.5):
    """Deterministic modal graph: keep edges with p >= threshold."""
    return CausalMask(M=(pm.p >= threshold).astype(np.float64))


def dag_count(n_nodes):
    """Number of labeled DAGs on n nodes (exact big-integer recurrence)."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    a = [1]  # a_0
    for n in range(1, n_nodes + 1):
        total = 0
        for k in range(1, n + 1):
            total += (-1) ** (k - 1) * math.comb(n, k) \
                * 2 ** (k * (n - k)) * a[n - k]
        a.append(total)
    return a[n_nodes]


def export_edge_prob_csv(pm, path, parent_names=None, output_names=None):
    """Heat-map-ready CSV: rows are parents (state then action), columns the
    next-state variables."""
    n_in, n_out = pm.shape
    if parent_names is None:
        parent_names = [f"in{i}" for i in range(n_in)]
    if output_names is None:
        output_names = [f"out{j}_next" for j in range(n_out)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["parent"] + list(output_names))
        for i in range(n_in):
            writer.writerow([parent_names[i]] + [repr(float(v)) for v in pm.p[i]])
