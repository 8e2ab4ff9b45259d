"""Probabilistic encoder-multidecoder dynamics model.

A single linear encoder maps the concatenated (state, action) input to a
latent vector of the same size. One small decoder per output dimension reads
the latent vector gated by a column of a binary causal mask and emits a
Gaussian (mean, log-variance) for that dimension's normalized state delta.
Log-variances are kept inside learned bounds via a double-softplus squash.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


CHECKPOINT_FORMAT = "cady-checkpoint-v1"
LOGVAR_INIT_MIN = -10.0
LOGVAR_INIT_MAX = 0.5
BOUND_PENALTY = 0.01

_ACTIVATIONS = {"tanh": ad.tanh, "softplus": ad.softplus}


@dataclass
class ModelSpec:
    n: int
    p: int
    decoder_hidden_size: int
    decoder_hidden_layers: int = 3
    activation: str = "tanh"

    def __post_init__(self):
        if self.n < 1 or self.p < 0:
            raise ValueError(f"invalid spec dims: n={self.n}, p={self.p}")
        if self.decoder_hidden_size < 1 or self.decoder_hidden_layers < 1:
            raise ValueError("decoder size/layers must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation}")

    @property
    def input_dim(self):
        return self.n + self.p

    def parameter_count(self):
        """Closed-form network weight count (encoder + all decoders)."""
        d, h, L = self.input_dim, self.decoder_hidden_size, \
            self.decoder_hidden_layers
        per_decoder = (d + 1) * h + (L - 1) * (h + 1) * h + (h + 1) * 2
        return d * (d + 1) + self.n * per_decoder


@dataclass
class GaussianPrediction:
    mean: np.ndarray   # (n,) or (B, n), normalized-delta units
    logvar: np.ndarray


@dataclass
class Normalizer:
    in_mean: np.ndarray = None
    in_std: np.ndarray = None
    out_mean: np.ndarray = None
    out_std: np.ndarray = None

    @property
    def fitted(self):
        return self.in_mean is not None

    def fit(self, inputs, deltas):
        inputs = np.asarray(inputs, dtype=np.float64)
        deltas = np.asarray(deltas, dtype=np.float64)
        self.in_mean = inputs.mean(axis=0)
        self.in_std = np.maximum(inputs.std(axis=0), 1e-8)
        self.out_mean = deltas.mean(axis=0)
        self.out_std = np.maximum(deltas.std(axis=0), 1e-8)
        return self

    def normalize_input(self, x):
        return (np.asarray(x, dtype=np.float64) - self.in_mean) / self.in_std

    def denormalize_input(self, x):
        return np.asarray(x, dtype=np.float64) * self.in_std + self.in_mean

    def normalize_delta(self, d):
        return (np.asarray(d, dtype=np.float64) - self.out_mean) / self.out_std

    def denormalize_delta(self, d):
        return np.asarray(d, dtype=np.float64) * self.out_std + self.out_mean


def _init_layer(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return ad.tensor(w), ad.tensor(b)


class CadyModel:
    """Encoder + per-output-dimension Gaussian decoders."""

    def __init__(self, spec, rng):
        self.spec = spec
        d, h = spec.input_dim, spec.decoder_hidden_size
        self.enc_w, self.enc_b = _init_layer(rng, d, d)
        self.decoders = []
        for _ in range(spec.n):
            layers = [_init_layer(rng, d, h)]
            for _ in range(spec.decoder_hidden_layers - 1):
                layers.append(_init_layer(rng, h, h))
            layers.append(_init_layer(rng, h, 2))
            self.decoders.append(layers)
        self.logvar_min = [ad.tensor([LOGVAR_INIT_MIN]) for _ in range(spec.n)]
        self.logvar_max = [ad.tensor([LOGVAR_INIT_MAX]) for _ in range(spec.n)]
        self.normalizer = Normalizer()
        self.edge_probs = None  # EdgeProbMatrix attached after estimation

    # -- parameter access ---------------------------------------------------

    def network_parameters(self):
        params = [self.enc_w, self.enc_b]
        for layers in self.decoders:
            for w, b in layers:
                params.extend([w, b])
        return params

    def parameters(self):
        """All trained tensors, including the log-variance bounds."""
        return self.network_parameters() + self.logvar_min + self.logvar_max

    def parameter_count(self):
        """Network weight count; matches the spec's closed form."""
        return sum(p.data.size for p in self.network_parameters())

    def named_parameters(self):
        names = ["enc_w", "enc_b"]
        for j in range(self.spec.n):
            for li in range(len(self.decoders[j])):
                names.extend([f"dec{j}_w{li}", f"dec{j}_b{li}"])
        names.extend([f"logvar_min{j}" for j in range(self.spec.n)])
        names.extend([f"logvar_max{j}" for j in range(self.spec.n)])
        return list(zip(names, self.parameters()))

    # -- forward ------------------------------------------------------------

    def forward_taped(self, x, mask):
        """Taped forward pass.

        x: Tensor of shape (B, n+p). mask: array (n+p, n) shared across the
        batch, or (B, n+p, n) per-row. Returns (mu_list, logvar_list), one
        (B,)-shaped Tensor per output dimension.
        """
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape[-2:] != (self.spec.input_dim, self.spec.n):
            raise ad.ShapeError(
                f"forward: mask shape {mask.shape} incompatible with "
                f"({self.spec.input_dim}, {self.spec.n})")
        act = _ACTIVATIONS[self.spec.activation]
        z = ad.add(ad.matmul(x, self.enc_w), self.enc_b)
        mus, logvars = [], []
        for j in range(self.spec.n):
            col = mask[:, j] if mask.ndim == 2 else mask[:, :, j]
            hj = ad.mask_mul(z, col)
            for w, b in self.decoders[j][:-1]:
                hj = act(ad.add(ad.matmul(hj, w), b))
            w, b = self.decoders[j][-1]
            out = ad.add(ad.matmul(hj, w), b)
            mus.append(ad.select_col(out, 0))
            raw_lv = ad.select_col(out, 1)
            logvars.append(bound_logvar(
                raw_lv, (self.logvar_min[j], self.logvar_max[j])))
        return mus, logvars


def build_model(spec, rng):
    """Randomly initialized model; weights uniform in +-1/sqrt(fan_in)."""
    return CadyModel(spec, rng)


def bound_logvar(raw, bounds):
    """Squash raw log-variance into (min_lv, max_lv) via double softplus.

    Accepts Tensors (taped) or numpy arrays / floats (plain evaluation).
    """
    lo, hi = bounds
    if isinstance(raw, ad.Tensor):
        lv = ad.sub(hi, ad.softplus(ad.sub(hi, raw)))
        return ad.add(lo, ad.softplus(ad.sub(lv, lo)))
    raw = np.asarray(raw, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    lv = hi - np.logaddexp(0.0, hi - raw)
    return lo + np.logaddexp(0.0, lv - lo)


def forward(model, x, mask):
    """Plain forward: x is a length-(n+p) vector or a (B, n+p) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = ad.Tensor(x[None, :] if single else x)
    mus, logvars = model.forward_taped(xb, mask)
    mean = np.stack([m.data for m in mus], axis=-1)
    logvar = np.stack([lv.data for lv in logvars], axis=-1)
    if single:
        mean, logvar = mean[0], logvar[0]
    return GaussianPrediction(mean=mean, logvar=logvar)


def nll_loss(pred, target, bound_spread=None):
    """Heteroscedastic Gaussian NLL, mean-reduced over the batch.

    sum_j [(mu_j - y_j)^2 * exp(-logvar_j) + logvar_j], plus the 0.01 penalty
    on the total log-variance bound spread when `bound_spread` is given.
    """
    target = np.asarray(target, dtype=np.float64)
    per_dim = (pred.mean - target) ** 2 * np.exp(-pred.logvar) + pred.logvar
    loss = per_dim.sum(axis=-1).mean()
    if bound_spread is not None:
        loss += BOUND_PENALTY * float(np.sum(bound_spread))
    return float(loss)


def nll_loss_taped(model, x, y, mask):
    """Taped NLL for training: returns a scalar Tensor."""
    mus, logvars = model.forward_taped(x, mask)
    total = None
    for j in range((model.spec.n)):
        yj = ad.Tensor(y.data[:, j])
        resid = ad.square(ad.sub(mus[j], yj))
        term = ad.add(ad.mul(resid, ad.exp(ad.neg(logvars[j]))), logvars[j])
        total = term if total is None else ad.add(total, term)
    loss = ad.tmean(total)
    penalty = None
    for j in range(model.spec.n):
        spread = ad.sub(model.logvar_max[j], model.logvar_min[j])
        penalty = spread if penalty is None else ad.add(penalty, spread)
    return ad.add(loss, ad.mul(ad.Tensor(BOUND_PENALTY), ad.tsum(penalty)))


def predict_next_state(model, s, a, mask, rng, deterministic=False):
    """One-step prediction in raw units: s_next = s + denorm(delta)."""
    batch = predict_next_batch(
        model, np.asarray(s, dtype=np.float64)[None, :],
        np.asarray(a, dtype=np.float64)[None, :], mask, rng, deterministic)
    return batch[0]


def predict_next_batch(model, states, actions, mask, rng, deterministic=False):
    """Vectorized one-step prediction for a (B, n) state batch."""
    if not model.normalizer.fitted:
        raise RuntimeError("predict_next_state: normalizer not fitted")
    x = np.concatenate([states, actions], axis=1)
    pred = forward(model, model.normalizer.normalize_input(x), mask)
    delta_norm = pred.mean
    if not deterministic:
        std = np.exp(0.5 * pred.logvar)
        delta_norm = delta_norm + rng.standard_normal(std.shape) * std
    return states + model.normalizer.denormalize_delta(delta_norm)


# -- checkpointing ----------------------------------------------------------

def save_checkpoint(model, path):
    spec = model.spec
    doc = {
        "format": CHECKPOINT_FORMAT,
        "spec": {
            "n": spec.n, "p": spec.p,
            "decoder_hidden_size": spec.decoder_hidden_size,
            "decoder_hidden_layers": spec.decoder_hidden_layers,
            "activation": spec.activation,
        },
        "params": [
            {"name": name, "shape": list(t.data.shape),
             "data": t.data.reshape(-1).tolist()}
            for name, t in model.named_parameters()
        ],
        "normalizer": None,
        "edge_probs": None,
    }
    if model.normalizer.fitted:
        nz = model.normalizer
        doc["normalizer"] = {
            "in_mean": nz.in_mean.tolist(), "in_std": nz.in_std.tolist(),
            "out_mean": nz.out_mean.tolist(), "out_std": nz.out_std.tolist(),
        }
    if model.edge_probs is not None:
        doc["edge_probs"] = {
            "p": model.edge_probs.p.tolist(),
            "rho_min": model.edge_probs.rho_min,
        }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path):
    from .causal import EdgeProbMatrix

    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format in {path}")
    spec = ModelSpec(**doc["spec"])
    model = build_model(spec, np.random.default_rng(0))
    named = dict(model.named_parameters())
    for entry in doc["params"]:
        t = named[entry["name"]]
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != t.data.shape:
            raise ValueError(
                f"checkpoint param {entry['name']}: shape {arr.shape} != "
                f"{t.data.shape}")
        t.data = arr
    if doc["normalizer"] is not None:
        nz = doc["normalizer"]
        model.normalizer = Normalizer(
            in_mean=np.array(nz["in_mean"]), in_std=np.array(nz["in_std"]),
            out_mean=np.array(nz["out_mean"]), out_std=np.array(nz["out_std"]))
    if doc["edge_probs"] is not None:
        model.edge_probs = EdgeProbMatrix(
            p=np.array(doc["edge_probs"]["p"]),
            rho_min=doc["edge_probs"]["rho_min"])
    return model
