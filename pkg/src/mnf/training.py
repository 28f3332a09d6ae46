"""Optimization: bias-corrected Adam, the main training loop, and the
score-function (REINFORCE) update for learnable dropout rates.

The loop is bitwise deterministic for a fixed seed: model init draws from
rng.child(0), the epoch-e shuffle from rng.child(1, e), and step s of the
objective from rng.child(2, s).  Wall-clock fields are written as 0 unless
timings are explicitly enabled, keeping logs byte-comparable across runs.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, backward
from .elbo import elbo_minibatch
from .errors import ConfigError, ContractError, NumericFault
from .model import WEIGHT_KINDS, init_model

KEEP_PROB_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# Adam

class Adam:
    """Bias-corrected Adam over a fixed parameter list (minimization)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        """Apply one update from a {parameter: gradient array} table.

        Parameters absent from the table get a zero gradient (their moments
        still decay).  A non-finite gradient aborts, naming the parameter.
        """
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericFault(f"adam:{p.name}", "non-finite gradient")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def adam_step(model, gradients, state=None, lr=1e-3):
    """One Adam update on a model; creates the state on first use."""
    if state is None:
        state = Adam(model.parameters(), lr=lr)
    state.step(gradients)
    return model, state


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    eval_cadence: int = 0
    eval_samples: int = 5
    lr: float = 1e-3
    reinforce_lr: float = 1e-3
    baseline_momentum: float = 0.99
    timings: bool = False
    log_path: str = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown training option {k!r}" for k in unknown])
        return cls(**d)

    def validate(self):
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_cadence < 0:
            problems.append(f"eval_cadence must be >= 0, got {self.eval_cadence}")
        if self.eval_samples < 1:
            problems.append(f"eval_samples must be >= 1, got {self.eval_samples}")
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.baseline_momentum < 1.0:
            problems.append(f"baseline_momentum must be in [0, 1), got {self.baseline_momentum}")
        return problems


def _as_xy(dataset):
    if hasattr(dataset, "X") and hasattr(dataset, "y"):
        return np.asarray(dataset.X), np.asarray(dataset.y)
    X, y = dataset
    return np.asarray(X), np.asarray(y)


# ---------------------------------------------------------------------------
# score-function update for learnable dropout rates

def reinforce_logit_update(ell_value, baseline, mask, pi, m_sq_sum, lr):
    """Ascent step on the bound w.r.t. a keep-probability logit.

    The mask-dependent part uses the score-function estimator
    (ell - baseline) * sum(mask - pi); the quadratic penalty -(pi/2)||M||^2
    contributes its analytic derivative -0.5 * ||M||^2 * pi * (1 - pi).
    """
    score = float(np.sum(mask - pi))
    return lr * ((ell_value - baseline) * score - 0.5 * m_sq_sum * pi * (1.0 - pi))


def _clamp_keep_prob(block):
    pi = block.keep_prob
    lo, hi = KEEP_PROB_FLOOR, 1.0 - KEEP_PROB_FLOOR
    if pi < lo or pi > hi:
        pinned = min(max(pi, lo), hi)
        block.logit = float(np.log(pinned) - np.log1p(-pinned))
        warnings.warn(f"dropout keep probability saturated at {pi:.2e}; "
                      f"clamped to {pinned}", RuntimeWarning, stacklevel=2)


def _dropout_weight_pairs(model):
    """Each learnable dropout block with the weight block it masks."""
    pairs = {}
    pending = None
    for block in model.blocks:
        if block.kind == "dropout":
            pending = block
        elif block.kind in WEIGHT_KINDS:
            if pending is not None and pending.learnable:
                pairs[id(pending)] = (pending, block)
            pending = None
    return list(pairs.values())


# ---------------------------------------------------------------------------
# training loop

def _eval_metric(model, eval_set, rng, n_samples):
    """Small held-out metric for cadenced logging: mean-softmax accuracy for
    categorical models, root-mean-squared error for Gaussian ones."""
    X, y = _as_xy(eval_set)
    with ad.no_grad():
        outs = []
        for s in range(n_samples):
            out, _ = model.forward(X, rng.child(s), train=True)
            outs.append(out.data)
    if model.likelihood == "categorical":
        stacked = np.stack(outs)
        shifted = stacked - stacked.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        pred = probs.mean(axis=0).argmax(axis=1)
        return {"accuracy": float((pred == y).mean())}
    pred = np.mean([o.reshape(-1) for o in outs], axis=0)
    return {"rmse": float(np.sqrt(np.mean((pred - y) ** 2)))}


def train(spec, dataset, config: TrainConfig, eval_set=None):
    """Maximize the minibatch bound; returns (model, per-step records).

    Records are {step, elbo, ll, kl_per_layer, wall_ms} dicts (plus "eval"
    at the configured cadence) and are also written as JSON lines when
    config.log_path is set.  Learnable dropout rates are updated each step
    by the score-function rule with a running global baseline.
    """
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    X, y = _as_xy(dataset)
    if X.shape[0] == 0:
        raise ContractError("train: dataset is empty")
    n = X.shape[0]

    rng = Rng(config.seed)
    model = init_model(spec, rng.child(0))
    state = Adam(model.parameters(), lr=config.lr)
    reinforce_pairs = _dropout_weight_pairs(model)
    baseline = None

    records = []
    sink = open(config.log_path, "w") if config.log_path else None
    try:
        step = 0
        for epoch in range(config.epochs):
            perm = rng.child(1, epoch).permutation(n)
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                t0 = time.perf_counter() if config.timings else None
                try:
                    bd = elbo_minibatch(model, (X[idx], y[idx]), rng.child(2, step), n)
                    table = backward(ad.neg(bd.objective))
                    state.step(table)
                except NumericFault as exc:
                    raise NumericFault(f"step {step}: {exc.where}", exc.detail) from exc

                if reinforce_pairs:
                    ell = bd.expected_log_likelihood
                    if baseline is None:
                        baseline = ell
                    applied = {id(dp.block): dp.mask for dp in bd.dropout_passes}
                    for block, weight_block in reinforce_pairs:
                        mask = applied.get(id(block))
                        if mask is None:
                            continue
                        block.logit += reinforce_logit_update(
                            ell, baseline, mask, block.keep_prob,
                            float(np.sum(weight_block.M.data ** 2)),
                            config.reinforce_lr)
                        _clamp_keep_prob(block)
                    baseline = (config.baseline_momentum * baseline
                                + (1.0 - config.baseline_momentum) * ell)

                wall = int(round((time.perf_counter() - t0) * 1000)) if config.timings else 0
                record = {"step": step, "elbo": bd.total_elbo,
                          "ll": bd.expected_log_likelihood,
                          "kl_per_layer": bd.kl_per_layer(), "wall_ms": wall}
                if config.eval_cadence and eval_set is not None \
                        and step % config.eval_cadence == 0:
                    record["eval"] = _eval_metric(model, eval_set, rng.child(3, step),
                                                  config.eval_samples)
                records.append(record)
                if sink is not None:
                    sink.write(json.dumps(record) + "\n")
                step += 1
    finally:
        if sink is not None:
            sink.close()
    return model, records


def reinforce_dropout_rate(spec, dataset, config: TrainConfig, eval_set=None):
    """Train a model whose dropout rates are flagged learnable.

    Returns (learned keep probabilities in block order, model, records).
    """
    if not any(l.kind == "dropout" and l.learnable for l in spec.layers):
        raise ContractError("reinforce_dropout_rate: spec has no learnable dropout layer")
    model, records = train(spec, dataset, config, eval_set=eval_set)
    pis = [b.keep_prob for b in model.dropout_blocks() if b.learnable]
    return pis, model, records
