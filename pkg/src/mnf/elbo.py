"""The variational objective: conditional Gaussian divergence, flow density
corrections, the auxiliary density over the latent scale, the log-uniform
surrogate divergence, and the dropout-limit quadratic penalty.

The minibatch bound is

    scaled log-likelihood + sum over weight layers of
        (-kl_conditional + log_aux_density - log_latent_density)

where the likelihood sum is rescaled by dataset_size / batch_size and the
divergence terms are full-dataset quantities (never rescaled).  All terms of
one evaluation share a single coherent sample pathway per layer: the same
latent draw, the same step masks, and one continued rng stream.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .flows import log_density_factorized_gaussian, stack_forward
from .layers import MnfConvLayer

_LOG_2PI = float(np.log(2.0 * np.pi))

# sigmoid-polynomial surrogate constants for the log-uniform divergence
FFLU_K1 = 0.63576
FFLU_K2 = 1.87320
FFLU_K3 = 1.48695

# matches the flow gate floor; keeps aux log densities finite
_SIGMA_TILDE_FLOOR = 1e-7


class AuxPosteriorParams:
    """Mean and scale of the factorized Gaussian auxiliary density."""

    def __init__(self, mu_tilde, sigma_tilde):
        self.mu_tilde = ad.constant(mu_tilde)
        self.sigma_tilde = ad.constant(sigma_tilde)
        if self.mu_tilde.shape != self.sigma_tilde.shape:
            raise ContractError(
                f"aux params: mu {self.mu_tilde.shape} vs sigma {self.sigma_tilde.shape}")
        s = self.sigma_tilde.data
        if not (np.all(s > 0.0) and np.all(s < 1.0)):
            raise ContractError("aux params: sigma_tilde must lie strictly inside (0, 1)")


class ElboBreakdown:
    """One evaluation of the bound, split into its additive pieces.

    `objective` is the differentiable scalar; the float fields mirror it for
    logging.  kl_net of a layer record is kl_conditional - log_r + log_q_z,
    so total_elbo = expected_log_likelihood - sum of kl_net.
    """

    def __init__(self, expected_log_likelihood, per_layer, objective, dropout_passes):
        self.expected_log_likelihood = expected_log_likelihood
        self.per_layer = per_layer
        self.objective = objective
        self.total_elbo = float(objective.data)
        self.dropout_passes = dropout_passes

    def kl_per_layer(self):
        return [rec["kl_conditional"] - rec["log_r"] + rec["log_q_z"]
                for rec in self.per_layer]


def _scaled_means(layer, z_tf):
    if z_tf is None:
        return layer.M
    if isinstance(layer, MnfConvLayer):
        return ad.mul(layer.M, ad.reshape(z_tf, (1, 1, 1, layer.d_f)))
    return ad.mul(layer.M, ad.reshape(z_tf, (layer.d_in, 1)))


def kl_conditional_gaussian(layer, z_tf=None):
    """Divergence of the conditional Gaussian weight posterior from N(0, I).

    0.5 * sum(sigma^2 + scaled_mean^2 - 1 - log sigma^2), with means scaled
    by the latent vector when one is given (per input unit for dense
    layers, per output filter for conv).  Always uses uncapped variances.
    """
    sigma2 = ad.exp(layer.log_var)
    mean = _scaled_means(layer, z_tf)
    penalty = ad.sub(ad.add(sigma2, ad.square(mean)), ad.add(1.0, layer.log_var))
    return ad.mul(0.5, ad.sum_(penalty))


def aux_params_dense(layer, z_tf, rng) -> AuxPosteriorParams:
    """Auxiliary density parameters for a dense layer.

    The weight summary u = c^T W is sampled from its induced Gaussian
    (mean (c * z)^T M, variance (c^2)^T Sigma) rather than from explicit
    weights; a scalar statistic mean(tanh(u)) then scales the b1/b2 heads.
    The noise draw always happens, keeping the stream layout fixed.
    """
    mean_u = ad.matmul(ad.reshape(ad.mul(layer.c, z_tf), (1, layer.d_in)), layer.M)
    var_u = ad.matmul(ad.reshape(ad.square(layer.c), (1, layer.d_in)),
                      ad.exp(layer.log_var))
    eps = ad.sample(rng, "standard-normal", (1, layer.d_out))
    u = ad.add(mean_u, ad.mul(ad.sqrt(var_u), eps))
    s = ad.mean(ad.tanh(u))
    mu_tilde = ad.mul(layer.b1, s)
    sigma_tilde = ad.clip(ad.sigmoid(ad.mul(layer.b2, s)),
                          _SIGMA_TILDE_FLOOR, 1.0 - _SIGMA_TILDE_FLOOR)
    return AuxPosteriorParams(mu_tilde, sigma_tilde)


def aux_params_conv(layer, z_tf, rng) -> AuxPosteriorParams:
    """Conv analog: the kernel flattens to [kh*kw*d_c, d_f], the summary
    v = mat(W) c is sampled per flattened row, and the statistic averages
    tanh(v) over that whole axis."""
    rows = int(np.prod(layer.M.shape[:3]))
    mat_mean = ad.reshape(_scaled_means(layer, z_tf), (rows, layer.d_f))
    mat_var = ad.reshape(ad.exp(layer.log_var), (rows, layer.d_f))
    c_col = ad.reshape(layer.c, (layer.d_f, 1))
    mean_v = ad.matmul(mat_mean, c_col)
    var_v = ad.matmul(mat_var, ad.square(c_col))
    eps = ad.sample(rng, "standard-normal", (rows, 1))
    v = ad.add(mean_v, ad.mul(ad.sqrt(var_v), eps))
    s = ad.mean(ad.tanh(v))
    mu_tilde = ad.mul(layer.b1, s)
    sigma_tilde = ad.clip(ad.sigmoid(ad.mul(layer.b2, s)),
                          _SIGMA_TILDE_FLOOR, 1.0 - _SIGMA_TILDE_FLOOR)
    return AuxPosteriorParams(mu_tilde, sigma_tilde)


def log_r(layer, z_tf, rng, aux=None):
    """Log of the auxiliary density at the sampled latent vector.

    Runs the layer's second flow from z_tf, adding its log-determinants,
    and evaluates the factorized Gaussian with AuxPosteriorParams at the
    endpoint.  Draw order: the aux noise first, then one mask per step.
    Pass `aux` to pin the Gaussian parameters (testing hook).
    """
    if aux is None:
        if isinstance(layer, MnfConvLayer):
            aux = aux_params_conv(layer, z_tf, rng)
        else:
            aux = aux_params_dense(layer, z_tf, rng)
    z_tb, logdet, _ = stack_forward(z_tf, layer.r_flow, rng=rng)
    base = log_density_factorized_gaussian(
        z_tb, aux.mu_tilde, ad.mul(2.0, ad.log(aux.sigma_tilde)))
    return ad.add(base, logdet)


def log_q_z(z_tf, z0, q_flow_logdet, layer):
    """Log density of the transformed latent sample.

    Equals the base Gaussian log density at z0 minus the accumulated flow
    log-determinant; (z0, z_tf, q_flow_logdet) must come from one forward.
    """
    z_tf = ad.constant(z_tf)
    z0 = ad.constant(z0)
    if z_tf.shape != z0.shape:
        raise ContractError(f"log_q_z: z_tf {z_tf.shape} vs z0 {z0.shape}")
    base = log_density_factorized_gaussian(z0, layer.q_z0_mean, layer.q_z0_log_var)
    return ad.sub(base, q_flow_logdet)


def _softplus(x):
    # log(1 + e^x) evaluated stably for large |x|
    mag = ad.maximum(x, ad.neg(x))
    return ad.add(ad.relu(x), ad.log(ad.add(1.0, ad.exp(ad.neg(mag)))))


def neg_kl_log_uniform(log_alpha):
    """Sigmoid-polynomial surrogate for -KL(N(mu, alpha mu^2) || log-uniform).

    Normalized to approach 0 as log_alpha -> +inf and to fall off as
    0.5 * log_alpha for very negative log_alpha.
    """
    log_alpha = ad.constant(log_alpha)
    gate = ad.mul(FFLU_K1, ad.sigmoid(ad.add(FFLU_K2, ad.mul(FFLU_K3, log_alpha))))
    return ad.sub(ad.sub(gate, ad.mul(0.5, _softplus(ad.neg(log_alpha)))), FFLU_K1)


def log_alpha_of(layer):
    """Per-weight log(sigma^2 / mu^2); mu = 0 saturates toward +inf."""
    mu2 = ad.maximum(ad.square(layer.M), 1e-16)
    return ad.sub(layer.log_var, ad.log(mu2))


def kl_fflu(layer):
    """Total (positive) surrogate divergence of an additive-noise layer
    under the log-uniform prior, summed over weights."""
    return ad.neg(ad.sum_(neg_kl_log_uniform(log_alpha_of(layer))))


def dropout_limit_regularizer(M, pi):
    """Expected quadratic penalty of Bernoulli(pi) input-scale noise:
    (pi / 2) * sum of squared mean weights."""
    if not 0.0 <= pi <= 1.0:
        raise ContractError(f"dropout regularizer: pi {pi} outside [0, 1]")
    return ad.mul(0.5 * pi, ad.sum_(ad.square(ad.constant(M))))


# ---------------------------------------------------------------------------
# minibatch bound

def _log_likelihood(model, out, y):
    """Summed log-likelihood of the batch under the model's likelihood."""
    if model.likelihood == "categorical":
        y = np.asarray(y)
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise ContractError("labels must be a 1-d integer array")
        n, n_classes = out.shape
        if y.min() < 0 or y.max() >= n_classes:
            raise ContractError(
                f"labels outside [0, {n_classes - 1}]: saw {y.min()}..{y.max()}")
        log_probs = ad.log_softmax(out)
        picked = ad.gather(log_probs, np.arange(n) * n_classes + y)
        return ad.sum_(picked)
    # fixed-variance Gaussian likelihood
    y = np.asarray(y, dtype=float).reshape(-1)
    pred = ad.reshape(out, (y.size,))
    var = model.noise_var
    quad = ad.div(ad.sum_(ad.square(ad.sub(pred, ad.constant(y)))), 2.0 * var)
    return ad.sub(ad.mul(-0.5 * y.size, _LOG_2PI + np.log(var)), quad)


def elbo_minibatch(model, batch, rng, n_total):
    """Evaluate the augmented-space bound on one minibatch.

    The likelihood part is scaled by n_total / batch_size; divergence parts
    are not.  One stochastic pass supplies both: each flow layer's latent
    sample, masks, and continued rng stream feed its divergence terms, so
    the whole evaluation uses a single coherent sample per layer.
    """
    X, y = batch
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ContractError("elbo: batch is empty")
    if n_total < X.shape[0]:
        raise ContractError(f"elbo: n_total {n_total} smaller than batch {X.shape[0]}")
    out, passes = model.forward(X, rng, train=True)
    scale = n_total / X.shape[0]
    ell = ad.mul(scale, _log_likelihood(model, out, y))

    total = ell
    per_layer = []
    dropout_passes = []
    pending_dropout = None
    for p in passes:
        if p.kind == "dropout":
            dropout_passes.append(p)
            pending_dropout = p.block
            continue
        layer = p.layer
        if p.kind in ("mnf_dense", "mnf_conv"):
            kl = kl_conditional_gaussian(layer, p.z_tf)
            lr = log_r(layer, p.z_tf, p.rng)
            lqz = log_q_z(p.z_tf, p.z0, p.flow_logdet, layer)
            total = ad.add(total, ad.add(ad.neg(kl), ad.sub(lr, lqz)))
            rec = {"layer": layer.name, "kl_conditional": float(kl.data),
                   "log_r": float(lr.data), "log_q_z": float(lqz.data)}
        elif p.kind == "ffg":
            kl = kl_conditional_gaussian(layer, None)
            total = ad.sub(total, kl)
            rec = {"layer": layer.name, "kl_conditional": float(kl.data),
                   "log_r": 0.0, "log_q_z": 0.0}
        elif p.kind == "fflu":
            kl = kl_fflu(layer)
            total = ad.sub(total, kl)
            rec = {"layer": layer.name, "kl_conditional": float(kl.data),
                   "log_r": 0.0, "log_q_z": 0.0}
        else:  # deterministic layers carry the quadratic penalty
            pi = pending_dropout.keep_prob if pending_dropout is not None else layer.keep_prob
            kl = dropout_limit_regularizer(layer.M, pi)
            total = ad.sub(total, kl)
            rec = {"layer": layer.name, "kl_conditional": float(kl.data),
                   "log_r": 0.0, "log_q_z": 0.0}
        pending_dropout = None
        per_layer.append(rec)
    return ElboBreakdown(expected_log_likelihood=float(ell.data),
                         per_layer=per_layer, objective=total,
                         dropout_passes=dropout_passes)
