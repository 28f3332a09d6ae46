"""Weight layers: flow-conditioned Gaussian, factorized Gaussian, factorized
log-uniform, deterministic, and multiplicative Bernoulli dropout.

The flow-conditioned layers keep a Gaussian weight posterior whose means are
scaled per input unit (dense) or per output filter (conv) by a latent vector
z that is itself pushed through a flow.  Forward passes never sample weights:
they propagate the analytic activation mean and variance and add Gaussian
noise at the activations (one z per call, shared across the minibatch), so
the cost of the flow is independent of batch size.  Explicit weight sampling
exists only as `sample_weights` for brute-force comparisons.

Every forward call draws from its Rng in a fixed order (base noise for z,
one mask per flow step, activation noise), which makes a whole pass
replayable from a seed.  A per-call variance cap, when given, clamps the
weight variances in this likelihood path only; density and divergence
computations elsewhere read the uncapped parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericFault
from .flows import FlowStack, stack_forward


class SigmaCap:
    """Upper bound on weight standard deviations in the likelihood pass."""

    def __init__(self, alpha):
        alpha = float(alpha)
        if not alpha > 0:
            raise ContractError(f"sigma cap: alpha must be positive, got {alpha}")
        self.alpha = alpha

    def __repr__(self):
        return f"SigmaCap({self.alpha})"


class FlowTrace:
    """Stochastic pathway of one forward pass: base draw plus step masks.

    Retaining the pathway lets density terms evaluated later reuse exactly
    the sample that produced the activations.
    """

    def __init__(self, z0, masks):
        self.z0 = z0
        self.masks = list(masks)

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)


def _param(value, name):
    if isinstance(value, ad.Tensor):
        return value
    return ad.parameter(value, name=name)


def _check_finite(layer_name, **arrays):
    for field, tensor in arrays.items():
        if not np.isfinite(tensor.data).all():
            raise ContractError(f"{layer_name}.{field}: parameters must be finite")


class MnfDenseLayer:
    """Dense layer with a flow-conditioned Gaussian weight posterior.

    M and log_var hold per-weight means and log variances [d_in, d_out];
    z (length d_in) scales rows of the mean matrix.  q_flow transforms the
    factorized Gaussian base q(z0) into the posterior over z; r_flow and the
    vectors b1, b2, c parametrize the auxiliary density used by the bound.
    """

    kind = "mnf_dense"

    def __init__(self, M, log_var, bias, q_z0_mean, q_z0_log_var,
                 b1, b2, c, q_flow: FlowStack, r_flow: FlowStack, name="mnf_dense"):
        self.name = name
        self.M = _param(M, f"{name}.M")
        self.log_var = _param(log_var, f"{name}.log_var")
        self.bias = _param(bias, f"{name}.bias")
        self.q_z0_mean = _param(q_z0_mean, f"{name}.q_z0_mean")
        self.q_z0_log_var = _param(q_z0_log_var, f"{name}.q_z0_log_var")
        self.b1 = _param(b1, f"{name}.b1")
        self.b2 = _param(b2, f"{name}.b2")
        self.c = _param(c, f"{name}.c")
        self.q_flow = q_flow
        self.r_flow = r_flow

        if self.M.ndim != 2:
            raise ContractError(f"{name}: M must be a matrix, got shape {self.M.shape}")
        d_in, d_out = self.M.shape
        self.d_in, self.d_out = d_in, d_out
        if self.log_var.shape != (d_in, d_out):
            raise ContractError(f"{name}: log_var shape {self.log_var.shape} != M shape {self.M.shape}")
        if self.bias.shape != (d_out,):
            raise ContractError(f"{name}: bias shape {self.bias.shape} != ({d_out},)")
        for field in ("q_z0_mean", "q_z0_log_var", "b1", "b2", "c"):
            if getattr(self, field).shape != (d_in,):
                raise ContractError(f"{name}: {field} shape {getattr(self, field).shape} != ({d_in},)")
        if q_flow.dim != d_in or r_flow.dim != d_in:
            raise ContractError(
                f"{name}: flow dims q={q_flow.dim}, r={r_flow.dim} must equal d_in={d_in}")
        _check_finite(name, M=self.M, log_var=self.log_var, bias=self.bias,
                      q_z0_mean=self.q_z0_mean, q_z0_log_var=self.q_z0_log_var,
                      b1=self.b1, b2=self.b2, c=self.c)

    @property
    def z_dim(self):
        return self.d_in

    def parameters(self):
        return ([self.M, self.log_var, self.bias, self.q_z0_mean, self.q_z0_log_var,
                 self.b1, self.b2, self.c]
                + self.q_flow.parameters() + self.r_flow.parameters())


class MnfConvLayer:
    """Convolutional layer with a flow-conditioned Gaussian weight posterior.

    Kernel means and log variances have shape [kh, kw, d_c, d_f]; z (length
    d_f) scales whole output filters.  Auxiliary vectors live per filter.
    """

    kind = "mnf_conv"

    def __init__(self, M, log_var, bias, q_z0_mean, q_z0_log_var,
                 b1, b2, c, q_flow: FlowStack, r_flow: FlowStack,
                 padding="same", name="mnf_conv"):
        self.name = name
        self.M = _param(M, f"{name}.M")
        self.log_var = _param(log_var, f"{name}.log_var")
        self.bias = _param(bias, f"{name}.bias")
        self.q_z0_mean = _param(q_z0_mean, f"{name}.q_z0_mean")
        self.q_z0_log_var = _param(q_z0_log_var, f"{name}.q_z0_log_var")
        self.b1 = _param(b1, f"{name}.b1")
        self.b2 = _param(b2, f"{name}.b2")
        self.c = _param(c, f"{name}.c")
        self.q_flow = q_flow
        self.r_flow = r_flow
        if padding not in ("valid", "same"):
            raise ContractError(f"{name}: unknown padding {padding!r}")
        self.padding = padding

        if self.M.ndim != 4:
            raise ContractError(f"{name}: kernel must be rank 4, got shape {self.M.shape}")
        kh, kw, d_c, d_f = self.M.shape
        self.d_f = d_f
        if self.log_var.shape != self.M.shape:
            raise ContractError(f"{name}: log_var shape {self.log_var.shape} != kernel shape {self.M.shape}")
        if self.bias.shape != (d_f,):
            raise ContractError(f"{name}: bias shape {self.bias.shape} != ({d_f},)")
        for field in ("q_z0_mean", "q_z0_log_var", "b1", "b2", "c"):
            if getattr(self, field).shape != (d_f,):
                raise ContractError(f"{name}: {field} shape {getattr(self, field).shape} != ({d_f},)")
        if q_flow.dim != d_f or r_flow.dim != d_f:
            raise ContractError(
                f"{name}: flow dims q={q_flow.dim}, r={r_flow.dim} must equal d_f={d_f}")
        _check_finite(name, M=self.M, log_var=self.log_var, bias=self.bias,
                      q_z0_mean=self.q_z0_mean, q_z0_log_var=self.q_z0_log_var,
                      b1=self.b1, b2=self.b2, c=self.c)

    @property
    def z_dim(self):
        return self.d_f

    def parameters(self):
        return ([self.M, self.log_var, self.bias, self.q_z0_mean, self.q_z0_log_var,
                 self.b1, self.b2, self.c]
                + self.q_flow.parameters() + self.r_flow.parameters())


class FfgDenseLayer:
    """Dense layer with a fully factorized Gaussian weight posterior."""

    kind = "ffg"

    def __init__(self, M, log_var, bias, name="ffg"):
        self.name = name
        self.M = _param(M, f"{name}.M")
        self.log_var = _param(log_var, f"{name}.log_var")
        self.bias = _param(bias, f"{name}.bias")
        if self.M.ndim != 2 or self.log_var.shape != self.M.shape:
            raise ContractError(
                f"{name}: M {self.M.shape} and log_var {self.log_var.shape} must be equal matrices")
        if self.bias.shape != (self.M.shape[1],):
            raise ContractError(f"{name}: bias shape {self.bias.shape} != ({self.M.shape[1]},)")
        self.d_in, self.d_out = self.M.shape
        _check_finite(name, M=self.M, log_var=self.log_var, bias=self.bias)

    def parameters(self):
        return [self.M, self.log_var, self.bias]


class FfluDenseLayer(FfgDenseLayer):
    """Dense layer with additive Gaussian noise under a log-uniform prior.

    Sampling mechanics are identical to the factorized Gaussian layer; only
    the divergence term treats it differently.
    """

    kind = "fflu"

    def __init__(self, M, log_var, bias, name="fflu"):
        super().__init__(M, log_var, bias, name=name)


class DetDenseLayer:
    """Deterministic dense layer; keep_prob records the Bernoulli rate of a
    preceding dropout so its quadratic penalty can be formed."""

    kind = "l2_dense"

    def __init__(self, M, bias, keep_prob=1.0, name="l2_dense"):
        self.name = name
        self.M = _param(M, f"{name}.M")
        self.bias = _param(bias, f"{name}.bias")
        if self.M.ndim != 2 or self.bias.shape != (self.M.shape[1],):
            raise ContractError(
                f"{name}: M {self.M.shape} and bias {self.bias.shape} do not describe a dense layer")
        if not 0.0 <= keep_prob <= 1.0:
            raise ContractError(f"{name}: keep_prob {keep_prob} outside [0, 1]")
        self.keep_prob = float(keep_prob)
        self.d_in, self.d_out = self.M.shape
        _check_finite(name, M=self.M, bias=self.bias)

    def parameters(self):
        return [self.M, self.bias]


class DetConvLayer:
    """Deterministic convolutional layer."""

    kind = "l2_conv"

    def __init__(self, M, bias, keep_prob=1.0, padding="same", name="l2_conv"):
        self.name = name
        self.M = _param(M, f"{name}.M")
        self.bias = _param(bias, f"{name}.bias")
        if self.M.ndim != 4 or self.bias.shape != (self.M.shape[3],):
            raise ContractError(
                f"{name}: kernel {self.M.shape} and bias {self.bias.shape} do not describe a conv layer")
        if padding not in ("valid", "same"):
            raise ContractError(f"{name}: unknown padding {padding!r}")
        if not 0.0 <= keep_prob <= 1.0:
            raise ContractError(f"{name}: keep_prob {keep_prob} outside [0, 1]")
        self.keep_prob = float(keep_prob)
        self.padding = padding
        _check_finite(name, M=self.M, bias=self.bias)

    def parameters(self):
        return [self.M, self.bias]


# ---------------------------------------------------------------------------
# forward passes

def _rewrap_fault(layer, exc):
    return NumericFault(f"{layer.name}:{exc.where}")


def _capped_variance(log_var, cap):
    sigma2 = ad.exp(log_var)
    if cap is None:
        return sigma2
    return ad.minimum(sigma2, cap.alpha ** 2)


def draw_z_sample(layer, rng):
    """Draw (z0, z_Tf, flow_logdet, trace) for a flow-conditioned layer.

    Rng order: base noise first, then one mask per flow step.
    """
    eps = ad.sample(rng, "standard-normal", (layer.z_dim,))
    z0 = ad.add(layer.q_z0_mean, ad.mul(ad.exp(ad.mul(0.5, layer.q_z0_log_var)), eps))
    z_tf, logdet, masks = stack_forward(z0, layer.q_flow, rng=rng)
    return z0, z_tf, logdet, FlowTrace(z0, masks)


def dense_preactivation_moments(H, layer, z=None, cap=None):
    """Mean and variance of the stochastic pre-activations H W.

    z scales the weight means per input unit; variances never see z.
    """
    H = ad.constant(H)
    mean_w = layer.M if z is None else ad.mul(layer.M, ad.reshape(z, (layer.d_in, 1)))
    m_h = ad.matmul(H, mean_w)
    v_h = ad.matmul(ad.square(H), _capped_variance(layer.log_var, cap))
    return m_h, v_h


def conv_preactivation_moments(H, layer, z=None, cap=None):
    """Convolutional analog: z scales whole output filters of the mean kernel."""
    H = ad.constant(H)
    mean_w = layer.M if z is None else ad.mul(layer.M, ad.reshape(z, (1, 1, 1, layer.d_f)))
    m_h = ad.conv2d(H, mean_w, layer.padding)
    v_h = ad.conv2d(ad.square(H), _capped_variance(layer.log_var, cap), layer.padding)
    return m_h, v_h


def mnf_dense_forward(H, layer: MnfDenseLayer, rng, cap=None):
    """One stochastic pass: returns (A, z_Tf, flow_logdet, trace).

    A single z sample is shared by the whole minibatch; activation noise is
    drawn per row.  The variance cap applies here and nowhere else.
    """
    try:
        z0, z_tf, logdet, trace = draw_z_sample(layer, rng)
        m_h, v_h = dense_preactivation_moments(H, layer, z=z_tf, cap=cap)
        noise = ad.sample(rng, "standard-normal", m_h.shape)
        a = ad.add(ad.add(m_h, ad.mul(ad.sqrt(v_h), noise)), layer.bias)
        return a, z_tf, logdet, trace
    except NumericFault as exc:
        raise _rewrap_fault(layer, exc) from exc


def mnf_conv_forward(H, layer: MnfConvLayer, rng, cap=None):
    """Convolutional analog of mnf_dense_forward."""
    try:
        z0, z_tf, logdet, trace = draw_z_sample(layer, rng)
        m_h, v_h = conv_preactivation_moments(H, layer, z=z_tf, cap=cap)
        noise = ad.sample(rng, "standard-normal", m_h.shape)
        a = ad.add(ad.add(m_h, ad.mul(ad.sqrt(v_h), noise)), layer.bias)
        return a, z_tf, logdet, trace
    except NumericFault as exc:
        raise _rewrap_fault(layer, exc) from exc


def ffg_dense_forward(H, layer: FfgDenseLayer, rng, cap=None):
    """Factorized-Gaussian pass: A = H M + sqrt(H^2 Sigma) * noise + bias."""
    try:
        m_h, v_h = dense_preactivation_moments(H, layer, z=None, cap=cap)
        noise = ad.sample(rng, "standard-normal", m_h.shape)
        return ad.add(ad.add(m_h, ad.mul(ad.sqrt(v_h), noise)), layer.bias)
    except NumericFault as exc:
        raise _rewrap_fault(layer, exc) from exc


def fflu_dense_forward(H, layer: FfluDenseLayer, rng):
    """Additive-noise pass for the log-uniform layer; never capped."""
    try:
        m_h, v_h = dense_preactivation_moments(H, layer, z=None, cap=None)
        noise = ad.sample(rng, "standard-normal", m_h.shape)
        return ad.add(ad.add(m_h, ad.mul(ad.sqrt(v_h), noise)), layer.bias)
    except NumericFault as exc:
        raise _rewrap_fault(layer, exc) from exc


def det_dense_forward(H, layer: DetDenseLayer):
    try:
        return ad.add(ad.matmul(ad.constant(H), layer.M), layer.bias)
    except NumericFault as exc:
        raise _rewrap_fault(layer, exc) from exc


def det_conv_forward(H, layer: DetConvLayer):
    try:
        return ad.add(ad.conv2d(ad.constant(H), layer.M, layer.padding), layer.bias)
    except NumericFault as exc:
        raise _rewrap_fault(layer, exc) from exc


def dropout_forward(H, pi, rng, train_flag=True, return_mask=False):
    """Multiplicative Bernoulli mask with inverted scaling: A = H * m / pi.

    Masks stay active whenever train_flag is set, which is also how test
    time predictions are made (averaging over mask draws); train_flag False
    is the deterministic identity.  With return_mask the applied mask array
    (or None when inactive) comes back too, for score-function estimators.
    """
    if not 0.0 < pi <= 1.0:
        raise ContractError(f"dropout: keep probability {pi} outside (0, 1]")
    H = ad.constant(H)
    if not train_flag or pi == 1.0:
        return (H, None) if return_mask else H
    mask = ad.sample(rng, ("bernoulli", pi), H.shape)
    out = ad.mul(H, ad.mul(mask, 1.0 / pi))
    return (out, mask.data) if return_mask else out


def sample_weights(layer, z, rng):
    """Draw one explicit weight tensor from the conditional posterior q(W|z).

    Dense: W[i, j] ~ N(z[i] M[i, j], Sigma[i, j]); conv: z indexes output
    filters.  For layers without z (pass z=None) the mean is M itself.
    Uncapped; detached from the graph (oracle/brute-force use only).
    """
    with ad.no_grad():
        m = layer.M.data
        sd = np.exp(0.5 * layer.log_var.data)
        if z is None:
            mean = m
        else:
            z = np.asarray(z.data if isinstance(z, ad.Tensor) else z)
            if isinstance(layer, MnfConvLayer):
                if z.shape != (layer.d_f,):
                    raise ContractError(
                        f"sample_weights: z shape {z.shape} != ({layer.d_f},)")
                mean = m * z.reshape(1, 1, 1, layer.d_f)
            else:
                if z.shape != (layer.d_in,):
                    raise ContractError(
                        f"sample_weights: z shape {z.shape} != ({layer.d_in},)")
                mean = m * z.reshape(layer.d_in, 1)
        return ad.constant(mean + sd * rng.normal(m.shape))
