"""Masked affine flow steps with analytic log-determinants.

Each step splits coordinates by a binary mask: masked coordinates pass
through untouched and drive a tanh hidden layer that produces a shift and a
gate for the remaining coordinates.  The gate is a sigmoid, so the update is
monotone in every unmasked coordinate and the Jacobian is triangular with a
positive diagonal; its log-determinant is the sum of the gate logs over the
unmasked coordinates, read off the same pass that produced the sample.

A stack composes steps, drawing a fresh Bernoulli(0.5) mask per step per
call (or accepting forced masks for replay), and returns the mask trace so
one stochastic pathway can be shared by every density term that needs it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError

_LOG_2PI = float(np.log(2.0 * np.pi))

# gate floor: keeps log(sigma) finite even if the gate saturates early in
# training; sigmoid output is clamped to [SIGMA_FLOOR, 1 - SIGMA_FLOOR]
SIGMA_FLOOR = 1e-7


class AffineMap:
    """y = x @ weight + bias, with weight [d_in, d_out] and bias [d_out]."""

    def __init__(self, weight, bias):
        self.weight = weight if isinstance(weight, ad.Tensor) else ad.parameter(weight)
        self.bias = bias if isinstance(bias, ad.Tensor) else ad.parameter(bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ContractError(
                f"affine map: weight {self.weight.shape} and bias {self.bias.shape} "
                "do not describe a linear layer")

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class FlowStep:
    """One masked affine update of dimensionality `dim`.

    f_map feeds the masked coordinates to a hidden layer (dim -> n_hidden);
    g_map and k_map read the shift and the gate back out (n_hidden -> dim).
    """

    def __init__(self, f_map: AffineMap, g_map: AffineMap, k_map: AffineMap):
        if g_map.d_in != f_map.d_out or k_map.d_in != f_map.d_out:
            raise ContractError(
                f"flow step: hidden width mismatch, f out {f_map.d_out}, "
                f"g in {g_map.d_in}, k in {k_map.d_in}")
        if g_map.d_out != f_map.d_in or k_map.d_out != f_map.d_in:
            raise ContractError(
                f"flow step: dimensionality mismatch, f in {f_map.d_in}, "
                f"g out {g_map.d_out}, k out {k_map.d_out}")
        self.f_map = f_map
        self.g_map = g_map
        self.k_map = k_map
        self.dim = f_map.d_in
        self.n_hidden = f_map.d_out

    def parameters(self):
        return self.f_map.parameters() + self.g_map.parameters() + self.k_map.parameters()


class FlowStack:
    """Ordered composition of FlowSteps sharing one dimensionality."""

    def __init__(self, steps, dim=None):
        self.steps = list(steps)
        if self.steps:
            dims = {s.dim for s in self.steps}
            if len(dims) != 1:
                raise ContractError(f"flow stack: steps disagree on dimensionality {sorted(dims)}")
            self.dim = self.steps[0].dim
            if dim is not None and dim != self.dim:
                raise ContractError(f"flow stack: dim {dim} but steps have {self.dim}")
        else:
            if dim is None:
                raise ContractError("flow stack: empty stack needs an explicit dim")
            self.dim = int(dim)

    def __len__(self):
        return len(self.steps)

    def parameters(self):
        return [p for s in self.steps for p in s.parameters()]


def _as_rows(z, dim, op):
    z = ad.constant(z)
    if not np.isfinite(z.data).all():
        raise ContractError(f"{op}: input contains non-finite values")
    if z.ndim == 1:
        if z.shape != (dim,):
            raise ContractError(f"{op}: input shape {z.shape} does not match dim {dim}")
        return ad.reshape(z, (1, dim)), True
    if z.ndim == 2 and z.shape[1] == dim:
        return z, False
    raise ContractError(f"{op}: input shape {z.shape} does not match dim {dim}")


def _check_mask(mask, dim, op):
    mask = np.asarray(mask, dtype=ad.default_dtype())
    if mask.shape != (dim,):
        raise ContractError(f"{op}: mask shape {mask.shape} does not match dim {dim}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractError(f"{op}: mask entries must be 0 or 1")
    return mask


def step_forward(z, mask, step: FlowStep):
    """Apply one masked affine update.

    Accepts a vector [dim] (returns scalar logdet) or a row batch [n, dim]
    sharing the mask (returns per-row logdet [n]).  Masked coordinates are
    copied through exactly; the rest are gated toward a learned shift.
    """
    rows, single = _as_rows(z, step.dim, "step_forward")
    mask = _check_mask(mask, step.dim, "step_forward")
    m = ad.constant(mask)
    free = ad.constant(1.0 - mask)

    h = ad.tanh(step.f_map(ad.mul(rows, m)))
    shift = step.g_map(h)
    gate = ad.clip(ad.sigmoid(step.k_map(h)), SIGMA_FLOOR, 1.0 - SIGMA_FLOOR)
    moved = ad.add(ad.mul(rows, gate), ad.mul(ad.sub(1.0, gate), shift))
    z_next = ad.add(ad.mul(rows, m), ad.mul(moved, free))
    logdet = ad.sum_(ad.mul(free, ad.log(gate)), axis=1)
    if single:
        return ad.reshape(z_next, (step.dim,)), ad.reshape(logdet, ())
    return z_next, logdet


def stack_forward(z0, stack: FlowStack, rng=None, masks=None):
    """Run the whole stack, resampling a Bernoulli(0.5) mask per step.

    Pass `masks` (one binary vector per step) to force a specific trace,
    e.g. to replay a recorded pathway.  Returns (z_T, sum_logdet,
    mask_trace); an empty stack is the identity with zero logdet.
    """
    rows, single = _as_rows(z0, stack.dim, "stack_forward")
    if masks is not None:
        masks = list(masks)
        if len(masks) != len(stack.steps):
            raise ContractError(
                f"stack_forward: {len(masks)} masks for {len(stack.steps)} steps")
    elif stack.steps and rng is None:
        raise ContractError("stack_forward: need an rng when masks are not forced")

    z = rows
    total = None
    trace = []
    for t, step in enumerate(stack.steps):
        mask = masks[t] if masks is not None else rng.bernoulli(0.5, (stack.dim,))
        mask = _check_mask(mask, stack.dim, "stack_forward")
        trace.append(mask.copy())
        z, logdet = step_forward(z, mask, step)
        total = logdet if total is None else ad.add(total, logdet)
    if total is None:
        total = ad.constant(np.zeros(rows.shape[0]))
    if single:
        return ad.reshape(z, (stack.dim,)), ad.reshape(total, ()), trace
    return z, total, trace


def log_density_factorized_gaussian(z, mean, log_var):
    """Log density of independent Gaussians, summed over coordinates.

    z may be a vector [d] (scalar result) or rows [n, d] (result [n]);
    mean and log_var are [d].  All three arguments receive gradients.
    """
    z = ad.constant(z)
    mean = ad.constant(mean)
    log_var = ad.constant(log_var)
    if mean.shape != log_var.shape:
        raise ContractError(
            f"gaussian log density: mean {mean.shape} vs log_var {log_var.shape}")
    if z.shape[-1:] != mean.shape[-1:]:
        raise ContractError(
            f"gaussian log density: z {z.shape} vs mean {mean.shape}")
    quad = ad.mul(ad.square(ad.sub(z, mean)), ad.mul(0.5, ad.exp(ad.neg(log_var))))
    terms = ad.sub(ad.mul(-0.5, ad.add(_LOG_2PI, log_var)), quad)
    return ad.sum_(terms, axis=None if z.ndim == 1 else 1)


def init_flow_stack(dim, n_hidden, n_steps, rng, name="flow"):
    """Build a stack that starts near the identity.

    The hidden layer gets fan-in-scaled Gaussian weights; the shift head is
    zero, and the gate head is zero weights with bias +2 so every gate opens
    around 0.88 and no coordinate collapses at the first update.
    """
    if dim < 1 or n_hidden < 1 or n_steps < 0:
        raise ContractError(
            f"flow init: invalid sizes dim={dim}, n_hidden={n_hidden}, n_steps={n_steps}")
    steps = []
    for t in range(n_steps):
        w_f = rng.child(t).normal((dim, n_hidden)) / np.sqrt(dim)
        prefix = f"{name}.step{t}"
        f_map = AffineMap(ad.parameter(w_f, name=f"{prefix}.f.weight"),
                          ad.parameter(np.zeros(n_hidden), name=f"{prefix}.f.bias"))
        g_map = AffineMap(ad.parameter(np.zeros((n_hidden, dim)), name=f"{prefix}.g.weight"),
                          ad.parameter(np.zeros(dim), name=f"{prefix}.g.bias"))
        k_map = AffineMap(ad.parameter(np.zeros((n_hidden, dim)), name=f"{prefix}.k.weight"),
                          ad.parameter(np.full(dim, 2.0), name=f"{prefix}.k.bias"))
        steps.append(FlowStep(f_map, g_map, k_map))
    return FlowStack(steps, dim=dim)
