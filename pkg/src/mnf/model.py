"""Model assembly: layer descriptors, block construction, initialization,
and the stochastic forward pass shared by training and evaluation.

A model is an ordered list of blocks.  Weight blocks come from the layer
module; relu/maxpool/flatten are thin wrappers over tensor primitives; a
dropout block carries its keep probability (as a logit when the probability
is itself being learned).  `Model.forward` hands block i the rng stream
child(i), so a whole pass is replayable from one seed no matter how blocks
are mixed, and returns per-block pass records that the objective later
consumes (latent samples and densities for flow layers, masks for learnable
dropout).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .errors import ConfigError, ContractError
from .flows import init_flow_stack

WEIGHT_KINDS = ("mnf_dense", "mnf_conv", "ffg", "fflu", "l2_dense", "l2_conv")
OTHER_KINDS = ("dropout", "relu", "maxpool", "flatten")
LIKELIHOODS = ("categorical", "gaussian")


@dataclass
class LayerSpec:
    """Descriptor for one block; only the fields its kind reads are used."""

    kind: str
    d_in: int = None
    d_out: int = None
    kernel: tuple = None
    d_c: int = None
    d_f: int = None
    padding: str = "same"
    t_f: int = 2
    t_b: int = 2
    q_hidden: int = 50
    r_hidden: int = 100
    keep_prob: float = 0.5
    learnable: bool = False

    def to_dict(self):
        d = asdict(self)
        if d["kernel"] is not None:
            d["kernel"] = list(d["kernel"])
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if d.get("kernel") is not None:
            d["kernel"] = tuple(int(k) for k in d["kernel"])
        return LayerSpec(**d)


@dataclass
class ModelSpec:
    """Full architecture plus likelihood and the likelihood-path cap."""

    layers: list
    likelihood: str = "categorical"
    noise_var: float = 9.0
    cap_alpha: float = None

    def to_dict(self):
        return {"layers": [l.to_dict() for l in self.layers],
                "likelihood": self.likelihood,
                "noise_var": self.noise_var,
                "cap_alpha": self.cap_alpha}

    @staticmethod
    def from_dict(d):
        return ModelSpec(layers=[LayerSpec.from_dict(l) for l in d["layers"]],
                         likelihood=d.get("likelihood", "categorical"),
                         noise_var=float(d.get("noise_var", 9.0)),
                         cap_alpha=d.get("cap_alpha"))


def validate_spec(spec: ModelSpec):
    """Collect every problem in a ModelSpec; empty list means valid."""
    problems = []
    if not spec.layers:
        problems.append("layers: model has no layers")
    if spec.likelihood not in LIKELIHOODS:
        problems.append(f"likelihood: unknown kind {spec.likelihood!r}")
    if spec.cap_alpha is not None and not spec.cap_alpha > 0:
        problems.append(f"cap_alpha: must be positive, got {spec.cap_alpha}")
    if spec.likelihood == "gaussian" and not spec.noise_var > 0:
        problems.append(f"noise_var: must be positive, got {spec.noise_var}")

    prev_units = None    # output width of the last dense-like layer
    prev_channels = None  # channel count of the last conv-like layer
    for i, l in enumerate(spec.layers):
        where = f"layers[{i}] ({l.kind})"
        if l.kind not in WEIGHT_KINDS + OTHER_KINDS:
            problems.append(f"{where}: unknown kind")
            continue
        if l.kind in ("mnf_dense", "ffg", "fflu", "l2_dense"):
            if not (l.d_in and l.d_out and l.d_in > 0 and l.d_out > 0):
                problems.append(f"{where}: d_in/d_out must be positive")
                continue
            if prev_units is not None and prev_units != l.d_in:
                problems.append(f"{where}: d_in {l.d_in} != previous width {prev_units}")
            prev_units, prev_channels = l.d_out, None
        elif l.kind in ("mnf_conv", "l2_conv"):
            if not (l.kernel and len(l.kernel) == 2 and min(l.kernel) > 0
                    and l.d_c and l.d_f and l.d_c > 0 and l.d_f > 0):
                problems.append(f"{where}: kernel/d_c/d_f must be positive")
                continue
            if l.padding not in ("valid", "same"):
                problems.append(f"{where}: padding {l.padding!r} not valid/same")
            if prev_channels is not None and prev_channels != l.d_c:
                problems.append(f"{where}: d_c {l.d_c} != previous channels {prev_channels}")
            prev_channels, prev_units = l.d_f, None
        elif l.kind == "dropout":
            if not 0.0 < l.keep_prob <= 1.0:
                problems.append(f"{where}: keep_prob {l.keep_prob} outside (0, 1]")
            if l.learnable and not l.keep_prob < 1.0:
                problems.append(f"{where}: learnable keep_prob must start inside (0, 1)")
        elif l.kind == "flatten":
            prev_units, prev_channels = None, None
        if l.kind in ("mnf_dense", "mnf_conv"):
            if l.t_f < 0 or l.t_b < 0:
                problems.append(f"{where}: flow lengths must be >= 0")
            if l.q_hidden < 1 or l.r_hidden < 1:
                problems.append(f"{where}: flow hidden widths must be >= 1")
    return problems


# ---------------------------------------------------------------------------
# non-weight blocks

class ReluBlock:
    kind = "relu"

    def parameters(self):
        return []


class MaxPoolBlock:
    kind = "maxpool"

    def parameters(self):
        return []


class FlattenBlock:
    kind = "flatten"

    def parameters(self):
        return []


class DropoutBlock:
    """Multiplicative Bernoulli masking with an optionally learnable rate.

    A learnable rate is stored as a logit so score-function updates keep the
    keep probability inside (0, 1).
    """

    kind = "dropout"

    def __init__(self, keep_prob, learnable=False):
        if not 0.0 < keep_prob <= 1.0:
            raise ContractError(f"dropout block: keep_prob {keep_prob} outside (0, 1]")
        if learnable and not keep_prob < 1.0:
            raise ContractError("dropout block: learnable keep_prob must start inside (0, 1)")
        self.learnable = bool(learnable)
        if learnable:
            self.logit = float(np.log(keep_prob) - np.log1p(-keep_prob))
        else:
            self._keep_prob = float(keep_prob)

    @property
    def keep_prob(self):
        if self.learnable:
            return float(1.0 / (1.0 + np.exp(-self.logit)))
        return self._keep_prob

    def parameters(self):
        return []


# ---------------------------------------------------------------------------
# pass records

class WeightPass:
    """What one weight block contributed to a forward pass.

    For flow layers this carries the sampled pathway and the rng stream,
    already advanced past the likelihood draws, so divergence terms continue
    the same stream.
    """

    def __init__(self, layer, rng=None, z0=None, z_tf=None, flow_logdet=None, trace=None):
        self.layer = layer
        self.rng = rng
        self.z0 = z0
        self.z_tf = z_tf
        self.flow_logdet = flow_logdet
        self.trace = trace

    @property
    def kind(self):
        return self.layer.kind


class DropoutPass:
    """Mask actually applied by a dropout block (None when inactive)."""

    def __init__(self, block, mask):
        self.block = block
        self.mask = mask

    kind = "dropout"


class Model:
    """An ordered block list plus likelihood settings."""

    def __init__(self, blocks, likelihood="categorical", noise_var=9.0, cap=None, spec=None):
        if likelihood not in LIKELIHOODS:
            raise ContractError(f"model: unknown likelihood {likelihood!r}")
        self.blocks = list(blocks)
        self.likelihood = likelihood
        self.noise_var = float(noise_var)
        self.cap = cap
        self.spec = spec

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def weight_blocks(self):
        return [b for b in self.blocks if b.kind in WEIGHT_KINDS]

    def dropout_blocks(self):
        return [b for b in self.blocks if b.kind == "dropout"]

    def forward(self, X, rng, train=True):
        """One stochastic pass; block i draws from rng.child(i).

        Returns (output tensor, pass records in block order).
        """
        h = ad.constant(X)
        passes = []
        for i, block in enumerate(self.blocks):
            if block.kind == "mnf_dense":
                r = rng.child(i)
                h, z_tf, logdet, trace = ly.mnf_dense_forward(h, block, r, self.cap)
                passes.append(WeightPass(block, rng=r, z0=trace.z0, z_tf=z_tf,
                                         flow_logdet=logdet, trace=trace))
            elif block.kind == "mnf_conv":
                r = rng.child(i)
                h, z_tf, logdet, trace = ly.mnf_conv_forward(h, block, r, self.cap)
                passes.append(WeightPass(block, rng=r, z0=trace.z0, z_tf=z_tf,
                                         flow_logdet=logdet, trace=trace))
            elif block.kind == "fflu":
                h = ly.fflu_dense_forward(h, block, rng.child(i))
                passes.append(WeightPass(block))
            elif block.kind == "ffg":
                h = ly.ffg_dense_forward(h, block, rng.child(i), self.cap)
                passes.append(WeightPass(block))
            elif block.kind == "l2_dense":
                h = ly.det_dense_forward(h, block)
                passes.append(WeightPass(block))
            elif block.kind == "l2_conv":
                h = ly.det_conv_forward(h, block)
                passes.append(WeightPass(block))
            elif block.kind == "dropout":
                pi = block.keep_prob
                if train and pi < 1.0:
                    h, mask = ly.dropout_forward(h, pi, rng.child(i), True, return_mask=True)
                    passes.append(DropoutPass(block, mask))
                else:
                    passes.append(DropoutPass(block, None))
            elif block.kind == "relu":
                h = ad.relu(h)
            elif block.kind == "maxpool":
                h = ad.maxpool2x2(h)
            elif block.kind == "flatten":
                h = ad.reshape(h, (h.shape[0], -1))
            else:
                raise ContractError(f"model: unknown block kind {block.kind!r}")
        return h, passes


# ---------------------------------------------------------------------------
# initialization

def _he_std(fan_in):
    return np.sqrt(2.0 / fan_in)

LOG_VAR_INIT_MEAN = -9.0
LOG_VAR_INIT_STD = np.sqrt(0.001)
AUX_INIT_STD = 0.01


def init_model(spec: ModelSpec, rng) -> Model:
    """Build and initialize a model from its spec.

    Weight means use fan-in-scaled Gaussians; log variances start tightly
    around -9 so every posterior begins nearly deterministic; the latent
    scale starts at the constant 1 so means are not washed out; auxiliary
    vectors start near zero.
    """
    problems = validate_spec(spec)
    if problems:
        raise ConfigError(problems)

    blocks = []
    for i, l in enumerate(spec.layers):
        r = rng.child(i)
        name = f"layer{i}_{l.kind}"
        if l.kind in ("mnf_dense", "ffg", "fflu", "l2_dense"):
            m = r.child(0).normal((l.d_in, l.d_out)) * _he_std(l.d_in)
            bias = np.zeros(l.d_out)
            if l.kind == "l2_dense":
                blocks.append(ly.DetDenseLayer(m, bias, keep_prob=1.0, name=name))
                continue
            log_var = LOG_VAR_INIT_MEAN + LOG_VAR_INIT_STD * r.child(1).normal((l.d_in, l.d_out))
            if l.kind == "ffg":
                blocks.append(ly.FfgDenseLayer(m, log_var, bias, name=name))
                continue
            if l.kind == "fflu":
                blocks.append(ly.FfluDenseLayer(m, log_var, bias, name=name))
                continue
            blocks.append(ly.MnfDenseLayer(
                M=m, log_var=log_var, bias=bias,
                q_z0_mean=np.ones(l.d_in), q_z0_log_var=np.full(l.d_in, -9.0),
                b1=AUX_INIT_STD * r.child(2).normal((l.d_in,)),
                b2=AUX_INIT_STD * r.child(3).normal((l.d_in,)),
                c=AUX_INIT_STD * r.child(4).normal((l.d_in,)),
                q_flow=init_flow_stack(l.d_in, l.q_hidden, l.t_f, r.child(5), name=f"{name}.qflow"),
                r_flow=init_flow_stack(l.d_in, l.r_hidden, l.t_b, r.child(6), name=f"{name}.rflow"),
                name=name))
        elif l.kind in ("mnf_conv", "l2_conv"):
            kh, kw = l.kernel
            fan_in = kh * kw * l.d_c
            m = r.child(0).normal((kh, kw, l.d_c, l.d_f)) * _he_std(fan_in)
            bias = np.zeros(l.d_f)
            if l.kind == "l2_conv":
                blocks.append(ly.DetConvLayer(m, bias, keep_prob=1.0,
                                              padding=l.padding, name=name))
                continue
            log_var = LOG_VAR_INIT_MEAN + LOG_VAR_INIT_STD * r.child(1).normal(m.shape)
            blocks.append(ly.MnfConvLayer(
                M=m, log_var=log_var, bias=bias,
                q_z0_mean=np.ones(l.d_f), q_z0_log_var=np.full(l.d_f, -9.0),
                b1=AUX_INIT_STD * r.child(2).normal((l.d_f,)),
                b2=AUX_INIT_STD * r.child(3).normal((l.d_f,)),
                c=AUX_INIT_STD * r.child(4).normal((l.d_f,)),
                q_flow=init_flow_stack(l.d_f, l.q_hidden, l.t_f, r.child(5), name=f"{name}.qflow"),
                r_flow=init_flow_stack(l.d_f, l.r_hidden, l.t_b, r.child(6), name=f"{name}.rflow"),
                padding=l.padding, name=name))
        elif l.kind == "dropout":
            blocks.append(DropoutBlock(l.keep_prob, learnable=l.learnable))
        elif l.kind == "relu":
            blocks.append(ReluBlock())
        elif l.kind == "maxpool":
            blocks.append(MaxPoolBlock())
        elif l.kind == "flatten":
            blocks.append(FlattenBlock())
    cap = ly.SigmaCap(spec.cap_alpha) if spec.cap_alpha is not None else None
    return Model(blocks, likelihood=spec.likelihood, noise_var=spec.noise_var,
                 cap=cap, spec=spec)


def mlp_spec(d_in, hidden, d_out, kind="mnf_dense", likelihood="categorical",
             cap_alpha=None, noise_var=9.0, keep_prob=0.5, learnable_dropout=False,
             t_f=2, t_b=2):
    """Convenience builder: fully connected net with relu between layers.

    kind selects the weight posterior family; "dropout" builds deterministic
    layers with a mask block before each hidden weight layer, "l2" plain
    deterministic layers.
    """
    weight_kind = {"mnf_dense": "mnf_dense", "mnf": "mnf_dense", "ffg": "ffg",
                   "fflu": "fflu", "l2": "l2_dense", "dropout": "l2_dense"}[kind]
    widths = [d_in] + list(hidden) + [d_out]
    layer_list = []
    for j in range(len(widths) - 1):
        if kind == "dropout" and j > 0:
            layer_list.append(LayerSpec("dropout", keep_prob=keep_prob,
                                        learnable=learnable_dropout))
        layer_list.append(LayerSpec(weight_kind, d_in=widths[j], d_out=widths[j + 1],
                                    t_f=t_f, t_b=t_b))
        if j < len(widths) - 2:
            layer_list.append(LayerSpec("relu"))
    return ModelSpec(layers=layer_list, likelihood=likelihood,
                     noise_var=noise_var, cap_alpha=cap_alpha)
