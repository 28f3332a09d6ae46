"""Predictive-distribution estimation and every reported measurement:
entropy CDFs, sign-method adversarial sweeps, rotation sweeps, regression
bands, weight sparsity, and the shuffled-label memorization protocol.

All operations are read-only on the model.  Posterior samples draw from
split rng streams keyed by (sample index, row chunk), so results do not
depend on the evaluation thread count; set MNF_THREADS to parallelize
across row chunks.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, backward
from .errors import ContractError
from .imageops import rotate

_CHUNK_ROWS = 256


def _thread_count():
    raw = os.environ.get("MNF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"MNF_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ContractError(f"MNF_THREADS must be >= 1, got {n}")
    return n


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _entropy_rows(probs):
    # 0 * log 0 contributes nothing
    logs = np.log(np.where(probs > 0.0, probs, 1.0))
    return -(probs * logs).sum(axis=-1)


class PredictiveSummary:
    """Averaged class probabilities and rowwise entropies (nats)."""

    def __init__(self, probs, n_samples):
        self.probs = np.asarray(probs, dtype=float)
        self.n_samples = int(n_samples)
        row_sums = self.probs.sum(axis=-1)
        if not np.all(np.abs(row_sums - 1.0) <= 1e-9):
            raise ContractError("predictive rows must sum to 1 within 1e-9")
        if not np.all(self.probs >= 0.0):
            raise ContractError("predictive probabilities must be nonnegative")
        self.entropy = _entropy_rows(self.probs)

    @property
    def n_classes(self):
        return self.probs.shape[-1]


def predict(model, X, S, rng, sample_offset=0) -> PredictiveSummary:
    """Average the softmax outputs of S stochastic forward passes.

    Sample s on row chunk c draws from rng.child(sample_offset + s, c);
    passing the offset lets disjoint calls continue one stream, so
    predictions over S = a then S = b (offset a) average to the S = a + b
    result up to float addition order.
    """
    if S < 1:
        raise ContractError(f"predict: S must be >= 1, got {S}")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 0:
        raise ContractError("predict: no inputs")
    chunks = [(c, slice(start, min(start + _CHUNK_ROWS, n)))
              for c, start in enumerate(range(0, n, _CHUNK_ROWS))]
    threads = _thread_count()

    accum = None

    def run_chunk(s, c, sl):
        out, _ = model.forward(X[sl], rng.child(sample_offset + s, c), train=True)
        return _softmax(out.data)

    with ad.no_grad():
        for s in range(S):
            if threads == 1 or len(chunks) == 1:
                parts = [run_chunk(s, c, sl) for c, sl in chunks]
            else:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    parts = list(pool.map(lambda cs: run_chunk(s, *cs), chunks))
            if accum is None:
                accum = np.zeros((n, parts[0].shape[-1]))
            for (c, sl), part in zip(chunks, parts):
                accum[sl] += part
    return PredictiveSummary(accum / S, S)


class EntropyCdf:
    """Empirical CDF of predictive entropies on an even grid."""

    def __init__(self, grid, cdf):
        self.grid = np.asarray(grid, dtype=float)
        self.cdf = np.asarray(cdf, dtype=float)
        if self.grid.shape != self.cdf.shape:
            raise ContractError("entropy cdf: grid and values must align")
        if np.any(np.diff(self.grid) <= 0):
            raise ContractError("entropy cdf: grid must increase")
        if np.any(np.diff(self.cdf) < 0):
            raise ContractError("entropy cdf: values must be nondecreasing")
        if abs(self.cdf[-1] - 1.0) > 1e-12:
            raise ContractError("entropy cdf: terminal value must be 1")

    def median(self):
        """Smallest grid point with cdf >= 0.5."""
        return float(self.grid[np.searchsorted(self.cdf, 0.5, side="left")])


def entropy_cdf(entropies, grid_resolution=256, grid_max=None) -> EntropyCdf:
    """Fraction of entropies at or below each of grid_resolution even points.

    The grid spans [0, grid_max]; the default grid_max is ln 10 (ten-class
    tasks).  Pass the ln of the class count for other models.
    """
    e = np.asarray(entropies, dtype=float).reshape(-1)
    if e.size == 0:
        raise ContractError("entropy_cdf: no entropies given")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise ContractError("entropy_cdf: entropies must be finite and nonnegative")
    if grid_resolution < 2:
        raise ContractError(f"entropy_cdf: grid_resolution must be >= 2, got {grid_resolution}")
    if grid_max is None:
        grid_max = float(np.log(10.0))
    if e.max() > grid_max:
        raise ContractError(f"entropy_cdf: entropy {e.max():.4f} exceeds grid maximum "
                            f"{grid_max:.4f}; pass grid_max explicitly")
    grid = np.linspace(0.0, grid_max, grid_resolution)
    ordered = np.sort(e)
    cdf = np.searchsorted(ordered, grid, side="right") / e.size
    return EntropyCdf(grid, cdf)


def fgsm(model, x, y, epsilon, s_grad=1, rng=None):
    """One-step sign-method perturbation within an infinity-norm budget.

    Moves each input coordinate by epsilon along the sign of the gradient
    of the negative log-likelihood, then clips back to [0, 1].  The
    gradient averages s_grad stochastic passes (default one).
    """
    if epsilon < 0:
        raise ContractError(f"fgsm: epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if x.min() < 0.0 or x.max() > 1.0:
        raise ContractError("fgsm: inputs must lie in [0, 1]")
    if rng is None:
        rng = Rng(0)
    leaf = ad.parameter(x.copy(), "fgsm_input")
    grad = np.zeros_like(x)
    n = x.shape[0]
    for s in range(s_grad):
        out, _ = model.forward(leaf, rng.child(s), train=True)
        n_classes = out.shape[-1]
        log_probs = ad.log_softmax(out)
        picked = ad.gather(log_probs, np.arange(n) * n_classes + y)
        nll = ad.neg(ad.sum_(picked))
        grad += backward(nll)[leaf]
    grad /= s_grad
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def adversarial_sweep(model, dataset, epsilons, S=20, rng=None, s_grad=1):
    """Accuracy and mean predictive entropy per perturbation size.

    Returns CSV-ready rows [{"epsilon", "accuracy", "mean_entropy"}, ...].
    """
    epsilons = list(epsilons)
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ContractError("adversarial_sweep: epsilons must be nondecreasing")
    if rng is None:
        rng = Rng(0)
    X = np.asarray(dataset[0], dtype=float)
    y = np.asarray(dataset[1])
    rows = []
    for j, eps in enumerate(epsilons):
        x_adv = fgsm(model, X, y, eps, s_grad=s_grad, rng=rng.child(0, j))
        summary = predict(model, x_adv, S, rng.child(1, j))
        pred = summary.probs.argmax(axis=1)
        rows.append({"epsilon": float(eps),
                     "accuracy": float((pred == y).mean()),
                     "mean_entropy": float(summary.entropy.mean())})
    return rows


def _image_batch(model, images):
    """Shape rotated images for the model's first weight layer."""
    arr = np.asarray(images, dtype=float)
    if arr.ndim == 3:
        arr = arr[:, :, :, None]
    first = model.weight_blocks()[0].kind
    if first.endswith("conv"):
        return arr
    return arr.reshape(arr.shape[0], -1)


def rotated_digit_sweep(model, image, angles, S, rng=None, method="bilinear"):
    """Per-angle predictive distribution for one continuously rotated image.

    Returns rows [{"angle", "probs", "entropy", "max_prob"}, ...].
    """
    img = np.asarray(image, dtype=float)
    if rng is None:
        rng = Rng(0)
    rows = []
    for a, angle in enumerate(angles):
        rot = rotate(img, angle, method=method)
        batch = _image_batch(model, rot[None, ...])
        summary = predict(model, batch, S, rng.child(a))
        rows.append({"angle": float(angle),
                     "probs": summary.probs[0].tolist(),
                     "entropy": float(summary.entropy[0]),
                     "max_prob": float(summary.probs[0].max())})
    return rows


def regression_bands(model, x_grid, S, rng=None):
    """Predictive mean and total std per grid point for scalar regression.

    The spread over S samples combines with the fixed likelihood noise in
    quadrature, so a deterministic model reports exactly the noise std.
    """
    if S < 2:
        raise ContractError(f"regression_bands: S must be >= 2, got {S}")
    if model.likelihood != "gaussian":
        raise ContractError("regression_bands: model must be a regression model")
    x_grid = np.asarray(x_grid, dtype=float).reshape(-1)
    if rng is None:
        rng = Rng(0)
    X = x_grid[:, None]
    preds = []
    with ad.no_grad():
        for s in range(S):
            out, _ = model.forward(X, rng.child(s), train=True)
            preds.append(out.data.reshape(-1))
    stacked = np.stack(preds)
    mean = stacked.mean(axis=0)
    std = np.sqrt(stacked.var(axis=0) + model.noise_var)
    return [{"x": float(x), "mean": float(m), "std": float(s)}
            for x, m, s in zip(x_grid, mean, std)]


def sparsity(fflu_layer, threshold=5.0):
    """Fraction of weights whose noise-to-signal log ratio clears the
    pruning threshold."""
    if getattr(fflu_layer, "kind", None) != "fflu":
        raise ContractError("sparsity: layer must use the additive log-uniform "
                            "parametrization")
    mu2 = np.maximum(fflu_layer.M.data ** 2, 1e-16)
    log_alpha = fflu_layer.log_var.data - np.log(mu2)
    return float((log_alpha >= threshold).mean())


def memorization_protocol(spec, dataset, seed, test_set=None, config=None):
    """Train on label-shuffled data and report train/test accuracy.

    A well-regularized posterior cannot memorize shuffled labels, so train
    accuracy should sit near chance; test accuracy uses the untouched
    labels of test_set when given.
    """
    from .training import TrainConfig, train

    X = np.asarray(dataset[0], dtype=float)
    y = np.asarray(dataset[1])
    perm = Rng(seed).child(0).permutation(y.shape[0])
    y_shuffled = y[perm]
    if config is None:
        config = TrainConfig(epochs=20, batch_size=128, seed=seed)
    model, _ = train(spec, (X, y_shuffled), config)

    def accuracy(inputs, labels, stream):
        summary = predict(model, inputs, 10, stream)
        return float((summary.probs.argmax(axis=1) == labels).mean())

    n_classes = int(y.max()) + 1
    result = {"train_acc": accuracy(X, y_shuffled, Rng(seed).child(4)),
              "test_acc": None,
              "chance": 1.0 / n_classes}
    if test_set is not None:
        result["test_acc"] = accuracy(np.asarray(test_set[0], dtype=float),
                                      np.asarray(test_set[1]), Rng(seed).child(5))
    return result
