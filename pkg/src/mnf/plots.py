"""Figure rendering for the command-line reports.

Every function writes a single PNG to the given path and returns that path.
The library's evaluation code stays free of plotting; only the CLI report
path comes through here.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

_DPI = 120


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def training_curve(records, path):
    """Objective and data-fit traces over optimization steps."""
    steps = [r["step"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(steps, [r["elbo"] for r in records], lw=1.0)
    ax1.set_xlabel("step")
    ax1.set_ylabel("objective (nats)")
    ax2.plot(steps, [r["ll"] for r in records], lw=1.0, color="tab:orange")
    ax2.set_xlabel("step")
    ax2.set_ylabel("scaled log-likelihood (nats)")
    return _finish(fig, path)


def entropy_cdf_plot(curves, path):
    """Empirical CDFs of predictive entropy, one labelled line per model."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        ax.plot(curve.grid, curve.cdf, lw=1.2, label=label)
    ax.set_xlabel("predictive entropy (nats)")
    ax.set_ylabel("empirical CDF")
    ax.set_ylim(0.0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    return _finish(fig, path)


def adversarial_plot(rows, path):
    """Accuracy and mean predictive entropy as the attack strength grows."""
    eps = [r["epsilon"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(eps, [r["accuracy"] for r in rows], "o-", label="accuracy")
    ax.set_xlabel("perturbation size")
    ax.set_ylabel("accuracy", color="tab:blue")
    ax.set_ylim(-0.02, 1.02)
    twin = ax.twinx()
    twin.plot(eps, [r["mean_entropy"] for r in rows], "s--",
              color="tab:red", label="mean entropy")
    twin.set_ylabel("mean predictive entropy (nats)", color="tab:red")
    return _finish(fig, path)


def rotation_plot(rows, path):
    """Class probabilities and entropy versus rotation angle."""
    angles = [r["angle"] for r in rows]
    probs = np.array([r["probs"] for r in rows])
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for c in range(probs.shape[1]):
        ax1.plot(angles, probs[:, c], lw=1.0, label=str(c))
    ax1.set_ylabel("class probability")
    ax1.legend(fontsize=6, ncol=5, loc="upper right")
    ax2.plot(angles, [r["entropy"] for r in rows], lw=1.2, color="black")
    ax2.set_xlabel("rotation angle (degrees)")
    ax2.set_ylabel("entropy (nats)")
    return _finish(fig, path)


def memorization_plot(result, path):
    """Train/test accuracy on shuffled labels against the chance line."""
    labels = ["train (shuffled labels)"]
    values = [result["train_acc"]]
    if result.get("test_acc") is not None:
        labels.append("test (true labels)")
        values.append(result["test_acc"])
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(labels, values, color=["tab:blue", "tab:green"][:len(values)])
    ax.axhline(result["chance"], color="black", ls="--", lw=1.0,
               label="chance")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    return _finish(fig, path)


def regression_plot(rows, train_xy, path):
    """Predictive mean with 1/2/3 standard-deviation bands over the grid."""
    x = np.array([r["x"] for r in rows])
    mean = np.array([r["mean"] for r in rows])
    std = np.array([r["std"] for r in rows])
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for k in (3, 2, 1):
        ax.fill_between(x, mean - k * std, mean + k * std,
                        color="tab:blue", alpha=0.12)
    ax.plot(x, mean, color="tab:blue", lw=1.4, label="predictive mean")
    if train_xy is not None:
        tx, ty = train_xy
        ax.plot(np.asarray(tx).ravel(), np.asarray(ty).ravel(), "k.",
                ms=6, label="training points")
    ax.set_xlabel("input")
    ax.set_ylabel("output")
    ax.legend(loc="upper left", fontsize=8)
    return _finish(fig, path)
