"""Shared fixtures.

The `digit_suite` fixture trains the three image classifiers that several
acceptance checks share (flow-posterior, factorized-Gaussian, and plain
deterministic L2).  It is session-scoped and lazy, so unit-test runs that
never request it pay nothing.
"""

import numpy as np
import pytest

from mnf.autodiff import Rng
from mnf.data import glyph_dataset
from mnf.evaluation import predict
from mnf.model import mlp_spec
from mnf.training import TrainConfig, train

DIGIT_TRAIN_N = 10_000
DIGIT_TEST_N = 2_000
OOD_N = 2_000
DIGIT_EPOCHS = 50


@pytest.fixture(scope="session")
def digit_suite():
    train_ds = glyph_dataset("digits", DIGIT_TRAIN_N, 100)
    test_ds = glyph_dataset("digits", DIGIT_TEST_N, 200)
    ood_ds = glyph_dataset("letters", OOD_N, 300)
    Xtr, ytr = train_ds.flat(), train_ds.y
    Xte, yte = test_ds.flat(), test_ds.y

    models = {}
    errors = {}
    for kind in ("mnf", "ffg", "l2"):
        spec = mlp_spec(784, [100, 100], 10, kind=kind)
        config = TrainConfig(epochs=DIGIT_EPOCHS, batch_size=128, seed=0, lr=1e-3)
        model, _ = train(spec, (Xtr, ytr), config)
        summary = predict(model, Xte, 20, Rng(0).child(10))
        errors[kind] = float((summary.probs.argmax(axis=1) != yte).mean())
        models[kind] = model

    return {"models": models, "test_error": errors,
            "X_test": Xte, "y_test": yte, "X_ood": ood_ds.flat()}
