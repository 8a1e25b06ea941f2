import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from sklearn.model_selection import train_test_split
from threadpoolctl import threadpool_limits

from ritrae import ToyNetClassifier
from ritrae.data import digit_images

# Desk setting shared by the integration and acceptance tests.
DESK_SIZE = 64
DESK_MODEL = dict(architecture="cnn", input_pool=2, epochs=25, learning_rate=2e-3, random_state=0)

ACCEPTANCE_LINES = []


def smooth_image(rng, h, w, c=1, sigma=None, lo=20, hi=235):
    """Random low-frequency image: blurred noise stretched into [lo, hi]."""
    sigma = max(h, w) / 8 if sigma is None else sigma
    field = gaussian_filter(rng.normal(size=(h, w, c)), sigma=(sigma, sigma, 0), mode="wrap")
    field -= field.min(axis=(0, 1), keepdims=True)
    field /= np.maximum(field.max(axis=(0, 1), keepdims=True), 1e-12)
    a, b = sorted(rng.integers(lo, hi + 1, size=2))
    return np.rint(a + (b - a) * field).astype(np.uint8)


@pytest.fixture(scope="session")
def desk():
    """Digits at 64x64, the fixed train/test split and a model trained once per session."""
    images, labels = digit_images(DESK_SIZE, seed=0)
    idx = np.arange(len(labels))
    tr, te = train_test_split(idx, test_size=0.3, random_state=0, stratify=labels)
    tr, te = np.sort(tr), np.sort(te)
    model = ToyNetClassifier(**DESK_MODEL)
    start = time.perf_counter()
    with threadpool_limits(1):
        model.fit(images[tr], labels[tr])
    fit_seconds = time.perf_counter() - start
    return {
        "model": model,
        "X_train": images[tr], "y_train": labels[tr],
        "X_test": images[te], "y_test": labels[te],
        "test_ids": te,
        "fit_seconds": fit_seconds,
    }


def record_acceptance(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
