import numpy as np
import pytest

from peerlearn import ZipfSpec, generate_dataset

# seed-0 draw of 10,000 Zipf(s=2) labels over 20 classes, frozen from the
# generator and re-checked against a file-level counting oracle in test_data
ZIPF_COUNTS = [6249, 1581, 723, 395, 249, 160, 114, 97, 67, 73,
               49, 48, 35, 31, 21, 26, 18, 22, 23, 19]

ZIPF_SPEC = ZipfSpec(num_classes=20, zipf_exponent=2.0, instances_total=10_000, seed=0)


@pytest.fixture(scope="session")
def zipf_dataset():
    return generate_dataset(ZIPF_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference(f, z, step=1e-5):
    """Central differences of scalar ``f`` at vector ``z``."""
    z = np.asarray(z, dtype=np.float64)
    grad = np.empty_like(z)
    for j in range(z.size):
        hi, lo = z.copy(), z.copy()
        hi[j] += step
        lo[j] -= step
        grad[j] = (f(hi) - f(lo)) / (2 * step)
    return grad


def relative_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
