import numpy as np
import pytest

FD_STEP = 1e-6


def finite_difference_grad(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. x, mutated in place."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f()
        flat[i] = orig - step
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float, what: str = ""):
    """Relative comparison with an absolute floor of 1 (values are O(1))."""
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(1.0, np.abs(numeric))
    assert np.all(err <= bound), (
        f"gradient mismatch {what}: max err {err.max():.3e}, "
        f"worst allowed {bound[np.unravel_index(err.argmax(), err.shape)]:.3e}"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(714)
