import numpy as np
import pytest

from dapt import autodiff as ad


@pytest.fixture(autouse=True)
def _reset_zero_norm_counter():
    ad.reset_zero_norm_count()
    yield


def central_diff_grad(func, leaf: ad.Tensor, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar-valued ``func()`` w.r.t. ``leaf.data``."""
    grad = np.zeros_like(leaf.data)
    it = np.nditer(leaf.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = leaf.data[idx]
        leaf.data[idx] = orig + step
        f_plus = func()
        leaf.data[idx] = orig - step
        f_minus = func()
        leaf.data[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rel_tol: float = 1e-6) -> None:
    """Relative comparison with an absolute floor of 1 (gradcheck style)."""
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / scale
    assert err.max() < rel_tol, f"gradient mismatch: max rel err {err.max():.3e}"


def check_gradients(build_loss, leaves, rel_tol: float = 1e-6) -> None:
    """Compare backward() gradients of ``build_loss()`` against central
    finite differences for every leaf."""
    with ad.Tape():
        loss = build_loss()
    grads = ad.backward(loss)
    for leaf in leaves:
        numeric = central_diff_grad(lambda: build_loss().item(), leaf)
        assert leaf in grads, f"no gradient for leaf {leaf}"
        assert_grad_close(grads[leaf], numeric)
