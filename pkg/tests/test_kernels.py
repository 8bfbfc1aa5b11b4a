import numpy as np
import pytest

from iagnn import _kernels_py, kernels

compiled = pytest.importorskip("iagnn._kernels")


def data(seed, n=200, n_seg=30, dim=5):
    rng = np.random.default_rng(seed)
    seg = np.sort(np.concatenate([np.arange(n_seg), rng.integers(0, n_seg, n - n_seg)])).astype(np.int64)
    return rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, dim)), seg, n_seg


@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    vals, grad, rows, seg, n_seg = data(seed)
    for mod in (compiled,):
        np.testing.assert_allclose(mod.scatter_add_rows(rows, seg, n_seg), _kernels_py.scatter_add_rows(rows, seg, n_seg), rtol=1e-12)
        np.testing.assert_array_equal(mod.segment_max(vals, seg, n_seg), _kernels_py.segment_max(vals, seg, n_seg))
        p_c = mod.segment_softmax(vals, seg, n_seg)
        p_p = _kernels_py.segment_softmax(vals, seg, n_seg)
        np.testing.assert_allclose(p_c, p_p, rtol=1e-12)
        np.testing.assert_allclose(
            mod.segment_softmax_backward(p_p, grad, seg, n_seg),
            _kernels_py.segment_softmax_backward(p_p, grad, seg, n_seg),
            rtol=1e-10,
            atol=1e-14,
        )
        a = np.ones((n_seg, rows.shape[1]))
        b = a.copy()
        mod.scatter_add_rows_into(a, rows, seg)
        _kernels_py.scatter_add_rows_into(b, rows, seg)
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_pure_python_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("IAGNN_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.scatter_add_rows is _kernels_py.scatter_add_rows
    finally:
        monkeypatch.delenv("IAGNN_PURE_PYTHON")
        importlib.reload(kernels)
