"""Shared test helpers: the central finite-difference gradient oracle."""

import numpy as np
import pytest

from lgcafuse.tensor import Tensor, no_grad


def rand_tensor(rng, shape, requires_grad=False, lo=-1.0, hi=1.0):
    """Uniform random float64 tensor (gradient checks run at f64)."""
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)


def finite_diff_grad(build_loss, param, h=1e-5, idxs=None):
    """Central finite differences of the scalar build_loss() w.r.t. param.data.

    Independent of the autograd path: it only re-runs the forward computation
    with perturbed entries.  Returns the gradient at the requested flat
    indices (all of them when idxs is None).
    """
    flat = param.data.reshape(-1)
    if idxs is None:
        idxs = np.arange(flat.size)
    grads = np.zeros(len(idxs), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(idxs):
            old = flat[i]
            flat[i] = old + h
            fp = build_loss().item()
            flat[i] = old - h
            fm = build_loss().item()
            flat[i] = old
            grads[k] = (fp - fm) / (2.0 * h)
    return grads


def gradcheck(build_loss, params, tol=1e-4, h=1e-5, sample=None, seed=0):
    """Compare analytic grads of build_loss() against finite differences.

    Relative error per parameter tensor is max|analytic - numeric| scaled by
    the largest gradient magnitude seen for that tensor.  When `sample` is
    given, only that many randomly chosen entries per tensor are differenced
    (needed for whole-model checks).
    """
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = p.data.size
        if sample is not None and n > sample:
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = np.arange(n)
        numeric = finite_diff_grad(build_loss, p, h=h, idxs=idxs)
        a_sel = a.reshape(-1)[idxs]
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(a_sel)), 1e-8)
        err = np.max(np.abs(a_sel - numeric)) / scale
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for tensor of shape {p.shape}: rel err {err:.3g} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(42)
