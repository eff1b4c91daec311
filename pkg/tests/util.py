"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from infomaxvae import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued f at 2-D point x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def check_grads(build, inputs, h=1e-5, rtol=1e-4, atol=1e-7):
    """Compare reverse-mode grads against central differences.

    `build` maps a list of Parameters to a scalar Node. `inputs` is a list
    of 2-D arrays; each gets perturbed in turn while the rest stay fixed.
    """
    params = [ad.Parameter(x) for x in inputs]
    loss = build(params)
    ad.backward(loss)
    for i, x in enumerate(inputs):
        def scalar_of(xi, i=i):
            probe = [ad.Parameter(v) for v in inputs]
            probe[i] = ad.Parameter(xi)
            return build(probe).value[0, 0]

        num = numeric_grad(scalar_of, np.asarray(x, dtype=np.float64), h=h)
        ana = params[i].grad
        assert ana is not None, f"input {i} received no gradient"
        denom = np.maximum(np.abs(num), np.abs(ana))
        err = np.abs(num - ana)
        ok = err <= atol + rtol * denom
        assert ok.all(), (
            f"input {i}: max abs err {err.max():.3e}, "
            f"max rel err {(err / np.maximum(denom, 1e-12)).max():.3e}"
        )
