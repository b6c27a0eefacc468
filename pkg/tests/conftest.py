"""Shared test helpers: finite-difference gradient checking against the autodiff."""

from __future__ import annotations

import numpy as np

from afragent import numerics as nm


def numeric_grad(build, p: nm.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar build() w.r.t. every entry of p."""

    def f():
        with nm.inference_mode():
            return build()

    flat = nm.finite_diff_coords(f, p, range(p.data.size), h)
    return flat.reshape(p.shape)


def assert_grads_match(build, params, tol: float = 1e-4, h: float = 1e-5):
    """Backprop build() and compare each parameter's grad to finite differences.

    build must be a pure function of the params' current values and return a
    scalar Tensor. Losses should be O(1) with generically nonzero gradients so
    the finite-difference noise floor stays far below tol.
    """
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad[...] = 0.0
    loss = build()
    nm.backward(loss)
    for i, p in enumerate(params):
        fd = numeric_grad(build, p, h=h)
        err = nm.max_rel_err(p.grad, fd)
        assert err < tol, f"param {i}: max rel err {err:.3e} >= {tol:.0e}"


def assert_sampled_grads_match(
    build, named_params: dict, rng: np.random.Generator,
    coords_per_param: int = 2, tol: float = 1e-4, h: float = 1e-5,
):
    """Like assert_grads_match but checks a random coordinate sample per tensor.

    Keeps end-to-end checks of large models tractable while still touching
    every parameter tensor.
    """
    params = list(named_params.values())
    names = list(named_params.keys())
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad[...] = 0.0
    loss = build()
    nm.backward(loss)

    def f():
        with nm.inference_mode():
            return build()

    for name, p in zip(names, params):
        k = min(coords_per_param, p.data.size)
        coords = rng.choice(p.data.size, size=k, replace=False)
        fd = nm.finite_diff_coords(f, p, coords, h)
        got = p.grad.reshape(-1)[coords]
        err = nm.max_rel_err(got, fd)
        assert err < tol, f"{name}: max rel err {err:.3e} >= {tol:.0e}"


def rand_tensor(rng: np.random.Generator, shape, scale: float = 1.0) -> nm.Tensor:
    return nm.tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def rand_const(rng: np.random.Generator, shape, scale: float = 1.0) -> nm.Tensor:
    return nm.tensor(rng.standard_normal(shape) * scale)
