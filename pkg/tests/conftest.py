"""Shared test utilities: the central finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from vidcorr.numerics import Tape, Tensor, backward


def scalar(t: Tensor) -> float:
    return float(t.data.reshape(()))


def finite_difference_grad(loss_fn, leaf: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central differences of a scalar loss with respect to leaf.data.

    loss_fn must recompute the forward pass from current leaf values and
    return a float; it is evaluated 2 * leaf.size times.
    """
    grad = np.zeros_like(leaf.data, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = float(flat[i])
        flat[i] = orig + h
        plus = loss_fn()
        flat[i] = orig - h
        minus = loss_fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest error normalized by the gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic.astype(np.float64) - numeric).max() / scale)


def check_gradients(build_loss, leaves: list[Tensor], h: float = 1e-3, tol: float = 1e-3) -> None:
    """Assert analytic gradients of build_loss() match central differences.

    build_loss constructs the loss from the leaves' current data; it is
    called once under a tape for the analytic pass and repeatedly without
    one for the numeric probes.
    """
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    for leaf in leaves:
        ana = leaf.grad.copy()
        fd = finite_difference_grad(lambda: scalar(build_loss()), leaf, h)
        err = max_rel_error(ana, fd)
        assert err < tol, f"gradient mismatch: max rel err {err:.2e} >= {tol:.0e}"
