"""Shared fixtures and the finite-difference oracle used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from tracttransfer.autodiff import ComputationGraph, Tensor, backward


def central_difference(fn, leaf: Tensor, index: tuple, step: float = 1e-5) -> float:
    """Central finite difference of the scalar ``fn()`` w.r.t. one leaf entry.

    ``fn`` must re-run the full forward pass from current leaf values and
    return a float; it stays independent of the backward implementation.
    """
    original = leaf.data[index]
    leaf.data[index] = original + step
    f_plus = fn()
    leaf.data[index] = original - step
    f_minus = fn()
    leaf.data[index] = original
    return (f_plus - f_minus) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(build_loss, leaves, rtol: float, step: float = 1e-5,
              max_coords: int = 200, seed: int = 0) -> float:
    """Compare backward gradients of every leaf against central differences.

    ``build_loss`` runs a forward pass and returns the scalar loss Tensor.
    Returns the max relative error over all checked coordinates.
    """
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    with ComputationGraph() as graph:
        loss = build_loss()
    backward(graph, loss)

    def forward_value():
        return float(build_loss().data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        coords = [tuple(idx) for idx in np.ndindex(leaf.data.shape)]
        if len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in picks]
        for index in coords:
            numeric = central_difference(forward_value, leaf, index, step)
            err = relative_error(float(leaf.grad[index]), numeric)
            worst = max(worst, err)
            assert err < rtol, (
                f"gradient mismatch at {index}: "
                f"backward={leaf.grad[index]:.10g} fd={numeric:.10g} rel={err:.3g}"
            )
    return worst


@pytest.fixture
def rng64():
    return np.random.default_rng(64)
