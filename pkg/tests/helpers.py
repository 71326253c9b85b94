"""Shared oracles for the test suite.

These deliberately avoid the library's own compute paths: matmul is checked
against a naive triple loop, gradients against central finite differences
evaluated on a float64 twin of the forward computation.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def central_difference(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    arrays: dict[str, np.ndarray],
    name: str,
    index: tuple[int, ...],
    h: float = 1e-3,
) -> float:
    """d loss / d arrays[name][index] by central differences; arrays restored."""
    arr = arrays[name]
    orig = arr[index]
    arr[index] = orig + h
    f_plus = loss_fn(arrays)
    arr[index] = orig - h
    f_minus = loss_fn(arrays)
    arr[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def assert_grads_match(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    arrays: dict[str, np.ndarray],
    ad_grads: Mapping[str, np.ndarray],
    rng: np.random.Generator,
    coords_per_array: int = 5,
    h: float = 1e-3,
    rtol: float = 1e-3,
    floor: float = 1e-6,
) -> int:
    """Spot-check AD gradients against finite differences on random coords.

    Relative error uses max(|ad|, |fd|, floor) in the denominator so exact
    zeros compare cleanly. Returns the number of coordinates checked.
    """
    checked = 0
    for name, arr in arrays.items():
        flat_size = arr.size
        n_coords = min(coords_per_array, flat_size)
        picks = rng.choice(flat_size, size=n_coords, replace=False)
        for flat_idx in picks:
            index = np.unravel_index(flat_idx, arr.shape)
            fd = central_difference(loss_fn, arrays, name, index, h=h)
            ad = float(ad_grads[name][index])
            denom = max(abs(ad), abs(fd), floor)
            assert abs(ad - fd) / denom <= rtol, (
                f"gradient mismatch at {name}{list(index)}: ad={ad!r} fd={fd!r}"
            )
            checked += 1
    return checked
