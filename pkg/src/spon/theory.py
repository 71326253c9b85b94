"""Expressivity gap between entry-wise and column pruning, in 1-D.

A width-m sum of shifted ReLUs g(x) = sum_j a_j relu(x - tau_j) + c spends
two first-layer nonzeros per unit (the unit weight on x and the breakpoint
shift) and realizes m genuine breakpoints, hence m+1 linear pieces. Any
width-m' network has at most m' breakpoints, so for m' < m no reallocation
of the same nonzero budget can reproduce g. This module makes that
inclusion-strictness argument executable: construct such a g, count its
pieces analytically (cross-checked on a grid), embed narrower networks at
zero cost, and measure the best structured fit's error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_GRID_POINTS_PER_UNIT = 50
DEFAULT_GRID_MARGIN = 1.0


@dataclass(frozen=True)
class ReluSum:
    """g(x) = sum_j a_j relu(x - tau_j) + c with strictly increasing tau."""

    slopes: tuple[float, ...]       # a_j, output weight per unit
    breakpoints: tuple[float, ...]  # tau_j, strictly increasing
    offset: float = 0.0

    def __post_init__(self) -> None:
        if len(self.slopes) != len(self.breakpoints):
            raise ValueError("slopes and breakpoints must pair up")
        if len(self.breakpoints) == 0:
            raise ValueError("a ReluSum needs at least one unit")
        taus = np.asarray(self.breakpoints)
        if not np.all(np.diff(taus) > 0):
            raise ValueError("breakpoints must be strictly increasing")

    @property
    def width(self) -> int:
        return len(self.slopes)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        # unit-by-unit accumulation in declaration order keeps evaluation
        # bit-stable under zero-unit padding (appended terms add exactly 0.0)
        y = np.full_like(x, self.offset)
        for a, tau in zip(self.slopes, self.breakpoints):
            y = y + a * np.maximum(x - tau, 0.0)
        return y

    def first_layer_nonzeros(self) -> int:
        """First-layer nonzero budget actually spent.

        A live unit costs its input weight plus, when the breakpoint is not
        at the origin, the shift entry. Units with zero output weight are
        removable columns and cost nothing.
        """
        count = 0
        for a, tau in zip(self.slopes, self.breakpoints):
            if a != 0.0:
                count += 1 + (1 if tau != 0.0 else 0)
        return count

    def pad_with_zero_units(self, extra: int) -> "ReluSum":
        """Embed into a wider network by appending units with zero output
        weight (zero columns); evaluation is unchanged everywhere."""
        if extra < 0:
            raise ValueError("extra must be >= 0")
        if extra == 0:
            return self
        last = self.breakpoints[-1]
        new_taus = self.breakpoints + tuple(last + i + 1.0 for i in range(extra))
        return ReluSum(self.slopes + (0.0,) * extra, new_taus, self.offset)


def construct_gm(m: int, seed: int = 0) -> ReluSum:
    """Width-m instance with m genuine breakpoints at tau = 1..m.

    Each unit uses one nonzero input weight and one nonzero shift, so the
    first-layer budget is exactly 2m nonzeros. Output weights are drawn with
    |a_j| >= 0.5 so every breakpoint is genuine.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E0]))
    signs = rng.choice([-1.0, 1.0], size=m)
    mags = rng.uniform(0.5, 1.5, size=m)
    slopes = tuple(float(s * v) for s, v in zip(signs, mags))
    offset = float(rng.uniform(-1.0, 1.0))
    return ReluSum(slopes, tuple(float(t) for t in range(1, m + 1)), offset)


def default_grid(f: ReluSum, points_per_unit: int = DEFAULT_GRID_POINTS_PER_UNIT
                 ) -> np.ndarray:
    lo = min(f.breakpoints) - DEFAULT_GRID_MARGIN
    hi = max(f.breakpoints) + DEFAULT_GRID_MARGIN
    return np.linspace(lo, hi, points_per_unit * f.width)


def analytic_pieces(f: ReluSum) -> tuple[int, list[float]]:
    """Piece count and per-piece slopes from cumulative unit sums.

    The slope left of every breakpoint is 0 and increases by a_j at tau_j;
    units with a_j = 0 do not create a piece boundary.
    """
    slopes = [0.0]
    for a in f.slopes:
        slopes.append(slopes[-1] + a)
    pieces = [slopes[0]]
    for j, a in enumerate(f.slopes):
        if a != 0.0:
            pieces.append(slopes[j + 1])
        else:
            pieces[-1] = slopes[j + 1]  # same slope continues through tau_j
    return len(pieces), pieces


def count_pieces(f: ReluSum, grid: np.ndarray | None = None) -> int:
    """Number of maximal constant-slope intervals; grid cross-checks analytics."""
    grid = default_grid(f) if grid is None else np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    if lo >= min(f.breakpoints) or hi <= max(f.breakpoints):
        raise ValueError("grid must span every breakpoint with margin")
    if len(grid) < 10 * f.width:
        raise ValueError(f"grid too coarse: need at least {10 * f.width} points")
    n_pieces, _ = analytic_pieces(f)
    _cross_check_on_grid(f, grid)
    return n_pieces


def _cross_check_on_grid(f: ReluSum, grid: np.ndarray) -> None:
    """Verify on grid samples that f is linear inside each analytic piece and
    kinks across genuine breakpoints."""
    genuine = [t for a, t in zip(f.slopes, f.breakpoints) if a != 0.0]
    edges = [float(grid.min())] + genuine + [float(grid.max())]
    y = f.evaluate(grid)
    slopes_seen = []
    for left, right in zip(edges[:-1], edges[1:]):
        inside = (grid > left + 1e-9) & (grid < right - 1e-9)
        pts, vals = grid[inside], y[inside]
        if len(pts) < 2:
            raise ValueError("grid too coarse to witness a piece; refine it")
        seg = np.diff(vals) / np.diff(pts)
        if seg.size and not np.allclose(seg, seg[0], atol=1e-8):
            raise AssertionError("piece interior is not linear; analytics disagree")
        slopes_seen.append(seg[0] if seg.size else 0.0)
    for s_prev, s_next in zip(slopes_seen[:-1], slopes_seen[1:]):
        if abs(s_next - s_prev) < 1e-12:
            raise AssertionError("no slope change across a genuine breakpoint")


def _minimax_coefficients(design: np.ndarray, target: np.ndarray
                          ) -> tuple[np.ndarray, float] | None:
    """Coefficients minimizing max |design @ coef - target| (an LP)."""
    from scipy.optimize import linprog

    n, k = design.shape
    ones = np.ones((n, 1))
    cost = np.zeros(k + 1)
    cost[-1] = 1.0
    a_ub = np.block([[design, -ones], [-design, -ones]])
    b_ub = np.concatenate([target, -target])
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub,
                  bounds=[(None, None)] * k + [(0, None)], method="highs")
    if not res.success:
        return None
    return res.x[:k], float(res.x[-1])


def best_structured_fit(
    f: ReluSum,
    m_prime: int,
    grid: np.ndarray | None = None,
) -> tuple[ReluSum, float]:
    """Best width-m' approximant from the keep-subset heuristic.

    Keeps the m' units with the largest |a_j| * active-span score (keep-sets
    are nested as m' grows), then refits output weights and offset on the
    grid: least squares first, polished to the minimax optimum so the
    reported L-infinity error is non-increasing in m'. Returns the fit and
    its grid L-infinity error.
    """
    if not 1 <= m_prime <= f.width:
        raise ValueError("m_prime must lie in [1, width]")
    grid = default_grid(f) if grid is None else np.asarray(grid, dtype=np.float64)
    hi = float(grid.max())
    score = [abs(a) * max(hi - t, 0.0) for a, t in zip(f.slopes, f.breakpoints)]
    order = sorted(range(f.width), key=lambda j: (-score[j], j))
    keep = sorted(order[:m_prime])

    taus = [f.breakpoints[j] for j in keep]
    design = np.concatenate(
        [np.maximum(grid[:, None] - np.asarray(taus), 0.0), np.ones((len(grid), 1))],
        axis=1,
    )
    target = f.evaluate(grid)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    err = float(np.max(np.abs(design @ coef - target)))
    polished = _minimax_coefficients(design, target)
    if polished is not None and polished[1] < err:
        coef, err = polished
    fit = ReluSum(tuple(float(a) for a in coef[:-1]), tuple(taus), float(coef[-1]))
    return fit, err


def inclusion_demo(m: int, m_prime: int, seed: int = 0,
                   grid: np.ndarray | None = None) -> dict:
    """Numbers behind the strict inclusion of column pruning in entry pruning.

    (i) any width-m' network embeds into width m at the same nonzero count
    (zero-padding changes nothing anywhere), and (ii) a width-m instance
    built on a 2m nonzero budget cannot be matched by the width-m'
    structured search.
    """
    if m_prime < 1:
        raise ValueError("m_prime must be >= 1")
    if m_prime >= m:
        raise ValueError("m_prime must be smaller than m")

    g_m = construct_gm(m, seed=seed)
    grid = default_grid(g_m) if grid is None else np.asarray(grid, dtype=np.float64)

    g_small = construct_gm(m_prime, seed=seed + 1)
    padded = g_small.pad_with_zero_units(m - m_prime)
    embed_gap = float(np.max(np.abs(padded.evaluate(grid) - g_small.evaluate(grid))))
    embed_ok = embed_gap == 0.0

    piece_count = count_pieces(g_m, grid)
    _, struct_err = best_structured_fit(g_m, m_prime, grid)

    return {
        "schema_version": 1,
        "m": m,
        "m_prime": m_prime,
        "K": 2 * m,
        "first_layer_nonzeros": g_m.first_layer_nonzeros(),
        "embed_ok": embed_ok,
        "embed_gap": embed_gap,
        "piece_count": piece_count,
        "struct_linf_error": struct_err,
        "seed": seed,
    }
