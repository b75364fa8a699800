"""Nested Clenshaw-Curtis rules and Smolyak sparse-grid cubature.

Univariate rules live on [-1/2, 1/2] with the level-n node count m(1) = 1,
m(n) = 2^(n-1) + 1; the N-dimensional rule of order K combines tensorized
rules over all level multi-indices with max{N, K+1} <= |alpha| <= N + K.
Coincident tensor nodes are merged exactly by tracking each node's dyadic
position as a rational number instead of comparing floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import combinations

import numpy as np


class NodeBudgetExceeded(RuntimeError):
    """The requested sparse grid would exceed the configured node cap."""


def rule_size(level: int) -> int:
    if level < 1:
        raise ValueError("level must be >= 1")
    return 1 if level == 1 else 2 ** (level - 1) + 1


@lru_cache(maxsize=None)
def _node_fractions(level: int) -> tuple[Fraction, ...]:
    """Node positions as fractions t with node value -cos(pi*t)/2."""
    m = rule_size(level)
    if m == 1:
        return (Fraction(1, 2),)
    return tuple(Fraction(k, m - 1) for k in range(m))


def _node_value(t: Fraction) -> float:
    if 2 * t.numerator == t.denominator:
        return 0.0  # exact center, avoid -cos(pi/2)/2 rounding
    return -0.5 * math.cos(math.pi * t.numerator / t.denominator)


def cc_nodes(level: int) -> np.ndarray:
    """Clenshaw-Curtis abscissae on [-1/2, 1/2] at the given level."""
    return np.array([_node_value(t) for t in _node_fractions(level)])


@lru_cache(maxsize=None)
def _cc_weights_cached(level: int) -> tuple[float, ...]:
    m = rule_size(level)
    if m == 1:
        return (1.0,)
    # Moment match in the Chebyshev basis on [-1, 1]: with x_k = -cos(theta_k)
    # we have T_j(x_k) = (-1)^j cos(j theta_k) and integral moments
    # 2/(1-j^2) for even j, 0 for odd j.
    theta = np.arange(m) * math.pi / (m - 1)
    j = np.arange(m)
    vander = ((-1.0) ** j)[:, None] * np.cos(np.outer(j, theta))
    moments = np.where(j % 2 == 0, 2.0 / (1.0 - j.astype(float) ** 2 + (j % 2)), 0.0)
    moments[0] = 2.0
    w = np.linalg.solve(vander, moments)
    return tuple(0.5 * w)  # scale [-1, 1] -> [-1/2, 1/2]


def cc_weights(level: int) -> np.ndarray:
    """Positive weights matching :func:`cc_nodes`; they sum to one."""
    return np.array(_cc_weights_cached(level))


@dataclass(frozen=True)
class UnivariateRule:
    level: int
    nodes: np.ndarray
    weights: np.ndarray


def univariate_rule(level: int) -> UnivariateRule:
    return UnivariateRule(level=level, nodes=cc_nodes(level), weights=cc_weights(level))


# ---------------------------------------------------------------------------
# Smolyak combination
# ---------------------------------------------------------------------------

def _new_nodes_per_level(level: int) -> int:
    """Nodes appearing first at the given level of the nested family."""
    if level == 1:
        return 1
    if level == 2:
        return 2
    return 2 ** (level - 2)


def smolyak_node_count(dim: int, order: int) -> int:
    """Cardinality of the merged sparse grid, computed combinatorially."""
    if dim < 1 or order < 0:
        raise ValueError("need dim >= 1 and order >= 0")
    total = 1  # the all-center node
    # W[s][a]: sum over compositions of s into a positive parts of the
    # product of new-node counts at level part+1
    for s in range(1, order + 1):
        w_prev = {0: 1}
        for a in range(1, min(s, dim) + 1):
            w_cur = {}
            for t in range(a, s + 1):
                acc = 0
                for d in range(1, t - a + 2):
                    prev = w_prev.get(t - d)
                    if prev:
                        acc += _new_nodes_per_level(d + 1) * prev
                if acc:
                    w_cur[t] = acc
            if s in w_cur:
                total += math.comb(dim, a) * w_cur[s]
            w_prev = w_cur
    return total


@dataclass(frozen=True)
class SmolyakRule:
    """Merged sparse-grid cubature rule on [-1/2, 1/2]^dim."""

    dim: int
    order: int
    nodes: np.ndarray    # (n_nodes, dim)
    weights: np.ndarray  # (n_nodes,), may be negative

    @property
    def n_nodes(self) -> int:
        return len(self.weights)


def _sparse_level_terms(dim: int, order: int):
    """Yield (active_dims, levels, coefficient) for every combination term.

    ``levels`` are the levels >= 2 on the active dimensions; all other
    dimensions sit at level 1.  Terms are enumerated deterministically:
    excess level sum ascending, then dimension tuples and compositions in
    lexicographic order.
    """
    for s in range(max(0, order + 1 - dim), order + 1):
        coef = (-1) ** (order - s) * math.comb(dim - 1, order - s)
        if coef == 0:
            continue
        if s == 0:
            yield (), (), coef
            continue
        for a in range(1, min(s, dim) + 1):
            for dims in combinations(range(dim), a):
                for comp in _compositions(s, a):
                    yield dims, tuple(c + 1 for c in comp), coef


def _compositions(total: int, parts: int):
    """Compositions of ``total`` into ``parts`` positive integers, lex order."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def smolyak_rule(dim: int, order: int, node_cap: int | None = None) -> SmolyakRule:
    """Build the merged Smolyak rule of the given dimension and order."""
    if dim < 1 or order < 0:
        raise ValueError("need dim >= 1 and order >= 0")
    count = smolyak_node_count(dim, order)
    if node_cap is not None and count > node_cap:
        raise NodeBudgetExceeded(
            f"sparse grid with {count} nodes exceeds the cap of {node_cap}"
        )

    merged: dict[tuple, float] = {}
    center = Fraction(1, 2)
    for dims, levels, coef in _sparse_level_terms(dim, order):
        grids = [_node_fractions(lv) for lv in levels]
        wgts = [_cc_weights_cached(lv) for lv in levels]
        index = [0] * len(dims)
        while True:
            w = coef
            key_parts = []
            for pos, (d, g, wv) in enumerate(zip(dims, grids, wgts)):
                k = index[pos]
                w *= wv[k]
                t = g[k]
                if t != center:
                    key_parts.append((d, t))
            key = tuple(key_parts)
            merged[key] = merged.get(key, 0.0) + w
            # odometer over the tensor grid, last dimension fastest
            for pos in reversed(range(len(dims))):
                index[pos] += 1
                if index[pos] < len(grids[pos]):
                    break
                index[pos] = 0
            else:
                break

    assert len(merged) == count, (len(merged), count)
    nodes = np.zeros((count, dim))
    weights = np.empty(count)
    for row, (key, w) in enumerate(merged.items()):
        weights[row] = w
        for d, t in key:
            nodes[row, d] = _node_value(t)
    return SmolyakRule(dim=dim, order=order, nodes=nodes, weights=weights)


def integrate(f, rule: SmolyakRule):
    """Apply the cubature rule to a function defined on the hypercube.

    ``f`` may return scalars or arrays (integrated componentwise).
    """
    values = [np.asarray(f(rule.nodes[k]), dtype=float) for k in range(rule.n_nodes)]
    stacked = np.stack(values, axis=0)
    out = np.tensordot(rule.weights, stacked, axes=(0, 0))
    return float(out) if out.ndim == 0 else out


def dump_rule(rule: SmolyakRule, path) -> None:
    """Plain-text node/weight table for cross-checking."""
    with open(path, "w") as fh:
        fh.write(f"# smolyak dim={rule.dim} order={rule.order} nodes={rule.n_nodes}\n")
        for node, w in zip(rule.nodes, rule.weights):
            coords = " ".join(f"{x:.17g}" for x in node)
            fh.write(f"{w:.17g} {coords}\n")
