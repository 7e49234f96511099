"""Polynomial feature maps shared by controllers and transition links.

Monomials are ordered by total degree, then lexicographically by variable index
(combinations-with-replacement order). For d = 2, degree = 2 the columns are
x1, x2, x1^2, x1*x2, x2^2. The constant term is never included; affine parts
live in explicit offsets.
"""
from __future__ import annotations

from itertools import combinations_with_replacement
from math import comb

import numpy as np


def monomial_exponents(dim: int, degree: int) -> list[tuple[int, ...]]:
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    out: list[tuple[int, ...]] = []
    for total in range(1, degree + 1):
        for combo in combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


def n_monomials(dim: int, degree: int) -> int:
    return comb(dim + degree, degree) - 1


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Map (..., d) points to (..., n_monomials(d, degree)) monomial values."""
    x = np.asarray(x, dtype=float)
    if degree == 1:
        return x.copy()
    cols = [np.prod(x ** np.asarray(e), axis=-1) for e in monomial_exponents(x.shape[-1], degree)]
    return np.stack(cols, axis=-1)


def controller_feature_dim(d_x: int, d_u: int, lag: int, poly_degree: int) -> int:
    return n_monomials(d_x, poly_degree) + lag * d_u
