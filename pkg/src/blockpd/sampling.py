"""Proper random block samplings and their probability structure.

A sampling is a random subset of the d block indices, drawn i.i.d. across
iterations.  Properness means every block has activation probability
pi_i > 0.  Enumerable kinds carry their full support so exact expectations
can be taken; the subset-uniform kind with a huge support falls back to
formulaic probabilities and on-the-fly draws.

Randomness comes from a caller-owned ``numpy.random.Generator``; every draw
consumes a fixed random budget for its kind, so traces are reproducible
regardless of which diagnostics run.  Seed with the counter-based Philox
bit generator for stable streams (see :func:`make_rng`).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from math import comb
from typing import Callable, Sequence

import numpy as np

from .blocks import BlockStructure
from .errors import UnsupportedSampling

Array = np.ndarray

MAX_ENUMERABLE = 10_000


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; one stream per run."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class Sampling:
    """Random set-valued block selector.

    ``support`` lists the possible subsets with their probabilities when the
    support is small enough to enumerate; otherwise it is None and only the
    marginals / pair probabilities are available in closed form.
    """

    d: int
    kind: str
    pi: Array
    support: tuple[tuple[int, ...], ...] | None
    probs: Array | None
    nice_m: int | None = None

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "pi", pi)
        if np.any(pi <= 0.0) or np.any(pi > 1.0 + 1e-12):
            raise ValueError("sampling is not proper: marginals must lie in (0, 1]")
        if self.support is not None:
            probs = np.asarray(self.probs, dtype=float)
            object.__setattr__(self, "probs", probs)
            if abs(float(probs.sum()) - 1.0) > 1e-12:
                raise ValueError("support probabilities must sum to 1")
            if any(len(s) == 0 for s in self.support):
                raise ValueError("empty subsets are not allowed in the support")
            marg = np.zeros(self.d)
            for subset, p in zip(self.support, probs):
                for i in subset:
                    marg[i] += p
            if np.max(np.abs(marg - pi)) > 1e-12:
                raise ValueError("marginals inconsistent with the support")

    @cached_property
    def _cum(self) -> Array:
        return np.cumsum(self.probs)

    @cached_property
    def _masks(self) -> Array:
        masks = np.zeros((len(self.support), self.d), dtype=bool)
        for j, subset in enumerate(self.support):
            masks[j, list(subset)] = True
        return masks

    def enumerable(self) -> bool:
        return self.support is not None


def single_coordinate(d: int, probs=None) -> Sampling:
    """One block per iteration; uniform unless per-block probs are given."""
    if probs is None:
        probs = np.full(d, 1.0 / d)
    probs = np.asarray(probs, dtype=float)
    support = tuple((i,) for i in range(d))
    return Sampling(d, "single", probs.copy(), support, probs)


def nice(d: int, m: int) -> Sampling:
    """Uniform choice of exactly m of the d blocks."""
    if not 1 <= m <= d:
        raise ValueError("subset size must be between 1 and d")
    pi = np.full(d, m / d)
    if comb(d, m) <= MAX_ENUMERABLE:
        support = tuple(combinations(range(d), m))
        probs = np.full(len(support), 1.0 / len(support))
        return Sampling(d, "nice", pi, support, probs, nice_m=m)
    return Sampling(d, "nice", pi, None, None, nice_m=m)


def full(d: int) -> Sampling:
    return Sampling(d, "full", np.ones(d), (tuple(range(d)),), np.array([1.0]))


def paired_dso(p: int) -> Sampling:
    """Coordinator-plus-one-agent pairs: block 0 always active, one of the p
    agent blocks chosen uniformly."""
    if p < 1:
        raise ValueError("need at least one agent block")
    support = tuple((0, a) for a in range(1, p + 1))
    probs = np.full(p, 1.0 / p)
    pi = np.concatenate([[1.0], np.full(p, 1.0 / p)])
    return Sampling(p + 1, "paired", pi, support, probs)


def explicit(d: int, subsets: Sequence[Sequence[int]], probs) -> Sampling:
    subsets = tuple(tuple(sorted(int(i) for i in s)) for s in subsets)
    probs = np.asarray(probs, dtype=float)
    pi = np.zeros(d)
    for subset, p in zip(subsets, probs):
        for i in subset:
            pi[i] += p
    return Sampling(d, "explicit", pi, subsets, probs)


def draw(s: Sampling, rng: np.random.Generator) -> Array:
    """One i.i.d. realization as a boolean activation vector."""
    if s.support is not None:
        j = int(np.searchsorted(s._cum, rng.random(), side="right"))
        j = min(j, len(s.support) - 1)
        return s._masks[j].copy()
    # large subset-uniform support: draw m distinct blocks directly
    active = np.zeros(s.d, dtype=bool)
    active[rng.choice(s.d, size=s.nice_m, replace=False)] = True
    return active


def prob_matrix(s: Sampling) -> Array:
    """Pairwise activation matrix: diagonal pi_i, off-diagonal P(i and j active).

    Symmetric PSD for every proper sampling; strictly positive definite for
    some kinds only (e.g. the all-blocks and the coordinator-pair kinds are
    singular), so only PSD is asserted here.
    """
    if s.support is not None:
        pi_mat = np.zeros((s.d, s.d))
        for subset, p in zip(s.support, s.probs):
            idx = list(subset)
            for i in idx:
                for j in idx:
                    pi_mat[i, j] += p
    elif s.kind == "nice":
        m = s.nice_m
        off = m * (m - 1) / (s.d * (s.d - 1))
        pi_mat = np.full((s.d, s.d), off)
        np.fill_diagonal(pi_mat, m / s.d)
    else:
        raise UnsupportedSampling("pair probabilities need an enumerable support")
    assert np.max(np.abs(np.diag(pi_mat) - s.pi)) < 1e-12
    assert float(np.linalg.eigvalsh(pi_mat).min()) > -1e-12
    return pi_mat


def weight_vector(s: Sampling) -> Array:
    """Per-block inverse marginals 1/pi_i."""
    return 1.0 / s.pi


def weight_matrix_p(s: Sampling, blocks: BlockStructure) -> Array:
    """Diagonal of the m-by-m scaling matrix with 1/pi_i on block i."""
    return blocks.expand(weight_vector(s))


def xi_matrix(s: Sampling, a_blocks: Sequence[Array]) -> Array:
    """Second-moment matrix of the inverse-marginal-scaled activation applied
    to the coupling matrix: Xi = E[E P A'A P E] with E the random 0/1 block
    mask and P the inverse-marginal scaling.

    Computed exactly from the support and cross-checked against the blockwise
    closed form Xi[i,j] = (Pi_ij / (pi_i pi_j)) A_i'A_j (off-diagonal) and
    Xi[i,i] = A_i'A_i / pi_i.
    """
    d = len(a_blocks)
    dims = [a.shape[1] for a in a_blocks]
    blocks = BlockStructure(tuple(dims))
    m = blocks.m
    pi_mat = prob_matrix(s)
    xi_formula = np.zeros((m, m))
    for i in range(d):
        sli = blocks.block_slice(i)
        for j in range(d):
            slj = blocks.block_slice(j)
            if i == j:
                xi_formula[sli, slj] = (a_blocks[i].T @ a_blocks[i]) / s.pi[i]
            else:
                w = pi_mat[i, j] / (s.pi[i] * s.pi[j])
                if w != 0.0:
                    xi_formula[sli, slj] = w * (a_blocks[i].T @ a_blocks[j])
    if s.support is None:
        return xi_formula

    a = np.hstack(a_blocks)
    gram = a.T @ a
    p_diag = weight_matrix_p(s, blocks)
    xi_exact = np.zeros((m, m))
    for subset, p in zip(s.support, s.probs):
        mask = np.zeros(m)
        for i in subset:
            mask[blocks.block_slice(i)] = 1.0
        scaled = p_diag * mask
        xi_exact += p * (scaled[:, None] * gram * scaled[None, :])
    assert np.max(np.abs(xi_exact - xi_formula)) < 1e-12 * max(
        1.0, float(np.max(np.abs(xi_exact)))
    ), "exhaustive and closed-form activation second moments disagree"
    return xi_exact


def expectation_over_sampling(s: Sampling, f: Callable[[Array], object]):
    """Exact expectation of f(activation mask) over the support."""
    if s.support is None:
        raise UnsupportedSampling("exact expectation needs an enumerable support")
    if len(s.support) > MAX_ENUMERABLE:
        raise UnsupportedSampling("support too large to enumerate")
    total = None
    for mask, p in zip(s._masks, s.probs):
        term = f(mask.copy())
        total = p * term if total is None else total + p * term
    return total


def from_config(kind: str, d: int, **kwargs) -> Sampling:
    """Build a sampling from a config-style kind tag."""
    kind = kind.lower()
    if kind in ("single", "single_coordinate"):
        return single_coordinate(d, kwargs.get("probs"))
    if kind in ("uniform",):
        return single_coordinate(d)
    if kind == "nice":
        return nice(d, int(kwargs["m"]))
    if kind == "full":
        return full(d)
    if kind in ("paired", "paired_dso"):
        return paired_dso(d - 1)
    raise UnsupportedSampling(f"unknown sampling kind {kind!r}")
