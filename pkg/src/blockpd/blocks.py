"""Block-structured problem data for penalised composite minimisation.

The model is

    minimize   Psi(x) = sum_i phi_i(x_i) + sum_i r_i(x_i)
    over       x in argmin_z 0.5 * ||A z - b||^2

with the variable split into ``d`` coordinate blocks, ``phi_i`` smooth convex
with a known per-block curvature bound, ``r_i`` proper convex and proximable,
and ``A`` stored as column blocks ``A_1 .. A_d``.  The right-hand side ``b``
need not lie in the range of ``A``; in that case the coupling is enforced only
in the least-squares sense and the attainable penalty minimum ``h*`` is
strictly positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import InfeasibleInstance

Array = np.ndarray


@dataclass(frozen=True)
class BlockStructure:
    """Decomposition of R^m into d contiguous coordinate blocks."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if not self.dims or any(int(n) < 1 for n in self.dims):
            raise ValueError("block dimensions must all be >= 1")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.dims)]).tolist())

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def m(self) -> int:
        return self.offsets[-1]

    def block_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    def block(self, x: Array, i: int) -> Array:
        return x[self.block_slice(i)]

    def split(self, x: Array) -> list[Array]:
        return [self.block(x, i) for i in range(self.d)]

    def expand(self, per_block: Sequence[float]) -> Array:
        """Repeat one scalar per block into a length-m vector."""
        return np.repeat(np.asarray(per_block, dtype=float), self.dims)


@dataclass(frozen=True)
class SmoothBlock:
    """Differentiable convex term on one block.

    ``lam`` is the curvature bound: a symmetric PSD matrix (or scalar ``L``
    standing for ``L * I``) so that the quadratic upper model
    ``phi(x+t) <= phi(x) + <grad phi(x), t> + 0.5 * t' lam t`` holds.
    """

    value: Callable[[Array], float]
    grad: Callable[[Array], Array]
    lam: Array

    @staticmethod
    def zero(dim: int) -> "SmoothBlock":
        return SmoothBlock(lambda x: 0.0, lambda x: np.zeros(dim), np.zeros((dim, dim)))

    @staticmethod
    def quadratic(h: Array, c: Array) -> "SmoothBlock":
        """phi(x) = 0.5 x'Hx + c'x with exact curvature matrix H."""
        h = np.asarray(h, dtype=float)
        c = np.asarray(c, dtype=float)
        return SmoothBlock(
            lambda x: 0.5 * float(x @ (h @ x)) + float(c @ x),
            lambda x: h @ x + c,
            h,
        )

    def lam_matrix(self, dim: int) -> Array:
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim == 0:
            return float(lam) * np.eye(dim)
        return lam

    def lam_max(self, dim: int) -> float:
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim == 0:
            return float(lam)
        return float(np.linalg.eigvalsh(lam).max())


@dataclass(frozen=True)
class ProxBlock:
    """Proximable convex term on one block.

    ``prox(gamma, v)`` returns ``argmin_u r(u) + 0.5 * ||u - v||^2_diag(gamma)``
    where ``gamma`` is the (positive) diagonal of the block metric.  ``mu`` is
    the strong-convexity modulus of ``r`` (0 for merely convex terms).
    """

    value: Callable[[Array], float]
    prox: Callable[[Array, Array], Array] | None
    mu: float = 0.0


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable problem instance; safe for concurrent read-only use.

    All oracles must be pure functions of their inputs.
    """

    blocks: BlockStructure
    smooth: tuple[SmoothBlock, ...]
    prox: tuple[ProxBlock, ...]
    a_blocks: tuple[Array, ...]
    b: Array
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "smooth", tuple(self.smooth))
        object.__setattr__(self, "prox", tuple(self.prox))
        object.__setattr__(
            self, "a_blocks", tuple(np.asarray(a, dtype=float) for a in self.a_blocks)
        )
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        d = self.blocks.d
        if not (len(self.smooth) == len(self.prox) == len(self.a_blocks) == d):
            raise ValueError("per-block sequences must all have length d")
        q = self.b.shape[0]
        for i, a in enumerate(self.a_blocks):
            if a.shape != (q, self.blocks.dims[i]):
                raise ValueError(
                    f"constraint block {i} has shape {a.shape}, "
                    f"expected {(q, self.blocks.dims[i])}"
                )

    @property
    def q(self) -> int:
        return self.b.shape[0]

    @property
    def m(self) -> int:
        return self.blocks.m

    @property
    def d(self) -> int:
        return self.blocks.d

    @cached_property
    def a(self) -> Array:
        """Dense q-by-m coupling matrix (column blocks stacked)."""
        return np.hstack(self.a_blocks)

    @cached_property
    def block_sq_norms(self) -> Array:
        """Per-block squared spectral norms lambda_i = ||A_i||_2^2."""
        out = np.empty(self.d)
        for i, a in enumerate(self.a_blocks):
            s = np.linalg.svd(a, compute_uv=False)
            out[i] = float(s[0] ** 2) if s.size else 0.0
        return out

    @cached_property
    def smooth_lipschitz(self) -> Array:
        """Per-block scalar curvature bounds L_i = lammax(Lam_i)."""
        return np.array(
            [blk.lam_max(self.blocks.dims[i]) for i, blk in enumerate(self.smooth)]
        )

    @cached_property
    def lam_full(self) -> Array:
        """Block-diagonal assembly of all smooth curvature matrices."""
        out = np.zeros((self.m, self.m))
        for i, blk in enumerate(self.smooth):
            sl = self.blocks.block_slice(i)
            out[sl, sl] = blk.lam_matrix(self.blocks.dims[i])
        return out

    @cached_property
    def mu_vector(self) -> Array:
        """Length-m diagonal of the strong-convexity matrix of R."""
        return self.blocks.expand([p.mu for p in self.prox])

    # -- value / gradient oracles ------------------------------------------

    def psi_block(self, i: int, xi: Array) -> float:
        return float(self.smooth[i].value(xi)) + float(self.prox[i].value(xi))

    def phi(self, x: Array) -> float:
        return sum(
            float(self.smooth[i].value(self.blocks.block(x, i))) for i in range(self.d)
        )

    def grad_phi(self, x: Array) -> Array:
        out = np.empty(self.m)
        for i in range(self.d):
            sl = self.blocks.block_slice(i)
            out[sl] = self.smooth[i].grad(x[sl])
        return out

    def r_value(self, x: Array) -> float:
        total = 0.0
        for i in range(self.d):
            v = float(self.prox[i].value(self.blocks.block(x, i)))
            if not np.isfinite(v):
                return math.inf
            total += v
        return total

    def prox_r(self, gamma: Array, v: Array) -> Array:
        """Blockwise weighted prox of R in the diagonal metric ``gamma``."""
        out = np.empty(self.m)
        for i in range(self.d):
            sl = self.blocks.block_slice(i)
            out[sl] = self.prox[i].prox(gamma[sl], v[sl])
        return out


def eval_psi(p: ProblemSpec, x: Array) -> float:
    """Full objective value; +inf outside dom R."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.m,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.m},)")
    r = p.r_value(x)
    if not np.isfinite(r):
        return math.inf
    return p.phi(x) + r


def penalty_h(p: ProblemSpec, x: Array) -> float:
    """Quadratic coupling penalty 0.5 * ||Ax - b||^2."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.m,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.m},)")
    res = p.a @ x - p.b
    return 0.5 * float(res @ res)


def grad_h(p: ProblemSpec, x: Array) -> Array:
    """A'(Ax - b), assembled without forming A'A."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.m,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.m},)")
    return p.a.T @ (p.a @ x - p.b)


def partial_grad_h(p: ProblemSpec, z: Array, i: int) -> Array:
    """Block i of grad h at z, i.e. A_i'(Az - b)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (p.m,):
        raise ValueError(f"z has shape {z.shape}, expected ({p.m},)")
    return p.a_blocks[i].T @ (p.a @ z - p.b)


def kkt_residual(p: ProblemSpec, x: Array, y: Array) -> float:
    """Sup-norm residual of the saddle conditions for L(x,y) = Psi(x) + <y, Ax-b>.

    The primal part is the unit-metric prox-gradient residual
    ``||x - prox_R(x - (grad Phi(x) + A'y))||_inf``; the dual part is
    ``||Ax - b||_inf``.  The dual variable lives in R^q, pairing with the raw
    residual ``Ax - b`` (not with the normal equations); it can only vanish on
    consistent instances.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    g = p.grad_phi(x) + p.a.T @ y
    xp = p.prox_r(np.ones(p.m), x - g)
    primal = float(np.max(np.abs(x - xp))) if p.m else 0.0
    dual = float(np.max(np.abs(p.a @ x - p.b))) if p.q else 0.0
    return max(primal, dual)


# ---------------------------------------------------------------------------
# instance generators
# ---------------------------------------------------------------------------


def _connected(n_nodes: int, edges: Sequence[tuple[int, int]]) -> bool:
    adj = {v: set() for v in range(n_nodes)}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    seen, stack = {0}, [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n_nodes


def make_consensus(
    edges: Sequence[tuple[int, int]],
    local_fns: Sequence[ProxBlock],
    dim: int = 1,
) -> ProblemSpec:
    """Agreement problem over an undirected connected graph.

    The coupling matrix is the edge-node incidence matrix (one signed row
    group per edge), whose kernel is exactly the constant vectors.  It shares
    that kernel with the graph Laplacian while keeping the row count at
    |edges| * dim and improving conditioning.
    """
    n = len(local_fns)
    edges = [(int(u), int(v)) for u, v in edges]
    if any(u == v or not (0 <= u < n and 0 <= v < n) for u, v in edges):
        raise ValueError("edge endpoints must be distinct node indices")
    if not _connected(n, edges):
        raise InfeasibleInstance(
            "graph is disconnected: agreement across components is not enforceable"
        )
    q = len(edges) * dim
    a_blocks = [np.zeros((q, dim)) for _ in range(n)]
    for e, (u, v) in enumerate(edges):
        rows = slice(e * dim, (e + 1) * dim)
        a_blocks[u][rows] = np.eye(dim)
        a_blocks[v][rows] = -np.eye(dim)
    return ProblemSpec(
        blocks=BlockStructure(tuple([dim] * n)),
        smooth=tuple(SmoothBlock.zero(dim) for _ in range(n)),
        prox=tuple(local_fns),
        a_blocks=tuple(a_blocks),
        b=np.zeros(q),
    )


def make_model_fitting(
    k_matrix: Array,
    b: Array,
    losses: Sequence[SmoothBlock],
    regularizers: Sequence[ProxBlock],
) -> ProblemSpec:
    """Separable-loss fitting in lifted form.

    The variable is x = (u, v) in R^(p+q) with one scalar block per
    coordinate; the coupling reads A x = K u - v, so feasibility ties v to the
    model outputs.  Losses act on the v-part, regularizers on the u-part.
    """
    k_matrix = np.asarray(k_matrix, dtype=float)
    b = np.asarray(b, dtype=float)
    q, p_feat = k_matrix.shape
    if b.shape != (q,):
        raise ValueError("response vector length must match the row count of K")
    if len(losses) != q or len(regularizers) != p_feat:
        raise ValueError("need one loss per response and one regularizer per feature")
    a_blocks = [k_matrix[:, j : j + 1] for j in range(p_feat)]
    a_blocks += [-np.eye(q)[:, i : i + 1] for i in range(q)]
    zero_prox = ProxBlock(lambda x: 0.0, lambda g, v: v, 0.0)
    smooth = tuple(SmoothBlock.zero(1) for _ in range(p_feat)) + tuple(losses)
    prox = tuple(regularizers) + tuple(zero_prox for _ in range(q))
    return ProblemSpec(
        blocks=BlockStructure(tuple([1] * (p_feat + q))),
        smooth=smooth,
        prox=prox,
        a_blocks=tuple(a_blocks),
        b=b,
    )


def make_random_inconsistent_ls(
    seed: int,
    d: int,
    dims,
    q: int,
    noise: float,
    *,
    l_range=(1.0, 3.0),
    mu: float = 1.0,
    box=None,
    rank_deficiency: int = 0,
) -> ProblemSpec:
    """Random strongly convex quadratic test instance with a controllable
    inconsistency level.

    ``b = A xbar + xi`` where ``xi`` is drawn with norm scaled by ``noise``
    and then projected onto the orthogonal complement of range(A), so the
    attainable penalty minimum is exactly ``h* = 0.5 ||xi||^2`` and ``xbar``
    solves the normal equations.  With ``rank_deficiency > 0`` the coupling
    matrix is given a null space of that dimension so the feasible set is a
    nontrivial affine subspace.

    Smooth blocks are random convex quadratics with largest curvature equal
    to a draw from ``l_range``; the proximable part is ``mu/2 ||.||^2`` plus
    an optional coordinate box.  Ground truth (``xbar``, ``h*``) and, when no
    box is present, the full quadratic data are recorded in ``meta`` for
    independent reference solves.
    """
    if isinstance(dims, int):
        dims = [dims] * d
    dims = tuple(int(n) for n in dims)
    if len(dims) != d:
        raise ValueError("dims must provide one dimension per block")
    m = int(sum(dims))
    rng = np.random.default_rng(seed)

    if rank_deficiency:
        if not 0 < rank_deficiency < min(q, m):
            raise ValueError("rank_deficiency must be in (0, min(q, m))")
        # factored draw keeps entry variance at 1/m like the full-rank branch
        a = rng.standard_normal((q, m - rank_deficiency)) @ rng.standard_normal(
            (m - rank_deficiency, m)
        ) / math.sqrt(m * (m - rank_deficiency))
    else:
        a = rng.standard_normal((q, m)) / math.sqrt(m)

    xbar = rng.standard_normal(m)
    xi = np.zeros(q)
    if noise > 0:
        xi = rng.standard_normal(q)
        # remove the range(A) component so xbar stays a normal-equation solution
        u, s, _ = np.linalg.svd(a, full_matrices=False)
        rank = int(np.sum(s > s[0] * 1e-12)) if s.size else 0
        ur = u[:, :rank]
        xi = xi - ur @ (ur.T @ xi)
        nrm = np.linalg.norm(xi)
        if nrm > 0:
            xi *= noise / nrm
    b = a @ xbar + xi

    structure = BlockStructure(dims)
    smooth = []
    h_blocks = []
    c_blocks = []
    for i in range(d):
        ni = dims[i]
        l_i = float(rng.uniform(*l_range))
        basis = np.linalg.qr(rng.standard_normal((ni, ni)))[0]
        eigs = rng.uniform(0.1 * l_i, l_i, size=ni)
        eigs[rng.integers(ni)] = l_i
        h = basis @ np.diag(eigs) @ basis.T
        h = 0.5 * (h + h.T)
        c = rng.standard_normal(ni)
        smooth.append(SmoothBlock.quadratic(h, c))
        h_blocks.append(h)
        c_blocks.append(c)

    def make_prox(lo, hi):
        if lo is None:

            def value(xv):
                return 0.5 * mu * float(xv @ xv)

            def prox(g, v):
                return g * v / (g + mu)

        else:

            def value(xv):
                if np.any(xv < lo - 1e-12) or np.any(xv > hi + 1e-12):
                    return math.inf
                return 0.5 * mu * float(xv @ xv)

            def prox(g, v):
                return np.clip(g * v / (g + mu), lo, hi)

        return ProxBlock(value, prox, mu)

    lo, hi = (None, None) if box is None else box
    prox = tuple(make_prox(lo, hi) for _ in range(d))

    meta = {
        "x_ls": xbar,
        "h_star": 0.5 * float(xi @ xi),
        "xi": xi,
        "seed": seed,
    }
    if box is None:
        meta["quadratic"] = {"h_blocks": h_blocks, "c_blocks": c_blocks, "mu": mu}
    return ProblemSpec(
        blocks=structure,
        smooth=tuple(smooth),
        prox=prox,
        a_blocks=tuple(a[:, structure.block_slice(i)] for i in range(d)),
        b=b,
        meta=meta,
    )
