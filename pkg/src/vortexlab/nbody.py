"""Interaction drift ``b_i = (1/N) sum_{j != i} M_j K(X_i - X_j)``.

Two backends: direct O(N^2) summation, and a Barnes-Hut quadtree whose nodes
carry complex multipole coefficients of the vortex potential. For a node with
expansion center ``zc`` and coefficients ``a_k = sum_j m_j (z_j - zc)^k``,

    sum_j m_j / (z - z_j) = sum_k a_k / (z - zc)^(k+1)

and the velocity is ``u_x + i u_y = i * conj(S)`` with ``S`` the sum above.

Both backends parallelize over targets; each target accumulates its sum
sequentially, so results do not depend on the thread count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import VortexEnsemble, rng_stream, STREAM_SYNTHETIC
from .kernels import KernelSpec

COINCIDENT_R2 = 1e-28  # pairs closer than 1e-14


class CoincidentPairError(ArithmeticError):
    """Two vortices coincide under the exact kernel."""

    def __init__(self, i, j):
        super().__init__(f"vortices {i} and {j} coincide (distance < 1e-14) under the exact kernel")
        self.pair = (int(i), int(j))


# -- direct summation ---------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _pair(dx, dy, eps):
    r2 = dx * dx + dy * dy
    if r2 == 0.0:
        inv = 0.0
    elif r2 >= eps * eps:
        inv = 1.0 / r2
    else:
        r = math.sqrt(r2)
        inv = 0.0 if r == 0.0 else 1.0 / (r * eps)
    return -dy * inv, dx * inv


@nb.njit(parallel=True, cache=True)
def _direct_kernel(pos, m, targets, eps, inv_n, bad):
    nt = targets.shape[0]
    n = pos.shape[0]
    out = np.zeros((nt, 2))
    for t in nb.prange(nt):
        i = targets[t]
        xi = pos[i, 0]
        yi = pos[i, 1]
        sx = 0.0
        sy = 0.0
        for j in range(n):
            if j == i:
                continue
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            if eps == 0.0 and dx * dx + dy * dy < COINCIDENT_R2:
                bad[t] = j
                continue
            kx, ky = _pair(dx, dy, eps)
            sx += m[j] * kx
            sy += m[j] * ky
        out[t, 0] = sx * inv_n
        out[t, 1] = sy * inv_n
    return out


# thread start-up dominates for tiny systems; same arithmetic, so same bits
_direct_kernel_serial = nb.njit(cache=True)(_direct_kernel.py_func)
_SERIAL_BELOW = 256


def _direct_arrays(pos, m, targets, eps):
    bad = np.full(targets.size, -1, dtype=np.int64)
    kern = _direct_kernel_serial if len(m) < _SERIAL_BELOW else _direct_kernel
    out = kern(pos, m, targets, float(eps), 1.0 / len(m), bad)
    if eps == 0 and bad.max() >= 0:
        _raise_bad(bad, targets)
    return out


def _raise_bad(bad, targets):
    hit = np.flatnonzero(bad >= 0)
    if hit.size:
        t = hit[0]
        i, j = int(targets[t]), int(bad[t])
        raise CoincidentPairError(min(i, j), max(i, j))


def direct_drift(ensemble: VortexEnsemble, spec: KernelSpec = KernelSpec(), targets=None) -> np.ndarray:
    """Exact pairwise sum; ``targets`` restricts the evaluation to a subset of indices."""
    pos, m = ensemble.positions, ensemble.circulations
    tg = np.arange(len(m), dtype=np.int64) if targets is None else np.asarray(targets, dtype=np.int64)
    return _direct_arrays(pos, m, tg, spec.eps)


# -- quadtree -----------------------------------------------------------------

@nb.njit(cache=True)
def _build(pos, leaf_capacity, max_depth, cap, root_cx, root_cy, root_half):
    n = pos.shape[0]
    perm = np.arange(n)
    buf = np.empty(n, dtype=np.int64)
    cx = np.empty(cap)
    cy = np.empty(cap)
    half = np.empty(cap)
    start = np.empty(cap, dtype=np.int64)
    end = np.empty(cap, dtype=np.int64)
    depth = np.empty(cap, dtype=np.int64)
    child = np.full((cap, 4), -1, dtype=np.int64)
    leaf = np.zeros(cap, dtype=np.bool_)
    cx[0] = root_cx
    cy[0] = root_cy
    half[0] = root_half
    start[0] = 0
    end[0] = n
    depth[0] = 0
    count = 1
    stack = np.empty(4 * max_depth + 8, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        nd = stack[top]
        s, e = start[nd], end[nd]
        if e - s <= leaf_capacity or depth[nd] >= max_depth or half[nd] == 0.0:
            leaf[nd] = True
            continue
        # stable partition into quadrants; half-open cells [lo, mid) x [lo, mid)
        counts = np.zeros(4, dtype=np.int64)
        for a in range(s, e):
            p = perm[a]
            q = (1 if pos[p, 0] >= cx[nd] else 0) + (2 if pos[p, 1] >= cy[nd] else 0)
            counts[q] += 1
        offs = np.zeros(4, dtype=np.int64)
        for q in range(1, 4):
            offs[q] = offs[q - 1] + counts[q - 1]
        fill = offs.copy()
        for a in range(s, e):
            p = perm[a]
            q = (1 if pos[p, 0] >= cx[nd] else 0) + (2 if pos[p, 1] >= cy[nd] else 0)
            buf[s + fill[q]] = p
            fill[q] += 1
        for a in range(s, e):
            perm[a] = buf[a]
        h = 0.5 * half[nd]
        for q in range(4):
            if counts[q] == 0:
                continue
            if count >= cap:
                return perm, cx, cy, half, start, end, depth, child, leaf, -1
            c = count
            count += 1
            cx[c] = cx[nd] + (h if (q & 1) else -h)
            cy[c] = cy[nd] + (h if (q & 2) else -h)
            half[c] = h
            start[c] = s + offs[q]
            end[c] = s + offs[q] + counts[q]
            depth[c] = depth[nd] + 1
            child[nd, q] = c
            stack[top] = c
            top += 1
    return perm, cx, cy, half, start, end, depth, child, leaf, count


@nb.njit(parallel=True, cache=True)
def _moments(pos, m, perm, start, end, order_p):
    nn = start.shape[0]
    coeff = np.zeros((nn, order_p + 1), dtype=np.complex128)
    zc = np.zeros(nn, dtype=np.complex128)
    radius = np.zeros(nn)
    mono = np.zeros(nn)
    absm = np.zeros(nn)
    for nd in nb.prange(nn):
        wsum = 0.0
        xs = 0.0
        ys = 0.0
        msum = 0.0
        for a in range(start[nd], end[nd]):
            p = perm[a]
            w = abs(m[p])
            wsum += w
            xs += w * pos[p, 0]
            ys += w * pos[p, 1]
            msum += m[p]
        if wsum > 0.0:
            c = complex(xs / wsum, ys / wsum)
        else:
            c = complex(pos[perm[start[nd]], 0], pos[perm[start[nd]], 1])
        zc[nd] = c
        mono[nd] = msum
        absm[nd] = wsum
        rmax = 0.0
        for a in range(start[nd], end[nd]):
            p = perm[a]
            d = complex(pos[p, 0], pos[p, 1]) - c
            r = abs(d)
            if r > rmax:
                rmax = r
            pw = complex(m[p], 0.0)
            for k in range(order_p + 1):
                coeff[nd, k] += pw
                pw *= d
        radius[nd] = rmax
    return coeff, zc, radius, mono, absm


@dataclass
class QuadTree:
    """Flat-array quadtree over a fixed set of positions (immutable after build)."""

    positions: np.ndarray
    circulations: np.ndarray
    perm: np.ndarray
    center_x: np.ndarray
    center_y: np.ndarray
    half: np.ndarray
    start: np.ndarray
    end: np.ndarray
    depth: np.ndarray
    child: np.ndarray
    leaf: np.ndarray
    coeff: np.ndarray
    expansion_center: np.ndarray
    radius: np.ndarray
    monopole: np.ndarray
    abs_circulation: np.ndarray
    leaf_capacity: int
    order_p: int
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return self.start.shape[0]

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.leaf)

    def leaf_members(self, node: int) -> np.ndarray:
        return self.perm[self.start[node]:self.end[node]]

    def audit(self) -> None:
        """Check the structural invariants; raises AssertionError on violation."""
        n = self.positions.shape[0]
        seen = np.zeros(n, dtype=np.int64)
        for nd in self.leaves():
            seen[self.leaf_members(nd)] += 1
        assert np.all(seen == 1), "a particle is not in exactly one leaf"
        for nd in range(self.n_nodes):
            members = self.leaf_members(nd)
            p = self.positions[members]
            lo_x, lo_y = self.center_x[nd] - self.half[nd], self.center_y[nd] - self.half[nd]
            hi_x, hi_y = self.center_x[nd] + self.half[nd], self.center_y[nd] + self.half[nd]
            assert np.all((p[:, 0] >= lo_x) & (p[:, 0] <= hi_x) & (p[:, 1] >= lo_y) & (p[:, 1] <= hi_y))
            assert self.depth[nd] <= self.max_depth
            if self.leaf[nd]:
                assert len(members) <= self.leaf_capacity or self.depth[nd] == self.max_depth \
                    or np.ptp(p, axis=0).max() == 0
            else:
                kids = self.child[nd][self.child[nd] >= 0]
                total = self.monopole[kids].sum()
                scale = max(self.abs_circulation[nd], 1e-300)
                assert abs(total - self.monopole[nd]) <= 1e-12 * scale
                assert sum(self.end[k] - self.start[k] for k in kids) == len(members)


def build_tree(ensemble: VortexEnsemble, leaf_capacity: int = 16, order_p: int = 8,
               max_depth: int = 40) -> QuadTree:
    pos, m = ensemble.positions, ensemble.circulations
    n = pos.shape[0]
    if n < 1:
        raise ValueError("cannot build a tree over zero particles")
    if leaf_capacity < 1 or order_p < 0:
        raise ValueError("leaf_capacity must be >= 1 and order_p >= 0")
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    ctr = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo))
    half = half * (1 + 1e-12) + 1e-300 if half > 0 else 0.0
    cap = max(64, 8 * (n // leaf_capacity + 1) + 8 * max_depth)
    while True:
        out = _build(pos, leaf_capacity, max_depth, cap, float(ctr[0]), float(ctr[1]), half)
        count = out[-1]
        if count >= 0:
            break
        cap *= 2
    perm = out[0]
    cx, cy, hf, st, en, dp, ch, lf = (a[:count] for a in out[1:-1])
    coeff, zc, radius, mono, absm = _moments(pos, m, perm, st, en, order_p)
    return QuadTree(pos.copy(), m.copy(), perm, cx, cy, hf, st, en, dp, ch, lf, coeff, zc,
                    radius, mono, absm, leaf_capacity, order_p, max_depth)


@nb.njit(parallel=True, cache=True)
def _traverse(pos, m, perm, half, start, end, child, leaf, coeff, zc, radius,
              targets, theta, eps, inv_n, stack_size, bad, n_far):
    nt = targets.shape[0]
    out = np.zeros((nt, 2))
    order_p = coeff.shape[1] - 1
    for t in nb.prange(nt):
        i = targets[t]
        xi = pos[i, 0]
        yi = pos[i, 1]
        zi = complex(xi, yi)
        sx = 0.0
        sy = 0.0
        far = 0
        stack = np.empty(stack_size, dtype=np.int64)
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nd = stack[top]
            dz = zi - zc[nd]
            d = abs(dz)
            if (not leaf[nd]) or (end[nd] - start[nd] > 1):
                if d > radius[nd] and 2.0 * half[nd] < theta * d and d - radius[nd] >= eps:
                    w = 1.0 / dz
                    s = coeff[nd, order_p]
                    for k in range(order_p - 1, -1, -1):
                        s = s * w + coeff[nd, k]
                    s = s * w
                    sx += s.imag
                    sy += s.real
                    far += 1
                    continue
            if leaf[nd]:
                for a in range(start[nd], end[nd]):
                    j = perm[a]
                    if j == i:
                        continue
                    dx = xi - pos[j, 0]
                    dy = yi - pos[j, 1]
                    if eps == 0.0 and dx * dx + dy * dy < COINCIDENT_R2:
                        bad[t] = j
                        continue
                    kx, ky = _pair(dx, dy, eps)
                    sx += m[j] * kx
                    sy += m[j] * ky
            else:
                for q in range(3, -1, -1):
                    c = child[nd, q]
                    if c >= 0:
                        stack[top] = c
                        top += 1
        out[t, 0] = sx * inv_n
        out[t, 1] = sy * inv_n
        n_far[t] = far
    return out


def tree_drift(tree: QuadTree, ensemble: VortexEnsemble | None = None, theta: float = 0.5,
               spec: KernelSpec = KernelSpec(), targets=None) -> np.ndarray:
    """Barnes-Hut approximation of :func:`direct_drift`.

    A node is summarised by its multipole when ``node side < theta * distance``
    and the target lies outside the node's particle disc by at least the
    kernel cutoff (so the regularized and exact kernels agree there).
    ``theta = 0`` opens every node and reproduces direct summation.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    if ensemble is not None and not np.array_equal(ensemble.positions, tree.positions):
        raise ValueError("tree was built for different positions")
    n = tree.positions.shape[0]
    if targets is None:
        # tree order keeps consecutive targets on nearby nodes
        tg = tree.perm.astype(np.int64)
    else:
        tg = np.asarray(targets, dtype=np.int64)
    bad = np.full(tg.size, -1, dtype=np.int64)
    n_far = np.zeros(tg.size, dtype=np.int64)
    out = _traverse(tree.positions, tree.circulations, tree.perm, tree.half, tree.start, tree.end,
                    tree.child, tree.leaf, tree.coeff, tree.expansion_center, tree.radius, tg,
                    float(theta), float(spec.eps), 1.0 / n, 4 * tree.max_depth + 8, bad, n_far)
    _raise_bad(bad, tg)
    if targets is None:
        full = np.empty_like(out)
        full[tg] = out
        return full
    return out


def multipole_error_bound(abs_circulation: float, radius: float, distance: float, order_p: int,
                          n_total: int) -> float:
    """Bound on the truncated-expansion error of one node's velocity at a target."""
    rho = radius / distance
    if rho >= 1:
        return math.inf
    return abs_circulation / (n_total * distance) * rho ** (order_p + 1) / (1 - rho)


def drift_arrays(pos: np.ndarray, m: np.ndarray, spec: KernelSpec, backend: str = "direct",
                 theta: float = 0.5, order_p: int = 8, leaf_capacity: int = 16) -> np.ndarray:
    """Drift on raw ``(N, 2)`` positions and ``(N,)`` circulations."""
    if backend == "none":
        return np.zeros_like(pos)
    if backend == "direct":
        return _direct_arrays(pos, m, np.arange(len(m), dtype=np.int64), spec.eps)
    if backend == "tree":
        ens = VortexEnsemble(m, pos)
        return tree_drift(build_tree(ens, leaf_capacity, order_p), None, theta, spec)
    raise ValueError(f"unknown drift backend {backend!r}")


def compute_drift(ensemble: VortexEnsemble, spec: KernelSpec, backend: str = "direct",
                  theta: float = 0.5, order_p: int = 8, leaf_capacity: int = 16) -> np.ndarray:
    return drift_arrays(ensemble.positions, ensemble.circulations, spec, backend, theta,
                        order_p, leaf_capacity)


def relative_l2_error(approx: np.ndarray, exact: np.ndarray) -> float:
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


# -- benchmark harness ----------------------------------------------------------

BENCH_HEADER = "backend,N,theta,p,epsilon,seconds,rel_err"


def random_ensemble(n: int, seed: int, signed: bool = False) -> VortexEnsemble:
    """Uniform positions in the unit square with unit (or random-sign) circulations."""
    rng = rng_stream(seed, STREAM_SYNTHETIC)
    pos = rng.random((n, 2))
    m = np.where(rng.random(n) < 0.5, -1.0, 1.0) if signed else np.ones(n)
    return VortexEnsemble(m, pos, 0.0, seed, 0)


def bench_one(n: int, theta: float, order_p: int, epsilon: float, seed: int = 0,
              n_check: int = 1000, repeats: int = 3) -> list[dict]:
    """Time direct and tree evaluations; errors are measured against direct sums on
    ``n_check`` sampled targets (all targets when ``n <= n_check``)."""
    ens = random_ensemble(n, seed)
    spec = KernelSpec.from_epsilon(epsilon)
    rng = rng_stream(seed, STREAM_SYNTHETIC, 1)
    targets = np.arange(n) if n <= n_check else np.sort(rng.choice(n, n_check, replace=False))
    ref = direct_drift(ens, spec, targets)
    rows = []
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        tree = build_tree(ens, order_p=order_p)
        approx = tree_drift(tree, None, theta, spec)
        best = min(best, time.perf_counter() - t0)
    rows.append({"backend": "tree", "N": n, "theta": theta, "p": order_p, "epsilon": epsilon,
                 "seconds": best, "rel_err": relative_l2_error(approx[targets], ref)})
    if n <= 20000:
        t0 = time.perf_counter()
        direct_drift(ens, spec)
        rows.append({"backend": "direct", "N": n, "theta": 0.0, "p": 0, "epsilon": epsilon,
                     "seconds": time.perf_counter() - t0, "rel_err": 0.0})
    return rows


def bench_csv_line(row: dict) -> str:
    return (f"{row['backend']},{row['N']},{row['theta']!r},{row['p']},{row['epsilon']!r},"
            f"{row['seconds']:.6f},{row['rel_err']!r}")
