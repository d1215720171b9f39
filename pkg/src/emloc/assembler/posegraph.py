"""Robust pose-graph optimization with switchable loop constraints.

Odometry constraints are ordinary SE(3) between-factors. Every loop
(co-location) constraint has its residual multiplied by a switch variable
s in [0, 1]; a quadratic prior pulls each switch toward 1, so the optimizer
can turn off closures that disagree with the rest of the graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from ..geometry import Pose6D

log = logging.getLogger(__name__)


@dataclass
class Constraint:
    i: int
    j: int
    measurement: Pose6D  # pose of j in the frame of i
    information: np.ndarray  # 6x6, ordered (translation, rotation)

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise ValueError("information matrix must be 6x6")
        if not np.allclose(info, info.T) or np.linalg.eigvalsh(info).min() <= 0:
            raise ValueError("information matrix must be symmetric positive definite")
        self.information = info


@dataclass
class PoseGraphProblem:
    poses: list  # initial Pose6D per variable
    odometry: list = field(default_factory=list)
    loops: list = field(default_factory=list)
    anchors: Optional[set] = None  # default: lowest index of each connected component
    switch_prior_weight: float = 1.0
    initial_switches: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.poses)
        for c in list(self.odometry) + list(self.loops):
            if not (0 <= c.i < n and 0 <= c.j < n):
                raise ValueError(f"constraint {c.i}->{c.j} references a missing pose")
        if self.anchors is None:
            self.anchors = _component_anchors(n, self.odometry + self.loops)


@dataclass
class PoseGraphResult:
    poses: list
    switches: np.ndarray
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool

    def loop_residual_chi2(self, problem: PoseGraphProblem) -> np.ndarray:
        return _constraint_chi2(self.poses, problem.loops)


def _component_anchors(n: int, constraints) -> set:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for c in constraints:
        ra, rb = find(c.i), find(c.j)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return {i for i in range(n) if find(i) == i}


def _residuals(ti, Ri, tj, Rj, tz, Rz, L):
    """Whitened between-factor residuals for batches of constraints."""
    dt = np.einsum("cji,cj->ci", Ri, tj - ti)
    rt = np.einsum("cji,cj->ci", Rz, dt - tz)
    Rerr = np.einsum("cji,ckj,ckl->cil", Rz, Ri, Rj)
    rr = Rotation.from_matrix(Rerr).as_rotvec()
    r = np.concatenate([rt, rr], axis=1)
    return np.einsum("cji,cj->ci", L, r)


def _constraint_chi2(poses, constraints) -> np.ndarray:
    if not constraints:
        return np.zeros(0)
    t = np.array([p.translation for p in poses])
    R = np.array([p.R for p in poses])
    r = _stack_residuals(t, R, _pack(constraints))
    return np.sum(r * r, axis=1)


def _pack(constraints):
    i = np.array([c.i for c in constraints], dtype=np.int64)
    j = np.array([c.j for c in constraints], dtype=np.int64)
    tz = np.array([c.measurement.translation for c in constraints]).reshape(-1, 3)
    Rz = np.array([c.measurement.R for c in constraints]).reshape(-1, 3, 3)
    L = np.array([np.linalg.cholesky(c.information) for c in constraints]).reshape(-1, 6, 6)
    return i, j, tz, Rz, L


def _stack_residuals(t, R, packed):
    i, j, tz, Rz, L = packed
    return _residuals(t[i], R[i], t[j], R[j], tz, Rz, L)


def _perturb(t, R, k, h):
    """Apply a step of size h on parameter k of a batch of poses."""
    t2, R2 = t.copy(), R
    if k < 3:
        t2[:, k] += h
    else:
        w = np.zeros((t.shape[0], 3))
        w[:, k - 3] = h
        R2 = R @ Rotation.from_rotvec(w).as_matrix()
    return t2, R2


def _jacobian_blocks(t, R, packed, h=1e-6):
    """Central-difference Jacobians of each constraint w.r.t. both endpoints: (C, 6, 6) x 2."""
    i, j, tz, Rz, L = packed
    C = i.size
    Ji = np.empty((C, 6, 6))
    Jj = np.empty((C, 6, 6))
    ti, Ri, tj, Rj = t[i], R[i], t[j], R[j]
    for k in range(6):
        a, b = _perturb(ti, Ri, k, h), _perturb(ti, Ri, k, -h)
        Ji[:, :, k] = (_residuals(*a, tj, Rj, tz, Rz, L) - _residuals(*b, tj, Rj, tz, Rz, L)) / (2 * h)
        a, b = _perturb(tj, Rj, k, h), _perturb(tj, Rj, k, -h)
        Jj[:, :, k] = (_residuals(ti, Ri, *a, tz, Rz, L) - _residuals(ti, Ri, *b, tz, Rz, L)) / (2 * h)
    return Ji, Jj


class _State:
    def __init__(self, t, R, s):
        self.t, self.R, self.s = t, R, s


def optimize_graph(
    problem: PoseGraphProblem,
    max_iterations: int = 100,
    rel_tol: float = 1e-9,
    lambda_init: float = 1e-4,
    continuation: bool = True,
) -> PoseGraphResult:
    """Levenberg-Marquardt over pose increments and switch values.

    Poses are updated as t <- t + dt (world frame) and R <- R Exp(dw). The
    anchored poses are held fixed exactly. Switches are clamped to [0, 1]
    after every step. Steps that increase the cost are rejected.

    With ``continuation`` the switch prior starts stiff and is relaxed by
    decades down to ``problem.switch_prior_weight``; each stage is a full LM
    run. Without it, a large initial loop error drives every switch to zero
    before the poses have moved, which is a local minimum.
    """
    n = len(problem.poses)
    t0 = np.array([p.translation for p in problem.poses]).reshape(n, 3)
    R0 = np.array([p.R for p in problem.poses]).reshape(n, 3, 3)
    nl = len(problem.loops)
    s0 = np.ones(nl) if problem.initial_switches is None else np.asarray(problem.initial_switches, float).copy()
    target = problem.switch_prior_weight
    weights = [target]
    if continuation and nl:
        chi0 = _constraint_chi2(problem.poses, problem.loops)
        decades = int(np.clip(np.ceil(np.log10(max(chi0.max(), 1.0) / target)), 0, 10))
        weights = [target * 10.0 ** m for m in range(decades, -1, -1)]
    st = _State(t0, R0, s0)
    initial_cost = _LM(problem, target).cost_of(st)
    total_it = 0
    for w in weights:
        st, cost, it, converged = _lm(problem, st, w, max_iterations, rel_tol, lambda_init)
        total_it += it
    if cost > initial_cost:
        st, cost = _State(t0, R0, s0), initial_cost
    if not converged:
        log.warning("pose graph optimization hit %d iterations, final cost %.6g", total_it, cost)
    poses = [Pose6D.from_matrix(st.R[k], st.t[k]) for k in range(n)]
    for k in problem.anchors:
        poses[k] = problem.poses[k]
    return PoseGraphResult(poses, st.s, initial_cost, cost, total_it, converged)


def _lm(problem, st, prior_weight, max_iterations, rel_tol, lambda_init):
    m = _LM(problem, prior_weight)
    cost = m.cost_of(st)
    lam = lambda_init
    converged = m.n_vars == 0 or cost == 0.0
    it = 0
    while not converged and it < max_iterations:
        it += 1
        r, J = m.linearize(st)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        diag = H.diagonal()
        accepted = False
        while lam < 1e16:
            A = H + sp.diags(lam * np.maximum(diag, 1e-12), format="csc")
            delta = spla.spsolve(A, -g)
            if not np.all(np.isfinite(delta)):
                lam *= 10
                continue
            cand = m.apply(st, delta)
            c_new = m.cost_of(cand)
            if c_new < cost:
                rel = (cost - c_new) / max(cost, 1e-300)
                st, cost = cand, c_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if rel < rel_tol:
                    converged = True
                break
            lam *= 10
        if not accepted:
            # no descent direction left at any damping level
            converged = True
    return st, cost, it, converged


class _LM:
    def __init__(self, problem: PoseGraphProblem, prior_weight: float):
        n = len(problem.poses)
        nl = len(problem.loops)
        free = [k for k in range(n) if k not in problem.anchors]
        col = -np.ones(n, dtype=np.int64)
        col[free] = np.arange(len(free)) * 6
        self.free = free
        self.col = col
        self.n_pose_vars = 6 * len(free)
        self.n_vars = self.n_pose_vars + nl
        self.odo = _pack(problem.odometry) if problem.odometry else None
        self.lp = _pack(problem.loops) if problem.loops else None
        self.sw = np.sqrt(prior_weight)

    def residual_vector(self, st):
        parts = []
        if self.odo is not None:
            parts.append(_stack_residuals(st.t, st.R, self.odo).ravel())
        if self.lp is not None:
            rl = _stack_residuals(st.t, st.R, self.lp)
            parts.append((rl * st.s[:, None]).ravel())
            parts.append(self.sw * (1.0 - st.s))
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost_of(self, st):
        r = self.residual_vector(st)
        return float(r @ r)

    def linearize(self, st):
        col, sw, n_pose_vars = self.col, self.sw, self.n_pose_vars
        rows, cols, vals = [], [], []
        r_parts = []
        row0 = 0
        for packed, switched in ((self.odo, False), (self.lp, True)):
            if packed is None:
                continue
            i, j = packed[0], packed[1]
            C = i.size
            r = _stack_residuals(st.t, st.R, packed)
            Ji, Jj = _jacobian_blocks(st.t, st.R, packed)
            if switched:
                Ji = Ji * st.s[:, None, None]
                Jj = Jj * st.s[:, None, None]
            rr = np.arange(C)[:, None] * 6 + np.arange(6)[None, :] + row0
            for J, ends in ((Ji, i), (Jj, j)):
                ok = col[ends] >= 0
                if not ok.any():
                    continue
                R_idx = np.repeat(rr[ok][:, :, None], 6, axis=2)
                C_idx = np.repeat((col[ends][ok][:, None] + np.arange(6)[None, :])[:, None, :], 6, axis=1)
                rows.append(R_idx.ravel())
                cols.append(C_idx.ravel())
                vals.append(J[ok].ravel())
            if switched:
                # d(s * r)/ds = r
                rows.append(rr.ravel())
                cols.append(np.repeat(n_pose_vars + np.arange(C), 6))
                vals.append(r.ravel())
                r_parts.append((r * st.s[:, None]).ravel())
                row0 += 6 * C
                rows.append(row0 + np.arange(C))
                cols.append(n_pose_vars + np.arange(C))
                vals.append(np.full(C, -sw))
                r_parts.append(sw * (1.0 - st.s))
                row0 += C
            else:
                r_parts.append(r.ravel())
                row0 += 6 * C
        rvec = np.concatenate(r_parts) if r_parts else np.zeros(0)
        if rows:
            J = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(row0, self.n_vars),
            )
        else:
            J = sp.csr_matrix((row0, self.n_vars))
        return rvec, J

    def apply(self, st, delta):
        t = st.t.copy()
        R = st.R.copy()
        free = self.free
        if free:
            d = delta[: self.n_pose_vars].reshape(-1, 6)
            t[free] += d[:, :3]
            R[free] = R[free] @ Rotation.from_rotvec(d[:, 3:]).as_matrix()
        s = np.clip(st.s + delta[self.n_pose_vars:], 0.0, 1.0)
        return _State(t, R, s)
