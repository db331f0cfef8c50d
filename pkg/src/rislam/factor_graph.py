"""Nonlinear factor graph with LM optimization, robust kernels, marginalization.

Serves as the substrate for both the sliding odometry graph (augmented
15-DOF states, Huber kernels) and the global pose-graph (6-DOF keyframe
poses, pseudo-Huber kernels). Vertices live on manifolds; increments are
applied through a decoupled retraction (rotation right-multiplied by
Exp(delta), everything else additive) with tangent ordering

    Pose:           (theta, p)
    AugmentedState: (theta, p, v, b_gyro, b_accel)

Normal equations are assembled densely for small problems and as sparse
CSC for large ones (solved by a fill-reducing sparse LU, the SciPy stand-in
for a sparse Cholesky).
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.stats import chi2 as chi2_dist

from .geometry import Pose3, Rot3, skew, so3_right_jacobian_inv
from .preintegration import PreintegratedImu
from .preintegration import residual as preintegration_residual
from .state import NavState


class FactorGraphError(RuntimeError):
    """Optimization cannot proceed (gauge freedom, non-finite chi^2, ...)."""


class VertexKind(enum.Enum):
    AUGMENTED_STATE = "AugmentedState"
    POSE = "Pose"


class EdgeKind(enum.Enum):
    POSE_PRIOR = "PosePrior"
    POSITION_PRIOR = "PositionPrior"
    PREINTEGRATION = "Preintegration"
    RELATIVE_POSE = "RelativePose"
    MARGINAL_PRIOR = "MarginalPrior"


class RobustKernel(enum.Enum):
    NONE = "None"
    HUBER = "Huber"
    PSEUDO_HUBER = "PseudoHuber"


_VERTEX_DOF = {VertexKind.AUGMENTED_STATE: 15, VertexKind.POSE: 6}

_UNARY = (EdgeKind.POSE_PRIOR, EdgeKind.POSITION_PRIOR, EdgeKind.MARGINAL_PRIOR)

MARGINAL_EIGENVALUE_FLOOR = 1e-9


def kernel_delta(dof: int, quantile: float = 0.95) -> float:
    """Kernel threshold: sqrt of the chi^2 quantile for `dof` dimensions,
    applied to the whitened squared edge error."""
    return float(np.sqrt(chi2_dist.ppf(quantile, dof)))


def robust_rho(kernel: RobustKernel, delta: float, e: float) -> tuple[float, float]:
    """(rho(e), weight rho'(e)) for squared whitened error e."""
    if e < 0:
        raise ValueError("squared error must be >= 0")
    if delta <= 0:
        raise ValueError("kernel delta must be > 0")
    if kernel is RobustKernel.NONE:
        return e, 1.0
    if kernel is RobustKernel.HUBER:
        if e <= delta * delta:
            return e, 1.0
        root = np.sqrt(e)
        return 2.0 * delta * root - delta * delta, delta / root
    if kernel is RobustKernel.PSEUDO_HUBER:
        ratio = np.sqrt(1.0 + e / (delta * delta))
        return 2.0 * delta * delta * (ratio - 1.0), 1.0 / ratio
    raise ValueError(f"unknown kernel {kernel!r}")


@dataclass
class Vertex:
    id: int
    kind: VertexKind
    estimate: object
    fixed: bool = False


@dataclass
class Edge:
    id: int
    kind: EdgeKind
    vertices: tuple[int, ...]
    measurement: object
    information: np.ndarray
    kernel: RobustKernel = RobustKernel.NONE
    kernel_delta: float = 1.0


@dataclass(frozen=True)
class PositionMeasurement:
    """A 3-D position observation of the antenna, offset from the body
    origin by a fixed lever arm expressed in the body frame."""

    position: np.ndarray
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class PreintegrationMeasurement:
    preint: PreintegratedImu
    gravity: np.ndarray


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 50
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e8
    increment_tolerance: float = 1e-10


@dataclass(frozen=True)
class OptimizeReport:
    initial_chi2: float
    final_chi2: float
    iterations: int
    converged: bool
    edge_chi2: dict[int, float]


# ---------------------------------------------------------------------------
# Residuals and Jacobians (with respect to the pose-slice tangent (theta, p))


def _pose_residual(meas: Pose3, est: Pose3) -> tuple[np.ndarray, np.ndarray]:
    r_rot = meas.rotation.inverse().compose(est.rotation).log()
    r = np.concatenate([r_rot, est.translation - meas.translation])
    J = np.zeros((6, 6))
    J[0:3, 0:3] = so3_right_jacobian_inv(r_rot)
    J[3:6, 3:6] = np.eye(3)
    return r, J


def _relative_pose_residual(
    meas: Pose3, pi: Pose3, pj: Pose3
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    E = pi.rotation.inverse().compose(pj.rotation)
    r_rot = meas.rotation.inverse().compose(E).log()
    u = pi.rotation.inverse().rotate(pj.translation - pi.translation)
    r = np.concatenate([r_rot, u - meas.translation])
    Jr_inv = so3_right_jacobian_inv(r_rot)
    Ri_t = pi.rotation.matrix().T
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[0:3, 0:3] = -Jr_inv @ E.matrix().T
    Ji[3:6, 0:3] = skew(u)
    Ji[3:6, 3:6] = -Ri_t
    Jj[0:3, 0:3] = Jr_inv
    Jj[3:6, 3:6] = Ri_t
    return r, Ji, Jj


def _position_residual(
    meas: PositionMeasurement, est: Pose3
) -> tuple[np.ndarray, np.ndarray]:
    R = est.rotation.matrix()
    r = est.translation + R @ meas.lever_arm - meas.position
    J = np.zeros((3, 6))
    J[:, 0:3] = -R @ skew(meas.lever_arm)
    J[:, 3:6] = np.eye(3)
    return r, J


def _pose_of(estimate) -> Pose3:
    return estimate.pose if isinstance(estimate, NavState) else estimate


def _embed(J_pose: np.ndarray, dof: int) -> np.ndarray:
    """Widen a pose-slice Jacobian to the vertex's full tangent width."""
    if J_pose.shape[1] == dof:
        return J_pose
    out = np.zeros((J_pose.shape[0], dof))
    out[:, 0:6] = J_pose
    return out


def _marginal_residual(meas, est, dof: int) -> tuple[np.ndarray, np.ndarray]:
    r6, J6 = _pose_residual(_pose_of(meas), _pose_of(est))
    if dof == 6:
        return r6, J6
    r = np.concatenate(
        [
            r6,
            est.velocity - meas.velocity,
            est.gyro_bias - meas.gyro_bias,
            est.accel_bias - meas.accel_bias,
        ]
    )
    J = np.eye(15)
    J[0:6, 0:6] = J6
    return r, J


def _edge_terms(edge: Edge, vertices: dict[int, Vertex], estimates: dict):
    """(residual, [(vertex id, full-width Jacobian), ...]) at `estimates`."""
    kind = edge.kind
    if kind is EdgeKind.POSE_PRIOR:
        (vid,) = edge.vertices
        dof = _VERTEX_DOF[vertices[vid].kind]
        r, J = _pose_residual(edge.measurement, _pose_of(estimates[vid]))
        return r, [(vid, _embed(J, dof))]
    if kind is EdgeKind.POSITION_PRIOR:
        (vid,) = edge.vertices
        dof = _VERTEX_DOF[vertices[vid].kind]
        r, J = _position_residual(edge.measurement, _pose_of(estimates[vid]))
        return r, [(vid, _embed(J, dof))]
    if kind is EdgeKind.MARGINAL_PRIOR:
        (vid,) = edge.vertices
        dof = _VERTEX_DOF[vertices[vid].kind]
        r, J = _marginal_residual(edge.measurement, estimates[vid], dof)
        return r, [(vid, J)]
    if kind is EdgeKind.RELATIVE_POSE:
        vi, vj = edge.vertices
        r, Ji, Jj = _relative_pose_residual(
            edge.measurement, _pose_of(estimates[vi]), _pose_of(estimates[vj])
        )
        return r, [
            (vi, _embed(Ji, _VERTEX_DOF[vertices[vi].kind])),
            (vj, _embed(Jj, _VERTEX_DOF[vertices[vj].kind])),
        ]
    if kind is EdgeKind.PREINTEGRATION:
        vi, vj = edge.vertices
        r, Ji, Jj = preintegration_residual(
            edge.measurement.preint,
            estimates[vi],
            estimates[vj],
            edge.measurement.gravity,
        )
        return r, [(vi, Ji), (vj, Jj)]
    raise ValueError(f"unknown edge kind {kind!r}")


def _edge_dim(edge: Edge, vertices: dict[int, Vertex]) -> int:
    if edge.kind is EdgeKind.POSITION_PRIOR:
        return 3
    if edge.kind is EdgeKind.PREINTEGRATION:
        return 15
    if edge.kind is EdgeKind.MARGINAL_PRIOR:
        return _VERTEX_DOF[vertices[edge.vertices[0]].kind]
    return 6


def _retract(kind: VertexKind, estimate, delta: np.ndarray):
    pose = _pose_of(estimate)
    new_pose = Pose3(
        pose.rotation.compose(Rot3.exp(delta[0:3])), pose.translation + delta[3:6]
    )
    if kind is VertexKind.POSE:
        return new_pose
    return NavState(
        new_pose,
        estimate.velocity + delta[6:9],
        estimate.gyro_bias + delta[9:12],
        estimate.accel_bias + delta[12:15],
    )


def _check_finite_estimate(kind: VertexKind, estimate) -> None:
    if kind is VertexKind.POSE:
        if not isinstance(estimate, Pose3):
            raise ValueError("Pose vertex needs a Pose3 estimate")
        ok = np.isfinite(estimate.translation).all() and np.isfinite(
            estimate.rotation.q
        ).all()
    else:
        if not isinstance(estimate, NavState):
            raise ValueError("AugmentedState vertex needs a NavState estimate")
        ok = True  # NavState validates itself on construction
    if not ok:
        raise ValueError("vertex estimate must be finite")


_DENSE_LIMIT = 240  # total tangent dimension below which we solve densely


class FactorGraph:
    """Mutable container of vertices and edges with an LM optimizer."""

    def __init__(self) -> None:
        self._vertices: dict[int, Vertex] = {}
        self._edges: dict[int, Edge] = {}
        self._next_vertex_id = 0
        self._next_edge_id = 0

    # -- construction -------------------------------------------------------

    def add_vertex(
        self, kind: VertexKind, estimate, fixed: bool = False, vertex_id=None
    ) -> int:
        if vertex_id is None:
            vertex_id = self._next_vertex_id
        if vertex_id in self._vertices:
            raise ValueError(f"duplicate vertex id {vertex_id}")
        _check_finite_estimate(kind, estimate)
        self._vertices[vertex_id] = Vertex(vertex_id, kind, estimate, fixed)
        self._next_vertex_id = max(self._next_vertex_id, vertex_id + 1)
        return vertex_id

    def add_edge(
        self,
        kind: EdgeKind,
        vertex_ids,
        measurement,
        information: np.ndarray,
        kernel: RobustKernel = RobustKernel.NONE,
        delta: float | None = None,
    ) -> int:
        ids = (vertex_ids,) if np.isscalar(vertex_ids) else tuple(vertex_ids)
        for vid in ids:
            if vid not in self._vertices:
                raise ValueError(f"edge references missing vertex {vid}")
        expected = 1 if kind in _UNARY else 2
        if len(ids) != expected:
            raise ValueError(f"{kind.value} edge needs {expected} vertices")
        if kind is EdgeKind.PREINTEGRATION:
            for vid in ids:
                if self._vertices[vid].kind is not VertexKind.AUGMENTED_STATE:
                    raise ValueError("preintegration edges join augmented states")
            if not isinstance(measurement, PreintegrationMeasurement):
                raise ValueError("preintegration edge needs its measurement type")
        if kind is EdgeKind.POSITION_PRIOR and not isinstance(
            measurement, PositionMeasurement
        ):
            raise ValueError("position prior needs a PositionMeasurement")
        info = np.asarray(information, dtype=float)
        edge_id = self._next_edge_id
        edge = Edge(edge_id, kind, ids, measurement, info, kernel, 1.0)
        dim = _edge_dim(edge, self._vertices)
        if info.shape != (dim, dim):
            raise ValueError(f"information must be {dim}x{dim} for {kind.value}")
        if not np.isfinite(info).all():
            raise ValueError("information must be finite")
        if not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information must be symmetric")
        vals = np.linalg.eigvalsh(info)
        if vals.min() < -1e-9 * max(1.0, float(vals.max())):
            raise ValueError("information must be positive semidefinite")
        edge.kernel_delta = kernel_delta(dim) if delta is None else float(delta)
        self._edges[edge_id] = edge
        self._next_edge_id += 1
        return edge_id

    def remove_edge(self, edge_id: int) -> None:
        if edge_id not in self._edges:
            raise ValueError(f"no edge with id {edge_id}")
        del self._edges[edge_id]

    # -- access --------------------------------------------------------------

    def get_estimate(self, vertex_id: int):
        return self._vertices[vertex_id].estimate

    def set_estimate(self, vertex_id: int, estimate) -> None:
        vertex = self._vertices[vertex_id]
        _check_finite_estimate(vertex.kind, estimate)
        vertex.estimate = estimate

    def vertex(self, vertex_id: int) -> Vertex:
        return self._vertices[vertex_id]

    def edge(self, edge_id: int) -> Edge:
        return self._edges[edge_id]

    @property
    def vertex_ids(self) -> list[int]:
        return list(self._vertices)

    @property
    def edge_ids(self) -> list[int]:
        return list(self._edges)

    def __len__(self) -> int:
        return len(self._vertices)

    # -- evaluation ----------------------------------------------------------

    def _estimates(self) -> dict:
        return {vid: v.estimate for vid, v in self._vertices.items()}

    def _edge_squared_error(self, edge: Edge, estimates: dict) -> float:
        r, _ = _edge_terms(edge, self._vertices, estimates)
        return float(r @ edge.information @ r)

    def edge_chi2(self, estimates: dict | None = None) -> dict[int, float]:
        """Raw whitened squared error per edge (no robust re-weighting)."""
        estimates = self._estimates() if estimates is None else estimates
        return {
            eid: self._edge_squared_error(edge, estimates)
            for eid, edge in self._edges.items()
        }

    def chi2(self, estimates: dict | None = None) -> float:
        """Total robustified chi^2: sum of rho(e) over edges."""
        estimates = self._estimates() if estimates is None else estimates
        total = 0.0
        for eid, edge in self._edges.items():
            e = self._edge_squared_error(edge, estimates)
            if not np.isfinite(e):
                raise FactorGraphError(f"non-finite chi^2 on edge {eid}")
            rho, _ = robust_rho(edge.kernel, edge.kernel_delta, e)
            total += rho
        return total

    def _chi2_soft(self, estimates: dict, edge_ids=None) -> float:
        """Like chi2() but returns inf instead of raising, for LM trials."""
        edges = (
            self._edges.values()
            if edge_ids is None
            else (self._edges[eid] for eid in edge_ids)
        )
        total = 0.0
        for edge in edges:
            e = self._edge_squared_error(edge, estimates)
            if not np.isfinite(e):
                return float("inf")
            total += robust_rho(edge.kernel, edge.kernel_delta, e)[0]
        return total

    # -- optimization --------------------------------------------------------

    def _free_index(self, scope) -> dict[int, tuple[int, int]]:
        scoped = set(self._vertices if scope is None else scope)
        for vid in scoped:
            if vid not in self._vertices:
                raise ValueError(f"scope references missing vertex {vid}")
        index: dict[int, tuple[int, int]] = {}
        offset = 0
        for vid, vertex in self._vertices.items():
            if vid in scoped and not vertex.fixed:
                dof = _VERTEX_DOF[vertex.kind]
                index[vid] = (offset, dof)
                offset += dof
        return index

    def _check_gauge(self, index: dict[int, tuple[int, int]]) -> None:
        """Every connected component of free vertices must touch a unary
        edge or an anchored (fixed / out-of-scope) vertex."""
        parent = {vid: vid for vid in index}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        anchored_nodes = set()
        for edge in self._edges.values():
            free = [v for v in edge.vertices if v in index]
            if not free:
                continue
            if len(edge.vertices) == 1 or len(free) < len(edge.vertices):
                anchored_nodes.update(free)
            elif len(free) == 2:
                a, b = find(free[0]), find(free[1])
                if a != b:
                    parent[max(a, b)] = min(a, b)
        anchored = {find(v) for v in anchored_nodes}
        for vid in index:
            if find(vid) not in anchored:
                raise FactorGraphError(
                    f"gauge-free subproblem: vertex {vid} is not tied to any "
                    "prior or fixed vertex"
                )

    def _linearize(self, estimates: dict, index: dict[int, tuple[int, int]], edge_ids=None):
        dim = sum(dof for _, dof in index.values())
        dense = dim <= _DENSE_LIMIT
        H = np.zeros((dim, dim)) if dense else None
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        g = np.zeros(dim)
        chi2 = 0.0
        items = (
            self._edges.items()
            if edge_ids is None
            else ((eid, self._edges[eid]) for eid in edge_ids)
        )
        for eid, edge in items:
            if not any(v in index for v in edge.vertices):
                r, _ = _edge_terms(edge, self._vertices, estimates)
                e = float(r @ edge.information @ r)
                if not np.isfinite(e):
                    raise FactorGraphError(f"non-finite chi^2 on edge {eid}")
                chi2 += robust_rho(edge.kernel, edge.kernel_delta, e)[0]
                continue
            r, blocks = _edge_terms(edge, self._vertices, estimates)
            info_r = edge.information @ r
            e = float(r @ info_r)
            if not np.isfinite(e):
                raise FactorGraphError(f"non-finite chi^2 on edge {eid}")
            rho, w = robust_rho(edge.kernel, edge.kernel_delta, e)
            chi2 += rho
            blocks = [(vid, J) for vid, J in blocks if vid in index]
            whitened = [(vid, edge.information @ J) for vid, J in blocks]
            for vid, J in blocks:
                off, dof = index[vid]
                g[off : off + dof] += w * (J.T @ info_r)
            for a, (vid_a, Ja) in enumerate(blocks):
                off_a, dof_a = index[vid_a]
                for vid_b, WJb in whitened[a:]:
                    off_b, dof_b = index[vid_b]
                    block = w * (Ja.T @ WJb)
                    if dense:
                        H[off_a : off_a + dof_a, off_b : off_b + dof_b] += block
                        if vid_a != vid_b:
                            H[off_b : off_b + dof_b, off_a : off_a + dof_a] += block.T
                    else:
                        rr, cc = np.meshgrid(
                            np.arange(off_a, off_a + dof_a),
                            np.arange(off_b, off_b + dof_b),
                            indexing="ij",
                        )
                        rows.append(rr.ravel())
                        cols.append(cc.ravel())
                        vals.append(block.ravel())
                        if vid_a != vid_b:
                            rows.append(cc.ravel())
                            cols.append(rr.ravel())
                            vals.append(block.T.ravel())
        if not dense:
            H = scipy.sparse.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(dim, dim),
            ).tocsc()
        return chi2, H, g

    @staticmethod
    def _solve(H, g: np.ndarray, lam: float) -> np.ndarray | None:
        if scipy.sparse.issparse(H):
            diag = H.diagonal().copy()
            diag[diag <= 0] = 1.0
            damped = H + scipy.sparse.diags(lam * diag)
            try:
                lu = scipy.sparse.linalg.splu(damped.tocsc(), permc_spec="COLAMD")
                delta = lu.solve(-g)
            except RuntimeError:
                return None
        else:
            diag = np.diag(H).copy()
            diag[diag <= 0] = 1.0
            damped = H + np.diag(lam * diag)
            try:
                chol = scipy.linalg.cho_factor(damped, check_finite=False)
                delta = scipy.linalg.cho_solve(chol, -g, check_finite=False)
            except scipy.linalg.LinAlgError:
                return None
        return delta if np.isfinite(delta).all() else None

    def _apply(self, estimates: dict, index, delta: np.ndarray) -> dict:
        out = dict(estimates)
        for vid, (off, dof) in index.items():
            kind = self._vertices[vid].kind
            out[vid] = _retract(kind, estimates[vid], delta[off : off + dof])
        return out

    def optimize(self, scope=None, config: OptimizerConfig | None = None):
        config = config or OptimizerConfig()
        index = self._free_index(scope)
        if not index:
            raise FactorGraphError("no free vertices in scope")
        self._check_gauge(index)

        # Edges whose vertices are all frozen contribute a constant to the
        # cost; the subproblem below excludes them so the per-step work stays
        # proportional to the scope, not the whole graph.
        active = [
            eid
            for eid, edge in self._edges.items()
            if any(v in index for v in edge.vertices)
        ]
        estimates = self._estimates()
        chi2, H, g = self._linearize(estimates, index, active)
        initial_chi2 = chi2
        lam = config.lambda_init
        iterations = 0
        converged = False
        for _ in range(config.max_iterations):
            accepted = False
            while lam <= config.lambda_max:
                delta = self._solve(H, g, lam)
                if delta is None:
                    lam *= config.lambda_factor
                    continue
                if np.abs(delta).max() < config.increment_tolerance:
                    converged = True
                    break
                candidate = self._apply(estimates, index, delta)
                cand_chi2 = self._chi2_soft(candidate, active)
                if np.isfinite(cand_chi2) and cand_chi2 <= chi2:
                    estimates = candidate
                    chi2 = cand_chi2
                    lam = max(lam / config.lambda_factor, 1e-12)
                    iterations += 1
                    accepted = True
                    break
                lam *= config.lambda_factor
            if converged or not accepted:
                break
            chi2, H, g = self._linearize(estimates, index, active)

        for vid in index:
            self._vertices[vid].estimate = estimates[vid]
        per_edge = {
            eid: self._edge_squared_error(self._edges[eid], estimates)
            for eid in active
        }
        return OptimizeReport(initial_chi2, chi2, iterations, converged, per_edge)

    # -- marginalization -----------------------------------------------------

    def marginalize_onto_prior(self, keep: int) -> "FactorGraph":
        """Fresh graph holding only `keep` with a MarginalPrior carrying the
        Schur complement of everything else, linearized at the current
        estimates."""
        if keep not in self._vertices:
            raise ValueError(f"no vertex with id {keep}")
        kept = self._vertices[keep]
        if kept.fixed:
            raise ValueError("cannot marginalize onto a fixed vertex")
        index: dict[int, tuple[int, int]] = {}
        offset = 0
        order = [keep] + [
            vid for vid, v in self._vertices.items() if vid != keep and not v.fixed
        ]
        for vid in order:
            dof = _VERTEX_DOF[self._vertices[vid].kind]
            index[vid] = (offset, dof)
            offset += dof
        estimates = self._estimates()
        _, H, g = self._linearize(estimates, index)
        if scipy.sparse.issparse(H):
            H = H.toarray()
        k = _VERTEX_DOF[kept.kind]
        H_kk = H[:k, :k]
        if offset > k:
            H_km = H[:k, k:]
            H_mm = H[k:, k:]
            g_k = g[:k]
            g_m = g[k:]
            solved = np.linalg.lstsq(H_mm, np.column_stack([H_km.T, g_m]), rcond=None)[0]
            info = H_kk - H_km @ solved[:, :k]
            g_marg = g_k - H_km @ solved[:, k]
        else:
            info = H_kk
            g_marg = g[:k]
        info = 0.5 * (info + info.T)
        vals, vecs = np.linalg.eigh(info)
        vmax = float(vals.max())
        # the absolute floor keeps the prior invertible; the relative floor
        # keeps the reconstruction PSD despite roundoff of order eps * max
        floor = max(MARGINAL_EIGENVALUE_FLOOR, 1e-12 * vmax)
        # Newton step onto the kept vertex; directions the remaining graph
        # barely constrains are dropped instead of amplified.
        coeff = vecs.T @ -g_marg
        support = vals > max(MARGINAL_EIGENVALUE_FLOOR, 1e-9 * vmax)
        shift = vecs @ np.where(support, coeff / np.where(support, vals, 1.0), 0.0)
        if vals.min() < floor:
            warnings.warn("marginal information near-singular, clamping eigenvalues")
            vals = np.maximum(vals, floor)
            info = vecs @ np.diag(vals) @ vecs.T
            info = 0.5 * (info + info.T)
        mean = _retract(kept.kind, kept.estimate, shift)

        fresh = FactorGraph()
        fresh.add_vertex(kept.kind, mean, vertex_id=keep)
        fresh._next_vertex_id = self._next_vertex_id
        fresh.add_edge(EdgeKind.MARGINAL_PRIOR, keep, mean, info)
        return fresh

    # -- text dump -----------------------------------------------------------

    def dump(self) -> str:
        """g2o-style text dump, one record per line.

        VERTEX_SE3 id fixed tx ty tz qw qx qy qz
        VERTEX_NAVSTATE id fixed tx ty tz qw qx qy qz vx vy vz bg(3) ba(3)
        EDGE_<KIND> id vertex_ids measurement_fields kernel delta upper_tri_info
        Floats use 12-digit scientific notation; quaternions are (w, x, y, z);
        the information matrix is row-major upper-triangular.
        """
        fmt = "%.12e"

        def nums(values) -> str:
            return " ".join(fmt % v for v in np.asarray(values).ravel())

        def pose_fields(pose: Pose3) -> str:
            return nums(pose.translation) + " " + nums(pose.rotation.q)

        lines = []
        for vid in sorted(self._vertices):
            v = self._vertices[vid]
            if v.kind is VertexKind.POSE:
                lines.append(f"VERTEX_SE3 {vid} {int(v.fixed)} {pose_fields(v.estimate)}")
            else:
                s = v.estimate
                lines.append(
                    f"VERTEX_NAVSTATE {vid} {int(v.fixed)} {pose_fields(s.pose)} "
                    f"{nums(s.velocity)} {nums(s.gyro_bias)} {nums(s.accel_bias)}"
                )
        for eid in sorted(self._edges):
            edge = self._edges[eid]
            kind = edge.kind
            if kind in (EdgeKind.POSE_PRIOR, EdgeKind.RELATIVE_POSE):
                meas = pose_fields(edge.measurement)
            elif kind is EdgeKind.POSITION_PRIOR:
                meas = nums(edge.measurement.position) + " " + nums(
                    edge.measurement.lever_arm
                )
            elif kind is EdgeKind.MARGINAL_PRIOR:
                m = edge.measurement
                if isinstance(m, NavState):
                    meas = (
                        f"{pose_fields(m.pose)} {nums(m.velocity)} "
                        f"{nums(m.gyro_bias)} {nums(m.accel_bias)}"
                    )
                else:
                    meas = pose_fields(m)
            else:
                p = edge.measurement.preint
                meas = (
                    fmt % p.dt
                    + " "
                    + nums(p.delta_R.q)
                    + " "
                    + nums(p.delta_v)
                    + " "
                    + nums(p.delta_p)
                )
            upper = edge.information[np.triu_indices(edge.information.shape[0])]
            name = "".join(
                "_" + c if c.isupper() else c.upper() for c in kind.value
            ).lstrip("_")
            verts = " ".join(str(v) for v in edge.vertices)
            lines.append(
                f"EDGE_{name} {eid} {verts} {meas} "
                f"{edge.kernel.value} {fmt % edge.kernel_delta} {nums(upper)}"
            )
        return "\n".join(lines) + "\n"
