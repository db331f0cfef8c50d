"""Background loop-closure detection with voting-based validation.

For each new keyframe, candidate partners are screened by graph distance
(far enough along the chain to matter) and by Mahalanobis distance of the
estimated offset under the accumulated path uncertainty (close enough to
plausibly overlap). Survivors are aligned submap-to-submap and parked in a
bounded queue. A voting pass then keeps the largest pairwise-consistent
subset and accepts it only if tentatively inserting it into a copy of the
graph leaves the added edges with an acceptable mean chi-squared error.
Everything here reads graph state and submits accepted bundles through the
mapping backend's queue; it never mutates the live graph directly.
"""

from __future__ import annotations

import copy
import csv
import itertools
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.stats import chi2 as chi2_dist

from .factor_graph import EdgeKind, FactorGraphError, OptimizerConfig
from .geometry import Pose3
from .mapping import MappingBackend
from .registration import DegenerateAlignment, RegistrationParams, register

# chi^2 gates: 3-DOF translational candidate screen, 6-DOF consistency and
# acceptance checks on full relative poses
CANDIDATE_GATE = float(chi2_dist.ppf(0.95, 3))
CONSISTENCY_GATE = float(chi2_dist.ppf(0.95, 6))


# eq=False: the ndarray field breaks generated equality, and queue
# bookkeeping wants object identity anyway
@dataclass(frozen=True, eq=False)
class ClosureCandidate:
    """One validated-alignment hypothesis between two keyframes."""

    from_id: int
    to_id: int
    relative_pose: Pose3
    covariance: np.ndarray
    fitness: float
    stamp: float

    def __post_init__(self) -> None:
        if self.from_id == self.to_id:
            raise ValueError("closure endpoints must differ")
        cov = np.asarray(self.covariance, dtype=float).reshape(6, 6)
        if np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) <= 0):
            raise ValueError("closure covariance must be positive definite")
        object.__setattr__(self, "covariance", cov)


class CandidateQueue:
    """Candidates grouped by the keyframe that spawned them.

    Only the most recent `capacity` keyframes keep their groups; older
    unvalidated candidates are dropped rather than revisited.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._groups: dict[int, list[ClosureCandidate]] = {}

    def add(self, keyframe_id: int, candidates: list[ClosureCandidate]) -> int:
        """Park candidates under their keyframe; returns how many got evicted."""
        if candidates:
            self._groups.setdefault(keyframe_id, []).extend(candidates)
        newest = set(sorted(self._groups)[-self.capacity :])
        evicted = sum(
            len(group) for key, group in self._groups.items() if key not in newest
        )
        self._groups = {k: v for k, v in self._groups.items() if k in newest}
        return evicted

    def candidates(self) -> list[ClosureCandidate]:
        out = []
        for key in sorted(self._groups):
            out.extend(self._groups[key])
        return out

    def remove(self, consumed: list[ClosureCandidate]) -> None:
        gone = set(map(id, consumed))
        for key in list(self._groups):
            kept = [c for c in self._groups[key] if id(c) not in gone]
            if kept:
                self._groups[key] = kept
            else:
                del self._groups[key]

    def keyframe_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self._groups))

    def __len__(self) -> int:
        return sum(len(g) for g in self._groups.values())


def _pose_graph_view(backend: MappingBackend) -> nx.Graph:
    """Undirected keyframe connectivity with per-hop covariance payloads."""
    by_vertex = {kf.vertex_id: i for i, kf in enumerate(backend.keyframes)}
    view = nx.Graph()
    view.add_nodes_from(range(len(backend.keyframes)))
    for eid in backend.graph.edge_ids:
        edge = backend.graph.edge(eid)
        if edge.kind is not EdgeKind.RELATIVE_POSE or len(edge.vertices) != 2:
            continue
        a, b = (by_vertex.get(v) for v in edge.vertices)
        if a is None or b is None:
            continue
        cov = np.linalg.inv(edge.information)
        hop = float(np.linalg.norm(edge.measurement.translation))
        if view.has_edge(a, b):
            # parallel constraints: keep the tighter one for path sums
            if np.trace(cov) >= np.trace(view[a][b]["cov"]):
                continue
        view.add_edge(a, b, cov=cov, hop=hop)
    return view


def _path_stats(view: nx.Graph, path: list[int]) -> tuple[np.ndarray, float]:
    """(summed 6x6 covariance, metric length) along a hop path."""
    cov = np.zeros((6, 6))
    length = 0.0
    for a, b in zip(path, path[1:]):
        data = view[a][b]
        cov = cov + data["cov"]
        length += data["hop"]
    return cov, length


def find_candidates(backend: MappingBackend, keyframe_id: int) -> list[int]:
    """Keyframes far along the graph but statistically nearby in space.

    The graph distance keeps trivial neighbors out; the Mahalanobis screen,
    using covariances summed over the connecting path plus a per-meter
    systematic drift floor, keeps out keyframes the estimate places far
    beyond plausible drift.
    """
    g_min = backend.config.lc_min_graph_distance
    view = _pose_graph_view(backend)
    if keyframe_id not in view:
        return []
    paths = nx.single_source_shortest_path(view, keyframe_id)
    p_cur = backend.current_pose(backend.keyframes[keyframe_id]).translation
    drift_floor = backend.config.lc_drift_floor
    out = []
    for j, path in paths.items():
        if len(path) - 1 < g_min:
            continue
        offset = backend.current_pose(backend.keyframes[j]).translation - p_cur
        cov6, length = _path_stats(view, path)
        cov = cov6[3:6, 3:6] + (drift_floor * length) ** 2 * np.eye(3)
        m2 = float(offset @ np.linalg.solve(cov, offset))
        if m2 <= CANDIDATE_GATE:
            out.append(j)
    return sorted(out)


def align_candidate(
    backend: MappingBackend,
    from_id: int,
    to_id: int,
    params: RegistrationParams,
    fitness_gate: float,
    stamp: float,
) -> ClosureCandidate | None:
    """Submap-to-submap alignment wrapped as a candidate; None on any miss."""
    target = backend.db.load(backend.keyframes[from_id].submap_id)
    source = backend.db.load(backend.keyframes[to_id].submap_id)
    guess = backend.current_pose(backend.keyframes[from_id]).inverse().compose(
        backend.current_pose(backend.keyframes[to_id])
    )
    try:
        result = register(source.cloud, target.model(params), guess, params)
    except DegenerateAlignment:
        return None
    if not result.converged or result.fitness > fitness_gate:
        return None
    return ClosureCandidate(
        from_id,
        to_id,
        result.T,
        result.covariance * backend.config.lo_cov_scale,
        result.fitness,
        stamp,
    )


def _pairwise_consistent(
    a: ClosureCandidate,
    b: ClosureCandidate,
    backend: MappingBackend,
    view: nx.Graph,
) -> bool:
    """Do the two closures agree once routed through the current estimates?

    Candidate a (i -> j) is recomputed as path(i -> k) + closure b (k -> l)
    + path(l -> j); the whitened log of the discrepancy is gated at 95%.
    """
    pose = lambda kid: backend.current_pose(backend.keyframes[kid])
    t_ik = pose(a.from_id).inverse().compose(pose(b.from_id))
    t_lj = pose(b.to_id).inverse().compose(pose(a.to_id))
    alt = t_ik.compose(b.relative_pose).compose(t_lj)
    delta = a.relative_pose.inverse().compose(alt)
    e = np.concatenate([delta.rotation.log(), delta.translation])
    cov = a.covariance + b.covariance
    drift_floor = backend.config.lc_drift_floor
    for s, t in ((a.from_id, b.from_id), (b.to_id, a.to_id)):
        try:
            path = nx.shortest_path(view, s, t)
        except nx.NetworkXNoPath:
            return False
        path_cov, length = _path_stats(view, path)
        cov = cov + path_cov
        cov = cov + np.diag([0.0] * 3 + [(drift_floor * length) ** 2] * 3)
    m2 = float(e @ np.linalg.solve(0.5 * (cov + cov.T), e))
    return m2 <= CONSISTENCY_GATE


def _largest_consistent_subset(
    candidates: list[ClosureCandidate], backend: MappingBackend
) -> list[ClosureCandidate]:
    if not candidates:
        return []
    view = _pose_graph_view(backend)
    consistency = nx.Graph()
    consistency.add_nodes_from(range(len(candidates)))
    for i, j in itertools.combinations(range(len(candidates)), 2):
        if _pairwise_consistent(candidates[i], candidates[j], backend, view):
            consistency.add_edge(i, j)
    best: list[int] = []
    best_fitness = np.inf
    for clique in nx.find_cliques(consistency):
        fitness = sum(candidates[i].fitness for i in clique)
        if len(clique) > len(best) or (
            len(clique) == len(best) and fitness < best_fitness
        ):
            best = clique
            best_fitness = fitness
    return [candidates[i] for i in sorted(best)]


def _tentative_chi2(
    subset: list[ClosureCandidate], backend: MappingBackend
) -> float:
    """Mean chi2 of the subset's edges after optimizing a graph copy."""
    trial = copy.deepcopy(backend.graph)
    added = []
    for cand in subset:
        added.append(
            trial.add_edge(
                EdgeKind.RELATIVE_POSE,
                (
                    backend.keyframes[cand.from_id].vertex_id,
                    backend.keyframes[cand.to_id].vertex_id,
                ),
                cand.relative_pose,
                np.linalg.inv(cand.covariance),
            )
        )
    try:
        report = trial.optimize(
            config=OptimizerConfig(max_iterations=25, increment_tolerance=1e-8)
        )
    except (FactorGraphError, np.linalg.LinAlgError):
        return np.inf
    return float(np.mean([report.edge_chi2.get(eid, np.inf) for eid in added]))


def vote_and_select(
    candidates: list[ClosureCandidate], backend: MappingBackend
) -> tuple[list[ClosureCandidate], float]:
    """(accepted bundle, mean tentative chi2 of the winning subset).

    The largest mutually-consistent subset wins the vote, then must survive
    a dry-run insertion: optimized on a copy of the graph, its edges may
    claim at most the 95% chi-squared budget on average.
    """
    subset = _largest_consistent_subset(candidates, backend)
    if not subset:
        return [], 0.0
    mean_chi2 = _tentative_chi2(subset, backend)
    if mean_chi2 > CONSISTENCY_GATE:
        return [], mean_chi2
    return subset, mean_chi2


class LoopCloser:
    """Owns the candidate queue and the background validation loop."""

    def __init__(
        self,
        backend: MappingBackend,
        log_path: Path | str | None = None,
    ) -> None:
        self.backend = backend
        config = backend.config
        self.queue = CandidateQueue(config.v_lc)
        self.params = RegistrationParams(
            method=config.method, r_align=config.r_align, d_max=config.d_max
        )
        self.fitness_gate = config.lc_fitness_gate
        self.accepted = 0
        self.rejected = 0
        self._inbox: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._log_path = Path(log_path) if log_path is not None else None
        self._log_started = False

    # --- synchronous core ---------------------------------------------------------

    def process_keyframe(self, keyframe_id: int) -> list[ClosureCandidate]:
        """Full cycle for one keyframe: search, align, enqueue, vote, submit."""
        stamp = self.backend.keyframes[keyframe_id].timestamp
        found = find_candidates(self.backend, keyframe_id)
        aligned = []
        for j in found:
            cand = align_candidate(
                self.backend, j, keyframe_id, self.params, self.fitness_gate, stamp
            )
            if cand is not None:
                aligned.append(cand)
        self.queue.add(keyframe_id, aligned)
        bundle, mean_chi2 = vote_and_select(self.queue.candidates(), self.backend)
        if bundle:
            self.backend.submit_closures(bundle)
            self.queue.remove(bundle)
            self.accepted += len(bundle)
        self.rejected += len(aligned) - sum(1 for c in aligned if c in bundle)
        self._log(aligned, bundle, mean_chi2)
        return bundle

    def _log(self, aligned, bundle, mean_chi2: float) -> None:
        if self._log_path is None or not aligned:
            return
        accepted = set(map(id, bundle))
        new_file = not self._log_started and not self._log_path.exists()
        with open(self._log_path, "a", newline="", encoding="ascii") as handle:
            writer = csv.writer(handle)
            if new_file:
                writer.writerow(
                    ["stamp", "from", "to", "accepted", "fitness", "chi2"]
                )
            for cand in aligned:
                writer.writerow(
                    [
                        f"{cand.stamp:.6f}",
                        cand.from_id,
                        cand.to_id,
                        int(id(cand) in accepted),
                        f"{cand.fitness:.6e}",
                        f"{mean_chi2:.6e}",
                    ]
                )
        self._log_started = True

    # --- background loop ----------------------------------------------------------

    def notify_keyframe(self, keyframe_id: int) -> None:
        """Producer side: hand a freshly inserted keyframe to the loop."""
        self._inbox.put(keyframe_id)

    def request_stop(self) -> None:
        self._stop.set()
        self._inbox.put(None)  # wake the blocking get

    def run_background(self, stop: threading.Event | None = None) -> None:
        """Consume keyframes until stopped, then drain what is queued.

        The wait is blocking, so an idle loop costs nothing; the stop
        request wakes it via a sentinel and any backlog is still processed
        before returning.
        """
        stop = stop or self._stop
        while not stop.is_set():
            item = self._inbox.get()
            if item is None or stop.is_set():
                break
            self.process_keyframe(item)
        while True:
            try:
                item = self._inbox.get_nowait()
            except queue.Empty:
                return
            if item is not None:
                self.process_keyframe(item)

    def spawn(self) -> threading.Thread:
        thread = threading.Thread(target=self.run_background, daemon=True)
        thread.start()
        return thread

    def join(self, thread: threading.Thread, timeout: float = 30.0) -> None:
        self.request_stop()
        deadline = time.monotonic() + timeout
        thread.join(max(0.0, deadline - time.monotonic()))
        if thread.is_alive():
            raise RuntimeError("loop-closure thread failed to stop")
