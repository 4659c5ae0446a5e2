"""Hybrid master-slave relationship graphs.

The graph is built in three passes: candidate edges from saliency, grasps
and the pose-invariance criterion; truncation of every edge whose slave
shows no geometric constraint in the master's frames; and a pose constraint
(with a pose movement primitive) for every moving object that is left
without a master. Coordination between the two hands is then read off the
truncated graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, GeometryError, PreconditionError, SimulationError
from .geomcon import (
    ExtractionConfig,
    GeometricConstraint,
    Kind,
    LocalFrame,
    align_to_frame,
    candidate_local_frames,
    extract_pair_constraints,
    frame_trajectory,
)
from .geometry import chordal_mean, geodesic_angle, kabsch, log_so3
from .saliency import GraspSummary, SaliencyReport, virtual_id
from .trajdata import DemonstrationSet, TrackKind
from .vmp import Vmp, fit_vmp

MODULE = "hmsr"
log = logging.getLogger(__name__)

COORDINATION = ("uncoordinated_unimanual", "uncoordinated_bimanual", "loosely_coupled", "tightly_coupled_symmetric")


@dataclass(frozen=True)
class HmsrConfig:
    end_fraction: float = 0.1  # window of final frames used for the end pose
    cond_bound: float = 1e6
    symmetric_window: float = 0.3  # fraction of the demo the hand distance must stay fixed
    hand_rate_thresh: float = 0.005  # m/s
    rate_stride: float = 0.5  # seconds
    n_basis: int = 20  # primitive basis size
    ridge: float = 1e-8  # primitive weight regulariser

    def validate(self) -> "HmsrConfig":
        if not 0 < self.end_fraction <= 1:
            raise ConfigError("end_fraction must be in (0, 1]", MODULE)
        if not 0 < self.symmetric_window <= 1:
            raise ConfigError("symmetric_window must be in (0, 1]", MODULE)
        if not (self.hand_rate_thresh > 0 and self.rate_stride > 0 and self.cond_bound > 1):
            raise ConfigError("hmsr thresholds must be positive", MODULE)
        if self.n_basis < 2:
            raise ConfigError("n_basis must be >= 2", "vmp")
        if not self.ridge >= 0:
            raise ConfigError("ridge must be >= 0", "vmp")
        return self


# ----------------------------------------------------------------------------
# Pose invariance


@dataclass(frozen=True)
class InvarianceRatios:
    r_p: dict  # r_p[s][l]
    r_o: dict  # r_o[s][l]

    def entries(self):
        for s in sorted(self.r_p):
            for l in sorted(self.r_p[s]):
                yield s, l, self.r_p[s][l], self.r_o[s][l]

    def to_json(self) -> dict:
        return {"r_p": self.r_p, "r_o": self.r_o}


def _end_frames(T: int, fraction: float) -> slice:
    n = max(1, int(np.ceil(fraction * T)))
    return slice(T - n, T)


def _end_pose(track, fraction: float, cond_bound: float):
    cloud = track.points[:, _end_frames(track.n_frames, fraction)].mean(axis=1)
    try:
        R, _ = kabsch(track.canonical_points, cloud, cond_bound)
    except GeometryError as exc:
        raise GeometryError(f"registration of {track.object_id} failed: {exc}", MODULE) from None
    return R, cloud.mean(axis=0)


def compute_invariance_ratios(pair: tuple[str, str], statics: list[str], dset: DemonstrationSet,
                              scene_scale: float, cfg: HmsrConfig = HmsrConfig()) -> InvarianceRatios:
    """Normalised spatial variability of each mover's end pose relative to each static anchor."""
    if not statics:
        raise PreconditionError("invariance ratios need at least one static or virtual anchor", MODULE)
    if scene_scale <= 0:
        raise PreconditionError("scene_scale must be > 0", MODULE)
    r_p: dict = {}
    r_o: dict = {}
    for s in statics:
        r_p[s], r_o[s] = {}, {}
        for l in pair:
            Rs, ps = [], []
            for demo in dset.demos:
                R_s, c_s = _end_pose(demo.track(s), cfg.end_fraction, cfg.cond_bound)
                R_l, c_l = _end_pose(demo.track(l), cfg.end_fraction, cfg.cond_bound)
                Rs.append(R_s.T @ R_l)
                ps.append(R_s.T @ (c_l - c_s))
            ps = np.asarray(ps)
            Rs = np.asarray(Rs)
            trans = float(np.sqrt(np.trace(np.atleast_2d(np.cov(ps.T, bias=True)))))
            ang = float(geodesic_angle(chordal_mean(Rs)[None], Rs).mean())
            r_p[s][l] = float(np.clip(trans / scene_scale, 0.0, 1.0))
            r_o[s][l] = float(np.clip(ang / np.pi, 0.0, 1.0))
    return InvarianceRatios(r_p, r_o)


def resolve_master(ratios: InvarianceRatios) -> str:
    """Object attaining the smallest ratio of either family over all anchors.

    Ties go to the smaller ``r_p + r_o`` of the attaining entry, then to the
    lexicographically smaller id.
    """
    best = None
    for _, l, rp, ro in ratios.entries():
        if not (np.isfinite(rp) and np.isfinite(ro)):
            raise PreconditionError("invariance ratios must be finite", MODULE)
        key = (min(rp, ro), rp + ro, l)
        if best is None or key < best:
            best = key
    if best is None:
        raise PreconditionError("no invariance ratios given", MODULE)
    return best[2]


# ----------------------------------------------------------------------------
# Graph


@dataclass(frozen=True)
class Node:
    node_id: str
    kind: str  # static | virtual | moving | hand
    category: str
    level: int = 0


@dataclass(frozen=True, eq=False)
class Edge:
    master: str
    slave: str
    constraints: tuple = ()
    vmps: tuple = ()  # one per constraint

    def to_json(self) -> dict:
        return {
            "master": self.master,
            "slave": self.slave,
            "constraints": [c.to_json() for c in self.constraints],
            "vmps": [v.to_json() for v in self.vmps],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Edge":
        return cls(d["master"], d["slave"], tuple(GeometricConstraint.from_json(c) for c in d["constraints"]),
                   tuple(Vmp.from_json(v) for v in d.get("vmps", [])))


@dataclass(frozen=True)
class CoordinationStrategy:
    value: str
    evidence: str

    def __post_init__(self):
        if self.value not in COORDINATION:
            raise ValueError(f"unknown coordination {self.value}")
        if not self.evidence:
            raise ValueError("coordination evidence must be non-empty")


@dataclass(frozen=True, eq=False)
class HmsrGraph:
    nodes: dict  # id -> Node
    edges: tuple
    coordination: CoordinationStrategy | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = tuple(sorted(self.edges, key=lambda e: (e.master, e.slave)))
        object.__setattr__(self, "edges", edges)
        levels = _levels(list(self.nodes), edges)
        object.__setattr__(self, "nodes", {k: replace(v, level=levels[k]) for k, v in sorted(self.nodes.items())})

    def edge(self, master: str, slave: str) -> Edge:
        for e in self.edges:
            if e.master == master and e.slave == slave:
                return e
        raise KeyError((master, slave))

    def edge_set(self) -> set:
        return {(e.master, e.slave) for e in self.edges}

    def masters_of(self, node_id: str) -> list[str]:
        return [e.master for e in self.edges if e.slave == node_id]

    def slaves_of(self, node_id: str) -> list[str]:
        return [e.slave for e in self.edges if e.master == node_id]

    def topological_order(self) -> list[str]:
        return sorted(self.nodes, key=lambda n: (self.nodes[n].level, n))

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": n.node_id, "kind": n.kind, "category": n.category, "level": n.level}
                      for n in self.nodes.values()],
            "edges": [e.to_json() for e in self.edges],
            "coordination": None if self.coordination is None else
            {"value": self.coordination.value, "evidence": self.coordination.evidence},
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "HmsrGraph":
        nodes = {n["id"]: Node(n["id"], n["kind"], n.get("category", ""), int(n.get("level", 0))) for n in d["nodes"]}
        coord = d.get("coordination")
        return cls(nodes, tuple(Edge.from_json(e) for e in d["edges"]),
                   None if coord is None else CoordinationStrategy(coord["value"], coord["evidence"]),
                   dict(d.get("meta", {})))


def _levels(nodes: list[str], edges) -> dict:
    """Longest-path layering; raises on cycles."""
    indeg = {n: 0 for n in nodes}
    children: dict[str, list[str]] = {n: [] for n in nodes}
    for e in edges:
        if e.master not in indeg or e.slave not in indeg:
            raise SimulationError(f"edge {e.master}->{e.slave} references an unknown node", MODULE)
        indeg[e.slave] += 1
        children[e.master].append(e.slave)
    level = {n: 0 for n in nodes}
    ready = sorted(n for n in nodes if indeg[n] == 0)
    seen = 0
    while ready:
        n = ready.pop(0)
        seen += 1
        for c in children[n]:
            level[c] = max(level[c], level[n] + 1)
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if seen != len(nodes):
        raise SimulationError("master-slave graph contains a cycle", MODULE)
    return level


def build_candidate_graph(dset: DemonstrationSet, saliency: SaliencyReport, grasps: GraspSummary,
                          resolved: dict) -> HmsrGraph:
    """Untruncated candidate graph.

    ``resolved`` maps every unordered moving pair ``frozenset({a, b})`` to its
    master. Every moving object gets candidate masters from all statics, all
    virtual objects and the resolved master of each pair it loses; hands hang
    off the object they grasp firmly.
    """
    nodes: dict[str, Node] = {}
    for oid in dset.object_ids():
        kind = dset.kind_of(oid)
        cat = dset.demos[0].track(oid).category
        if kind.is_hand:
            nodes[oid] = Node(oid, "hand", cat)
        elif kind is TrackKind.VIRTUAL:
            nodes[oid] = Node(oid, "virtual", cat)
        elif oid in saliency.objects:
            nodes[oid] = Node(oid, saliency.objects[oid].label, cat)
    statics = [n for n, v in nodes.items() if v.kind == "static"]
    virtuals = [n for n, v in nodes.items() if v.kind == "virtual"]
    moving = [n for n, v in nodes.items() if v.kind == "moving"]
    edges = []
    for m in moving:
        for s in statics + virtuals:
            edges.append(Edge(s, m))
        for other in moving:
            if other != m and resolved.get(frozenset((m, other))) == other:
                edges.append(Edge(other, m))
    for hand, obj in grasps.grasped.items():
        if hand in nodes and obj in nodes:
            edges.append(Edge(obj, hand))
    return HmsrGraph(nodes, tuple(edges))


def resolve_moving_pairs(dset: DemonstrationSet, saliency: SaliencyReport, cfg: HmsrConfig = HmsrConfig()):
    """Pose-invariance master choice for every pair of moving objects."""
    moving = sorted(saliency.moving)
    anchors = sorted(saliency.static) + [virtual_id(m) for m in moving if dset.demos[0].has(virtual_id(m))]
    resolved, ratios = {}, {}
    for i, a in enumerate(moving):
        for b in moving[i + 1:]:
            r = compute_invariance_ratios((a, b), anchors, dset, saliency.scene_scale, cfg)
            resolved[frozenset((a, b))] = resolve_master(r)
            ratios[f"{a}|{b}"] = r.to_json()
    return resolved, ratios


# ----------------------------------------------------------------------------
# Truncation


def _motion_window(dset: DemonstrationSet, grasps: GraspSummary | None) -> int:
    """First frame of the manipulation phase (median earliest firm grasp start)."""
    if grasps is None:
        return 0
    starts = []
    for demo in dset.demos:
        evs = [e.interval[0] for e in grasps.events.get(demo.demo_id, []) if e.firm]
        if evs:
            starts.append(min(evs))
    return int(np.median(starts)) if starts else 0


def _fit_constraint_vmp(con: GeometricConstraint, master_tracks, slave_tracks, t0: int, n_basis: int,
                        ridge: float = 1e-8) -> Vmp:
    aligned = align_to_frame(slave_tracks, master_tracks, con.frame)
    j = slave_tracks[0].index_of([con.keypoint_index])[0]
    trajs = [aligned.trajectories[d, j, t0:] for d in range(aligned.n_demos)]
    return fit_vmp(trajs, n_basis=min(n_basis, len(trajs[0])), ridge=ridge)


def _controlled_frame(graph_edges, obj: str, frames: list[LocalFrame]) -> LocalFrame:
    best = None
    for e in graph_edges:
        if e.master != obj:
            continue
        for c in e.constraints:
            if c.frame is None or c.kind is Kind.POSE:
                continue
            key = (c.priority, c.residual_scale, c.frame.anchor_index)
            if best is None or key < best[0]:
                best = (key, c.frame)
    return frames[0] if best is None else best[1]


def pose_constraint(obj: str, frame: LocalFrame, dset: DemonstrationSet, t0: int, n_basis: int,
                    ridge: float = 1e-8):
    """End-pose distribution of ``frame`` on ``obj`` relative to the same frame on its virtual object.

    Returns the pose constraint and a 6-D VMP (position, rotation vector
    relative to the start rotation) over the manipulation phase.
    """
    vid = virtual_id(obj)
    ref = replace(frame, master_id=vid)
    positions, rotations, trajs = [], [], []
    for demo in dset.demos:
        Bc, oc, _ = frame_trajectory(frame, demo.track(obj))
        Br, or_, _ = frame_trajectory(ref, demo.track(vid), times=[0])
        rel_R = np.einsum("ji,tjk->tik", Br[0], Bc)
        rel_p = (oc - or_[0]) @ Br[0]
        positions.append(rel_p[-1])
        rotations.append(rel_R[-1])
        seg_R = rel_R[t0:]
        rv = np.array([log_so3(seg_R[0].T @ R) for R in seg_R])
        trajs.append(np.hstack([rel_p[t0:], rv]))
    P = np.asarray(positions)
    Rs = np.asarray(rotations)
    R_mean = chordal_mean(Rs)
    ang = geodesic_angle(R_mean[None], Rs)
    ref_scale = float(np.mean([frame_trajectory(ref, d.track(vid), times=[0])[2][0] for d in dset.demos]))
    params = {
        "position_mean": P.mean(axis=0),
        "position_cov": np.atleast_2d(np.cov(P.T, bias=True)),
        "rotation_mean": R_mean,
        "angle_max": float(ang.max()),
        "angle_std": float(np.sqrt((ang**2).mean())),
        "controlled_frame": frame.to_json(),
    }
    resid = float(np.sqrt(np.trace(params["position_cov"])))
    con = GeometricConstraint(Kind.POSE, params, resid, slave_id=obj, keypoint_index=frame.anchor_index,
                              frame=ref, ref_scale=ref_scale)
    return con, fit_vmp(trajs, n_basis=min(n_basis, len(trajs[0])), ridge=ridge)


def truncate(graph: HmsrGraph, dset: DemonstrationSet, ext: ExtractionConfig = ExtractionConfig(),
             cfg: HmsrConfig = HmsrConfig(), grasps: GraspSummary | None = None) -> HmsrGraph:
    """Keep only edges whose slave is constrained in the master's frames.

    Retained edges get one VMP per constraint. Moving objects left without
    any incoming edge receive a pose constraint from their virtual object.
    """
    t0 = _motion_window(dset, grasps)
    frames_cache: dict[str, list[LocalFrame]] = {}
    kept = []
    for e in graph.edges:
        m_tracks, s_tracks = dset.tracks_of(e.master), dset.tracks_of(e.slave)
        if e.master not in frames_cache:
            m0 = m_tracks[0]
            frames_cache[e.master] = candidate_local_frames(m0.canonical_points, ext.n_frames, ext.k_neighbors,
                                                            e.master, m0.point_ids)
        cons = extract_pair_constraints(m_tracks, s_tracks, ext, frames_cache[e.master])
        log.debug("edge %s -> %s: %s", e.master, e.slave, [c.kind.value for c in cons])
        if not cons:
            continue
        vmps = tuple(_fit_constraint_vmp(c, m_tracks, s_tracks, t0, cfg.n_basis, cfg.ridge) for c in cons)
        kept.append(Edge(e.master, e.slave, tuple(cons), vmps))
    nodes = dict(graph.nodes)
    for obj, node in graph.nodes.items():
        if node.kind != "moving" or any(e.slave == obj for e in kept):
            continue
        vid = virtual_id(obj)
        if not dset.demos[0].has(vid):
            raise PreconditionError(f"{obj} needs its virtual object for a pose constraint", MODULE)
        m0 = dset.tracks_of(obj)[0]
        frames = frames_cache.get(obj) or candidate_local_frames(m0.canonical_points, ext.n_frames,
                                                                 ext.k_neighbors, obj, m0.point_ids)
        con, vmp = pose_constraint(obj, _controlled_frame(kept, obj, frames), dset, t0, cfg.n_basis, cfg.ridge)
        kept.append(Edge(vid, obj, (con,), (vmp,)))
        nodes.setdefault(vid, Node(vid, "virtual", m0.category))
    used = {e.master for e in kept}
    nodes = {k: v for k, v in nodes.items() if v.kind != "virtual" or k in used}
    meta = dict(graph.meta)
    meta["motion_start_frame"] = t0
    return HmsrGraph(nodes, tuple(kept), graph.coordination, meta)


# ----------------------------------------------------------------------------
# Coordination


def _hand_distance_rate(demo, left: str, right: str, stride: float) -> np.ndarray:
    a = demo.track(left).points[0]
    b = demo.track(right).points[0]
    d = np.linalg.norm(a - b, axis=1)
    k = max(1, int(round(stride / demo.dt)) // 2)
    idx = np.arange(len(d))
    lo, hi = np.clip(idx - k, 0, len(d) - 1), np.clip(idx + k, 0, len(d) - 1)
    return np.abs(d[hi] - d[lo]) / ((hi - lo) * demo.dt)


def _longest_run(mask: np.ndarray) -> int:
    best = cur = 0
    for m in mask:
        cur = cur + 1 if m else 0
        best = max(best, cur)
    return best


def classify_coordination(graph: HmsrGraph, grasps: GraspSummary, dset: DemonstrationSet,
                          cfg: HmsrConfig = HmsrConfig()) -> CoordinationStrategy:
    """Apply the symmetric, loosely-coupled, uncoordinated-bimanual and unimanual rules in that order."""
    grasped = {h: o for h, o in grasps.grasped.items()}
    if not grasped:
        raise PreconditionError("no manipulation detected (no firm grasp)", MODULE)
    if len(grasped) == 1:
        (h, o), = grasped.items()
        return CoordinationStrategy("uncoordinated_unimanual", f"only {h} grasps an object ({o})")
    (h1, o1), (h2, o2) = sorted(grasped.items())[:2]
    if o1 == o2:
        runs = []
        for demo in dset.demos:
            rate = _hand_distance_rate(demo, h1, h2, cfg.rate_stride)
            runs.append(_longest_run(rate < cfg.hand_rate_thresh) / demo.n_frames)
        frac = float(np.median(runs))
        if frac >= cfg.symmetric_window:
            return CoordinationStrategy(
                "tightly_coupled_symmetric",
                f"both hands grasp {o1}; inter-hand distance steady for {frac:.0%} of the demonstration "
                f"(rate < {cfg.hand_rate_thresh * 1000:.1f} mm/s)")
        return CoordinationStrategy(
            "loosely_coupled", f"both hands grasp {o1} but the inter-hand distance varies "
                               f"(steady for only {frac:.0%})")
    linked = [(e.master, e.slave) for e in graph.edges if {e.master, e.slave} == {o1, o2}]
    if linked:
        m, s = linked[0]
        return CoordinationStrategy("loosely_coupled",
                                    f"constraint edge {m} -> {s} links the objects held by {h1} and {h2}")
    shared = sorted(set(graph.masters_of(o1)) & set(graph.masters_of(o2)))
    if shared:
        return CoordinationStrategy("loosely_coupled", f"{o1} and {o2} share master(s) {', '.join(shared)}")
    return CoordinationStrategy(
        "uncoordinated_bimanual",
        f"{h1} holds {o1} (masters {graph.masters_of(o1)}), {h2} holds {o2} "
        f"(masters {graph.masters_of(o2)}); no link and no shared master")
