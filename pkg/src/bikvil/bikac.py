"""Bimanual keypoint-based admittance control on a kinematic rigid-body scene.

Every constrained keypoint of a controlled body is pulled by a spring-damper
towards its attractor, expressed in the current local frame of its master.
The forces are summed into a body wrench and integrated with semi-implicit
Euler. Bodies are updated in the layer order of the master-slave graph, so
a slave always sees its masters' poses of the same step; hands that hold a
body follow it rigidly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, PreconditionError, SimulationError
from .geomcon import (
    CurveModel,
    GeometricConstraint,
    Kind,
    LocalFrame,
    SurfaceModel,
    nearest_on_curve,
    nearest_on_surface,
)
from .geometry import exp_so3, geodesic_angle, log_so3, orthonormalize
from .hmsr import HmsrGraph
from .scene import Body, SimScene
from .trajdata import TrackKind
from .vmp import Vmp, adapt

log = logging.getLogger(__name__)
MODULE = "bikac"


@dataclass(frozen=True)
class KacParams:
    k: float = 200.0  # N/m
    m: float = 1.0  # virtual mass per spring, kg
    d: float | None = None  # N*s/m; None means critical, 2*sqrt(k*m)
    stiffness: dict = field(default_factory=dict)  # per-kind override of k, e.g. {"p2P": 150.0}
    torque_arm: float = 1.0  # scales the rotational inertia
    max_speed: float = 0.5  # m/s, also bounds the rim speed of rotations
    phase_rate: float = 0.25  # 1/s
    stall_error: float = 0.03  # m
    blend: float = 0.1  # final phase share blending the primitive into the manifold attractor
    tol: float = 0.005  # m, convergence residual
    tol_angle: float = math.radians(3.0)
    settle_time: float = 0.5  # s below tolerance before declaring convergence
    seed: int = 0  # pose-target sampling

    @property
    def damping(self) -> float:
        return 2.0 * math.sqrt(self.k * self.m) if self.d is None else self.d

    def k_for(self, kind: Kind) -> float:
        return float(self.stiffness.get(Kind(kind).value, self.k))

    def validate(self) -> "KacParams":
        if not (self.k > 0 and self.m > 0 and self.damping > 0):
            raise ConfigError("k, m and d must be > 0", MODULE)
        for key, val in self.stiffness.items():
            Kind(key)
            if not val > 0:
                raise ConfigError(f"stiffness for {key} must be > 0", MODULE)
        if not (self.torque_arm > 0 and self.max_speed > 0 and self.phase_rate > 0 and self.stall_error > 0):
            raise ConfigError("torque_arm, max_speed, phase_rate and stall_error must be > 0", MODULE)
        if not 0 < self.blend <= 1:
            raise ConfigError("blend must be in (0, 1]", MODULE)
        if not (self.tol > 0 and self.tol_angle > 0 and self.settle_time >= 0):
            raise ConfigError("tolerances must be > 0", MODULE)
        return self


# ----------------------------------------------------------------------------
# Instantiation


@dataclass(frozen=True, eq=False)
class ActiveConstraint:
    """A learned constraint bound to bodies of the current scene."""

    label: str
    master: str  # body id carrying the frame
    slave: str
    constraint: GeometricConstraint
    vmp: Vmp | None  # adapted to the scene start
    keypoints: np.ndarray  # slave-local point indices the springs act on
    frame_support: np.ndarray  # master-local indices of anchor + neighbours
    top_priority: bool = False
    # pose constraints only
    controlled_frame: LocalFrame | None = None
    controlled_support: np.ndarray | None = None
    target_position: np.ndarray | None = None  # unscaled frame coordinates
    target_rotation: np.ndarray | None = None
    start_rotation: np.ndarray | None = None

    @property
    def kind(self) -> Kind:
        return self.constraint.kind


@dataclass(frozen=True, eq=False)
class AdaptedTask:
    graph: HmsrGraph
    constraints: tuple  # ActiveConstraint
    controlled: tuple  # body ids integrated by the controller, in update order
    followers: dict  # hand id -> (body id, R_rel, p_rel)
    virtuals: dict  # virtual id -> Body frozen at the start pose

    def of(self, body_id: str) -> list[ActiveConstraint]:
        return [c for c in self.constraints if c.slave == body_id]


def _resolve_body(scene: SimScene, node_id: str, category: str) -> str:
    if node_id in scene.bodies:
        return node_id
    same = sorted(b for b, body in scene.bodies.items() if body.category == category)
    if len(same) == 1:
        return same[0]
    if not same:
        raise PreconditionError(f"scene has no body of category '{category}' (needed for {node_id})", MODULE)
    raise PreconditionError(f"ambiguous bodies {same} for node {node_id}", MODULE)


def frame_pose(frame: LocalFrame, body: Body, support: np.ndarray):
    """World (basis, origin, scale) of ``frame`` rebuilt on ``body``."""
    pts = body.points[support]
    B, o, s = frame.reconstruct(pts, body.canonical_points[support])
    return B, o, float(s)


def _sample_pose_target(params: dict, rng: np.random.Generator):
    """Target drawn from the learned end-pose spread, kept within one standard deviation."""
    mean = np.asarray(params["position_mean"], dtype=float)
    cov = np.asarray(params["position_cov"], dtype=float)
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    z = rng.standard_normal(3)
    z /= max(1.0, float(np.linalg.norm(z)))
    pos = mean + V @ (np.sqrt(np.clip(w, 0.0, None)) * z)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = float(params["angle_std"]) * rng.uniform(0.0, 1.0)
    rot = np.asarray(params["rotation_mean"], dtype=float) @ exp_so3(axis * angle)
    return pos, rot


def adapt_to_scene(graph: HmsrGraph, scene: SimScene, params: KacParams = KacParams()) -> AdaptedTask:
    """Bind the graph's constraints to the bodies of ``scene``.

    Frames are rebuilt on the scene instances from their correspondence ids;
    constraint parameters stay in frame coordinates and are scaled by the
    ratio of the instance frame size to the training frame size. Virtual
    nodes become frozen copies of their body's start pose.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    ids: dict[str, str] = {}
    virtuals: dict[str, Body] = {}
    for nid, node in graph.nodes.items():
        if node.kind == "virtual":
            base = _resolve_body(scene, nid[1:], node.category)
            b = scene.body(base)
            virtuals[nid] = b.moved(body_id=nid, kind=TrackKind.VIRTUAL, v=np.zeros(3), w=np.zeros(3),
                                    controlled_by=None, attached_to=None)
            ids[nid] = nid
        else:
            ids[nid] = _resolve_body(scene, nid, node.category)

    def body(bid):
        return virtuals[bid] if bid in virtuals else scene.body(bid)

    followers = {}
    for bid, b in scene.bodies.items():
        if b.attached_to is not None:
            if b.attached_to not in scene.bodies:
                raise PreconditionError(f"{bid} is attached to unknown body {b.attached_to}", MODULE)
            host = scene.body(b.attached_to)
            followers[bid] = (host.body_id, host.R.T @ b.R, host.R.T @ (b.p - host.p))

    raw = []
    for e in graph.edges:
        master, slave = ids[e.master], ids[e.slave]
        if slave in followers:
            continue  # grasping hands ride on their body
        for i, con in enumerate(e.constraints):
            vmp = e.vmps[i] if i < len(e.vmps) else None
            raw.append((master, slave, con, vmp))

    # a virtual master only anchors bodies that have no real master
    real = {slave for master, slave, _, _ in raw if master not in virtuals}
    raw = [r for r in raw if r[0] not in virtuals or r[1] not in real]
    # each keypoint keeps only its single best constraint
    best: dict[tuple, tuple] = {}
    for master, slave, con, vmp in raw:
        key = (slave, "pose" if con.kind is Kind.POSE else int(con.keypoint_index))
        rank = (con.priority, con.residual_scale, master)
        if key not in best or rank < best[key][0]:
            best[key] = (rank, master, con, vmp)

    top: dict[str, int] = {}
    for (slave, _), (rank, *_r) in best.items():
        top[slave] = min(top.get(slave, 99), rank[0])

    active = []
    for (slave, _), (rank, master, con, vmp) in sorted(best.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        mb, sb = body(master), body(slave)
        support = mb.index_of(con.frame.support_ids)
        B, o, s = frame_pose(con.frame, mb, support)
        ratio = s / con.ref_scale
        label = f"{master}->{slave}:{con.kind.value}"
        is_top = rank[0] == top[slave]
        if con.kind is Kind.POSE:
            cframe = LocalFrame.from_json(con.params["controlled_frame"])
            csup = sb.index_of(cframe.support_ids)
            Bc, oc, _ = frame_pose(cframe, sb, csup)
            p0 = B.T @ (oc - o) / ratio
            R0 = B.T @ Bc
            pos, rot = _sample_pose_target(con.params, rng)
            ad = None
            if vmp is not None:
                ad = adapt(vmp, new_start=np.concatenate([p0, np.zeros(3)]),
                           new_goal=np.concatenate([pos, log_so3(R0.T @ rot)]))
            active.append(ActiveConstraint(label, master, slave, con, ad, csup, support, is_top, cframe, csup,
                                           pos, rot, R0))
            continue
        kp = sb.index_of([con.keypoint_index])
        label += f"@{int(con.keypoint_index)}"
        q0 = B.T @ (sb.points[kp[0]] - o) / ratio
        ad = None
        if vmp is not None:
            ad = adapt(vmp, new_start=q0, new_goal=con.attractor(vmp.goal))
        active.append(ActiveConstraint(label, master, slave, con, ad, kp, support, is_top))

    order = [ids[n] for n in graph.topological_order()]
    controlled = []
    for bid in order:
        if bid in virtuals or bid in controlled:
            continue
        if any(c.slave == bid for c in active):
            controlled.append(bid)
    return AdaptedTask(graph, tuple(active), tuple(controlled), followers, virtuals)


# ----------------------------------------------------------------------------
# Forces


def blend_weight(phase: float, blend: float) -> float:
    """0 while following the primitive, rising linearly to 1 over the last ``blend`` of phase."""
    return float(np.clip((phase - (1.0 - blend)) / blend, 0.0, 1.0))


def constraint_force(k: float, d: float, attractor: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Spring-damper force ``k (attractor - x) - d v``."""
    return k * (np.asarray(attractor, dtype=float) - x) - d * np.asarray(v, dtype=float)


def compose_body_wrench(centroid: np.ndarray, points: np.ndarray, forces: np.ndarray):
    """Net force and torque about ``centroid`` of point forces."""
    points = np.atleast_2d(points)
    forces = np.atleast_2d(forces)
    return forces.sum(axis=0), np.cross(points - centroid, forces).sum(axis=0)


@dataclass(frozen=True)
class Evaluation:
    """Targets, manifold attractors and residuals of one constraint at one instant."""

    points: np.ndarray  # (n, 3) current keypoints
    targets: np.ndarray  # (n, 3) spring anchors (primitive blended into manifold)
    attractors: np.ndarray  # (n, 3) manifold attractors
    residual: float  # m, distance to the manifold (pose: origin error)
    angle: float = 0.0  # rad, pose constraints only
    tracking: float = 0.0  # m, distance to the spring anchors
    directions: np.ndarray | None = None  # (3, r) constrained directions; None = full body pose


def _complement(t: np.ndarray) -> np.ndarray:
    """Two unit vectors orthogonal to ``t`` as columns (3, 2)."""
    _, _, Vt = np.linalg.svd(np.asarray(t, dtype=float)[None])
    return Vt[1:].T


def manifold_target(con: GeometricConstraint, q: np.ndarray):
    """Attractor of ``q`` and the directions the constraint fixes, both in frame coordinates."""
    p = con.params
    if con.kind is Kind.P2P:
        return np.asarray(p["point"], dtype=float), np.eye(3)
    if con.kind is Kind.P2L:
        return con.attractor(q), _complement(p["direction"])
    if con.kind is Kind.P2PLANE:
        return con.attractor(q), np.asarray(p["normal"], dtype=float)[:, None]
    if con.kind is Kind.P2C:
        model = CurveModel.from_params(p)
        a, u = nearest_on_curve(model, q)
        return a, _complement(model.derivative(u))
    if con.kind is Kind.P2S:
        model = SurfaceModel.from_params(p)
        a, uv = nearest_on_surface(model, q)
        g = model.height_grad(uv)
        nrm = np.cross(model.e1 + g[0] * model.normal, model.e2 + g[1] * model.normal)
        return a, (nrm / np.linalg.norm(nrm))[:, None]
    raise PreconditionError("pose constraints have no point attractor", MODULE)


def evaluate_constraint(ac: ActiveConstraint, scene: SimScene, task: AdaptedTask, phase: float,
                        params: KacParams) -> Evaluation:
    mb = task.virtuals.get(ac.master) or scene.body(ac.master)
    sb = scene.body(ac.slave)
    B, o, s = frame_pose(ac.constraint.frame, mb, ac.frame_support)
    ratio = s / ac.constraint.ref_scale
    w = blend_weight(phase, params.blend)
    if ac.kind is Kind.POSE:
        Bc, oc, _ = frame_pose(ac.controlled_frame, sb, ac.controlled_support)
        goal_o = o + B @ (ratio * ac.target_position)
        goal_B = B @ ac.target_rotation
        if ac.vmp is not None and w < 1.0:
            val = ac.vmp(phase)
            p_t = (1.0 - w) * val[:3] + w * ac.target_position
            R_vmp = ac.start_rotation @ exp_so3(val[3:])
            R_t = R_vmp @ exp_so3(w * log_so3(R_vmp.T @ ac.target_rotation))
            tgt_o, tgt_B = o + B @ (ratio * p_t), B @ R_t
        else:
            tgt_o, tgt_B = goal_o, goal_B
        pts = sb.points[ac.controlled_support]
        local = (pts - oc) @ Bc
        targets = tgt_o + local @ tgt_B.T
        attractors = goal_o + local @ goal_B.T
        return Evaluation(pts, targets, attractors, float(np.linalg.norm(oc - goal_o)),
                          float(geodesic_angle(Bc, goal_B)), float(np.linalg.norm(targets - pts, axis=1).max()))
    x = sb.points[ac.keypoints]
    q = (x[0] - o) @ B / ratio
    a_loc, dirs = manifold_target(ac.constraint, q)
    a = o + B @ (ratio * a_loc)
    if ac.vmp is not None and w < 1.0:
        # following the primitive pins the whole point
        tgt = (1.0 - w) * (o + B @ (ratio * ac.vmp(phase))) + w * a
        dirs = np.eye(3)
    else:
        tgt = a
        dirs = B @ dirs
    return Evaluation(x, tgt[None], a[None], float(np.linalg.norm(a - x[0])), 0.0, float(np.linalg.norm(tgt - x[0])),
                      dirs)


def _skew(r: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])


def prioritized_wrench(centroid: np.ndarray, length: float, groups,
                       free_damping: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Net wrench with strict priorities between constraint levels.

    ``groups`` holds ``(level, points, forces, directions)``; lower levels
    win. Each level's wrench is projected onto the null space of the
    Jacobians of all stronger levels, in twist coordinates ``(v, length*w)``
    where the body's mass matrix is isotropic, so weaker constraints cannot
    disturb stronger ones to first order. ``directions`` None means the
    group fixes the full body pose. ``free_damping`` (scaled coordinates)
    acts only on the directions no constraint fixes, so motion the springs
    cannot see still comes to rest.
    """
    N = np.eye(6)
    W = np.zeros(6)
    rows = []
    for level in sorted({g[0] for g in groups}):
        Wl = np.zeros(6)
        for lv, pts, forces, dirs in groups:
            if lv != level:
                continue
            for x, f in zip(np.atleast_2d(pts), np.atleast_2d(forces)):
                r = x - centroid
                Wl[:3] += f
                Wl[3:] += np.cross(r, f) / length
                if dirs is not None:
                    rows.append(dirs.T @ np.hstack([np.eye(3), -_skew(r) / length]))
            if dirs is None:
                rows.append(np.eye(6))
        W += N @ Wl
        J = np.vstack(rows)
        N = np.eye(6) - np.linalg.pinv(J, rcond=1e-9) @ J
    if free_damping is not None:
        W += N @ free_damping
    return W[:3], W[3:] * length


# ----------------------------------------------------------------------------
# Integration


@dataclass
class StepLog:
    entries: list = field(default_factory=list)
    verdict: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "steps": self.entries}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), allow_nan=False))

    @classmethod
    def load(cls, path) -> "StepLog":
        d = json.loads(Path(path).read_text())
        return cls(list(d.get("steps", [])), dict(d.get("verdict", {})))


def _pose_json(b: Body) -> dict:
    return {"R": b.R.tolist(), "p": b.p.tolist()}


def _integrate(b: Body, F: np.ndarray, tau: np.ndarray, mass: float, inertia: float, dt: float,
               params: KacParams) -> Body:
    centroid_local = b.shape.mean(axis=0)
    c = b.R @ centroid_local + b.p
    v = b.v + dt * F / mass
    w = b.w + dt * tau / inertia
    speed = float(np.linalg.norm(v))
    if speed > params.max_speed:
        v = v * (params.max_speed / speed)
    reach = float(np.linalg.norm(b.shape - centroid_local, axis=1).max())
    rim = float(np.linalg.norm(w)) * reach
    if rim > params.max_speed:
        w = w * (params.max_speed / rim)
    R = orthonormalize(exp_so3(w * dt) @ b.R)
    c = c + dt * v
    return b.moved(R=R, p=c - R @ centroid_local, v=v, w=w)


def _place_followers(scene: SimScene, task: AdaptedTask, host: str, updates: dict) -> None:
    hb = updates.get(host) or scene.body(host)
    for hid, (hbid, R_rel, p_rel) in task.followers.items():
        if hbid == host:
            updates[hid] = scene.body(hid).moved(R=hb.R @ R_rel, p=hb.p + hb.R @ p_rel, v=hb.v.copy(),
                                                 w=hb.w.copy())


def step(scene: SimScene, task: AdaptedTask, params: KacParams, phases: dict, index: int = 0):
    """Advance the scene by one control step.

    Returns ``(scene, phases, entry)`` where ``entry`` is the StepLog record
    of this step (residuals are measured before the update). A body's phase
    stalls while one of its top-priority keypoints lags its target by more
    than ``stall_error``.
    """
    dt = scene.dt
    if not dt > 0:
        raise SimulationError(f"step {index}: dt must be > 0", MODULE)
    d = params.damping
    residuals, angles, wrenches, new_phases = {}, {}, {}, dict(phases)
    current = scene
    for bid in task.controlled:
        body = current.body(bid)
        phase = phases.get(bid, 0.0)
        groups, tracking = [], 0.0
        for ac in task.of(bid):
            ev = evaluate_constraint(ac, current, task, phase, params)
            residuals[ac.label] = ev.residual
            if ac.kind is Kind.POSE:
                angles[ac.label] = ev.angle
            vel = body.point_velocity(ac.keypoints)
            f = constraint_force(params.k_for(ac.kind), d, ev.targets, ev.points, vel)
            groups.append((ac.constraint.priority, ev.points, f, ev.directions))
            if ac.top_priority:
                tracking = max(tracking, ev.tracking)
        pts = np.concatenate([g[1] for g in groups])
        c = body.centroid
        arm2 = float(((pts - c) ** 2).sum())
        gyr2 = float(((body.shape - body.shape.mean(axis=0)) ** 2).sum(axis=1).mean())
        mass = params.m * len(pts)
        inertia = params.m * params.torque_arm * max(arm2, gyr2)
        arm = math.sqrt(inertia / mass)
        free = -d * len(pts) * np.concatenate([body.v, arm * body.w])
        F, tau = prioritized_wrench(c, arm, groups, free)
        moved = _integrate(body, F, tau, mass, inertia, dt, params)
        if not (np.all(np.isfinite(moved.R)) and np.all(np.isfinite(moved.p)) and np.all(np.isfinite(moved.v))):
            raise SimulationError(f"step {index}: non-finite state for {bid}", MODULE)
        updates = {bid: moved}
        _place_followers(current, task, bid, updates)
        current = current.with_bodies(updates)
        wrenches[bid] = {"force": F.tolist(), "torque": tau.tolist()}
        if tracking <= params.stall_error:
            new_phases[bid] = min(1.0, phase + params.phase_rate * dt)
    current = replace(current, time=scene.time + dt)
    entry = {
        "step": index,
        "t": scene.time,
        "poses": {bid: _pose_json(current.body(bid)) for bid in sorted(current.bodies)},
        "residuals": residuals,
        "angles": angles,
        "phases": dict(phases),
        "wrench": wrenches,
    }
    return current, new_phases, entry


def measure(scene: SimScene, task: AdaptedTask, params: KacParams, phases: dict):
    """Manifold residuals (and pose angles) of every active constraint in ``scene``."""
    res, ang = {}, {}
    for ac in task.constraints:
        ev = evaluate_constraint(ac, scene, task, phases.get(ac.slave, 1.0), params)
        res[ac.label] = ev.residual
        if ac.kind is Kind.POSE:
            ang[ac.label] = ev.angle
    return res, ang


def _satisfied(task: AdaptedTask, res: dict, ang: dict, phases: dict, params: KacParams) -> bool:
    for ac in task.constraints:
        if not ac.top_priority:
            continue
        if res[ac.label] >= params.tol or ang.get(ac.label, 0.0) >= params.tol_angle:
            return False
    return all(phases.get(b, 0.0) >= 1.0 for b in task.controlled)


def reproduce(graph: HmsrGraph, scene: SimScene, params: KacParams = KacParams(), horizon: float = 20.0,
              task: AdaptedTask | None = None):
    """Run the controller until convergence or ``horizon`` seconds.

    Convergence: every controlled body has finished its phase and all
    top-priority residuals stayed below tolerance for ``settle_time``.
    Returns ``(log, final_scene, task)``.
    """
    params.validate()
    task = task or adapt_to_scene(graph, scene, params)
    phases = {b: 0.0 for b in task.controlled}
    out = StepLog()
    n_steps = int(round(max(horizon, 0.0) / scene.dt))
    settle = int(math.ceil(params.settle_time / scene.dt - 1e-9))
    converged = not task.controlled and horizon > 0
    run = 0
    current = scene
    conv_time = 0.0 if converged else None
    if not converged:
        for i in range(n_steps):
            current, phases, entry = step(current, task, params, phases, i)
            out.entries.append(entry)
            res, ang = measure(current, task, params, phases)
            run = run + 1 if _satisfied(task, res, ang, phases, params) else 0
            if run >= settle:
                converged = True
                conv_time = round(current.time - scene.time, 9)
                break
    res, ang = measure(current, task, params, phases) if task.constraints else ({}, {})
    per = {}
    for ac in task.constraints:
        ok = res[ac.label] < params.tol and ang.get(ac.label, 0.0) < params.tol_angle
        per[ac.label] = {"kind": ac.kind.value, "top_priority": ac.top_priority, "final_residual": res[ac.label],
                         "success": bool(ok)}
        if ac.label in ang:
            per[ac.label]["final_angle"] = ang[ac.label]
    out.verdict = {
        "converged": bool(converged),
        "time_to_converge": conv_time,
        "steps": len(out.entries),
        "horizon": horizon,
        "dt": scene.dt,
        "constraints": per,
        "phases": phases,
        "params": asdict(params),
    }
    return out, current, task


def point_cloud_frames(scene: SimScene, log_: StepLog, stride: int = 1) -> dict:
    """Per-step point clouds rebuilt from logged poses: ``{body: (steps, N, 3)}``."""
    if stride < 1:
        raise PreconditionError("stride must be >= 1", MODULE)
    out = {}
    steps = log_.entries[::stride]
    for bid, b in scene.bodies.items():
        frames = [b.points]
        for e in steps:
            pose = e["poses"].get(bid)
            if pose is not None:
                frames.append(b.shape @ np.asarray(pose["R"]).T + np.asarray(pose["p"]))
        out[bid] = np.stack(frames)
    return out
