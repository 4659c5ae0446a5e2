"""Seeded synthetic demonstration sets with known task structure.

Every scenario is a small script of rigid objects, hands and keyframed
poses. Rendering samples the per-demo randomness (start poses, free
degrees of the goal, instance scale, camera pose), animates the point
clouds with minimum-jerk interpolation between keyframes and adds i.i.d.
Gaussian point noise. The script also emits the ground truth that the
extraction pipeline is scored against.

Category shapes depend only on the category name, so sets generated with
different seeds or options can be concatenated.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, SchemaError
from .geometry import exp_so3, log_so3, random_rotation, rot_y, rot_z
from .scene import Body, SimScene
from .trajdata import Demonstration, DemonstrationSet, ObjectTrack, TrackKind, save_demonstration_set

MODULE = "synthgen"

TASKS = ("pour", "place_on", "place_arbitrary", "uncoordinated_pair", "symmetric_transport", "unimanual")
COORDINATION = ("uncoordinated_unimanual", "uncoordinated_bimanual", "loosely_coupled", "tightly_coupled_symmetric")
LEFT, RIGHT = "left_hand", "right_hand"


@dataclass(frozen=True)
class ScenarioConfig:
    task: str
    n_demos: int = 7
    seed: int = 0
    pose_jitter: float = 0.05
    shape_jitter: float = 0.05
    noise_sigma: float = 0.001
    T: int = 100
    dt: float = 0.05
    start_lift: float = 0.0  # master object starts up to this high above the table
    view_jitter: bool = True  # random camera pose per demo

    def validate(self) -> "ScenarioConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}", MODULE)
        if self.n_demos < 2:
            raise ConfigError(f"n_demos must be >= 2, got {self.n_demos}", MODULE)
        for name in ("pose_jitter", "shape_jitter", "noise_sigma", "start_lift"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", MODULE)
        if self.shape_jitter >= 0.5:
            raise ConfigError("shape_jitter must be < 0.5", MODULE)
        if self.T < 30:
            raise ConfigError(f"T must be >= 30, got {self.T}", MODULE)
        if not self.dt > 0:
            raise ConfigError("dt must be > 0", MODULE)
        return self


@dataclass(frozen=True)
class GtEdge:
    master: str
    slave: str
    kinds: tuple  # expected constraint kinds, top priority first


@dataclass(frozen=True)
class GroundTruth:
    task: str
    edges: tuple
    statics: tuple
    virtuals: tuple
    grasps: tuple  # (hand_id, object_id, (t_start, t_end))
    coordination: str
    resolved_masters: tuple = ()  # (master, slave) for bi-directional moving pairs
    keypoints: dict = field(default_factory=dict)  # object_id -> {site name: correspondence id}

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(GtEdge(e[0], e[1], tuple(e[2])) for e in self.edges))
        self.validate()

    def validate(self) -> None:
        nodes = {e.master for e in self.edges} | {e.slave for e in self.edges}
        adj: dict[str, list[str]] = {n: [] for n in nodes}
        for e in self.edges:
            adj[e.master].append(e.slave)
        state: dict[str, int] = {}

        def visit(n):
            state[n] = 1
            for m in adj[n]:
                if state.get(m) == 1 or (m not in state and visit(m)):
                    return True
            state[n] = 2
            return False

        if any(n not in state and visit(n) for n in sorted(nodes)):
            raise SchemaError(f"{self.task}: ground-truth edges contain a cycle", MODULE)
        for _, obj, _ in self.grasps:
            if obj not in nodes:
                raise SchemaError(f"{self.task}: grasped object {obj} appears in no edge", MODULE)
        if self.coordination not in COORDINATION:
            raise SchemaError(f"unknown coordination {self.coordination}", MODULE)

    def edge_set(self) -> set:
        return {(e.master, e.slave) for e in self.edges}

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "edges": [{"master": e.master, "slave": e.slave, "kinds": list(e.kinds)} for e in self.edges],
            "statics": list(self.statics),
            "virtuals": list(self.virtuals),
            "grasps": [{"hand": h, "object": o, "interval": list(iv)} for h, o, iv in self.grasps],
            "coordination": self.coordination,
            "resolved_masters": [list(p) for p in self.resolved_masters],
            "keypoints": self.keypoints,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        try:
            return cls(
                task=d["task"],
                edges=tuple((e["master"], e["slave"], e["kinds"]) for e in d["edges"]),
                statics=tuple(d["statics"]),
                virtuals=tuple(d["virtuals"]),
                grasps=tuple((g["hand"], g["object"], tuple(g["interval"])) for g in d["grasps"]),
                coordination=d["coordination"],
                resolved_masters=tuple(tuple(p) for p in d.get("resolved_masters", [])),
                keypoints={k: dict(v) for k, v in d.get("keypoints", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed ground truth: {exc}", MODULE) from None


# ----------------------------------------------------------------------------
# Shape library. Each builder returns points, named sites and grasp approaches
# (unit direction, in the object frame, along which the hand closes in).


@dataclass(frozen=True, eq=False)
class Shape:
    category: str
    points: np.ndarray
    sites: dict
    approaches: dict  # grasp site name -> approach direction


def _ring(radius, z, n, offset=0.0, ry=None):
    a = offset + 2 * np.pi * np.arange(n) / n
    ry = radius if ry is None else ry
    return np.column_stack([radius * np.cos(a), ry * np.sin(a), np.full(n, z)])


def _cup():
    pts = [_ring(0.04, 0.10, 12)]
    pts += [_ring(0.04, z, 10, offset=np.pi / 10) for z in (0.025, 0.05, 0.075)]
    pts += [np.zeros((1, 3)), _ring(0.025, 0.0, 6)]
    sites = {"rim": 3, "side": 12 + 10 + 7}  # rim at +y, side grip at -y, mid height
    return np.vstack(pts), sites, {"side": (0.0, 1.0, 0.0)}


def _kettle():
    pts = [_ring(0.07, z, 8, offset=np.pi / 8) for z in (0.02, 0.06, 0.10)]
    pts += [_ring(0.045, 0.14, 6), np.array([[0.0, 0.0, 0.145], [0.0, 0.0, 0.0]])]
    s = np.linspace(0.0, 1.0, 5)[:, None]
    pts.append((1 - s) * np.array([0.065, 0.0, 0.05]) + s * np.array([0.13, 0.0, 0.115]))
    a = np.deg2rad([90.0, 135.0, 180.0, 225.0, 270.0])
    pts.append(np.column_stack([-0.07 + 0.04 * np.cos(a), np.zeros(5), 0.08 + 0.04 * np.sin(a)]))
    sites = {"spout": 24 + 6 + 2 + 4, "handle": 24 + 6 + 2 + 5 + 2}
    return np.vstack(pts), sites, {"handle": (1.0, 0.0, 0.0)}


def _plate():
    pts = [np.array([[0.0, 0.0, 0.005]]), _ring(0.03, 0.005, 6), _ring(0.06, 0.006, 10, np.pi / 10),
           _ring(0.09, 0.01, 14), _ring(0.11, 0.018, 16), _ring(0.05, 0.0, 8, np.pi / 8)]
    sites = {"center": 0, "rim": 1 + 6 + 10 + 14 + 8}  # rim grip at -x
    return np.vstack(pts), sites, {"rim": (1.0, 0.0, 0.0)}


def _spoon():
    pts = [np.array([[0.0, 0.0, 0.008]]), _ring(0.035, 0.012, 8, ry=0.022), _ring(0.018, 0.005, 6, ry=0.011)]
    x = np.linspace(0.045, 0.17, 8)
    for y in (-0.006, 0.006):
        pts.append(np.column_stack([x, np.full(8, y), np.full(8, 0.015)]))
    pts.append(np.array([[0.18, 0.0, 0.015]]))
    sites = {"tip": 0, "handle_end": 1 + 8 + 6 + 16}
    return np.vstack(pts), sites, {"handle_end": (-1.0, 0.0, 0.0)}


def _tray():
    gx, gy = np.meshgrid(np.linspace(-0.2, 0.2, 7), np.linspace(-0.13, 0.13, 5), indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    handles = np.array([[sx * 0.23, y, 0.03] for sx in (-1, 1) for y in (0.0, -0.04, 0.04)])
    sites = {"center": 17, "left_handle": 35, "right_handle": 38}
    return np.vstack([grid, handles]), sites, {"left_handle": (1.0, 0.0, 0.0), "right_handle": (-1.0, 0.0, 0.0)}


def _mat():
    gx, gy = np.meshgrid(np.linspace(-0.18, 0.18, 7), np.linspace(-0.12, 0.12, 5), indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, 0.004)])
    return grid, {"center": 17}, {}


def _coaster():
    gx, gy = np.meshgrid(np.linspace(-0.05, 0.05, 5), np.linspace(-0.05, 0.05, 5), indexing="ij")
    top = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, 0.006)])
    bottom = np.array([[sx * 0.05, sy * 0.05, 0.0] for sx in (-1, 1) for sy in (-1, 1)])
    return np.vstack([top, bottom]), {"center": 12}, {}


def _banana():
    radius, a = 0.15, np.deg2rad(np.linspace(-35.0, 35.0, 11))
    c = np.column_stack([radius * np.sin(a), radius * (1 - np.cos(a)), np.full(11, 0.02)])
    n = np.column_stack([-np.sin(a), np.cos(a), np.zeros(11)])
    pts = np.stack([c + 0.015 * n, c - 0.015 * n, c + [0.0, 0.0, 0.015]], axis=1).reshape(-1, 3)
    tangent = np.array([np.cos(a[-1]), np.sin(a[-1]), 0.0])
    sites = {"middle": 5 * 3 + 2, "end": 10 * 3 + 2}
    return pts, sites, {"end": tuple(-tangent)}


_BUILDERS: dict[str, Callable] = {
    "cup": _cup, "kettle": _kettle, "plate": _plate, "spoon": _spoon, "tray": _tray,
    "mat": _mat, "coaster": _coaster, "banana": _banana,
}

# 21-keypoint right hand in its own frame: fingers along +x, palm facing -z.
# 0 wrist, 1-4 thumb, 5-8 index, 9-12 middle, 13-16 ring, 17-20 pinky.
_HAND_RIGHT = np.array([
    [0.0, 0.0, 0.0],
    [0.02, -0.025, -0.005], [0.04, -0.04, -0.01], [0.055, -0.05, -0.015], [0.07, -0.055, -0.02],
    [0.08, -0.02, 0.0], [0.11, -0.022, -0.005], [0.13, -0.022, -0.015], [0.145, -0.022, -0.03],
    [0.085, 0.0, 0.0], [0.12, 0.0, -0.005], [0.14, 0.0, -0.018], [0.155, 0.0, -0.033],
    [0.08, 0.018, 0.0], [0.11, 0.019, -0.005], [0.13, 0.019, -0.016], [0.145, 0.019, -0.03],
    [0.07, 0.035, 0.0], [0.095, 0.037, -0.004], [0.11, 0.038, -0.012], [0.122, 0.038, -0.024],
])
_HAND_FRONT = 12  # middle fingertip, the hand point closest to a grasped object


def hand_shape(kind: TrackKind) -> np.ndarray:
    return _HAND_RIGHT * ([1.0, -1.0, 1.0] if kind is TrackKind.HAND_LEFT else 1.0)


def category_shape(category: str) -> Shape:
    """Canonical point cloud of a category; seeded by the name only."""
    if category not in _BUILDERS:
        raise ConfigError(f"unknown category {category!r}", MODULE)
    pts, sites, appr = _BUILDERS[category]()
    rng = np.random.default_rng(zlib.crc32(category.encode()))
    pts = pts + rng.normal(0.0, 0.0015, pts.shape)
    return Shape(category, pts, dict(sites), {k: np.asarray(v, dtype=float) for k, v in appr.items()})


# ----------------------------------------------------------------------------
# Scripted motion


def _min_jerk(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10 - 15 * s + 6 * s**2)


@dataclass
class _Actor:
    object_id: str
    shape: Shape
    scale: float
    keys: list  # [(frame, R, p)], frames strictly increasing
    static: bool = False

    @property
    def points(self) -> np.ndarray:
        return self.scale * self.shape.points

    def site(self, name: str) -> np.ndarray:
        return self.points[self.shape.sites[name]]

    def trajectory(self, T: int):
        Rs, ps = zip(*(_pose_at(self.keys, t) for t in range(T)))
        return np.stack(Rs), np.stack(ps)


def _pose_at(keys: list, t: float):
    """Minimum-jerk interpolation between keyframes ``(frame, R, p)``."""
    if t <= keys[0][0]:
        return keys[0][1], keys[0][2]
    for (f0, R0, p0), (f1, R1, p1) in zip(keys, keys[1:]):
        if t <= f1:
            s = float(_min_jerk((t - f0) / (f1 - f0)))
            return R0 @ exp_so3(s * log_so3(R0.T @ R1)), p0 + s * (p1 - p0)
    return keys[-1][1], keys[-1][2]


@dataclass
class _HandPlan:
    hand_id: str
    kind: TrackKind
    target: str  # grasped actor
    site: str


@dataclass
class _Plan:
    actors: list
    hands: list
    t_grasp: int


def _yaw(rng, spread):
    return rng.uniform(-spread, spread)


def _jit(rng, j, dims=2):
    v = np.zeros(3)
    v[:dims] = rng.uniform(-j, j, dims)
    return v


def _pose(R, p):
    return np.asarray(R, dtype=float), np.asarray(p, dtype=float)


def _place_site(actor: _Actor, site: str, target: np.ndarray, R: np.ndarray):
    """Pose with orientation ``R`` that puts ``actor``'s site at ``target``."""
    return R, target - R @ actor.site(site)


def _world_site(actor: _Actor, site: str, pose) -> np.ndarray:
    R, p = pose
    return R @ actor.site(site) + p


def _frames(cfg: ScenarioConfig, *fractions) -> list[int]:
    return [int(round(f * (cfg.T - 1))) for f in fractions]


def _lifted(a: tuple, b: tuple, height: float, frac: float = 0.5):
    """Intermediate pose between two poses, raised by ``height``."""
    Ra, pa = a
    Rb, pb = b
    R = Ra @ exp_so3(frac * log_so3(Ra.T @ Rb))
    return R, pa + frac * (pb - pa) + np.array([0.0, 0.0, height])


def _script_pour(cfg, rng, scale):
    tg, t1, t2, t3 = _frames(cfg, 0.2, 0.35, 0.55, 0.88)
    j = cfg.pose_jitter
    cup = _Actor("cup", category_shape("cup"), scale(rng), [])
    kettle = _Actor("kettle", category_shape("kettle"), scale(rng), [])
    lift = rng.uniform(0.3, 1.0) * cfg.start_lift
    c0 = _pose(rot_z(_yaw(rng, np.pi / 6)), [0.0, -0.25, lift] + _jit(rng, j))
    k0 = _pose(rot_z(-np.pi / 2 + _yaw(rng, np.pi / 6)), [0.0, 0.25, 0.0] + _jit(rng, j))
    shift = np.array([0.10, 0.12, 0.15]) + rng.uniform(-1.5 * j, 1.5 * j, 3)
    tilt = exp_so3(rng.normal(0.0, np.deg2rad(1.0), 3))
    c1 = _pose(c0[0] @ tilt, c0[1] + shift)
    # spout tip 1 cm above the rim; the kettle may swing about the vertical through the rim
    R_rel = rot_z(-np.pi / 2 + rng.uniform(-np.deg2rad(40), np.deg2rad(40))) @ rot_y(np.deg2rad(35))
    R_rel, t_rel = _place_site(kettle, "spout", cup.site("rim") + [0.0, 0.0, 0.01], R_rel)
    k1 = _pose(c1[0] @ R_rel, c1[0] @ t_rel + c1[1])
    cup.keys = [(tg, *c0), (t2, *c1)]
    kettle.keys = [(t1, *k0), (t3, *k1)]
    hands = [_HandPlan(RIGHT, TrackKind.HAND_RIGHT, "cup", "side"),
             _HandPlan(LEFT, TrackKind.HAND_LEFT, "kettle", "handle")]
    return _Plan([cup, kettle], hands, tg)


def _script_place(cfg, rng, scale, arbitrary: bool):
    tg, t1, t2, t3, t4 = _frames(cfg, 0.2, 0.4, 0.6, 0.63, 0.88)
    j = cfg.pose_jitter
    spoon = _Actor("spoon", category_shape("spoon"), scale(rng), [])
    plate = _Actor("plate", category_shape("plate"), scale(rng), [])
    s0 = _pose(rot_z(np.pi / 2 + _yaw(rng, np.pi / 6)), [0.0, 0.15, 0.0] + _jit(rng, j))
    lift = rng.uniform(0.3, 1.0) * cfg.start_lift
    p_yaw = rot_z(np.pi / 2 + _yaw(rng, np.pi / 6))
    p0 = _pose(p_yaw, [0.25, -0.20, lift] + _jit(rng, j))
    # plate slides (no rotation) until its centre is below the spoon tip
    tip0 = _world_site(spoon, "tip", s0)
    under = np.array([tip0[0], tip0[1], 0.0]) + _jit(rng, 0.003)
    p1 = _place_site(plate, "center", under + [0.0, 0.0, plate.site("center")[2]], p_yaw)
    target = _world_site(plate, "center", p1) + [0.0, 0.0, 0.012]
    if arbitrary:
        r, a = 0.08 * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
        target = target + p_yaw @ [r * np.cos(a), r * np.sin(a), 0.0]
    # keep the spoon handle pointing away from the hand holding the plate rim
    s_yaw = p_yaw @ rot_z(_yaw(rng, np.deg2rad(40)))
    s2 = _place_site(spoon, "tip", target, s_yaw)
    s1 = _pose(s0[0], s0[1] + [0.0, 0.0, 0.12 + lift])
    spoon.keys = [(tg, *s0), (t1, *s1), (t3, *_lifted(s1, s2, 0.0, 0.0)), (t4, *s2)]
    plate.keys = [(tg, *p0), (t2, *p1)]
    hands = [_HandPlan(RIGHT, TrackKind.HAND_RIGHT, "plate", "rim"),
             _HandPlan(LEFT, TrackKind.HAND_LEFT, "spoon", "handle_end")]
    return _Plan([plate, spoon], hands, tg)


def _script_uncoordinated(cfg, rng, scale):
    tg, ta, tb, tc = _frames(cfg, 0.2, 0.25, 0.8, 0.88)
    j = cfg.pose_jitter
    spoon = _Actor("spoon", category_shape("spoon"), scale(rng), [])
    banana = _Actor("banana", category_shape("banana"), scale(rng), [])
    plate = _Actor("plate", category_shape("plate"), scale(rng), [], static=True)
    coaster = _Actor("coaster", category_shape("coaster"), scale(rng), [], static=True)
    # the two targets stand at independent heights
    pl = _pose(rot_z(rng.uniform(-np.pi, np.pi)), [-0.30, 0.30, rng.uniform(0.0, 0.2)] + _jit(rng, j, 3))
    co = _pose(rot_z(rng.uniform(-np.pi, np.pi)), [-0.30, -0.30, rng.uniform(0.0, 0.2)] + _jit(rng, j, 3))
    plate.keys, coaster.keys = [(0, *pl)], [(0, *co)]
    lift = rng.uniform(0.3, 1.0) * cfg.start_lift
    s0 = _pose(rot_z(np.pi / 2 + _yaw(rng, np.pi / 6)), [0.05, 0.25, lift] + _jit(rng, j))
    b0 = _pose(rot_z(np.pi + _yaw(rng, np.pi / 6)), [0.05, -0.25, 0.0] + _jit(rng, j))
    s1 = _place_site(spoon, "tip", _world_site(plate, "center", pl) + [0.0, 0.0, 0.012],
                     s0[0] @ rot_z(_yaw(rng, np.deg2rad(40))))
    b1 = _place_site(banana, "middle", _world_site(coaster, "center", co) + [0.0, 0.0, 0.04],
                     rot_z(rng.uniform(-np.pi, np.pi)))
    spoon.keys = [(tg, *s0), ((tg + tb) // 2, *_lifted(s0, s1, 0.12)), (tb, *s1)]
    banana.keys = [(ta, *b0), ((ta + tc) // 2, *_lifted(b0, b1, 0.12)), (tc, *b1)]
    hands = [_HandPlan(LEFT, TrackKind.HAND_LEFT, "spoon", "handle_end"),
             _HandPlan(RIGHT, TrackKind.HAND_RIGHT, "banana", "end")]
    return _Plan([plate, coaster, spoon, banana], hands, tg)


def _script_symmetric(cfg, rng, scale):
    tg, t1 = _frames(cfg, 0.2, 0.88)
    j = cfg.pose_jitter
    tray = _Actor("tray", category_shape("tray"), scale(rng), [])
    mat = _Actor("mat", category_shape("mat"), scale(rng), [], static=True)
    m = _pose(rot_z(_yaw(rng, np.pi / 8)), [0.45, 0.0, rng.uniform(0.0, 0.10)] + _jit(rng, j, 3))
    mat.keys = [(0, *m)]
    lift = rng.uniform(0.0, 0.15) + rng.uniform(0.3, 1.0) * cfg.start_lift
    t0 = _pose(rot_z(_yaw(rng, np.pi / 8)), [-0.25, 0.0, lift] + _jit(rng, j))
    t_end = _place_site(tray, "center", _world_site(mat, "center", m) + [0.0, 0.0, 0.03],
                        m[0] @ rot_z(_yaw(rng, np.pi / 6)))
    tray.keys = [(tg, *t0), ((tg + t1) // 2, *_lifted(t0, t_end, 0.15)), (t1, *t_end)]
    hands = [_HandPlan(LEFT, TrackKind.HAND_LEFT, "tray", "left_handle"),
             _HandPlan(RIGHT, TrackKind.HAND_RIGHT, "tray", "right_handle")]
    return _Plan([mat, tray], hands, tg)


def _script_unimanual(cfg, rng, scale):
    tg, t1 = _frames(cfg, 0.2, 0.85)
    j = cfg.pose_jitter
    spoon = _Actor("spoon", category_shape("spoon"), scale(rng), [])
    plate = _Actor("plate", category_shape("plate"), scale(rng), [], static=True)
    pl = _pose(rot_z(rng.uniform(-np.pi, np.pi)), [0.25, 0.10, 0.0] + _jit(rng, j))
    plate.keys = [(0, *pl)]
    lift = rng.uniform(0.3, 1.0) * cfg.start_lift
    s0 = _pose(rot_z(-np.pi / 2 + _yaw(rng, np.pi / 6)), [0.0, -0.20, lift] + _jit(rng, j))
    s1 = _place_site(spoon, "tip", _world_site(plate, "center", pl) + [0.0, 0.0, 0.012],
                     s0[0] @ rot_z(_yaw(rng, np.deg2rad(40))))
    spoon.keys = [(tg, *s0), ((tg + t1) // 2, *_lifted(s0, s1, 0.12)), (t1, *s1)]
    return _Plan([plate, spoon], [_HandPlan(RIGHT, TrackKind.HAND_RIGHT, "spoon", "handle_end")], tg)


_SCRIPTS = {
    "pour": _script_pour,
    "place_on": lambda c, r, s: _script_place(c, r, s, arbitrary=False),
    "place_arbitrary": lambda c, r, s: _script_place(c, r, s, arbitrary=True),
    "uncoordinated_pair": _script_uncoordinated,
    "symmetric_transport": _script_symmetric,
    "unimanual": _script_unimanual,
}


def _grasp_pose(actor: _Actor, plan: _HandPlan, obj_pose):
    """Hand pose closing on a grasp site along its approach direction."""
    R_o, p_o = obj_pose
    a = R_o @ actor.shape.approaches[plan.site]
    a_h = a - a[2] * R_o[:, 2]
    a_h /= np.linalg.norm(a_h)
    up = R_o[:, 2]
    R_h = np.column_stack([a_h, np.cross(up, a_h), up])
    front = hand_shape(plan.kind)[_HAND_FRONT]
    p_h = _world_site(actor, plan.site, obj_pose) - 0.005 * a_h - R_h @ front
    return R_h, p_h


def _hand_trajectory(plan: _HandPlan, actor: _Actor, obj_R, obj_p, t_grasp: int, rng, T: int):
    Rg, pg = _grasp_pose(actor, plan, (obj_R[t_grasp], obj_p[t_grasp]))
    a = Rg[:, 0]
    start = (Rg @ rot_z(_yaw(rng, np.deg2rad(20))), pg - 0.15 * a + [0.0, 0.0, 0.08])
    approach = [(0, *start), (t_grasp, Rg, pg)]
    # relative pose to the object stays fixed once grasped
    R_rel = obj_R[t_grasp].T @ Rg
    p_rel = obj_R[t_grasp].T @ (pg - obj_p[t_grasp])
    Rs, ps = [], []
    for t in range(T):
        if t < t_grasp:
            R, p = _pose_at(approach, t)
        else:
            R, p = obj_R[t] @ R_rel, obj_R[t] @ p_rel + obj_p[t]
        Rs.append(R)
        ps.append(p)
    return np.stack(Rs), np.stack(ps)


def _training_scale(jitter: float):
    return lambda rng: 1.0 + rng.uniform(-jitter, jitter)


def _novel_scale(jitter: float):
    def draw(rng):
        return 1.0 + rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0) * jitter
    return draw


def _animate(points: np.ndarray, Rs: np.ndarray, ps: np.ndarray) -> np.ndarray:
    return np.einsum("tij,nj->nti", Rs, points) + ps[None, :, :]


def _render_demo(cfg: ScenarioConfig, rng: np.random.Generator, index: int) -> Demonstration:
    plan = _SCRIPTS[cfg.task](cfg, rng, _training_scale(cfg.shape_jitter))
    T = cfg.T
    Rc = random_rotation(rng) if cfg.view_jitter else np.eye(3)
    tc = np.array([0.0, 0.0, 1.0]) + (rng.uniform(-0.2, 0.2, 3) if cfg.view_jitter else 0.0)
    tracks, traj = [], {}
    for actor in plan.actors:
        Rs, ps = actor.trajectory(T)
        traj[actor.object_id] = (Rs, ps)
        tracks.append((actor.object_id, actor.shape.category, TrackKind.RIGID, _animate(actor.points, Rs, ps),
                       actor.shape.points))
    by_id = {a.object_id: a for a in plan.actors}
    for hp in plan.hands:
        Rs, ps = _hand_trajectory(hp, by_id[hp.target], *traj[hp.target], plan.t_grasp, rng, T)
        shape = hand_shape(hp.kind)
        tracks.append((hp.hand_id, "hand", hp.kind, _animate(shape, Rs, ps), _HAND_RIGHT))
    out = []
    for oid, cat, kind, pts, canon in tracks:
        pts = pts @ Rc.T + tc
        if cfg.noise_sigma > 0:
            pts = pts + rng.normal(0.0, cfg.noise_sigma, pts.shape)
        out.append(ObjectTrack(oid, cat, kind, pts, canon))
    return Demonstration(f"demo_{index:03d}", tuple(out), cfg.dt)


def _seed_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)


def generate(cfg: ScenarioConfig) -> tuple[DemonstrationSet, GroundTruth]:
    """Render ``cfg.n_demos`` demonstrations and the matching ground truth.

    Demo ``i`` depends only on ``(seed, i)``, so the first demos of a larger
    set equal a smaller set generated with the same seed.
    """
    cfg.validate()
    seqs = _seed_sequence(cfg.seed).spawn(cfg.n_demos)
    demos = [_render_demo(cfg, np.random.default_rng(s), i) for i, s in enumerate(seqs)]
    return DemonstrationSet(cfg.task, tuple(demos)), ground_truth(cfg.task, cfg.T)


def _site_ids(*pairs) -> dict:
    out: dict = {}
    for obj, cat, names in pairs:
        shape = category_shape(cat)
        out[obj] = {n: int(shape.sites[n]) for n in names}
    return out


def ground_truth(task: str, T: int = 100) -> GroundTruth:
    """Expected structure of a scenario (independent of the seed)."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}", MODULE)
    tg = int(round(0.2 * (T - 1)))
    iv = (tg, T - 1)
    if task == "pour":
        return GroundTruth(
            task,
            (("vcup", "cup", ("pose",)), ("cup", "kettle", ("p2p", "p2c")),
             ("cup", RIGHT, ("p2p",)), ("kettle", LEFT, ("p2p",))),
            (), ("vcup",), ((RIGHT, "cup", iv), (LEFT, "kettle", iv)), "loosely_coupled",
            resolved_masters=(("cup", "kettle"),),
            keypoints=_site_ids(("cup", "cup", ("rim",)), ("kettle", "kettle", ("spout",))),
        )
    if task in ("place_on", "place_arbitrary"):
        k = "p2p" if task == "place_on" else "p2P"
        return GroundTruth(
            task,
            (("vspoon", "plate", ("p2p",)), ("vplate", "plate", ("p2P",)), ("plate", "spoon", (k,)),
             ("vspoon", "spoon", (k,)), ("vplate", "spoon", ("p2P",)),
             ("plate", RIGHT, ("p2p",)), ("spoon", LEFT, ("p2p",))),
            (), ("vplate", "vspoon"), ((RIGHT, "plate", iv), (LEFT, "spoon", iv)), "loosely_coupled",
            resolved_masters=(("plate", "spoon"),),
            keypoints=_site_ids(("spoon", "spoon", ("tip",)), ("plate", "plate", ("center",))),
        )
    if task == "uncoordinated_pair":
        return GroundTruth(
            task,
            (("plate", "spoon", ("p2p",)), ("coaster", "banana", ("p2p",)),
             ("spoon", LEFT, ("p2p",)), ("banana", RIGHT, ("p2p",))),
            ("plate", "coaster"), (), ((LEFT, "spoon", iv), (RIGHT, "banana", iv)), "uncoordinated_bimanual",
            keypoints=_site_ids(("spoon", "spoon", ("tip",))),
        )
    if task == "symmetric_transport":
        return GroundTruth(
            task,
            (("mat", "tray", ("p2p",)), ("tray", LEFT, ("p2p",)), ("tray", RIGHT, ("p2p",))),
            ("mat",), (), ((LEFT, "tray", iv), (RIGHT, "tray", iv)), "tightly_coupled_symmetric",
            keypoints=_site_ids(("tray", "tray", ("center",))),
        )
    return GroundTruth(
        task,
        (("plate", "spoon", ("p2p",)), ("vspoon", "spoon", ("p2P",)), ("spoon", RIGHT, ("p2p",))),
        ("plate",), ("vspoon",), ((RIGHT, "spoon", iv),), "uncoordinated_unimanual",
        keypoints=_site_ids(("spoon", "spoon", ("tip",))),
    )


def save_scenario(dset: DemonstrationSet, truth: GroundTruth, path) -> None:
    save_demonstration_set(dset, path)
    Path(path, "ground_truth.json").write_text(json.dumps(truth.to_json(), indent=1, sort_keys=True))


def load_ground_truth(path) -> GroundTruth:
    p = Path(path)
    if p.is_dir():
        p = p / "ground_truth.json"
    try:
        return GroundTruth.from_json(json.loads(p.read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read ground truth {p}: {exc}", MODULE) from None


def generate_novel_scene(cfg: ScenarioConfig, seed: int, dt: float = 0.01) -> SimScene:
    """Start state of a fresh instance of the task, hands already grasping.

    Instance scales differ from 1 by between half and all of
    ``shape_jitter``; start poses follow the training distribution.
    """
    cfg.validate()
    rng = np.random.default_rng(_seed_sequence(seed).spawn(1)[0])
    plan = _SCRIPTS[cfg.task](cfg, rng, _novel_scale(cfg.shape_jitter))
    bodies: dict[str, Body] = {}
    start_pose = {}
    for actor in plan.actors:
        R, p = actor.keys[0][1], actor.keys[0][2]
        start_pose[actor.object_id] = (R, p)
        bodies[actor.object_id] = Body(actor.object_id, actor.shape.category, TrackKind.RIGID,
                                       actor.shape.points, actor.points, R, p)
    by_id = {a.object_id: a for a in plan.actors}
    for hp in plan.hands:
        R, p = _grasp_pose(by_id[hp.target], hp, start_pose[hp.target])
        bodies[hp.hand_id] = Body(hp.hand_id, "hand", hp.kind, _HAND_RIGHT, hand_shape(hp.kind), R, p,
                                  attached_to=hp.target)
        if bodies[hp.target].controlled_by is None:
            bodies[hp.target] = bodies[hp.target].moved(controlled_by=hp.hand_id)
    return SimScene(bodies, dt, 0.0, {"task": cfg.task, "seed": int(seed), "scenario": asdict(cfg)})
