"""Motion saliency, virtual objects, contacts and grasp detection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, PreconditionError
from .trajdata import Demonstration, DemonstrationSet, ObjectTrack, TrackKind

MODULE = "saliency"

WRIST, INDEX_MCP, MIDDLE_MCP, PINKY_MCP = 0, 5, 9, 17


@dataclass(frozen=True)
class SaliencyConfig:
    rel_thresh: float = 0.05
    stride: float = 0.5  # seconds between the samples a speed is measured over

    def validate(self) -> "SaliencyConfig":
        if not 0 < self.rel_thresh < 1:
            raise ConfigError("rel_thresh must be in (0, 1)", MODULE)
        if not self.stride > 0:
            raise ConfigError("stride must be > 0", MODULE)
        return self


@dataclass(frozen=True)
class GraspDetectorConfig:
    Q: int = 50
    contact_dist: float = 0.02
    firm_rate_thresh: float = 0.005
    min_duration: int = 5
    stride: float = 0.5

    def validate(self) -> "GraspDetectorConfig":
        if self.Q < 4:
            raise ConfigError("Q must be >= 4", MODULE)
        if not (self.contact_dist > 0 and self.firm_rate_thresh > 0 and self.stride > 0):
            raise ConfigError("grasp thresholds must be > 0", MODULE)
        if self.min_duration < 1:
            raise ConfigError("min_duration must be >= 1", MODULE)
        return self


@dataclass(frozen=True)
class ObjectSaliency:
    object_id: str
    mean_point_speed: float
    label: str  # "static" | "moving"


@dataclass(frozen=True)
class SaliencyReport:
    objects: dict  # object_id -> ObjectSaliency
    scene_scale: float
    threshold: float  # m/s

    @property
    def static(self) -> list[str]:
        return [k for k, v in self.objects.items() if v.label == "static"]

    @property
    def moving(self) -> list[str]:
        return [k for k, v in self.objects.items() if v.label == "moving"]

    def to_json(self) -> dict:
        return {
            "scene_scale": self.scene_scale,
            "threshold": self.threshold,
            "objects": {k: {"mean_point_speed": v.mean_point_speed, "label": v.label} for k, v in self.objects.items()},
        }


@dataclass(frozen=True)
class GraspEvent:
    hand_id: str
    object_id: str
    interval: tuple  # (t_start, t_end), inclusive frame indices
    mean_change_rate: float
    firm: bool

    def to_json(self) -> dict:
        return {"hand": self.hand_id, "object": self.object_id, "interval": list(self.interval),
                "mean_change_rate": self.mean_change_rate, "firm": self.firm}


def _stride_frames(stride: float, dt: float, T: int) -> int:
    return int(np.clip(round(stride / dt), 1, T - 1))


def scene_scale(demo: Demonstration) -> float:
    """Diagonal of the principal-axis bounding box of all first-frame points.

    Aligning the box with the principal axes keeps the scale independent of
    the camera orientation.
    """
    pts = np.concatenate([tr.points[:, 0] for tr in demo.tracks])
    c = pts - pts.mean(axis=0)
    _, _, Vt = np.linalg.svd(c, full_matrices=False)
    proj = c @ Vt.T
    return float(np.linalg.norm(proj.max(axis=0) - proj.min(axis=0)))


def mean_point_speed(track: ObjectTrack, dt: float, stride: float = 0.5) -> float:
    """Average point speed measured over displacements ``stride`` seconds apart."""
    k = _stride_frames(stride, dt, track.n_frames)
    disp = np.linalg.norm(track.points[:, k:] - track.points[:, :-k], axis=2)
    return float(disp.mean() / (k * dt))


def motion_saliency(dset: DemonstrationSet, cfg: SaliencyConfig = SaliencyConfig()) -> SaliencyReport:
    """Label every non-hand, non-virtual object static or moving."""
    cfg.validate()
    if not dset.demos or dset.demos[0].n_frames < 2:
        raise PreconditionError("motion saliency needs T >= 2", MODULE)
    scale = float(np.mean([scene_scale(d) for d in dset.demos]))
    duration = float(np.mean([d.duration for d in dset.demos]))
    thresh = cfg.rel_thresh * scale / duration
    objects = {}
    for oid in dset.object_ids():
        kind = dset.kind_of(oid)
        if kind.is_hand or kind is TrackKind.VIRTUAL:
            continue
        speed = float(np.mean([mean_point_speed(d.track(oid), d.dt, cfg.stride) for d in dset.demos]))
        objects[oid] = ObjectSaliency(oid, speed, "static" if speed < thresh else "moving")
    return SaliencyReport(objects, scale, thresh)


def virtual_id(object_id: str) -> str:
    return "v" + object_id


def create_virtual_objects(dset: DemonstrationSet, report: SaliencyReport) -> DemonstrationSet:
    """Add a time-constant copy of every moving object's first-frame cloud."""
    moving = report.moving
    if not moving:
        return dset
    demos = []
    for demo in dset.demos:
        extra = []
        for oid in moving:
            tr = demo.track(oid)
            frozen = np.repeat(tr.points[:, :1], tr.n_frames, axis=1)
            extra.append(ObjectTrack(virtual_id(oid), tr.category, TrackKind.VIRTUAL, frozen, tr.canonical_points,
                                     tr.point_ids))
        demos.append(replace(demo, tracks=demo.tracks + tuple(extra)))
    return dset.with_demos(demos)


def _intervals(mask: np.ndarray, min_len: int) -> list[tuple[int, int]]:
    out = []
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    for s, e in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
        if e - s >= min_len:
            out.append((int(s), int(e - 1)))
    return out


def min_distances(a: ObjectTrack, b: ObjectTrack) -> np.ndarray:
    """Per-frame minimum distance between any point of ``a`` and any point of ``b``."""
    pa = np.swapaxes(a.points, 0, 1)
    pb = np.swapaxes(b.points, 0, 1)
    d2 = (pa**2).sum(-1)[:, :, None] + (pb**2).sum(-1)[:, None, :] - 2 * pa @ np.swapaxes(pb, 1, 2)
    return np.sqrt(np.maximum(d2.min(axis=(1, 2)), 0.0))


def detect_contacts(demo: Demonstration, pair: tuple[str, str],
                    cfg: GraspDetectorConfig = GraspDetectorConfig()) -> list[tuple[int, int]]:
    """Maximal frame intervals (inclusive) in which the two tracks touch."""
    d = min_distances(demo.track(pair[0]), demo.track(pair[1]))
    return _intervals(d < cfg.contact_dist, cfg.min_duration)


def hand_frame(hand: ObjectTrack) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame hand rotation (T, 3, 3) and origin (T, 3) from wrist and MCP keypoints."""
    p = hand.points
    origin = p[WRIST]
    x = p[MIDDLE_MCP] - origin
    z = np.cross(p[INDEX_MCP] - origin, p[PINKY_MCP] - origin)
    z /= np.linalg.norm(z, axis=-1, keepdims=True)
    x = x - (x * z).sum(-1, keepdims=True) * z
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-1), origin


def grasp_change_rate(hand: ObjectTrack, obj: ObjectTrack, interval: tuple[int, int], dt: float,
                      cfg: GraspDetectorConfig = GraspDetectorConfig()) -> np.ndarray:
    """Per-frame mean |d/dt| of the hand-frame distances of the Q object points nearest the hand.

    The points are chosen at the interval start; rates use central differences
    ``stride`` seconds wide, clipped to the interval.
    """
    t0, t1 = interval
    centroid = hand.points[:, t0].mean(axis=0)
    q = min(cfg.Q, obj.n_points)
    near = np.argsort(np.linalg.norm(obj.points[:, t0] - centroid, axis=1), kind="stable")[:q]
    R, o = hand_frame(hand)
    seg = slice(t0, t1 + 1)
    local = np.einsum("tji,ntj->nti", R[seg], obj.points[near, seg] - o[None, seg])
    dist = np.linalg.norm(local, axis=2)  # (q, L)
    L = dist.shape[1]
    if L < 2:
        return np.zeros(L)
    h = max(1, int(round(cfg.stride / dt)) // 2)
    idx = np.arange(L)
    lo, hi = np.clip(idx - h, 0, L - 1), np.clip(idx + h, 0, L - 1)
    rate = np.abs(dist[:, hi] - dist[:, lo]) / ((hi - lo) * dt)
    return rate.mean(axis=0)


def detect_grasps(demo: Demonstration, hand_id: str, object_id: str,
                  cfg: GraspDetectorConfig = GraspDetectorConfig()) -> list[GraspEvent]:
    """Grasp events of one hand on one object.

    Inside every contact interval the grasp starts where the change rate
    first drops below ``firm_rate_thresh``; it is firm when the mean rate
    from there to the end of contact stays below the threshold.
    """
    cfg.validate()
    if not demo.has(hand_id):
        raise PreconditionError(f"demo {demo.demo_id}: hand track {hand_id} missing", MODULE)
    hand = demo.track(hand_id)
    if not hand.kind.is_hand:
        raise PreconditionError(f"{hand_id} is not a hand track", MODULE)
    obj = demo.track(object_id)
    events = []
    for iv in detect_contacts(demo, (hand_id, object_id), cfg):
        rate = grasp_change_rate(hand, obj, iv, demo.dt, cfg)
        below = np.flatnonzero(rate < cfg.firm_rate_thresh)
        if below.size and iv[1] - (iv[0] + below[0]) + 1 >= cfg.min_duration:
            start = iv[0] + int(below[0])
            tail = float(rate[below[0]:].mean())
            if tail < cfg.firm_rate_thresh:
                events.append(GraspEvent(hand_id, object_id, (start, iv[1]), tail, True))
                continue
        events.append(GraspEvent(hand_id, object_id, iv, float(rate.mean()), False))
    return events


@dataclass(frozen=True)
class GraspSummary:
    """Firm grasps per hand, agreed across demonstrations."""

    grasped: dict  # hand_id -> object_id
    events: dict = field(default_factory=dict)  # demo_id -> list[GraspEvent]

    def to_json(self) -> dict:
        return {"grasped": dict(self.grasped),
                "events": {k: [e.to_json() for e in v] for k, v in self.events.items()}}


def find_grasps(dset: DemonstrationSet, cfg: GraspDetectorConfig = GraspDetectorConfig()) -> GraspSummary:
    """Assign every hand the object it grasps firmly in most demonstrations.

    A hand needs a firm grasp in more than half of the demonstrations; among
    candidate objects the longest total grasp wins.
    """
    hands = [o for o in dset.object_ids() if dset.kind_of(o).is_hand]
    objects = [o for o in dset.object_ids() if dset.kind_of(o) is TrackKind.RIGID]
    events: dict[str, list[GraspEvent]] = {}
    votes: dict[str, dict[str, list[int]]] = {h: {} for h in hands}
    for demo in dset.demos:
        events[demo.demo_id] = []
        for h in hands:
            for o in objects:
                evs = detect_grasps(demo, h, o, cfg)
                events[demo.demo_id].extend(evs)
                firm = [e.interval[1] - e.interval[0] + 1 for e in evs if e.firm]
                if firm:
                    votes[h].setdefault(o, []).append(sum(firm))
    grasped = {}
    for h in hands:
        ok = sorted((-len(v), -sum(v), o) for o, v in votes[h].items() if len(v) * 2 > len(dset.demos))
        if ok:
            grasped[h] = ok[0][2]
    return GraspSummary(grasped, events)


def report_json(report: SaliencyReport, grasps: GraspSummary) -> str:
    return json.dumps({"saliency": report.to_json(), "grasps": grasps.to_json()}, indent=1, sort_keys=True)
