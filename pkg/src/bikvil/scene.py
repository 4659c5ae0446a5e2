"""Rigid-body scene state shared by the generator and the controller."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .trajdata import TrackKind

MODULE = "bikac"


@dataclass(frozen=True, eq=False)
class Body:
    body_id: str
    category: str
    kind: TrackKind
    canonical_points: np.ndarray  # (N, 3) category canonical space
    shape: np.ndarray  # (N, 3) this instance in its body frame
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    controlled_by: str | None = None  # hand driving this body
    attached_to: str | None = None  # for hands: the grasped body
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TrackKind(self.kind))
        for name in ("canonical_points", "shape", "R", "p", "v", "w"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.shape)
        if self.canonical_points.shape != (n, 3):
            raise SchemaError(f"{self.body_id}: canonical/instance point count mismatch", MODULE)
        ids = np.arange(n) if self.point_ids is None else np.asarray(self.point_ids, dtype=np.int64)
        object.__setattr__(self, "point_ids", ids)

    @property
    def points(self) -> np.ndarray:
        return self.shape @ self.R.T + self.p

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def index_of(self, ids) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        loc = np.searchsorted(self.point_ids, ids)
        loc = np.clip(loc, 0, len(self.point_ids) - 1)
        if np.any(self.point_ids[loc] != ids):
            raise SchemaError(f"{self.body_id}: correspondence ids missing from instance", MODULE)
        return loc

    def point_velocity(self, local_idx) -> np.ndarray:
        r = self.points[local_idx] - self.centroid
        return self.v + np.cross(self.w, r)

    def moved(self, **changes) -> "Body":
        return replace(self, **changes)

    def to_json(self) -> dict:
        return {
            "body_id": self.body_id,
            "category": self.category,
            "kind": self.kind.value,
            "canonical_points": self.canonical_points.tolist(),
            "shape": self.shape.tolist(),
            "R": self.R.tolist(),
            "p": self.p.tolist(),
            "controlled_by": self.controlled_by,
            "attached_to": self.attached_to,
            "point_ids": self.point_ids.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Body":
        return cls(d["body_id"], d["category"], TrackKind(d["kind"]), np.asarray(d["canonical_points"]),
                   np.asarray(d["shape"]), np.asarray(d["R"]), np.asarray(d["p"]),
                   controlled_by=d.get("controlled_by"), attached_to=d.get("attached_to"),
                   point_ids=d.get("point_ids"))


@dataclass(frozen=True, eq=False)
class SimScene:
    bodies: dict
    dt: float = 0.01
    time: float = 0.0
    meta: dict = field(default_factory=dict)

    def body(self, body_id: str) -> Body:
        return self.bodies[body_id]

    def with_bodies(self, updates: dict, time: float | None = None) -> "SimScene":
        bodies = dict(self.bodies)
        bodies.update(updates)
        return replace(self, bodies=bodies, time=self.time if time is None else time)

    def categories(self) -> set:
        return {b.category for b in self.bodies.values()}

    def to_json(self) -> dict:
        return {"dt": self.dt, "time": self.time, "meta": self.meta,
                "bodies": [b.to_json() for b in self.bodies.values()]}

    @classmethod
    def from_json(cls, d: dict) -> "SimScene":
        bodies = {}
        for raw in d["bodies"]:
            b = Body.from_json(raw)
            bodies[b.body_id] = b
        return cls(bodies, float(d.get("dt", 0.01)), float(d.get("time", 0.0)), dict(d.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), allow_nan=False))

    @classmethod
    def load(cls, path) -> "SimScene":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed scene file {path}: {exc}", MODULE) from None
