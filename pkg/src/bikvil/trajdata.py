"""Demonstration data model, file I/O and trajectory preprocessing.

A demonstration set is a directory holding ``manifest.json`` plus one
``<demo_id>.json`` file per demonstration. Point index ``i`` of a track
refers to the same physical surface point in every frame and every
demonstration of a category; ``point_ids`` keeps that correspondence
index stable when outlier points are dropped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import savgol_filter

from .errors import DataError, GeometryError, PreconditionError, SchemaError
from .geometry import kabsch

MODULE = "trajdata"
FORMAT_VERSION = 1
N_HAND_POINTS = 21


class TrackKind(str, Enum):
    RIGID = "rigid_object"
    HAND_LEFT = "hand_left"
    HAND_RIGHT = "hand_right"
    VIRTUAL = "virtual"

    @property
    def is_hand(self) -> bool:
        return self in (TrackKind.HAND_LEFT, TrackKind.HAND_RIGHT)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ObjectTrack:
    object_id: str
    category: str
    kind: TrackKind
    points: np.ndarray  # (N, T, 3)
    canonical_points: np.ndarray  # (N, 3)
    point_ids: np.ndarray | None = None  # (N,) correspondence ids

    def __post_init__(self):
        object.__setattr__(self, "kind", TrackKind(self.kind))
        pts = _frozen(self.points)
        can = _frozen(self.canonical_points)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise SchemaError(f"{self.object_id}: points must be N x T x 3, got {pts.shape}", MODULE)
        if can.shape != (pts.shape[0], 3):
            raise SchemaError(
                f"{self.object_id}: canonical_points shape {can.shape} does not match N={pts.shape[0]}", MODULE
            )
        bad = ~np.isfinite(pts)
        if bad.any():
            frame = int(np.argwhere(bad)[0][1])
            raise DataError(f"{self.object_id}: non-finite coordinate at frame {frame}", MODULE)
        if not np.isfinite(can).all():
            raise DataError(f"{self.object_id}: non-finite canonical point", MODULE)
        n = pts.shape[0]
        if self.kind.is_hand and n != N_HAND_POINTS:
            raise SchemaError(f"{self.object_id}: hands need exactly 21 points, got {n}", MODULE)
        if not self.kind.is_hand and n < 4:
            raise SchemaError(f"{self.object_id}: rigid objects need N >= 4, got {n}", MODULE)
        ids = np.arange(n) if self.point_ids is None else self.point_ids
        ids = _frozen(ids, dtype=np.int64)
        if ids.shape != (n,) or np.any(np.diff(ids) <= 0):
            raise SchemaError(f"{self.object_id}: point_ids must be strictly increasing, length N", MODULE)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "canonical_points", can)
        object.__setattr__(self, "point_ids", ids)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_frames(self) -> int:
        return self.points.shape[1]

    def index_of(self, ids) -> np.ndarray:
        """Map correspondence ids to local row indices; raises if any id is absent."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        loc = np.searchsorted(self.point_ids, ids)
        loc = np.clip(loc, 0, self.n_points - 1)
        if np.any(self.point_ids[loc] != ids):
            missing = ids[self.point_ids[loc] != ids]
            raise PreconditionError(f"{self.object_id}: correspondence ids {missing.tolist()} not present", MODULE)
        return loc

    def with_points(self, points, **changes) -> "ObjectTrack":
        return replace(self, points=points, **changes)


@dataclass(frozen=True, eq=False)
class Demonstration:
    demo_id: str
    tracks: tuple
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if not self.dt > 0:
            raise SchemaError(f"demo {self.demo_id}: dt must be > 0", MODULE)
        if not self.tracks:
            return
        t0 = self.tracks[0].n_frames
        for tr in self.tracks:
            if tr.n_frames != t0:
                raise SchemaError(
                    f"demo {self.demo_id}: track {tr.object_id} has T={tr.n_frames}, expected {t0}", MODULE
                )
        ids = [tr.object_id for tr in self.tracks]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"demo {self.demo_id}: duplicate object ids", MODULE)
        if all(tr.kind.is_hand for tr in self.tracks):
            raise SchemaError(f"demo {self.demo_id}: needs at least one non-hand track", MODULE)

    @property
    def n_frames(self) -> int:
        return self.tracks[0].n_frames if self.tracks else 0

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) * self.dt

    def track(self, object_id: str) -> ObjectTrack:
        for tr in self.tracks:
            if tr.object_id == object_id:
                return tr
        raise KeyError(object_id)

    def has(self, object_id: str) -> bool:
        return any(tr.object_id == object_id for tr in self.tracks)


@dataclass(frozen=True, eq=False)
class DemonstrationSet:
    task_name: str
    demos: tuple
    categories: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "demos", tuple(self.demos))
        ids = [d.demo_id for d in self.demos]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate demo ids in set", MODULE)
        if not self.categories and self.demos:
            object.__setattr__(self, "categories", tuple(_category_descriptors(self.demos[0])))
        else:
            object.__setattr__(self, "categories", tuple(dict(c) for c in self.categories))
        if not self.demos:
            return
        ref = self.demos[0]
        ref_sig = _signature(ref)
        n_per_cat: dict[str, int] = {}
        for demo in self.demos:
            if _signature(demo) != ref_sig:
                raise SchemaError(f"demo {demo.demo_id}: object set differs from demo {ref.demo_id}", MODULE)
            for tr in demo.tracks:
                n = n_per_cat.setdefault(tr.category, tr.n_points)
                if n != tr.n_points:
                    raise SchemaError(
                        f"demo {demo.demo_id}: category {tr.category} has N={tr.n_points}, expected {n}", MODULE
                    )

    def object_ids(self) -> list[str]:
        return [tr.object_id for tr in self.demos[0].tracks] if self.demos else []

    def tracks_of(self, object_id: str) -> list[ObjectTrack]:
        return [d.track(object_id) for d in self.demos]

    def kind_of(self, object_id: str) -> TrackKind:
        return self.demos[0].track(object_id).kind

    def with_demos(self, demos) -> "DemonstrationSet":
        return DemonstrationSet(self.task_name, tuple(demos), ())


def _signature(demo: Demonstration):
    return sorted((tr.object_id, tr.category, tr.kind.value) for tr in demo.tracks)


def _category_descriptors(demo: Demonstration) -> list[dict]:
    seen: dict[str, dict] = {}
    for tr in demo.tracks:
        seen.setdefault(tr.category, {"name": tr.category, "n_points": tr.n_points})
    return list(seen.values())


# ----------------------------------------------------------------------------
# File I/O


def _track_to_json(tr: ObjectTrack) -> dict:
    out = {
        "object_id": tr.object_id,
        "category": tr.category,
        "kind": tr.kind.value,
        "canonical_points": tr.canonical_points.tolist(),
        "points": tr.points.tolist(),
    }
    if not np.array_equal(tr.point_ids, np.arange(tr.n_points)):
        out["point_ids"] = tr.point_ids.tolist()
    return out


def _track_from_json(obj: dict, demo_id: str) -> ObjectTrack:
    try:
        return ObjectTrack(
            object_id=obj["object_id"],
            category=obj["category"],
            kind=TrackKind(obj["kind"]),
            points=np.asarray(obj["points"], dtype=float),
            canonical_points=np.asarray(obj["canonical_points"], dtype=float),
            point_ids=obj.get("point_ids"),
        )
    except KeyError as exc:
        raise SchemaError(f"demo {demo_id}: object record missing field {exc}", MODULE) from None
    except ValueError as exc:
        raise SchemaError(f"demo {demo_id}: malformed object record ({exc})", MODULE) from None


def _reject_non_finite(token):
    raise DataError(f"non-finite literal {token!r} in demonstration file", MODULE)


def _atomic_write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w") as fh:
            json.dump(payload, fh, allow_nan=False, separators=(",", ":"))
        os.replace(tmp, path)
    except ValueError as exc:
        tmp.unlink(missing_ok=True)
        raise DataError(f"refusing to write non-finite values to {path.name}: {exc}", MODULE) from None


def save_demonstration_set(dset: DemonstrationSet, path) -> None:
    """Write ``dset`` as a manifest plus one JSON file per demonstration."""
    path = Path(path)
    for demo in dset.demos:
        for tr in demo.tracks:
            if not (np.isfinite(tr.points).all() and np.isfinite(tr.canonical_points).all()):
                raise DataError(f"demo {demo.demo_id}: {tr.object_id} holds non-finite values", MODULE)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for demo in dset.demos:
        name = f"{demo.demo_id}.json"
        files.append(name)
        _atomic_write_json(
            path / name,
            {"demo_id": demo.demo_id, "dt": demo.dt, "objects": [_track_to_json(t) for t in demo.tracks]},
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "task_name": dset.task_name,
        "units": {"length": "m", "time": "s"},
        "categories": list(dset.categories),
        "demos": files,
    }
    _atomic_write_json(path / "manifest.json", manifest)


def load_demonstration_set(path) -> DemonstrationSet:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise SchemaError(f"missing manifest.json in {path}", MODULE)
    manifest = json.loads(mpath.read_text(), parse_constant=_reject_non_finite)
    for key in ("task_name", "demos"):
        if key not in manifest:
            raise SchemaError(f"manifest.json lacks '{key}'", MODULE)
    units = manifest.get("units", {"length": "m", "time": "s"})
    if units.get("length", "m") != "m" or units.get("time", "s") != "s":
        raise SchemaError(f"unsupported units {units}; expected meters/seconds", MODULE)
    demos = []
    for name in manifest["demos"]:
        fpath = path / name
        if not fpath.is_file():
            raise SchemaError(f"manifest lists missing demo file {name}", MODULE)
        raw = json.loads(fpath.read_text(), parse_constant=_reject_non_finite)
        demo_id = raw.get("demo_id", Path(name).stem)
        if "dt" not in raw or "objects" not in raw:
            raise SchemaError(f"demo {demo_id}: needs 'dt' and 'objects'", MODULE)
        tracks = [_track_from_json(o, demo_id) for o in raw["objects"]]
        demos.append(Demonstration(demo_id=demo_id, tracks=tuple(tracks), dt=float(raw["dt"])))
    return DemonstrationSet(
        task_name=manifest["task_name"], demos=tuple(demos), categories=tuple(manifest.get("categories", ()))
    )


# ----------------------------------------------------------------------------
# Preprocessing


def savitzky_golay_smooth(track: ObjectTrack, window: int = 11, polyorder: int = 3) -> ObjectTrack:
    """Savitzky-Golay filter every coordinate series of ``track`` along time.

    The first and last ``window // 2`` samples come from a polynomial fitted
    to the one-sided window at each end.
    """
    if window < 3 or window % 2 == 0:
        raise PreconditionError(f"window must be odd and >= 3, got {window}", MODULE)
    if window >= track.n_frames:
        raise PreconditionError(f"window {window} must be smaller than T={track.n_frames}", MODULE)
    if not 0 <= polyorder < window:
        raise PreconditionError(f"polyorder must be in [0, window), got {polyorder}", MODULE)
    smoothed = savgol_filter(track.points, window, polyorder, axis=1, mode="interp")
    return track.with_points(smoothed)


def rigid_residual_scores(track: ObjectTrack) -> np.ndarray:
    """Mean distance of every point from the best rigid motion of the whole cloud, shape (N,).

    Frames are registered to the first one, averaged into a low-noise
    reference and registered again, so a single frame's noise does not
    bias any point's score. Fast-moving but consistent points (far from
    the rotation axis) score like any other.
    """
    cur = np.swapaxes(track.points, 0, 1)  # (T, N, 3)
    ref = cur[0]
    try:
        for _ in range(2):
            R, t = kabsch(np.broadcast_to(ref, cur.shape), cur)
            pred = np.einsum("tij,nj->tni", R, ref) + t[:, None, :]
            # pull every frame back into the reference pose and average
            ref = np.einsum("tji,tnj->tni", R, cur - t[:, None, :]).mean(axis=0)
    except GeometryError:
        return np.zeros(track.n_points)
    return np.linalg.norm(cur - pred, axis=2).mean(axis=0)


def outlier_indices(track: ObjectTrack, z_thresh: float = 3.5) -> np.ndarray:
    """Local indices of points whose rigid-residual score is a high outlier."""
    score = rigid_residual_scores(track)
    med = np.median(score)
    mad = 1.4826 * np.median(np.abs(score - med))
    # floors keep noise-only or noise-free tracks from losing points to tiny spreads
    spread = max(mad, 0.25 * med, 1e-9)
    return np.flatnonzero(score > med + z_thresh * spread)


def reject_outlier_points(track: ObjectTrack, z_thresh: float = 3.5) -> tuple[ObjectTrack, list[int]]:
    """Drop points that do not follow the rigid motion of the rest of the object.

    Returns the reduced track and the correspondence ids that were removed.
    """
    if track.n_points < 8:
        raise PreconditionError(f"{track.object_id}: outlier rejection needs N >= 8", MODULE)
    bad = outlier_indices(track, z_thresh)
    keep = np.setdiff1d(np.arange(track.n_points), bad)
    if keep.size < 4:
        raise DataError(f"{track.object_id}: fewer than 4 points survive outlier rejection", MODULE)
    removed = track.point_ids[bad].tolist()
    return _subset(track, keep), removed


def _subset(track: ObjectTrack, keep: np.ndarray) -> ObjectTrack:
    return replace(
        track,
        points=track.points[keep],
        canonical_points=track.canonical_points[keep],
        point_ids=track.point_ids[keep],
    )


def reject_outliers_in_set(dset: DemonstrationSet, z_thresh: float = 3.5) -> tuple[DemonstrationSet, dict]:
    """Outlier rejection over a whole set; survivors are intersected per category.

    Hands are left untouched (21 fixed keypoints). Returns the cleaned set and
    ``{category: sorted removed ids}``.
    """
    removed: dict[str, set] = {}
    for demo in dset.demos:
        for tr in demo.tracks:
            if tr.kind.is_hand or tr.n_points < 8:
                continue
            _, ids = reject_outlier_points(tr, z_thresh)
            removed.setdefault(tr.category, set()).update(ids)
    demos = []
    for demo in dset.demos:
        tracks = []
        for tr in demo.tracks:
            drop = removed.get(tr.category)
            if drop:
                keep = np.flatnonzero(~np.isin(tr.point_ids, sorted(drop)))
                if keep.size < 4:
                    raise DataError(f"{tr.object_id}: fewer than 4 points survive in category {tr.category}", MODULE)
                tr = _subset(tr, keep)
            tracks.append(tr)
        demos.append(replace(demo, tracks=tuple(tracks)))
    return dset.with_demos(demos), {k: sorted(v) for k, v in removed.items() if v}


def resample_time(demo: Demonstration, T_out: int) -> Demonstration:
    """Linearly resample every track onto ``T_out`` uniform samples.

    The demonstration's duration is preserved, so ``dt`` changes accordingly.
    """
    if T_out < 2:
        raise PreconditionError(f"T_out must be >= 2, got {T_out}", MODULE)
    T = demo.n_frames
    if T < 2:
        raise PreconditionError(f"demo {demo.demo_id}: needs T >= 2", MODULE)
    if T_out == T:
        return demo
    src = np.linspace(0.0, 1.0, T)
    dst = np.linspace(0.0, 1.0, T_out)
    idx = np.clip(np.searchsorted(src, dst, side="right") - 1, 0, T - 2)
    w = ((dst - src[idx]) / (src[idx + 1] - src[idx]))[None, :, None]
    tracks = []
    for tr in demo.tracks:
        p = tr.points
        out = (1.0 - w) * p[:, idx] + w * p[:, idx + 1]
        out[:, 0] = p[:, 0]
        out[:, -1] = p[:, -1]
        tracks.append(tr.with_points(out))
    dt = demo.dt * (T - 1) / (T_out - 1)
    return Demonstration(demo.demo_id, tuple(tracks), dt)


def preprocess(dset: DemonstrationSet, window: int = 11, polyorder: int = 3, z_thresh: float = 3.5,
               T_out: int | None = None) -> tuple[DemonstrationSet, dict]:
    """Outlier rejection, optional phase alignment and SG smoothing of a set."""
    cleaned, removed = reject_outliers_in_set(dset, z_thresh)
    demos = []
    for demo in cleaned.demos:
        if T_out is not None:
            demo = resample_time(demo, T_out)
        tracks = tuple(savitzky_golay_smooth(t, window, polyorder) for t in demo.tracks)
        demos.append(replace(demo, tracks=tracks))
    return cleaned.with_demos(demos), removed
