"""Local frames on master objects and geometric constraint estimation.

Slave keypoint positions at the end of each demonstration are expressed
in candidate frames attached to the master object. A keypoint whose
cross-demo positions collapse onto a point, line, curve, plane or surface
receives the corresponding constraint. Curves and surfaces are polynomial
manifolds whose degree is chosen by leave-one-out cross-validation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, GeometryError, PreconditionError
from .geometry import kabsch

log = logging.getLogger(__name__)
MODULE = "geomcon"


class Kind(str, Enum):
    P2P = "p2p"
    P2L = "p2l"
    P2PLANE = "p2P"
    P2C = "p2c"
    P2S = "p2S"
    POSE = "pose"

    @property
    def priority(self) -> int:
        return _PRIORITY[self]


_PRIORITY = {Kind.P2P: 1, Kind.P2L: 2, Kind.P2PLANE: 3, Kind.P2C: 4, Kind.P2S: 5, Kind.POSE: 6}


@dataclass(frozen=True)
class ConstraintTolerances:
    eps_abs: float = 0.01
    rho: float = 0.15
    eps_lin: float = 0.01
    eps_fit: float = 0.01
    max_degree: int = 4

    def validate(self) -> "ConstraintTolerances":
        if not (self.eps_abs > 0 and self.eps_lin > 0 and self.eps_fit > 0):
            raise ConfigError("tolerances eps_abs, eps_lin, eps_fit must be > 0", MODULE)
        if not 0 < self.rho < 1:
            raise ConfigError("rho must be in (0, 1)", MODULE)
        if self.max_degree < 1:
            raise ConfigError("max_degree must be >= 1", MODULE)
        return self


@dataclass(frozen=True)
class ExtractionConfig:
    tol: ConstraintTolerances = field(default_factory=ConstraintTolerances)
    n_frames: int = 12
    k_neighbors: int = 8
    d_min: float = 0.03
    budget: int = 3
    final_window: int = 5  # trailing frames averaged into each final position

    def validate(self) -> "ExtractionConfig":
        self.tol.validate()
        if self.n_frames < 1 or self.k_neighbors < 3:
            raise ConfigError("n_frames must be >= 1 and k_neighbors >= 3", MODULE)
        if not self.d_min >= 0:
            raise ConfigError("d_min must be >= 0", MODULE)
        if self.budget < 1 or self.final_window < 1:
            raise ConfigError("budget and final_window must be >= 1", MODULE)
        return self


# ----------------------------------------------------------------------------
# Local frames


@dataclass(frozen=True, eq=False)
class LocalFrame:
    """Frame defined in a category's canonical space.

    ``anchor_index`` and ``neighbor_indices`` are correspondence ids, so the
    frame can be rebuilt on any instance of the category.
    """

    master_id: str
    anchor_index: int
    basis: np.ndarray  # columns x, y, z
    origin: np.ndarray
    neighbor_indices: tuple
    scale: float = 1.0  # RMS radius of anchor + neighbours in canonical space

    @property
    def support_ids(self) -> np.ndarray:
        return np.array((self.anchor_index,) + tuple(self.neighbor_indices), dtype=np.int64)

    def reconstruct(self, support_points: np.ndarray, canonical_support: np.ndarray):
        """Rebuild the frame on instance points.

        ``support_points`` has shape (..., k+1, 3) in the order of
        ``support_ids``. Returns ``(basis, origin, scale)`` stacked over the
        leading dimensions; ``scale`` is the instance RMS radius of the support.
        """
        R, _ = kabsch(np.broadcast_to(canonical_support, support_points.shape), support_points)
        c_src = canonical_support.mean(axis=0)
        c_dst = support_points.mean(axis=-2)
        scale = np.sqrt(((support_points - c_dst[..., None, :]) ** 2).sum(-1).mean(-1))
        ratio = scale / self.scale
        basis = R @ self.basis
        origin = c_dst + ratio[..., None] * np.einsum("...ij,j->...i", R, self.origin - c_src)
        return basis, origin, scale

    def to_json(self) -> dict:
        return {
            "master_id": self.master_id,
            "anchor_index": int(self.anchor_index),
            "basis": self.basis.tolist(),
            "origin": self.origin.tolist(),
            "neighbor_indices": [int(i) for i in self.neighbor_indices],
            "scale": float(self.scale),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LocalFrame":
        return cls(
            master_id=d["master_id"],
            anchor_index=int(d["anchor_index"]),
            basis=np.asarray(d["basis"], dtype=float),
            origin=np.asarray(d["origin"], dtype=float),
            neighbor_indices=tuple(int(i) for i in d["neighbor_indices"]),
            scale=float(d.get("scale", 1.0)),
        )


def farthest_point_sampling(points: np.ndarray, n: int) -> list[int]:
    """Greedy FPS; the first pick is the point farthest from the centroid."""
    centroid = points.mean(axis=0)
    first = int(np.argmax(np.linalg.norm(points - centroid, axis=1)))
    picks = [first]
    dist = np.linalg.norm(points - points[first], axis=1)
    while len(picks) < min(n, len(points)):
        nxt = int(np.argmax(dist))
        if dist[nxt] == 0.0:
            break
        picks.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return picks


def _orient(axis: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d = axis @ ref
    if abs(d) > 1e-12 * max(np.linalg.norm(ref), 1e-300):
        return axis if d > 0 else -axis
    j = int(np.argmax(np.abs(axis)))
    return axis if axis[j] > 0 else -axis


def candidate_local_frames(canonical_points: np.ndarray, n_frames: int = 12, k: int = 8,
                           master_id: str = "", point_ids=None) -> list[LocalFrame]:
    """Candidate frames at FPS anchors of a canonical point cloud.

    Each frame's x/z axes are the first/third principal directions of the
    anchor's neighbourhood, signed to point away from the cloud centroid.
    Collinear neighbourhoods are skipped.
    """
    pts = np.asarray(canonical_points, dtype=float)
    if len(pts) < 4:
        raise GeometryError(f"{master_id}: need >= 4 canonical points for local frames", MODULE)
    ids = np.arange(len(pts)) if point_ids is None else np.asarray(point_ids)
    k = min(k, len(pts) - 1)
    centroid = pts.mean(axis=0)
    frames = []
    for a in farthest_point_sampling(pts, n_frames):
        d = np.linalg.norm(pts - pts[a], axis=1)
        d[a] = np.inf
        nbrs = np.argsort(d, kind="stable")[:k]
        support = pts[np.concatenate(([a], nbrs))]
        centered = support - support.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered / len(support))
        evals, evecs = evals[::-1], evecs[:, ::-1]
        if evals[1] <= 1e-10 * max(evals[0], 1e-300) or evals[0] <= 0:
            log.debug("skipping collinear neighbourhood at anchor %d", a)
            continue
        ref = pts[a] - centroid
        x = _orient(evecs[:, 0], ref)
        z = _orient(evecs[:, 2], ref)
        y = np.cross(z, x)
        scale = float(np.sqrt((centered**2).sum(axis=1).mean()))
        frames.append(
            LocalFrame(
                master_id=master_id,
                anchor_index=int(ids[a]),
                basis=np.column_stack([x, y, z]),
                origin=pts[a].copy(),
                neighbor_indices=tuple(int(ids[i]) for i in nbrs),
                scale=scale,
            )
        )
    if not frames:
        raise GeometryError(f"{master_id}: every candidate neighbourhood is degenerate", MODULE)
    return frames


def frame_trajectory(frame: LocalFrame, master_track, times=None):
    """Frame pose on ``master_track`` at each time index: (basis, origin, scale)."""
    loc = master_track.index_of(frame.support_ids)
    pts = master_track.points[loc]  # (k+1, T, 3)
    if times is not None:
        pts = pts[:, times]
    support = np.moveaxis(pts, 1, 0)  # (T, k+1, 3)
    try:
        return frame.reconstruct(support, master_track.canonical_points[loc])
    except GeometryError as exc:
        raise GeometryError(f"frame {frame.anchor_index} on {master_track.object_id}: {exc}", MODULE) from None


def to_frame_coords(basis, origin, points):
    """``basis^T (p - origin)`` with basis/origin stacked over time.

    ``points``: (N, T, 3); basis (T, 3, 3); origin (T, 3).
    """
    return np.einsum("tji,ntj->nti", basis, points - origin[None])


@dataclass(frozen=True, eq=False)
class AlignedSamples:
    trajectories: np.ndarray  # (n_demos, N, T, 3) frame coordinates
    final_positions: np.ndarray  # (n_demos, N, 3)
    frame_scales: np.ndarray  # (n_demos,) instance scale at the final frame

    @property
    def n_demos(self) -> int:
        return self.final_positions.shape[0]


def align_to_frame(slave_tracks, master_tracks, frame: LocalFrame, final_only: bool = False,
                   final_window: int = 1) -> AlignedSamples:
    """Express every slave point in the frame rebuilt on each demo's master.

    Final positions average the frame coordinates over the last
    ``final_window`` frames, which damps per-frame noise in the rebuilt frame.
    """
    if final_window < 1:
        raise PreconditionError("final_window must be >= 1", MODULE)
    if len(slave_tracks) != len(master_tracks) or len(slave_tracks) < 2:
        raise PreconditionError("align_to_frame needs matching slave/master tracks from >= 2 demos", MODULE)
    trajs, finals, scales = [], [], []
    for s_tr, m_tr in zip(slave_tracks, master_tracks):
        w = min(final_window, m_tr.n_frames)
        if final_only:
            B, o, sc = frame_trajectory(frame, m_tr, times=np.arange(m_tr.n_frames - w, m_tr.n_frames))
            q = to_frame_coords(B, o, s_tr.points[:, -w:])
        else:
            B, o, sc = frame_trajectory(frame, m_tr)
            q = to_frame_coords(B, o, s_tr.points)
            trajs.append(q)
        finals.append(q[:, -w:].mean(axis=1))
        scales.append(sc[-1])
    traj = np.stack(trajs) if trajs else np.empty((0,))
    return AlignedSamples(traj, np.stack(finals), np.asarray(scales))


# ----------------------------------------------------------------------------
# Manifold fits


# observations a curve or surface above degree 1 needs beyond its parameter count
MIN_SPARE_DOF = 3


def _pca(points: np.ndarray):
    mean = points.mean(axis=0)
    centered = points - mean
    evals, evecs = np.linalg.eigh(centered.T @ centered / len(points))
    evals = np.clip(evals[::-1], 0.0, None)
    return mean, evals, evecs[:, ::-1]


def _loocv_lstsq(V: np.ndarray, Y: np.ndarray):
    """Least squares with closed-form leave-one-out residuals.

    Returns (coef, in-sample residuals, LOO residuals) or None if ``V`` is
    rank deficient.
    """
    if np.linalg.matrix_rank(V) < V.shape[1]:
        return None
    coef, *_ = np.linalg.lstsq(V, Y, rcond=None)
    resid = Y - V @ coef
    Q, _ = np.linalg.qr(V)
    h = np.minimum((Q**2).sum(axis=1), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = resid / (1.0 - h)[:, None]
    loo[~np.isfinite(loo)] = np.inf
    return coef, resid, loo


def _pick_degree(results: dict, scale: float):
    """Lowest degree whose LOOCV error is within float noise of the minimum."""
    best = min(r["loo_mse"] for r in results.values())
    slack = 1e-9 * max(best, 1e-30) + 1e-24 * scale**2
    for deg in sorted(results):
        if results[deg]["loo_mse"] <= best + slack:
            return deg
    return min(results)


@dataclass(frozen=True, eq=False)
class CurveModel:
    """Polynomial curve ``c(s) = sum_j coef[j] s^j`` for ``s`` in [-1, 1].

    ``s`` is the normalised coordinate along the principal axis.
    """

    mean: np.ndarray
    axis: np.ndarray
    u_center: float
    u_half: float
    coef: np.ndarray  # (degree+1, 3)
    residual: float
    loo_residual: float

    @property
    def degree(self) -> int:
        return self.coef.shape[0] - 1

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        powers = s[..., None] ** np.arange(self.degree + 1)
        return powers @ self.coef

    def derivative(self, s, order: int = 1):
        s = np.asarray(s, dtype=float)
        c = self.coef
        for _ in range(order):
            c = c[1:] * np.arange(1, len(c))[:, None] if len(c) > 1 else np.zeros((1, 3))
        return (s[..., None] ** np.arange(len(c))) @ c

    def to_params(self) -> dict:
        return {"mean": self.mean, "axis": self.axis, "u_center": self.u_center, "u_half": self.u_half,
                "coef": self.coef, "residual": self.residual, "loo_residual": self.loo_residual}

    @classmethod
    def from_params(cls, p: dict) -> "CurveModel":
        return cls(np.asarray(p["mean"]), np.asarray(p["axis"]), float(p["u_center"]), float(p["u_half"]),
                   np.asarray(p["coef"]), float(p["residual"]), float(p["loo_residual"]))


def fit_manifold_curve(points: np.ndarray, max_degree: int = 4) -> CurveModel:
    """Fit a 1-D polynomial manifold through ``points`` with LOOCV degree selection.

    Degree 1 is always tried; higher degrees need at least ``MIN_SPARE_DOF``
    observations beyond their parameter count so that leave-one-out errors
    stay informative. A rank-deficient design stops the degree search.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 3:
        raise PreconditionError(f"curve fit needs >= 3 points, got {n}", MODULE)
    mean, evals, evecs = _pca(pts)
    axis = evecs[:, 0]
    u = (pts - mean) @ axis
    lo, hi = float(u.min()), float(u.max())
    if hi - lo <= 1e-12 * max(1.0, np.abs(pts).max()):
        raise GeometryError("curve fit is degenerate: points coincide", MODULE)
    center, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    s = (u - center) / half
    results = {}
    for deg in range(1, max(1, min(max_degree, n - 1 - MIN_SPARE_DOF)) + 1):
        fit = _loocv_lstsq(s[:, None] ** np.arange(deg + 1), pts)
        if fit is None:
            if deg == 1:
                raise GeometryError("curve fit is degenerate at degree 1", MODULE)
            break
        coef, resid, loo = fit
        results[deg] = {"coef": coef, "mse": float((resid**2).sum(1).mean()),
                        "loo_mse": float((loo**2).sum(1).mean())}
    deg = _pick_degree(results, half)
    r = results[deg]
    return CurveModel(mean, axis, center, half, r["coef"], float(np.sqrt(r["mse"])), float(np.sqrt(r["loo_mse"])))


def _poly2_exponents(deg: int) -> np.ndarray:
    out = []
    for total in range(deg + 1):
        for i in range(total, -1, -1):
            out.append((i, total - i))
    return np.array(out, dtype=int)


def _poly2_design(uv: np.ndarray, exps: np.ndarray) -> np.ndarray:
    return uv[..., 0:1] ** exps[:, 0] * uv[..., 1:2] ** exps[:, 1]


@dataclass(frozen=True, eq=False)
class SurfaceModel:
    """Height field ``origin + u e1 + v e2 + h(u, v) normal`` over a best-fit plane.

    ``h`` is a bivariate polynomial in normalised coordinates ``(u, v) / half``.
    """

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    normal: np.ndarray
    uv_center: np.ndarray
    uv_half: float
    degree: int
    coef: np.ndarray
    residual: float
    loo_residual: float

    def _norm(self, uv):
        return (np.asarray(uv, dtype=float) - self.uv_center) / self.uv_half

    def height(self, uv):
        return _poly2_design(self._norm(uv), _poly2_exponents(self.degree)) @ self.coef

    def height_grad(self, uv):
        exps = _poly2_exponents(self.degree)
        st = self._norm(uv)
        du = np.where(exps[:, 0] > 0, exps[:, 0] * st[..., 0:1] ** np.maximum(exps[:, 0] - 1, 0)
                      * st[..., 1:2] ** exps[:, 1], 0.0)
        dv = np.where(exps[:, 1] > 0, exps[:, 1] * st[..., 0:1] ** exps[:, 0]
                      * st[..., 1:2] ** np.maximum(exps[:, 1] - 1, 0), 0.0)
        return np.stack([du @ self.coef, dv @ self.coef], axis=-1) / self.uv_half

    def __call__(self, uv):
        uv = np.asarray(uv, dtype=float)
        h = self.height(uv)
        return (self.origin + uv[..., 0:1] * self.e1 + uv[..., 1:2] * self.e2 + h[..., None] * self.normal)

    def to_params(self) -> dict:
        return {"origin": self.origin, "e1": self.e1, "e2": self.e2, "normal": self.normal,
                "uv_center": self.uv_center, "uv_half": self.uv_half, "degree": self.degree, "coef": self.coef,
                "residual": self.residual, "loo_residual": self.loo_residual}

    @classmethod
    def from_params(cls, p: dict) -> "SurfaceModel":
        return cls(np.asarray(p["origin"]), np.asarray(p["e1"]), np.asarray(p["e2"]), np.asarray(p["normal"]),
                   np.asarray(p["uv_center"]), float(p["uv_half"]), int(p["degree"]), np.asarray(p["coef"]),
                   float(p["residual"]), float(p["loo_residual"]))


def fit_manifold_surface(points: np.ndarray, max_degree: int = 4) -> SurfaceModel:
    """Fit a polynomial height field over the best-fit plane, degree by LOOCV.

    Degrees above 1 obey the same spare-observation rule as curves.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 6:
        raise PreconditionError(f"surface fit needs >= 6 points, got {n}", MODULE)
    mean, evals, evecs = _pca(pts)
    if evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise GeometryError("surface fit is degenerate: points are collinear", MODULE)
    e1, e2, nrm = evecs[:, 0], evecs[:, 1], evecs[:, 2]
    if np.dot(np.cross(e1, e2), nrm) < 0:
        nrm = -nrm
    rel = pts - mean
    uv = np.column_stack([rel @ e1, rel @ e2])
    h = rel @ nrm
    center = 0.5 * (uv.max(axis=0) + uv.min(axis=0))
    half = float(0.5 * (uv.max(axis=0) - uv.min(axis=0)).max())
    st = (uv - center) / half
    results = {}
    for deg in range(1, max_degree + 1):
        exps = _poly2_exponents(deg)
        if deg > 1 and len(exps) + MIN_SPARE_DOF > n:
            break
        fit = _loocv_lstsq(_poly2_design(st, exps), h[:, None])
        if fit is None:
            if deg == 1:
                raise GeometryError("surface fit is degenerate at degree 1", MODULE)
            break
        coef, resid, loo = fit
        results[deg] = {"coef": coef[:, 0], "mse": float((resid**2).mean()), "loo_mse": float((loo**2).mean())}
    deg = _pick_degree(results, half)
    r = results[deg]
    return SurfaceModel(mean, e1, e2, nrm, center, half, deg, r["coef"], float(np.sqrt(r["mse"])),
                        float(np.sqrt(r["loo_mse"])))


# ----------------------------------------------------------------------------
# Nearest points on manifolds


def nearest_on_curve(model: CurveModel, q: np.ndarray, n_samples: int = 256, n_newton: int = 10,
                     tol: float = 1e-6) -> tuple[np.ndarray, float]:
    """Closest point of the curve segment s in [-1, 1] to ``q``.

    Dense sampling followed by Newton steps on the squared distance.
    Returns the point and its parameter.
    """
    q = np.asarray(q, dtype=float)
    grid = np.linspace(-1.0, 1.0, n_samples)
    d2 = ((model(grid) - q) ** 2).sum(axis=1)
    s = float(grid[np.argmin(d2)])
    best = float(d2.min())
    s0 = s
    for _ in range(n_newton):
        c = model(s)
        c1 = model.derivative(s)
        c2 = model.derivative(s, 2)
        g = float(np.dot(c - q, c1))
        H = float(np.dot(c1, c1) + np.dot(c - q, c2))
        if H <= 0:
            break
        step = g / H
        s_new = float(np.clip(s - step, -1.0, 1.0))
        if abs(s_new - s) * model.u_half < tol:
            s = s_new
            break
        s = s_new
    if ((model(s) - q) ** 2).sum() > best:
        log.warning("curve nearest-point refinement did not improve; using dense-sample minimum")
        s = s0
    return model(s), s


def nearest_on_surface(model: SurfaceModel, q: np.ndarray, n_grid: int = 16, n_newton: int = 10,
                       tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Closest point of the height-field patch to ``q`` (Gauss-Newton refinement)."""
    q = np.asarray(q, dtype=float)
    lin = np.linspace(-1.0, 1.0, n_grid)
    gu, gv = np.meshgrid(lin, lin, indexing="ij")
    uv_grid = model.uv_center + model.uv_half * np.stack([gu.ravel(), gv.ravel()], axis=1)
    d2 = ((model(uv_grid) - q) ** 2).sum(axis=1)
    uv = uv_grid[np.argmin(d2)]
    best = float(d2.min())
    uv0 = uv.copy()
    lo = model.uv_center - model.uv_half
    hi = model.uv_center + model.uv_half
    for _ in range(n_newton):
        p = model(uv)
        grad_h = model.height_grad(uv)
        J = np.column_stack([model.e1 + grad_h[0] * model.normal, model.e2 + grad_h[1] * model.normal])
        r = p - q
        try:
            step = np.linalg.solve(J.T @ J, J.T @ r)
        except np.linalg.LinAlgError:
            break
        uv_new = np.clip(uv - step, lo, hi)
        if np.linalg.norm(uv_new - uv) < tol:
            uv = uv_new
            break
        uv = uv_new
    if ((model(uv) - q) ** 2).sum() > best:
        log.warning("surface nearest-point refinement did not improve; using dense-sample minimum")
        uv = uv0
    return model(uv), uv


# ----------------------------------------------------------------------------
# Constraints


@dataclass(frozen=True, eq=False)
class GeometricConstraint:
    kind: Kind
    params: dict
    residual_scale: float
    slave_id: str = ""
    keypoint_index: int = -1
    frame: LocalFrame | None = None
    ref_scale: float = 1.0  # mean frame scale over the training demos

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def priority(self) -> int:
        return self.kind.priority

    def attractor(self, q: np.ndarray) -> np.ndarray:
        """Closest point of the constraint manifold to ``q`` (frame coordinates)."""
        q = np.asarray(q, dtype=float)
        p = self.params
        if self.kind is Kind.P2P:
            return np.asarray(p["point"], dtype=float)
        if self.kind is Kind.P2L:
            d = np.asarray(p["direction"])
            return p["point"] + np.dot(q - p["point"], d) * d
        if self.kind is Kind.P2PLANE:
            nrm = np.asarray(p["normal"])
            return q - np.dot(q - p["point"], nrm) * nrm
        if self.kind is Kind.P2C:
            return nearest_on_curve(CurveModel.from_params(p), q)[0]
        if self.kind is Kind.P2S:
            return nearest_on_surface(SurfaceModel.from_params(p), q)[0]
        raise ValueError("pose constraints have no point attractor")

    def residual(self, q: np.ndarray) -> float:
        return float(np.linalg.norm(self.attractor(q) - np.asarray(q, dtype=float)))

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "priority": self.priority,
            "slave_id": self.slave_id,
            "keypoint_index": int(self.keypoint_index),
            "residual_scale": float(self.residual_scale),
            "ref_scale": float(self.ref_scale),
            "frame": None if self.frame is None else self.frame.to_json(),
            "params": _jsonify(self.params),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GeometricConstraint":
        return cls(
            kind=Kind(d["kind"]),
            params=_dejsonify(d["params"]),
            residual_scale=float(d["residual_scale"]),
            slave_id=d.get("slave_id", ""),
            keypoint_index=int(d.get("keypoint_index", -1)),
            frame=None if d.get("frame") is None else LocalFrame.from_json(d["frame"]),
            ref_scale=float(d.get("ref_scale", 1.0)),
        )


def _jsonify(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = v.item()
        elif isinstance(v, dict):
            out[k] = _jsonify(v)
        else:
            out[k] = v
    return out


def _dejsonify(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, list):
            out[k] = np.asarray(v, dtype=float)
        else:  # nested records (a serialised frame) stay as plain JSON
            out[k] = v
    return out


def classify_constraint(final_positions: np.ndarray, tol: ConstraintTolerances = ConstraintTolerances()
                        ) -> GeometricConstraint | None:
    """Classify cross-demo keypoint positions into the tightest constraint kind.

    Tested in order p2p, p2l, p2c, p2P, p2S; the first satisfied test wins.
    Curves and surfaces are accepted on their leave-one-out residual.
    """
    pts = np.asarray(final_positions, dtype=float)
    n = len(pts)
    if n < 3:
        raise PreconditionError(f"classification needs >= 3 samples, got {n}", MODULE)
    mean, evals, evecs = _pca(pts)
    sd = np.sqrt(evals)
    if sd[0] < tol.eps_abs:
        return GeometricConstraint(Kind.P2P, {"point": mean}, float(np.sqrt(evals.sum())))
    line_res = float(np.sqrt(evals[1] + evals[2]))
    if sd[1] < tol.rho * sd[0] and line_res < tol.eps_lin:
        return GeometricConstraint(Kind.P2L, {"point": mean, "direction": evecs[:, 0]}, line_res)
    if line_res >= tol.eps_lin and n >= 4:
        curve = fit_manifold_curve(pts, tol.max_degree)
        if curve.degree >= 2 and max(curve.residual, curve.loo_residual) < tol.eps_fit:
            return GeometricConstraint(Kind.P2C, curve.to_params(), curve.loo_residual)
    plane_res = float(sd[2])
    if sd[2] < tol.rho * sd[1] and plane_res < tol.eps_lin:
        return GeometricConstraint(Kind.P2PLANE, {"point": mean, "normal": evecs[:, 2]}, plane_res)
    if n >= 7:
        surf = fit_manifold_surface(pts, tol.max_degree)
        if surf.degree >= 2 and max(surf.residual, surf.loo_residual) < tol.eps_fit:
            return GeometricConstraint(Kind.P2S, surf.to_params(), surf.loo_residual)
    return None


def _batched_loo_ok(V: np.ndarray, Y: np.ndarray, limit: float) -> np.ndarray:
    """Per-batch test ``max(rms residual, rms LOO residual) < limit`` for stacked designs.

    ``V``: (M, n, p), ``Y``: (M, n, k). Householder Q stays orthonormal even
    for rank-deficient designs, which only makes the test more permissive.
    """
    Q, _ = np.linalg.qr(V)
    resid = Y - Q @ (np.swapaxes(Q, -1, -2) @ Y)
    h = np.minimum((Q**2).sum(axis=-1), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = resid / (1.0 - h)[..., None]
    mse = (resid**2).sum(-1).mean(-1)
    loo_mse = (loo**2).sum(-1).mean(-1)
    ok = np.sqrt(np.maximum(mse, loo_mse)) < limit
    return ok & np.isfinite(loo_mse)


def screen_candidates(final_positions: np.ndarray, tol: ConstraintTolerances = ConstraintTolerances(),
                      slack: float = 1.01) -> np.ndarray:
    """Vectorised pre-check over many keypoints, shape (M, n, 3) -> bool (M,).

    False means :func:`classify_constraint` is certain to return None; the
    check is deliberately loose (``slack``) so it never drops a keypoint that
    the exact classifier would accept.
    """
    P = np.asarray(final_positions, dtype=float)
    M, n, _ = P.shape
    mean = P.mean(axis=1, keepdims=True)
    C = P - mean
    evals, evecs = np.linalg.eigh(np.swapaxes(C, 1, 2) @ C / n)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    evecs = evecs[:, :, ::-1]
    sd = np.sqrt(evals)
    line_res = np.sqrt(evals[:, 1] + evals[:, 2])
    ok = sd[:, 0] < tol.eps_abs * slack
    ok |= (sd[:, 1] < tol.rho * sd[:, 0] * slack) & (line_res < tol.eps_lin * slack)
    ok |= (sd[:, 2] < tol.rho * sd[:, 1] * slack) & (sd[:, 2] < tol.eps_lin * slack)
    pending = ~ok
    if n >= 4 and pending.any():
        idx = np.flatnonzero(pending)
        u = np.einsum("mnk,mk->mn", C[idx], evecs[idx, :, 0])
        lo, hi = u.min(axis=1, keepdims=True), u.max(axis=1, keepdims=True)
        s = (u - 0.5 * (hi + lo)) / np.maximum(0.5 * (hi - lo), 1e-300)
        for deg in range(2, min(tol.max_degree, n - 1 - MIN_SPARE_DOF) + 1):
            hit = _batched_loo_ok(s[..., None] ** np.arange(deg + 1), P[idx], tol.eps_fit * slack)
            ok[idx[hit]] = True
    pending = ~ok
    if n >= 7 and pending.any():
        idx = np.flatnonzero(pending)
        uv = np.einsum("mnk,mkj->mnj", C[idx], evecs[idx][:, :, :2])
        hgt = np.einsum("mnk,mk->mn", C[idx], evecs[idx, :, 2])[..., None]
        center = 0.5 * (uv.max(axis=1, keepdims=True) + uv.min(axis=1, keepdims=True))
        half = 0.5 * (uv.max(axis=1, keepdims=True) - uv.min(axis=1, keepdims=True)).max(axis=2, keepdims=True)
        st = (uv - center) / np.maximum(half, 1e-300)
        for deg in range(2, tol.max_degree + 1):
            exps = _poly2_exponents(deg)
            if len(exps) + MIN_SPARE_DOF > n:
                break
            hit = _batched_loo_ok(_poly2_design(st, exps), hgt, tol.eps_fit * slack)
            ok[idx[hit]] = True
    return ok


def _classify_two(pts: np.ndarray, tol: ConstraintTolerances) -> GeometricConstraint:
    # two samples always lie on a line; only coincidence is informative
    mean, evals, evecs = _pca(pts)
    if np.sqrt(evals[0]) < tol.eps_abs:
        return GeometricConstraint(Kind.P2P, {"point": mean}, float(np.sqrt(evals.sum())))
    return GeometricConstraint(Kind.P2L, {"point": mean, "direction": evecs[:, 0]}, 0.0)


def extract_pair_constraints(master_tracks, slave_tracks, cfg: ExtractionConfig = ExtractionConfig(),
                             frames: list[LocalFrame] | None = None) -> list[GeometricConstraint]:
    """Constraints of a slave with respect to a master across demonstrations.

    Every slave point is classified in every candidate frame; each keypoint
    keeps its best result (priority, then residual, then anchor id) and up
    to ``cfg.budget`` keypoints are chosen greedily with canonical spacing of
    at least ``cfg.d_min``. An empty list means no constraint.
    """
    n_demos = len(master_tracks)
    if n_demos < 2 or len(slave_tracks) != n_demos:
        raise PreconditionError("constraint extraction needs >= 2 paired demonstrations", MODULE)
    m0, s0 = master_tracks[0], slave_tracks[0]
    if frames is None:
        frames = candidate_local_frames(m0.canonical_points, cfg.n_frames, cfg.k_neighbors, m0.object_id,
                                        m0.point_ids)
    best: dict[int, tuple] = {}
    for frame in frames:
        try:
            aligned = align_to_frame(slave_tracks, master_tracks, frame, final_only=True,
                                     final_window=cfg.final_window)
        except GeometryError as exc:
            log.debug("frame %d skipped: %s", frame.anchor_index, exc)
            continue
        ref_scale = float(aligned.frame_scales.mean())
        finals = np.swapaxes(aligned.final_positions, 0, 1)  # (N, n_demos, 3)
        maybe = np.ones(len(finals), bool) if n_demos == 2 else screen_candidates(finals, cfg.tol)
        for j in np.flatnonzero(maybe):
            pts = finals[j]
            con = _classify_two(pts, cfg.tol) if n_demos == 2 else classify_constraint(pts, cfg.tol)
            if con is None:
                continue
            key = (con.priority, con.residual_scale, frame.anchor_index)
            if j not in best or key < best[j][0]:
                best[j] = (key, con, frame, ref_scale)
    ranked = sorted(best.items(), key=lambda kv: (kv[1][0][0], kv[1][0][1], int(s0.point_ids[kv[0]])))
    chosen: list[int] = []
    out = []
    for j, (_, con, frame, ref_scale) in ranked:
        if len(chosen) >= cfg.budget:
            break
        pos = s0.canonical_points[j]
        if any(np.linalg.norm(pos - s0.canonical_points[c]) < cfg.d_min for c in chosen):
            continue
        chosen.append(j)
        out.append(replace(con, slave_id=s0.object_id, keypoint_index=int(s0.point_ids[j]), frame=frame,
                           ref_scale=ref_scale))
    return out
