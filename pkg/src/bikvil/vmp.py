"""Via-point movement primitives.

A trajectory over the canonical phase ``x`` in [0, 1] is the sum of an
elementary minimum-jerk (quintic) transition from start to goal and a
shape term built from normalised squared-exponential basis functions.
The shape basis is pinned to zero at both ends, so start and goal are
reproduced exactly no matter how the weights change; via-points are then
enforced with the smallest possible weight correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PreconditionError

MODULE = "vmp"


def _min_jerk(x):
    x = np.asarray(x, dtype=float)
    return x**3 * (10.0 - 15.0 * x + 6.0 * x**2)


def _min_jerk_d(x):
    x = np.asarray(x, dtype=float)
    return 30.0 * x**2 * (1.0 - x) ** 2


@dataclass(frozen=True, eq=False)
class Vmp:
    start: np.ndarray
    goal: np.ndarray
    weights: np.ndarray  # (n_basis, dim)
    via_points: tuple = ()  # ((x, value), ...)
    rms: float = 0.0
    variance: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, dtype=float))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(
            self, "via_points", tuple((float(x), np.asarray(v, dtype=float)) for x, v in self.via_points)
        )

    @property
    def dim(self) -> int:
        return self.start.shape[0]

    @property
    def n_basis(self) -> int:
        return self.weights.shape[0]

    # -- basis ----------------------------------------------------------------

    def _raw(self, x):
        c = np.linspace(0.0, 1.0, self.n_basis)
        h = 1.0 / self.n_basis
        d = x[:, None] - c[None, :]
        psi = np.exp(-0.5 * (d / h) ** 2)
        dpsi = -psi * d / h**2
        s = psi.sum(axis=1, keepdims=True)
        ds = dpsi.sum(axis=1, keepdims=True)
        phi = psi / s
        dphi = (dpsi * s - psi * ds) / s**2
        return phi, dphi

    def basis(self, x):
        """Boundary-pinned basis and its phase derivative at phases ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        phi, dphi = self._raw(x)
        (phi0,), _ = self._raw(np.array([0.0]))
        (phi1,), _ = self._raw(np.array([1.0]))
        s = _min_jerk(x)[:, None]
        ds = _min_jerk_d(x)[:, None]
        out = phi - (1.0 - s) * phi0 - s * phi1
        dout = dphi + ds * phi0 - ds * phi1
        return out, dout

    def elementary(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.start + (self.goal - self.start) * _min_jerk(x)[:, None]

    def quintic_coefficients(self) -> np.ndarray:
        """Coefficients a_0..a_5 (rows) of the elementary trajectory per dimension."""
        poly = np.array([0.0, 0.0, 0.0, 10.0, -15.0, 6.0])
        out = np.outer(poly, self.goal - self.start)
        out[0] += self.start
        return out

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, x):
        """Value and phase derivative at ``x`` (scalar or array).

        Phases outside [0, 1] are clamped; the third return value flags it.
        """
        arr = np.asarray(x, dtype=float)
        scalar = arr.ndim == 0
        xs = np.atleast_1d(arr)
        clamped = bool(np.any((xs < 0.0) | (xs > 1.0)))
        xs = np.clip(xs, 0.0, 1.0)
        B, dB = self.basis(xs)
        val = self.elementary(xs) + B @ self.weights
        der = (self.goal - self.start) * _min_jerk_d(xs)[:, None] + dB @ self.weights
        if scalar:
            return val[0], der[0], clamped
        return val, der, clamped

    def __call__(self, x):
        return self.evaluate(x)[0]

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "n_basis": self.n_basis,
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "weights": self.weights.tolist(),
            "via_points": [[x, v.tolist()] for x, v in self.via_points],
            "rms": float(self.rms),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Vmp":
        return cls(np.asarray(d["start"]), np.asarray(d["goal"]), np.asarray(d["weights"]).reshape(d["n_basis"], -1),
                   tuple((x, np.asarray(v)) for x, v in d.get("via_points", [])), float(d.get("rms", 0.0)))


def _phase_align(trajectories, T: int) -> np.ndarray:
    out = []
    dst = np.linspace(0.0, 1.0, T)
    for tr in trajectories:
        tr = np.asarray(tr, dtype=float)
        src = np.linspace(0.0, 1.0, len(tr))
        out.append(np.column_stack([np.interp(dst, src, tr[:, k]) for k in range(tr.shape[1])]))
    return np.stack(out)


def fit_vmp(trajectories, n_basis: int = 20, ridge: float = 1e-8) -> Vmp:
    """Fit a VMP to the phase-aligned mean of one or more demonstrations.

    ``trajectories`` is a sequence of (T_i, dim) arrays sampled uniformly in
    time; phase is normalised time.
    """
    trajectories = [np.asarray(t, dtype=float) for t in trajectories]
    if not trajectories:
        raise PreconditionError("fit_vmp needs at least one trajectory", MODULE)
    T = max(len(t) for t in trajectories)
    if min(len(t) for t in trajectories) < n_basis:
        raise PreconditionError(f"trajectories need T >= n_basis ({n_basis})", MODULE)
    aligned = _phase_align(trajectories, T)
    mean = aligned.mean(axis=0)
    x = np.linspace(0.0, 1.0, T)
    proto = Vmp(mean[0], mean[-1], np.zeros((n_basis, mean.shape[1])))
    B, _ = proto.basis(x)
    resid = mean - proto.elementary(x)
    A = B.T @ B + ridge * np.eye(n_basis)
    w = np.linalg.solve(A, B.T @ resid)
    fitted = replace(proto, weights=w)
    rms = float(np.sqrt(((fitted(x) - mean) ** 2).sum(axis=1).mean()))
    return replace(fitted, rms=rms, variance=aligned.var(axis=0))


def adapt(vmp: Vmp, new_start=None, new_goal=None, extra_via=()) -> Vmp:
    """Re-target a VMP; via-points get a minimum-norm weight correction."""
    start = vmp.start if new_start is None else np.asarray(new_start, dtype=float)
    goal = vmp.goal if new_goal is None else np.asarray(new_goal, dtype=float)
    vias = list(vmp.via_points) + [(float(x), np.asarray(v, dtype=float)) for x, v in extra_via]
    merged: dict[float, np.ndarray] = {}
    for x, v in vias:
        if not 0.0 <= x <= 1.0:
            raise PreconditionError(f"via-point phase {x} outside [0, 1]", MODULE)
        if x in merged and not np.allclose(merged[x], v, rtol=0.0, atol=1e-12):
            raise PreconditionError(f"conflicting via-points at phase {x}", MODULE)
        merged[x] = v
    out = replace(vmp, start=start, goal=goal, via_points=tuple(sorted(merged.items())))
    for x, v, bound in ((0.0, merged.get(0.0), start), (1.0, merged.get(1.0), goal)):
        if v is not None and not np.allclose(v, bound, rtol=0.0, atol=1e-12):
            raise PreconditionError(f"via-point at phase {x} conflicts with the boundary value", MODULE)
    interior = [(x, v) for x, v in sorted(merged.items()) if 0.0 < x < 1.0]
    if not interior:
        return out
    xv = np.array([x for x, _ in interior])
    target = np.stack([v for _, v in interior])
    B, _ = out.basis(xv)
    gap = target - (out.elementary(xv) + B @ out.weights)
    dw, *_ = np.linalg.lstsq(B, gap, rcond=None)
    return replace(out, weights=out.weights + dw)
