import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bikvil.bikac import (
    KacParams,
    StepLog,
    _integrate,
    adapt_to_scene,
    compose_body_wrench,
    constraint_force,
    evaluate_constraint,
    manifold_target,
    measure,
    point_cloud_frames,
    prioritized_wrench,
    reproduce,
    step,
)
from bikvil.errors import ConfigError, PreconditionError
from bikvil.geometry import exp_so3, random_rotation
from bikvil.geomcon import CurveModel, GeometricConstraint, Kind, candidate_local_frames, classify_constraint
from bikvil.hmsr import Edge, HmsrGraph, Node
from bikvil.pipeline import extract
from bikvil.scene import Body, SimScene
from bikvil.synthgen import ScenarioConfig, generate, generate_novel_scene
from bikvil.trajdata import TrackKind

RNG = np.random.default_rng(2024)
TABLE = RNG.normal(0, 0.1, (40, 3))
BLOCK = RNG.normal(0, 0.03, (20, 3))


def _body(bid, shape, R=np.eye(3), p=np.zeros(3), scale=1.0):
    return Body(bid, bid, TrackKind.RIGID, shape, shape * scale, R, p)


def _p2p_constraint(master_shape, target, slave="block", kp=0, master="table"):
    frame = candidate_local_frames(master_shape, 1, 8, master)[0]
    point = frame.basis.T @ (np.asarray(target) - frame.origin)
    return GeometricConstraint(Kind.P2P, {"point": point}, 0.0, slave, kp, frame, frame.scale)


def _graph(edges, moving=("block",), static=("table",)):
    nodes = {n: Node(n, "static", n) for n in static}
    nodes.update({n: Node(n, "moving", n) for n in moving})
    return HmsrGraph(nodes, tuple(edges))


def single_p2p(offset=0.2, target=(0.3, 0.0, 0.2), R=np.eye(3)):
    target = np.asarray(target, dtype=float)
    con = _p2p_constraint(TABLE, target)
    start = target + offset * np.array([1.0, 0.0, 0.0])
    block = _body("block", BLOCK, R, start - R @ BLOCK[0])
    scene = SimScene({"table": _body("table", TABLE), "block": block}, dt=0.01)
    return _graph([Edge("table", "block", (con,))]), scene


# ---------------------------------------------------------------- forces


def test_zero_force_at_attractor():
    a = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(constraint_force(200.0, 28.0, a, a, np.zeros(3)), np.zeros(3))


def test_plane_spring_example():
    con = GeometricConstraint(Kind.P2PLANE, {"point": np.zeros(3), "normal": np.array([0, 0, 1.0])}, 0.0)
    x = np.array([0.1, -0.2, 0.05])
    a, dirs = manifold_target(con, x)
    f = constraint_force(200.0, 0.0, a, x, np.zeros(3))
    assert np.allclose(f, [0, 0, -10.0], atol=1e-12)
    assert np.allclose(dirs[:, 0], [0, 0, 1])


def test_line_directions_orthogonal_to_line():
    d = np.array([1.0, 2.0, 2.0]) / 3
    con = GeometricConstraint(Kind.P2L, {"point": np.zeros(3), "direction": d}, 0.0)
    _, dirs = manifold_target(con, np.array([0.3, 0.1, 0.0]))
    assert dirs.shape == (3, 2) and np.allclose(dirs.T @ d, 0, atol=1e-12)
    assert np.allclose(dirs.T @ dirs, np.eye(2), atol=1e-12)


def test_arc_attractor_matches_brute_force():
    t = np.linspace(-np.pi / 3, np.pi / 3, 12)
    con = classify_constraint(np.c_[0.1 * np.cos(t), 0.1 * np.sin(t), np.zeros(12)])
    model = CurveModel.from_params(con.params)
    dense = model(np.linspace(-1.0, 1.0, 200001))
    rng = np.random.default_rng(0)
    for _ in range(25):
        q = model(rng.uniform(-0.9, 0.9)) + rng.normal(0, 0.01, 3)
        a, dirs = manifold_target(con, q)
        oracle = dense[np.argmin(((dense - q) ** 2).sum(1))]
        assert np.linalg.norm(a - oracle) < 1e-3
        assert dirs.shape == (3, 2)


def test_pose_has_no_point_attractor():
    with pytest.raises(PreconditionError):
        manifold_target(GeometricConstraint(Kind.POSE, {}, 0.0), np.zeros(3))


# ---------------------------------------------------------------- wrenches


def test_pure_couple():
    c = np.array([0.1, 0.1, 0.1])
    r, f = np.array([0.05, 0, 0]), np.array([0, 2.0, 0])
    F, tau = compose_body_wrench(c, np.stack([c + r, c - r]), np.stack([f, -f]))
    assert np.allclose(F, 0) and np.allclose(tau, 2 * np.cross(r, f))


def test_force_through_centroid_has_no_torque():
    c = np.array([0.3, -0.1, 0.2])
    F, tau = compose_body_wrench(c, c + np.array([[0.0, 0, 0.1]]), np.array([[0, 0, 5.0]]))
    assert np.allclose(F, [0, 0, 5]) and np.allclose(tau, 0, atol=1e-15)


def test_random_wrench_matches_loop():
    rng = np.random.default_rng(1)
    c, P, Fs = rng.normal(size=3), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    F, tau = compose_body_wrench(c, P, Fs)
    F_ref, tau_ref = np.zeros(3), np.zeros(3)
    for p, f in zip(P, Fs):
        F_ref += f
        tau_ref += np.cross(p - c, f)
    assert np.max(np.abs(F - F_ref)) < 1e-12 and np.max(np.abs(tau - tau_ref)) < 1e-12


def test_single_level_full_rank_equals_plain_sum():
    rng = np.random.default_rng(2)
    c, P, Fs = rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    F, tau = prioritized_wrench(c, 0.7, [(1, P, Fs, np.eye(3))])
    F_ref, tau_ref = compose_body_wrench(c, P, Fs)
    assert np.allclose(F, F_ref, atol=1e-12) and np.allclose(tau, tau_ref, atol=1e-12)


@given(st.integers(0, 10_000))
def test_weaker_level_cannot_disturb_stronger(seed):
    rng = np.random.default_rng(seed)
    c, L = np.zeros(3), 0.2
    strong = (1, rng.normal(0, 0.1, (1, 3)), rng.normal(size=(1, 3)), np.eye(3))
    n = rng.normal(size=3)
    weak_pts = rng.normal(0, 0.1, (2, 3))
    weak = (3, weak_pts, rng.normal(size=(2, 3)), (n / np.linalg.norm(n))[:, None])
    F_s, tau_s = prioritized_wrench(c, L, [strong])
    F, tau = prioritized_wrench(c, L, [strong, weak])
    r = strong[1][0] - c
    J = np.hstack([np.eye(3), -np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]]) / L])
    extra = np.concatenate([F - F_s, (tau - tau_s) / L])
    assert np.allclose(J @ extra, 0, atol=1e-9)


def test_free_damping_only_in_null_space():
    c, L = np.zeros(3), 0.1
    group = (1, np.zeros((1, 3)), np.zeros((1, 3)), np.eye(3))
    F, tau = prioritized_wrench(c, L, [group], np.array([1.0, 2, 3, 4, 5, 6]))
    assert np.allclose(F, 0, atol=1e-12) and np.allclose(tau, np.array([4, 5, 6]) * L, atol=1e-12)


# ---------------------------------------------------------------- integration


def test_rotation_stays_orthonormal_over_1e5_steps():
    b = _body("spin", BLOCK).moved(w=np.array([3.0, -1.0, 2.0]))
    params = KacParams(max_speed=1e9)
    for _ in range(100_000):
        b = _integrate(b, np.zeros(3), np.zeros(3), 1.0, 1.0, 0.001, params)
    assert np.max(np.abs(b.R.T @ b.R - np.eye(3))) < 1e-6
    assert np.linalg.det(b.R) == pytest.approx(1.0, abs=1e-9)


def test_fixed_point_stays_put():
    graph, scene = single_p2p(offset=0.0)
    task = adapt_to_scene(graph, scene)
    out, phases, _ = step(scene, task, KacParams(), {"block": 0.0})
    b0, b1 = scene.body("block"), out.body("block")
    assert np.allclose(b0.points, b1.points, atol=1e-12)


def test_single_p2p_from_20cm_converges_monotonically():
    graph, scene = single_p2p(offset=0.2)
    log, final, task = reproduce(graph, scene, KacParams(), horizon=5.0)
    res = [next(iter(e["residuals"].values())) for e in log.entries]
    assert res[0] == pytest.approx(0.2, abs=1e-9)
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))
    final_res = measure(final, task, KacParams(), {"block": 1.0})[0]
    assert max(final_res.values()) < 0.002
    assert log.verdict["converged"]


def test_spring_energy_decreases():
    graph, scene = single_p2p(offset=0.15, R=exp_so3([0.3, -0.2, 0.5]))
    params = KacParams()
    task = adapt_to_scene(graph, scene, params)
    phases, cur, energies = {"block": 0.0}, scene, []
    for i in range(300):
        res = measure(cur, task, params, phases)[0]
        b = cur.body("block")
        energies.append(0.5 * params.k * max(res.values()) ** 2 + 0.5 * params.m * b.v @ b.v)
        cur, phases, _ = step(cur, task, params, phases, i)
    assert energies[-1] < 1e-3 * energies[0]
    assert all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(energies, energies[1:]))


def test_master_motion_is_seen_in_the_same_step():
    graph, scene = single_p2p(offset=0.0)
    task = adapt_to_scene(graph, scene)
    ac = task.constraints[0]
    before = evaluate_constraint(ac, scene, task, 1.0, KacParams()).attractors[0]
    shift = np.array([0.05, -0.02, 0.01])
    moved = scene.with_bodies({"table": scene.body("table").moved(p=shift)})
    after = evaluate_constraint(ac, moved, task, 1.0, KacParams()).attractors[0]
    assert np.allclose(after - before, shift, atol=1e-12)


def test_chain_updates_in_topological_order():
    con_a = _p2p_constraint(TABLE, [0.2, 0.0, 0.1], slave="a", kp=0)
    con_b = _p2p_constraint(BLOCK, BLOCK[3] + [0.0, 0.0, 0.05], slave="b", kp=0, master="a")
    a = _body("a", BLOCK, p=[0.3, 0.0, 0.1] - BLOCK[0])
    b = _body("b", BLOCK * 0.5, p=[0.0, 0.3, 0.1])
    scene = SimScene({"table": _body("table", TABLE), "a": a, "b": b}, dt=0.01)
    graph = _graph([Edge("table", "a", (con_a,)), Edge("a", "b", (con_b,))], moving=("a", "b"))
    task = adapt_to_scene(graph, scene)
    assert task.controlled == ("a", "b")
    log, final, _ = reproduce(graph, scene, KacParams(), horizon=10.0, task=task)
    assert log.verdict["converged"]
    fa = final.body("a")
    target = fa.R @ (BLOCK[3] + [0.0, 0.0, 0.05]) + fa.p
    assert np.linalg.norm(final.body("b").points[0] - target) < 0.005


def test_residuals_follow_the_scene():
    graph, scene = single_p2p(offset=0.0)
    task = adapt_to_scene(graph, scene)
    block = scene.body("block")
    moved = scene.with_bodies({"block": block.moved(p=block.p + [0.0, 0.03, 0.04])})
    res = measure(moved, task, KacParams(), {"block": 1.0})[0]
    assert max(res.values()) == pytest.approx(0.05, abs=1e-12)


def test_scaled_master_scales_the_target():
    target = np.array([0.3, 0.0, 0.2])
    con = _p2p_constraint(TABLE, target)
    scene = SimScene({"table": _body("table", TABLE, scale=1.2), "block": _body("block", BLOCK)}, dt=0.01)
    task = adapt_to_scene(_graph([Edge("table", "block", (con,))]), scene)
    a = evaluate_constraint(task.constraints[0], scene, task, 1.0, KacParams()).attractors[0]
    assert np.allclose(a, 1.2 * target, atol=1e-9)


def test_missing_category():
    graph, scene = single_p2p()
    scene = SimScene({"block": scene.body("block")})
    with pytest.raises(PreconditionError):
        adapt_to_scene(graph, scene)


def test_trivial_graph_converges_immediately():
    graph = _graph([], moving=())
    scene = SimScene({"table": _body("table", TABLE)})
    log, final, _ = reproduce(graph, scene)
    assert log.verdict["converged"] and log.verdict["steps"] == 0 and log.verdict["time_to_converge"] == 0.0


def test_deterministic(tmp_path):
    graph, scene = single_p2p(offset=0.1, R=random_rotation(np.random.default_rng(3)))
    a = reproduce(graph, scene, horizon=2.0)[0]
    b = reproduce(graph, scene, horizon=2.0)[0]
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    a.save(tmp_path / "log.json")
    assert StepLog.load(tmp_path / "log.json").to_json() == json.loads(json.dumps(a.to_json()))
    clouds = point_cloud_frames(scene, a, stride=10)
    assert clouds["block"].shape == (1 + (len(a.entries) + 9) // 10, len(BLOCK), 3)


def test_params_validation():
    for bad in (dict(k=0), dict(blend=0), dict(tol=0), dict(stiffness={"p2p": -1.0}), dict(max_speed=0)):
        with pytest.raises(ConfigError):
            KacParams(**bad).validate()
    assert KacParams(k=100, m=1).damping == pytest.approx(20.0)


def test_place_on_reproduction():
    cfg = ScenarioConfig("place_on", seed=0)
    graph = extract(generate(cfg)[0]).graph
    log, _, _ = reproduce(graph, generate_novel_scene(cfg, seed=1000), KacParams(), horizon=30.0)
    p2p = [c for c in log.verdict["constraints"].values() if c["kind"] == "p2p" and c["top_priority"]]
    assert p2p and max(c["final_residual"] for c in p2p) < 0.005
