import numpy as np
import pytest

from bikvil.errors import PreconditionError
from bikvil.geometry import exp_so3
from bikvil.saliency import (
    GraspDetectorConfig,
    create_virtual_objects,
    detect_contacts,
    detect_grasps,
    find_grasps,
    motion_saliency,
)
from bikvil.synthgen import hand_shape
from bikvil.trajdata import Demonstration, DemonstrationSet, TrackKind

from conftest import cloud, make_track, single_demo_set

T = 100


def _slide(T, start, end):
    return np.linspace(start, end, T)


def _still(oid, rng, offset=(0, 0, 0)):
    return make_track(oid, cloud(rng) + offset, T=T)


def test_all_static():
    rng = np.random.default_rng(0)
    dset = single_demo_set([_still("table", rng), _still("cup", rng, (0.5, 0, 0))])
    rep = motion_saliency(dset)
    assert sorted(rep.static) == ["cup", "table"] and rep.moving == []


def test_translated_cup_is_moving():
    rng = np.random.default_rng(1)
    Rs = np.repeat(np.eye(3)[None], T, 0)
    cup = make_track("cup", cloud(rng, scale=0.03), Rs, _slide(T, [0.5, 0, 0], [0.8, 0, 0]))
    rep = motion_saliency(single_demo_set([_still("table", rng), cup]))
    assert rep.static == ["table"] and rep.moving == ["cup"]


def test_pour_objects_moving(pour_data):
    rep = motion_saliency(pour_data[0])
    assert sorted(rep.moving) == ["cup", "kettle"]
    assert rep.static == []


def test_virtual_objects():
    rng = np.random.default_rng(2)
    Rs = np.repeat(np.eye(3)[None], T, 0)
    spoon = make_track("spoon", cloud(rng, scale=0.03), Rs, _slide(T, [0, 0, 0], [0.4, 0, 0]))
    plate = make_track("plate", cloud(rng), Rs, _slide(T, [1, 0, 0], [1.3, 0.2, 0]))
    still = single_demo_set([_still("table", rng), _still("mat", rng, (0, 1, 0))])
    assert create_virtual_objects(still, motion_saliency(still)) is still

    one = single_demo_set([_still("table", rng), spoon])
    out = create_virtual_objects(one, motion_saliency(one))
    v = out.demos[0].track("vspoon")
    assert v.kind is TrackKind.VIRTUAL
    assert np.array_equal(v.points, np.repeat(spoon.points[:, :1], T, axis=1))

    two = single_demo_set([_still("table", rng), spoon, plate])
    out = create_virtual_objects(two, motion_saliency(two))
    assert sorted(t.object_id for t in out.demos[0].tracks if t.kind is TrackKind.VIRTUAL) == ["vplate", "vspoon"]


def _hand_on(obj_pts_t0, Rs, ps, offset):
    """Right hand rigidly following an object pose sequence at a fixed offset."""
    shape = hand_shape(TrackKind.HAND_RIGHT) + offset
    return make_track("right_hand", shape, Rs, ps, kind=TrackKind.HAND_RIGHT, category="hand")


def test_contacts_far_apart_empty():
    rng = np.random.default_rng(3)
    demo = Demonstration("d", (_still("a", rng), _still("b", rng, (1, 0, 0))), 0.05)
    assert detect_contacts(demo, ("a", "b")) == []


def _approach_scene(t_on=20, t_off=80):
    """Box at the origin; hand far away, touching it exactly on [t_on, t_off]."""
    g = np.linspace(-0.03, 0.03, 5)
    box = np.array([[x, y, z + 0.03] for x in g for y in g for z in g])
    obj = make_track("box", box, T=T)
    ps = np.zeros((T, 3))
    ps[:, 0] = 1.0
    shape = hand_shape(TrackKind.HAND_RIGHT)
    gap = 0.03 + 0.005 - shape[:, 0].min()  # 5 mm from the box face
    ps[t_on:t_off + 1, 0] = gap
    hand = make_track("right_hand", shape, ps=ps, Rs=np.repeat(np.eye(3)[None], T, 0), kind=TrackKind.HAND_RIGHT,
                      category="hand")
    return Demonstration("d", (obj, hand), 0.05)


def test_contact_interval_matches_script():
    iv = detect_contacts(_approach_scene(), ("right_hand", "box"), GraspDetectorConfig(contact_dist=0.02))
    assert len(iv) == 1
    assert iv[0][0] <= 21 and iv[0][1] >= 79


def test_single_frame_touch_ignored():
    assert detect_contacts(_approach_scene(50, 50), ("right_hand", "box")) == []


def test_rigid_attachment_is_firm():
    ev = detect_grasps(_approach_scene(), "right_hand", "box")
    assert len(ev) == 1 and ev[0].firm
    assert ev[0].mean_change_rate < 1e-9


def test_spinning_object_not_firm():
    rng = np.random.default_rng(4)
    shape = cloud(rng, 60, 0.04)
    Rs = np.stack([exp_so3([0.08 * t, 0.0, 0.0]) for t in range(T)])
    obj = make_track("ball", shape + [0.0, 0.0, 0.0], Rs, np.zeros((T, 3)))
    hs = hand_shape(TrackKind.HAND_RIGHT)
    hand_ps = np.repeat([[0.0, 0.0, 0.06 - hs[:, 2].min()]], T, 0)
    hand = make_track("right_hand", hs, np.repeat(np.eye(3)[None], T, 0), hand_ps, kind=TrackKind.HAND_RIGHT,
                      category="hand")
    demo = Demonstration("d", (obj, hand), 0.05)
    events = detect_grasps(demo, "right_hand", "ball", GraspDetectorConfig(contact_dist=0.05))
    assert events and not any(e.firm for e in events)


def test_pour_grasps(pour_data):
    summary = find_grasps(pour_data[0])
    assert summary.grasped == {"left_hand": "kettle", "right_hand": "cup"}


def test_grasp_on_non_hand_rejected():
    with pytest.raises(PreconditionError):
        detect_grasps(_approach_scene(), "box", "box")
