import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bikvil.pipeline import extract
from bikvil.synthgen import ScenarioConfig, generate
from bikvil.trajdata import Demonstration, DemonstrationSet, ObjectTrack, TrackKind

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def make_track(object_id, shape, Rs=None, ps=None, T=None, kind=TrackKind.RIGID, category=None):
    """Track of ``shape`` (N, 3) moved by per-frame rotations and translations."""
    shape = np.asarray(shape, dtype=float)
    if Rs is None:
        T = T if T is not None else len(ps)
        Rs = np.repeat(np.eye(3)[None], T, axis=0)
    if ps is None:
        ps = np.zeros((len(Rs), 3))
    pts = np.einsum("tij,nj->nti", Rs, shape) + np.asarray(ps)[None]
    return ObjectTrack(object_id, category or object_id, kind, pts, shape)


def cloud(rng, n=40, scale=0.05):
    return rng.normal(0.0, scale, (n, 3))


@pytest.fixture(scope="session")
def pour_data():
    return generate(ScenarioConfig("pour", seed=0))


@pytest.fixture(scope="session")
def pour_extraction(pour_data):
    return extract(pour_data[0])


def single_demo_set(tracks, dt=0.05, name="t"):
    return DemonstrationSet(name, (Demonstration("d0", tuple(tracks), dt),))
