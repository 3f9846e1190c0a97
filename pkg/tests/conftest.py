import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_scene():
    from rigrefine.synthetic import SceneConfig, generate_scene

    return generate_scene(SceneConfig())


@pytest.fixture(scope="session")
def default_matches(default_scene):
    from rigrefine.synthetic import synthesize_matches

    return synthesize_matches(default_scene)


@pytest.fixture(scope="session")
def small_scene():
    from rigrefine.synthetic import SceneConfig, generate_scene

    return generate_scene(SceneConfig(num_frames=8, num_landmarks=150, seed=3))


@pytest.fixture(scope="session")
def small_matches(small_scene):
    from rigrefine.synthetic import synthesize_matches

    return synthesize_matches(small_scene, max_per_set=12)


def random_rotation(rng, max_angle=np.pi):
    from rigrefine.lie import so3_exp

    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0, max_angle))
