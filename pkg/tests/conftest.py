import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lienet.pipeline import extract, to_dataset
from lienet.synth import SyntheticTaskSpec, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def synthetic_split(seed=0, classes=4, per_class=50, test_per_class=50, frames=20, sigma=0.1):
    """Train and test Datasets of the synthetic task, extracted at ``frames``."""
    task = SyntheticTaskSpec(class_count=classes, frames=frames, sigma=sigma, seed=seed,
                             samples_per_class=per_class, test_per_class=test_per_class)
    _, train, test = generate(task)
    names = tuple(f"c{c}" for c in range(classes))
    lie_train, _ = extract(task.topology, train, frames)
    out = [to_dataset(lie_train, names)]
    if test:
        lie_test, _ = extract(task.topology, test, frames)
        out.append(to_dataset(lie_test, names))
    return tuple(out)


@pytest.fixture(scope="session")
def small_task():
    return synthetic_split(seed=3, classes=3, per_class=8, test_per_class=4, frames=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
