"""Small models and tasks shared by the tests."""

from sparsemerge.model import ModelConfig, build_model
from sparsemerge.numerics import Rng
from sparsemerge.taskgen import TaskSpec, generate_task

SMALL = ModelConfig(num_layers=2, hidden_dim=8, num_heads=2)


def small_model(seed=0, config=SMALL):
    return build_model(config, Rng(seed, "test-model"))


def small_task(i=0, family="teacher", n_train=96, n_val=32, n_test=32, seed=None):
    return generate_task(
        TaskSpec(
            f"in{i:02d}",
            family=family,
            marker=32 + i,
            n_train=n_train,
            n_val=n_val,
            n_test=n_test,
            seed=1000 + i if seed is None else seed,
        )
    )
