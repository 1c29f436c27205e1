import numpy as np
import pytest
from hypothesis import settings

from bpmf import kernels
from bpmf.data import RatingsMatrix, split_train_test, synthetic_ratings
from bpmf.rng import Side, StreamKey, stream_for

# JIT compilation and hypothesis shrinking both blow the default deadline.
settings.register_profile("bpmf", deadline=None)
settings.load_profile("bpmf")


@pytest.fixture(scope="session", autouse=True)
def compiled_kernels():
    """Compile every jitted kernel once so timings in tests are honest."""
    kernels.warmup(4)


def planted_problem(n_users, n_movies, k_true, density, noise_sd, seed, holdout=0.2):
    """Train matrix plus held-out triplets from a known low-rank model."""
    gen = stream_for(StreamKey(seed, 3, Side.NOISE, 0))
    users, movies, values, u_true, v_true = synthetic_ratings(
        n_users, n_movies, k_true, density, noise_sd, gen
    )
    split_gen = stream_for(StreamKey(seed, 2, Side.NOISE, 0))
    (tr_u, tr_m, tr_v), test = split_train_test(users, movies, values, holdout, split_gen)
    train = RatingsMatrix(n_users, n_movies, tr_u, tr_m, tr_v)
    return train, test


@pytest.fixture
def planted():
    return planted_problem


def random_spd(gen, k, jitter=0.5):
    """A well-conditioned random symmetric positive definite matrix."""
    a = gen.standard_normal((k, k))
    return a @ a.T + (k + jitter) * np.eye(k)


@pytest.fixture
def spd():
    return random_spd
