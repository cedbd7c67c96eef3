import numpy as np
import pytest

from chmmevidence import simulate, sir


@pytest.fixture(scope="session")
def study_params():
    return sir.scaling_study_params()


@pytest.fixture(scope="session")
def model16():
    return sir.ModelVariant.from_model_number(16)


@pytest.fixture(scope="session")
def scaling4_sim(study_params, model16):
    """The seeded benchmark dataset shared by several estimator tests."""
    design = simulate.get_design("scaling-4")
    return simulate.simulate_experiment(design, study_params, model16,
                                        np.random.default_rng(101))
