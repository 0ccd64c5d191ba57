import numpy as np
import pandas as pd
import pytest

from sitewiz import Dataset, SimulationConfig, shape_set, simulate_dataset


def make_dataset(features, sites, age=None, sex=None, subject_ids=None, site_registry=None) -> Dataset:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]

    covariates = {}
    if age is not None:
        covariates["age"] = np.asarray(age, dtype=float)
    if sex is not None:
        covariates["sex"] = list(sex)

    n = len(features)
    return Dataset(
        subject_ids=subject_ids or [f"s{i:04d}" for i in range(n)],
        features=features,
        feature_names=[f"f{j + 1}" for j in range(features.shape[1])],
        sites=sites,
        covariates=pd.DataFrame(covariates, index=range(n)),
        site_registry=site_registry,
        categorical={"sex"} if sex is not None else (),
    )


@pytest.fixture
def small_simulation():
    "3 sites of 25 subjects, strong site effects."
    config = SimulationConfig(k=3, n=25, V=4, gamma_sd=0.5, inv_gamma_shapes=shape_set(3), seed=3)
    return simulate_dataset(config)


@pytest.fixture
def small_dataset(small_simulation) -> Dataset:
    return small_simulation.dataset


@pytest.fixture
def sex_dataset() -> Dataset:
    "Two sites, age and sex covariates, site B shifted by 0.5."
    rng = np.random.default_rng(11)
    n = 40
    age = rng.uniform(20, 80, size=2 * n)
    sex = np.tile(["F", "M"], n)
    sites = np.repeat(["A", "B"], n)
    noise = rng.normal(0, 0.1, size=(2 * n, 3))
    features = 2.0 + 0.01 * age[:, None] + 0.2 * (sex == "M")[:, None] + noise
    features[sites == "B"] += 0.5
    return make_dataset(features, sites, age=age, sex=sex)
