"""
Module contains the generator of multi-site data with known site effects::

    y[j, f] = alpha[f] + beta1 * age[j] + beta2 * age[j] ** 2 + gamma[i, f] + delta[i, f] * eps[j, f]

for subject ``j`` of site ``i``, with ``gamma ~ Normal(0, gamma_sd ** 2)``,
``delta ~ InverseGamma(shape[i], scale)`` and ``eps ~ Normal(0, epsilon_sd ** 2)``.
"""
from __future__ import annotations
from typing import Any, Dict, Mapping, Tuple, Union
from dataclasses import dataclass, replace

import logging

import numpy as np
import pandas as pd

from .dataset import Dataset
from .errors import ValidationError
from .utilities import derive_seed
from .doc import doc_category


__all__ = (
    "SimulationConfig",
    "SimulatedDataset",
    "SIMULATION_PRESETS",
    "shape_set",
    "simulate_dataset",
)


logger = logging.getLogger(__name__)

FEATURE_BASELINES = {"ct": 2.5, "fd": 2.6}


@doc_category("Simulation")
def shape_set(k: int) -> Tuple[float, ...]:
    """
    Inverse-gamma shapes of the site scale effects for ``k`` in {3, 10, 36} sites.
    """
    if k == 3:
        return (46.0, 51.0, 56.0)
    if k == 10:
        return tuple(float(s) for s in range(40, 59, 2))
    if k == 36:
        return tuple(float(s) for s in (*range(10, 41, 2), *range(41, 51), *range(52, 71, 2)))

    raise ValidationError(f"No shape set for {k} sites, choose from 3, 10 and 36")


@doc_category("Simulation")
@dataclass(frozen=True)
class SimulationConfig:
    """
    Parameters of a simulated multi-site dataset.

    Parameters
    ------------
    k: int
        Number of sites.
    n: int
        Subjects per site.
    V: int
        Number of features.
    alpha: float | Sequence[float]
        Baseline level of every feature.
    beta1: float
        Linear age coefficient (per year).
    beta2: float
        Quadratic age coefficient (per year squared).
    age_range: Tuple[float, float]
        Uniform age distribution bounds, in years.
    gamma_sd: float
        Standard deviation of the site location effects.
    inv_gamma_shapes: Sequence[float]
        Per-site inverse-gamma shape of the site scale effects (all > 2).
    inv_gamma_scale: float
        Shared inverse-gamma scale.
    epsilon_sd: float
        Residual standard deviation.
    fixed_delta: bool
        Set every scale effect to 1 instead of sampling it.
    feature_prefix: str
        Feature names are ``<prefix>_01``, ``<prefix>_02``, ...
    seed: int
        Random seed.
    """
    k: int
    n: int
    V: int = 11
    alpha: Union[float, Tuple[float, ...]] = 2.5
    beta1: float = -0.0009
    beta2: float = -0.00005
    age_range: Tuple[float, float] = (20.0, 90.0)
    gamma_sd: float = 0.1
    inv_gamma_shapes: Tuple[float, ...] = ()
    inv_gamma_scale: float = 50.0
    epsilon_sd: float = 0.1
    fixed_delta: bool = False
    feature_prefix: str = "f"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "inv_gamma_shapes", tuple(map(float, self.inv_gamma_shapes)))
        object.__setattr__(self, "age_range", tuple(map(float, self.age_range)))
        if not isinstance(self.alpha, (int, float)):
            object.__setattr__(self, "alpha", tuple(map(float, self.alpha)))
            if len(self.alpha) != self.V:
                raise ValidationError(f"{len(self.alpha)} baselines given for {self.V} features")

        if self.k < 1 or self.n < 1 or self.V < 1:
            raise ValidationError(f"k, n and V must be positive, got k={self.k}, n={self.n}, V={self.V}")
        if len(self.inv_gamma_shapes) != self.k:
            raise ValidationError(f"{len(self.inv_gamma_shapes)} inverse-gamma shapes given for {self.k} sites")
        if any(shape <= 2 for shape in self.inv_gamma_shapes):
            raise ValidationError("Inverse-gamma shapes must exceed 2")
        if self.inv_gamma_scale <= 0:
            raise ValidationError("The inverse-gamma scale must be positive")
        if self.gamma_sd < 0 or self.epsilon_sd < 0:
            raise ValidationError("Standard deviations must not be negative")
        if not self.age_range[0] < self.age_range[1]:
            raise ValidationError(f"Invalid age range {self.age_range}")

    @property
    def alphas(self) -> np.ndarray:
        "Baseline level per feature."
        return np.broadcast_to(np.asarray(self.alpha, dtype=float), (self.V,)).copy()

    @property
    def site_names(self) -> Tuple[str, ...]:
        width = max(2, len(str(self.k)))
        return tuple(f"site{i + 1:0{width}d}" for i in range(self.k))

    @property
    def feature_names(self) -> Tuple[str, ...]:
        return tuple(f"{self.feature_prefix}_{f + 1:02d}" for f in range(self.V))

    def with_seed(self, seed: int) -> SimulationConfig:
        return replace(self, seed=seed)


@doc_category("Simulation")
@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    """
    Simulated data and the site effects that were injected.

    Parameters
    ------------
    dataset: Dataset
        The data, with an ``age`` covariate.
    config: SimulationConfig
        Generating configuration.
    gamma: numpy.ndarray
        Location effects, shape (k, V).
    delta: numpy.ndarray
        Scale effects, shape (k, V).
    """
    dataset: Dataset
    config: SimulationConfig
    gamma: np.ndarray
    delta: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return self.config.alphas

    def truth_to_dict(self) -> Dict[str, Any]:
        "Ground truth as a JSON compatible dictionary."
        return {
            "sites": list(self.config.site_names),
            "features": list(self.config.feature_names),
            "alpha": self.alpha.tolist(),
            "gamma": {"shape": list(self.gamma.shape), "values": self.gamma.ravel().tolist()},
            "delta": {"shape": list(self.delta.shape), "values": self.delta.ravel().tolist()},
        }


def _simulate_site(config: SimulationConfig, site: int) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    rng = np.random.default_rng(derive_seed(config.seed, site))
    age = rng.uniform(*config.age_range, size=config.n)
    gamma = rng.normal(0.0, config.gamma_sd, size=config.V)
    if config.fixed_delta:
        delta = np.ones(config.V)
    else:
        # InverseGamma(shape, scale) is scale / Gamma(shape, 1)
        delta = config.inv_gamma_scale / rng.gamma(config.inv_gamma_shapes[site], 1.0, size=config.V)

    noise = rng.normal(0.0, config.epsilon_sd, size=(config.n, config.V))
    return age, gamma, delta, noise


@doc_category("Simulation")
def simulate_dataset(config: SimulationConfig) -> SimulatedDataset:
    """
    Generates a dataset of ``config.k`` sites with ``config.n`` subjects each.

    Every site draws from its own seed derived from ``config.seed``,
    regenerating with the same configuration is bit-identical.
    """
    ages, gammas, deltas, features = [], [], [], []
    alpha = config.alphas
    for site in range(config.k):
        age, gamma, delta, noise = _simulate_site(config, site)
        trend = alpha + config.beta1 * age[:, None] + config.beta2 * age[:, None] ** 2
        features.append(trend + gamma + delta * noise)
        ages.append(age)
        gammas.append(gamma)
        deltas.append(delta)

    sites = np.repeat(config.site_names, config.n)
    dataset = Dataset(
        subject_ids=[f"{site}-{j + 1:04d}" for site in config.site_names for j in range(config.n)],
        features=np.vstack(features),
        feature_names=config.feature_names,
        sites=sites,
        covariates=pd.DataFrame({"age": np.concatenate(ages)}),
        site_registry=config.site_names,
    )
    logger.debug("Simulated k=%d, n=%d, V=%d (seed %d)", config.k, config.n, config.V, config.seed)
    return SimulatedDataset(dataset, config, np.vstack(gammas), np.vstack(deltas))


def _presets() -> Mapping[str, SimulationConfig]:
    presets = {}
    for kind, alpha in FEATURE_BASELINES.items():
        for k in (3, 10, 36):
            for n in (25, 50, 100, 250):
                presets[f"{kind}-k{k}-n{n}"] = SimulationConfig(
                    k=k, n=n, alpha=alpha, inv_gamma_shapes=shape_set(k), feature_prefix=kind
                )

    return presets


SIMULATION_PRESETS: Mapping[str, SimulationConfig] = _presets()
