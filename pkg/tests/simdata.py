"""Synthetic individual-participant datasets shared by the test modules."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from cimeta.ipd_core import Covariate, CovariateSchema, IndividualRecord, MetaDataset

PAIR = ("T", "C")


def from_arrays(study, arm, outcome, covariates: dict, schema: CovariateSchema,
                pair=PAIR) -> MetaDataset:
    cols = [covariates[c.name] for c in schema]
    records = tuple(
        IndividualRecord(str(s), str(a), float(y),
                         tuple(str(v[i]) if c.is_categorical else float(v[i]) for c, v in zip(schema, cols)))
        for i, (s, a, y) in enumerate(zip(study, arm, outcome)))
    return MetaDataset(schema, records, pair)


def small_instance(seed: int, n_studies: int = 3, n_per_study: int = 24, categorical: bool = True):
    """Randomised small dataset with one continuous and (optionally) one categorical covariate.

    Study ``s0`` is shifted in ``x`` so participation is informative; the
    outcome has arm-specific slopes so transport matters. Every study holds
    every categorical level in both arms.
    """
    rng = np.random.default_rng(seed)
    study, arm, y, x, g = [], [], [], [], []
    levels = ("lo", "mid", "hi")
    for s in range(n_studies):
        n = n_per_study
        xs = rng.normal(0.6 if s == 0 else 0.0, 1.0, n)
        gs = rng.choice(levels, n, p=(0.5, 0.3, 0.2) if s == 0 else (0.3, 0.4, 0.3))
        # the first six rows cover every level in both arms, which keeps every model identifiable
        gs[:6] = np.repeat(levels, 2)
        a = np.array(["T", "C"] * (n // 2))
        rng.shuffle(a[6:])
        treated = a == "T"
        ys = 1.0 + 0.5 * xs + treated * (1.0 + 0.8 * xs) + 0.3 * (gs == "hi") + rng.normal(0, 1, n)
        study += [f"s{s}"] * n
        arm += list(a)
        y += list(ys)
        x += list(xs)
        g += list(gs)
    entries = [Covariate("x")]
    cov = {"x": np.array(x)}
    if categorical:
        entries.append(Covariate("g", "categorical", levels))
        cov["g"] = np.array(g)
    return from_arrays(study, arm, y, cov, CovariateSchema(tuple(entries)))


def dr_scenario(seed: int, n: int = 2000, n_studies: int = 3):
    """Target study ``target`` plus ``n_studies`` contributing studies drawn from one population.

    Membership in the target follows a logistic model in ``x``; the treatment
    effect is ``1 + x``. Returns the dataset and the target-sample mean of the
    individual effects.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, n)
    in_target = rng.random(n) < expit(-1.0 + 0.8 * x)
    treated = rng.random(n) < 0.5
    y = 1.0 + x + treated * (1.0 + x) + rng.normal(0.0, 1.0, n)
    source_study = rng.integers(0, n_studies, n)
    study = np.where(in_target, "target", np.char.add("s", source_study.astype(str)))
    arm = np.where(treated, "T", "C")
    schema = CovariateSchema((Covariate("x"),))
    ds = from_arrays(study, arm, y, {"x": x}, schema)
    truth = float(np.mean(1.0 + x[in_target]))
    return ds, truth


def age_disjoint(seed: int, n_target: int = 300, n_per_study: int = 400, n_studies: int = 3):
    """Child-only target sample against adult trials overlapping it only in a thin tail.

    The treatment effect grows linearly with age, so the population effect in
    the children differs markedly from the pooled adult effect. Returns the
    dataset and the target-sample mean of individual effects.
    """
    rng = np.random.default_rng(seed)
    ages = [rng.uniform(6.0, 17.0, n_target)]
    studies = [np.full(n_target, "child")]
    for s in range(n_studies):
        ages.append(np.concatenate([rng.uniform(12.0, 20.0, n_per_study // 20),
                                    rng.uniform(20.0, 70.0, n_per_study - n_per_study // 20)]))
        studies.append(np.full(n_per_study, f"adult{s}"))
    age = np.concatenate(ages)
    study = np.concatenate(studies)
    treated = rng.random(age.size) < 0.5
    effect = -1.0 + 0.05 * age
    y = 20.0 + 0.2 * age + treated * effect + rng.normal(0.0, 1.0, age.size)
    ds = from_arrays(study, np.where(treated, "T", "C"), y, {"age": age},
                     CovariateSchema((Covariate("age"),)))
    truth = float(np.mean(effect[study == "child"]))
    return ds, truth


def constant_effect(seed: int, effect: float = 1.5, n_studies: int = 5, n_per_study: int = 200):
    """Studies that differ in covariate mix but share one treatment effect (no effect modification)."""
    rng = np.random.default_rng(seed)
    study, arm, y, x = [], [], [], []
    for s in range(n_studies):
        xs = rng.normal(0.4 * s - 0.8, 1.0, n_per_study)
        treated = rng.random(n_per_study) < 0.5
        study += [f"s{s}"] * n_per_study
        arm += list(np.where(treated, "T", "C"))
        y += list(2.0 + 1.0 * xs + effect * treated + rng.normal(0.0, 1.0, n_per_study))
        x += list(xs)
    return from_arrays(study, arm, y, {"x": np.array(x)}, CovariateSchema((Covariate("x"),)))


def separated_toy():
    """Two studies whose covariate ranges do not overlap at all."""
    x = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 10.0, 10.5, 11.0, 11.5, 12.0, 12.5])
    study = ["t"] * 6 + ["c"] * 6
    arm = ["T", "C"] * 6
    y = np.arange(12, dtype=float) * 0.3 + np.array([0.1, -0.2, 0.3, 0.0, -0.1, 0.2] * 2)
    return from_arrays(study, arm, y, {"x": x}, CovariateSchema((Covariate("x"),)))
