"""Builders shared across the test modules.

Construction helpers only: everything numerically interesting lives either
in the library or in tests/oracles.py. The one design rule is that every
randomized builder takes an explicit seed, so any test that uses them is
reproducible from its source alone.
"""

from __future__ import annotations

import numpy as np

from cace_ipw.data import Dataset, from_rows
from cace_ipw.logit import ARM_CONTROL, ARM_TREATMENT, FitError, LogitFit, fit_logit


def expit(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def make_dataset(cluster, treat, receipt, y, covariates=None, *,
                 wls=(), logit_t=(), logit_c=()) -> Dataset:
    return from_rows(
        [str(c) for c in cluster],
        list(treat),
        list(receipt),
        [float(v) for v in y],
        {name: list(vals) for name, vals in (covariates or {}).items()},
        covariate_names_wls=tuple(wls),
        covariate_names_logit_t=tuple(logit_t),
        covariate_names_logit_c=tuple(logit_c),
    )


def constant_fit(arm: str, propensity: float, covariate_names=()) -> LogitFit:
    """A hand-made intercept-only receipt model predicting one value
    everywhere. propensity may be 0.0 or 1.0: the intercept is pushed far
    enough that the logistic link saturates in float64."""
    if propensity <= 0.0:
        intercept = -800.0
    elif propensity >= 1.0:
        intercept = 800.0
    else:
        intercept = float(np.log(propensity / (1.0 - propensity)))
    return LogitFit(
        arm=arm,
        covariate_names=tuple(covariate_names),
        intercept=intercept,
        coefficients=np.zeros(len(tuple(covariate_names))),
        converged=True,
        iterations=0,
        max_abs_score=0.0,
        loglik=0.0,
    )


def injected_fit(arm: str, intercept: float, coefficients, covariate_names) -> LogitFit:
    return LogitFit(
        arm=arm,
        covariate_names=tuple(covariate_names),
        intercept=float(intercept),
        coefficients=np.asarray(coefficients, dtype=np.float64),
        converged=True,
        iterations=0,
        max_abs_score=0.0,
        loglik=0.0,
    )


def random_trial(
    seed: int,
    m_t: int = 4,
    m_c: int = 4,
    n_lo: int = 4,
    n_hi: int = 9,
    k: int = 1,
    k_t: int = 1,
    k_c: int = 1,
    effect: float = 0.5,
) -> Dataset:
    """One random clustered dataset with enough texture for every estimator.

    Covariate x1 drives receipt in both arms (x2 as well when an arm's
    logit asks for two); x1/x2 serve as outcome covariates. No guarantee
    the receipt models are fittable: see fitted_instance for that.
    """
    rng = np.random.default_rng(seed)
    cluster, treat, receipt, y = [], [], [], []
    names = [f"x{j + 1}" for j in range(max(k, k_t, k_c, 1))]
    cov = {name: [] for name in names}
    arms = [1] * m_t + [0] * m_c
    for j, arm in enumerate(arms):
        size = int(rng.integers(n_lo, n_hi + 1))
        theta = rng.normal(0.0, 0.3)
        for _ in range(size):
            xs = rng.normal(0.0, 1.0, size=len(names))
            z = 0.35 + 0.9 * xs[0] if arm == 1 else -0.2 + 0.7 * xs[0]
            if len(names) > 1:
                z += 0.3 * xs[1]
            rec = int(rng.random() < expit(z))
            out = 0.3 + effect * arm + 0.45 * xs[0] + theta + rng.normal(0.0, 0.8)
            if len(names) > 1:
                out += 0.25 * xs[1]
            cluster.append(f"g{j:02d}")
            treat.append(arm)
            receipt.append(rec)
            y.append(out)
            for name, val in zip(names, xs):
                cov[name].append(float(val))
    return make_dataset(
        cluster, treat, receipt, y, cov,
        wls=names[:k],
        logit_t=names[:k_t],
        logit_c=names[:k_c],
    )


def fitted_instance(seed: int, attempts: int = 60, **kwargs):
    """(dataset, fit_t, fit_c) with both receipt models converged.

    Small random trials are occasionally separated or one-sided; this
    walks the seed forward until both arm fits go through, so callers get
    a usable instance deterministically derived from `seed`.
    """
    last = None
    for trial in range(attempts):
        d = random_trial(seed + 1000 * trial, **kwargs)
        try:
            fit_t = fit_logit(d, ARM_TREATMENT)
            fit_c = fit_logit(d, ARM_CONTROL)
        except FitError as exc:
            last = exc
            continue
        return d, fit_t, fit_c
    raise AssertionError(f"no fittable instance near seed {seed}: {last}")
