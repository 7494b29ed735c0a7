"""Link/variance families for the PQL working model.

Only canonical links are supported, so ``g'(mu) * nu(mu) == 1`` holds for
every family defined here.
"""

from __future__ import annotations

import enum

import numpy as np

MU_CLAMP = 1e-6


class LinkFamily(enum.Enum):
    GAUSSIAN = "gaussian"
    BINOMIAL = "binomial"

    @classmethod
    def parse(cls, value: "str | LinkFamily") -> "LinkFamily":
        if isinstance(value, LinkFamily):
            return value
        key = str(value).strip().lower()
        aliases = {"gaussian": cls.GAUSSIAN, "normal": cls.GAUSSIAN,
                   "identity": cls.GAUSSIAN, "binomial": cls.BINOMIAL,
                   "logit": cls.BINOMIAL, "binary": cls.BINOMIAL}
        if key not in aliases:
            raise ValueError(f"unknown family {value!r}; expected 'gaussian' or 'binomial'")
        return aliases[key]

    @property
    def dispersion_free(self) -> bool:
        """True when the dispersion is estimated (Gaussian)."""
        return self is LinkFamily.GAUSSIAN

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self is LinkFamily.GAUSSIAN:
            return mu.copy()
        mu = np.clip(mu, MU_CLAMP, 1.0 - MU_CLAMP)
        return np.log(mu / (1.0 - mu))

    def inverse_link(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self is LinkFamily.GAUSSIAN:
            return eta.copy()
        # expit without overflow
        mu = np.empty_like(eta)
        pos = eta >= 0
        mu[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
        e = np.exp(eta[~pos])
        mu[~pos] = e / (1.0 + e)
        return np.clip(mu, MU_CLAMP, 1.0 - MU_CLAMP)

    def link_derivative(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self is LinkFamily.GAUSSIAN:
            return np.ones_like(mu)
        return 1.0 / (mu * (1.0 - mu))

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self is LinkFamily.GAUSSIAN:
            return np.ones_like(mu)
        return mu * (1.0 - mu)


def evaluate_family(family: LinkFamily, eta):
    """Return ``(mu, g_prime, nu)`` at the linear predictor ``eta``.

    Raises ``ValueError`` naming the first non-finite entry of ``eta``.
    """
    family = LinkFamily.parse(family)
    eta = np.asarray(eta, dtype=float)
    bad = np.flatnonzero(~np.isfinite(eta))
    if bad.size:
        raise ValueError(f"non-finite linear predictor at index {int(bad[0])}")
    mu = family.inverse_link(eta)
    return mu, family.link_derivative(mu), family.variance(mu)


def quasi_loglik(family: LinkFamily, y, mu, phi: float = 1.0, a=None):
    """Per-observation quasi-likelihood ``int_y^mu a (y - t) / (phi nu(t)) dt``."""
    family = LinkFamily.parse(family)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    a = np.ones_like(y) if a is None else np.asarray(a, dtype=float)
    if family is LinkFamily.GAUSSIAN:
        return -a * (y - mu) ** 2 / (2.0 * phi)
    # Bernoulli deviance form; y*log(y) terms vanish for y in {0, 1}
    with np.errstate(divide="ignore", invalid="ignore"):
        ty = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
        tn = np.where(y < 1, (1 - y) * np.log(np.where(y < 1, 1 - y, 1.0) / (1 - mu)), 0.0)
    return -a * (ty + tn) / phi
