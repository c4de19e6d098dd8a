"""Standard normal helpers.

``scipy.special.ndtr`` is computed from ``erf``/``erfc`` and is accurate to
a few ulp over the whole line, which is what the equilibrium map needs.
"""

import numpy as np
from scipy.special import ndtr, ndtri

SQRT_2PI = np.sqrt(2.0 * np.pi)
PDF_MAX = 1.0 / SQRT_2PI


def norm_cdf(x):
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / SQRT_2PI


def norm_ppf(p):
    return ndtri(p)


def clamp(p, eps):
    """Clip probabilities into ``[eps, 1 - eps]``."""
    return np.clip(p, eps, 1.0 - eps)
