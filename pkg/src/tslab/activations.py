"""Scalar activation functions and their first three derivatives.

All functions broadcast over numpy arrays. ``tanh`` follows the
``(1 - e^-x) / (1 + e^-x)`` convention, i.e. ``tanh(x / 2)``, and ``erf`` is
``erf(x / sqrt(2))`` so that ``E[erf(x)^2] = 1/3`` for standard Gaussian ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit, ndtr

SQRT2 = math.sqrt(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_NAMES = ("erf", "relu", "tanh", "sigmoid", "softplus", "gelu")

# beyond this beta*x the softplus log1p(exp) branch is replaced by its asymptote
_SOFTPLUS_CUTOFF = 30.0


class NonSmoothActivationError(ValueError):
    """Requested a derivative that the activation does not have."""


@dataclass(frozen=True)
class ActivationKind:
    """Activation tag; ``beta`` is only meaningful for softplus."""

    name: str
    beta: float | None = None

    def __post_init__(self):
        if self.name not in _NAMES:
            raise ValueError(f"unknown activation {self.name!r}; expected one of {_NAMES}")
        if self.name == "softplus":
            if self.beta is None:
                object.__setattr__(self, "beta", 1.0)
            if not self.beta > 0:
                raise ValueError(f"softplus beta must be positive, got {self.beta}")
        elif self.beta is not None:
            raise ValueError(f"{self.name} takes no parameter")

    @property
    def smooth(self) -> bool:
        return self.name != "relu"

    @property
    def odd(self) -> bool:
        return self.name in ("erf", "tanh")

    def __str__(self):
        if self.name == "softplus":
            return f"softplus:{self.beta:g}"
        return self.name

    @classmethod
    def parse(cls, text: str) -> "ActivationKind":
        """Parse ``"erf"``, ``"relu"``, ``"softplus:1.5"`` and friends."""
        name, _, param = text.strip().lower().partition(":")
        if name == "softplus":
            return cls("softplus", float(param) if param else 1.0)
        if param:
            raise ValueError(f"{name} takes no parameter")
        return cls(name)


ERF = ActivationKind("erf")
RELU = ActivationKind("relu")
TANH = ActivationKind("tanh")
SIGMOID = ActivationKind("sigmoid")
GELU = ActivationKind("gelu")


def softplus(beta: float = 1.0) -> ActivationKind:
    return ActivationKind("softplus", beta)


def _sigmoid_derivs(x, order):
    s = expit(x)
    if order == 0:
        return s
    q = s * (1.0 - s)
    if order == 1:
        return q
    if order == 2:
        return q * (1.0 - 2.0 * s)
    return q * (1.0 - 6.0 * s + 6.0 * s * s)


def _softplus(x, beta):
    bx = beta * x
    # log1p(exp(bx)) overflows for large bx; x + log1p(exp(-bx))/beta is exact there too
    safe = np.minimum(bx, _SOFTPLUS_CUTOFF)
    small = np.log1p(np.exp(safe)) / beta
    big = x + np.exp(-np.abs(bx)) / beta
    return np.where(bx > _SOFTPLUS_CUTOFF, big, small)


def eval(kind: ActivationKind, order: int, x):
    """Return the ``order``-th derivative (0..3) of the activation at ``x``."""
    if order not in (0, 1, 2, 3):
        raise ValueError(f"order must be in 0..3, got {order}")
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    name = kind.name

    if name == "erf":
        if order == 0:
            out = _erf(x / SQRT2)
        else:
            p = SQRT_2_OVER_PI * np.exp(-0.5 * x * x)
            out = (p, -x * p, (x * x - 1.0) * p)[order - 1]
    elif name == "relu":
        if order == 0:
            out = np.maximum(x, 0.0)
        elif order == 1:
            out = (x > 0).astype(float)
        else:
            if np.any(x == 0):
                raise NonSmoothActivationError(
                    f"relu derivative of order {order} is undefined at 0")
            out = np.zeros_like(x)
    elif name == "sigmoid":
        out = _sigmoid_derivs(x, order)
    elif name == "tanh":
        out = 2.0 * _sigmoid_derivs(x, order)
        if order == 0:
            out = out - 1.0
    elif name == "softplus":
        beta = kind.beta
        if order == 0:
            out = _softplus(x, beta)
        else:
            out = beta ** (order - 1) * _sigmoid_derivs(beta * x, order - 1)
    else:  # gelu: x * Phi(x)
        if order == 0:
            out = x * ndtr(x)
        else:
            p = INV_SQRT_2PI * np.exp(-0.5 * x * x)
            if order == 1:
                out = ndtr(x) + x * p
            elif order == 2:
                out = (2.0 - x * x) * p
            else:
                out = (x ** 3 - 4.0 * x) * p
    return float(out) if scalar else out


def sigma(kind: ActivationKind, x):
    return eval(kind, 0, x)


def sigma_prime(kind: ActivationKind, x):
    return eval(kind, 1, x)


def check_assumption_ii_integrand(kind: ActivationKind, x):
    """``sigma'(x) - x sigma''(x) + sigma'''(x)``.

    Positivity of this quantity is a sufficient condition for the interaction
    to satisfy ``u d2g/du2 < dg/du`` (erf only reaches zero at the origin).
    Only defined for the smooth monotone kinds.
    """
    if kind.name in ("relu", "gelu"):
        raise NonSmoothActivationError(
            f"the third-derivative condition is not checked for {kind.name}")
    return eval(kind, 1, x) - np.asarray(x) * eval(kind, 2, x) + eval(kind, 3, x)
