"""Structural and residual-error models, and the string registry used by configs."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """Raised when a model is evaluated outside its admissible parameter region."""


class NumericalError(ArithmeticError):
    """Raised when a covariance or likelihood computation cannot be completed."""


# |V*Ka - Cl| below this fraction of Cl uses the analytic V*Ka == Cl limit
FLIP_POINT_RTOL = 1e-8


def _one_cpt_oral(t, V, Ka, Cl, dose):
    denom = V * Ka - Cl
    near = np.abs(denom) < FLIP_POINT_RTOL * Cl
    safe = np.where(near, 1.0, denom)
    ke = Cl / V
    regular = dose * Ka / safe * (np.exp(-ke * t) - np.exp(-Ka * t))
    limit = dose * Ka * t / V * np.exp(-Ka * t)
    return np.where(near, limit, regular)


def predict_theophylline(t, V, Ka, Cl, dose):
    """One-compartment model with first-order absorption and elimination.

    Returns ``D*Ka/(V*Ka - Cl) * (exp(-Cl/V*t) - exp(-Ka*t))``; when ``V*Ka``
    and ``Cl`` coincide to within a relative 1e-8 the analytic limit
    ``D*Ka*t/V*exp(-Ka*t)`` is used instead.
    """
    t, V, Ka, Cl, dose = np.broadcast_arrays(*map(np.asarray, (t, V, Ka, Cl, dose)))
    if np.any(V <= 0) or np.any(Ka <= 0) or np.any(Cl <= 0):
        raise DomainError("V, Ka and Cl must be positive")
    if np.any(t < 0):
        raise DomainError("time must be non-negative")
    out = _one_cpt_oral(t.astype(float), V, Ka, Cl, dose)
    return out[()] if out.ndim == 0 else out


def _zero_order_ss(t, V, Ta, Cl, dose, tau):
    ke = Cl / V
    during = t < Ta
    # NaN outside the admissible region so samplers reject instead of raising
    bad = (Ta >= tau) | ~(tau > 0)
    first = np.where(during, 1.0 - np.exp(-ke * t), 0.0)
    carry = (
        np.exp(-ke * tau * during)
        * (1.0 - np.exp(-ke * Ta))
        * np.exp(-ke * (t - Ta))
        / (1.0 - np.exp(-ke * tau))
    )
    out = dose / (Ta * Cl) * (first + carry)
    return np.where(bad, np.nan, out)


def predict_zero_order_ss(t, V, Ta, Cl, dose, tau):
    """Steady-state concentration for repeated zero-order infusions of length ``Ta``.

    ``V`` and ``Cl`` are the apparent values ``V/F`` and ``Cl/F``; ``tau`` is the
    dosing interval and ``t`` the time since the last dose.
    """
    t, V, Ta, Cl, dose, tau = np.broadcast_arrays(
        *map(np.asarray, (t, V, Ta, Cl, dose, tau))
    )
    if np.any(V <= 0) or np.any(Ta <= 0) or np.any(Cl <= 0) or np.any(tau <= 0):
        raise DomainError("V/F, Ta, Cl/F and tau must be positive")
    if np.any(Ta >= tau):
        raise DomainError("absorption duration Ta must be shorter than tau")
    if np.any(t < 0) or np.any(t > tau):
        raise DomainError("time must lie in [0, tau]")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _zero_order_ss(t.astype(float), V, Ta, Cl, dose, tau)
    return out[()] if out.ndim == 0 else out


def _theophylline_natural(t, V, Ka, AUC, dose, tau):
    return _one_cpt_oral(t, V, Ka, dose / AUC, dose)


def _zero_order_natural(t, V, Ta, AUC, dose, tau):
    return _zero_order_ss(t, V, Ta, dose / AUC, dose, tau)


@dataclass(frozen=True)
class StructuralModel:
    """A regression function f(t, phi) evaluated on sampling-scale parameters.

    ``function`` receives the natural-scale parameters (one array per entry of
    ``param_names``) followed by dose and dosing interval. ``transform`` maps
    the sampling scale to the natural scale elementwise.
    """

    name: str
    param_names: tuple[str, ...]
    function: Callable
    transform: Callable[[np.ndarray], np.ndarray] = np.exp
    requires_tau: bool = False

    def __post_init__(self):
        if len(self.param_names) < 1:
            raise ValueError("a structural model needs at least one parameter")

    @property
    def p(self) -> int:
        return len(self.param_names)

    def predict(self, t, phi, dose, tau=None):
        """Predictions at times ``t[..., J]`` for parameters ``phi[..., p]``.

        Leading dimensions of ``phi``, ``dose`` and ``tau`` broadcast against
        those of ``t``; non-finite values are returned rather than raised.
        """
        phi = np.asarray(phi, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            nat = self.transform(phi)
            cols = [nat[..., j, None] for j in range(self.p)]
            dose = np.asarray(dose, dtype=float)[..., None]
            tau = np.nan if tau is None else np.asarray(tau, dtype=float)[..., None]
            return self.function(t, *cols, dose, tau)


@dataclass(frozen=True)
class ErrorModel:
    """Residual scale g(t, phi) expressed through the prediction f(t, phi)."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("constant", "proportional", "combined"):
            raise ValueError(f"unknown error model kind {self.kind!r}")

    def g(self, f):
        if self.kind == "constant":
            return np.ones_like(f)
        if self.kind == "proportional":
            return f
        return 1.0 + f


@dataclass(frozen=True)
class NLMEModel:
    """A structural model paired with its residual error model."""

    structural: StructuralModel
    error: ErrorModel = field(default_factory=lambda: ErrorModel("constant"))

    @property
    def p(self) -> int:
        return self.structural.p

    def predict(self, data, phi, unit=None):
        """Predictions on the dataset grid: ``phi`` is ``(..., n, K, p)`` or ``(..., n, p)`` with ``unit``."""
        if unit is None:
            return self.structural.predict(data.times, phi, data.dose, data.tau)
        return self.structural.predict(
            data.times[:, unit], phi, data.dose[:, unit], data.tau[:, unit]
        )

    def weighted_residuals(self, data, phi, unit=None):
        """Returns ``(f, g, r)`` with ``r = (y - f)/g`` zeroed on padded entries."""
        f = self.predict(data, phi, unit)
        g = self.error.g(f)
        y = data.y if unit is None else data.y[:, unit]
        mask = data.mask if unit is None else data.mask[:, unit]
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(mask, (y - f) / g, 0.0)
        return f, g, r

    def unit_logliks(self, data, phi, sigma2, unit=None):
        """Gaussian log-likelihood of each (subject, unit) block of observations.

        Blocks whose prediction or scale is non-finite (or whose scale is zero)
        get ``-inf`` so that a Metropolis step rejects them.
        """
        f, g, r = self.weighted_residuals(data, phi, unit)
        mask = data.mask if unit is None else data.mask[:, unit]
        with np.errstate(invalid="ignore", divide="ignore"):
            terms = np.where(
                mask, np.log(2.0 * np.pi * sigma2 * g * g) + r * r / sigma2, 0.0
            )
            ll = -0.5 * terms.sum(axis=-1)
        return np.where(np.isfinite(ll), ll, -np.inf)


STRUCTURAL_MODELS: dict[str, StructuralModel] = {
    "theophylline_1cpt_oral": StructuralModel(
        name="theophylline_1cpt_oral",
        param_names=("logV", "logKa", "logAUC"),
        function=_theophylline_natural,
    ),
    "zero_order_ss": StructuralModel(
        name="zero_order_ss",
        param_names=("logV_F", "logTa", "logAUC"),
        function=_zero_order_natural,
        requires_tau=True,
    ),
}


def register_model(model: StructuralModel) -> None:
    STRUCTURAL_MODELS[model.name] = model


def get_structural(name: str) -> StructuralModel:
    try:
        return STRUCTURAL_MODELS[name]
    except KeyError:
        raise KeyError(
            f"unknown structural model {name!r}; known: {sorted(STRUCTURAL_MODELS)}"
        ) from None


def get_model(structural: str, error: str = "constant") -> NLMEModel:
    return NLMEModel(get_structural(structural), ErrorModel(error))
