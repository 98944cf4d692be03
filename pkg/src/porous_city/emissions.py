"""Instantaneous vehicle emissions from macroscopic traffic fields.

Microscopic speed U [m/s] and tangential acceleration a [m/s²] feed the
regression polynomial E = max(f1 + f2 U + f3 U² + f4 a + f5 a² + f6 U a, 0)
[g/veh/s]; the emission concentration is EC = 3.6 ρ E [kg/km²/h].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import GAMMA1, GAMMA2, Coefficients


class MissingCoefficients(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmissionFields:
    U: np.ndarray
    a: np.ndarray
    E: np.ndarray
    EC: np.ndarray


def scalar_speed(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.hypot(u[:, 0], u[:, 1]) / GAMMA1


def scalar_acceleration(a_vec: np.ndarray, u: np.ndarray, U: np.ndarray, u_eps: float = 1e-3) -> np.ndarray:
    """Acceleration along the direction of travel, in m/s².

    a = γ2 (a_vec·u) / (γ1 U) with a_vec in km/h², u in km/h and U in m/s;
    zero where U < u_eps.
    """
    U = np.asarray(U, dtype=np.float64)
    dot = np.einsum("nd,nd->n", np.asarray(a_vec, dtype=np.float64), np.asarray(u, dtype=np.float64))
    out = np.zeros_like(U)
    ok = U >= u_eps
    out[ok] = GAMMA2 * dot[ok] / (GAMMA1 * U[ok])
    return out


def _coeffs(coeffs) -> tuple[float, ...]:
    if coeffs is None:
        raise MissingCoefficients("no emission coefficients given")
    f = coeffs.f if isinstance(coeffs, Coefficients) else coeffs
    f = tuple(float(x) for x in f)
    if len(f) != 6:
        raise MissingCoefficients(f"expected six coefficients f1..f6, got {len(f)}")
    return f


def instantaneous_emission(U, a, coeffs) -> np.ndarray:
    f1, f2, f3, f4, f5, f6 = _coeffs(coeffs)
    U = np.asarray(U, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    # nested in U, then in a
    E = f1 + U * (f2 + f3 * U + f6 * a) + a * (f4 + f5 * a)
    return np.maximum(E, 0.0)


def emission_concentration(rho, E) -> np.ndarray:
    return np.asarray(rho, dtype=np.float64) * np.asarray(E, dtype=np.float64) * GAMMA1


def emission_fields(rho, u, a_vec, coeffs, u_eps: float = 1e-3) -> EmissionFields:
    U = scalar_speed(u)
    a = scalar_acceleration(a_vec, u, U, u_eps)
    E = instantaneous_emission(U, a, coeffs)
    return EmissionFields(U, a, E, emission_concentration(rho, E))


def emission_series(run, coeffs, u_eps: float = 1e-3) -> tuple[np.ndarray, list[EmissionFields]]:
    """Emission fields at every recorded instant of a traffic run."""
    fields = [emission_fields(s.rho, s.u, a, coeffs, u_eps) for s, a in zip(run.states, run.accel)]
    return np.asarray(run.times, dtype=np.float64), fields
