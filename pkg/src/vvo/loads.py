"""Voltage-dependent load models.

Two representations are supported. The ZIP model is quadratic in the voltage
magnitude and is what the reference power flow evaluates when a load carries
ZIP coefficients. The CVR model is affine in the *squared* voltage magnitude,
which is what lets it sit inside the linear and quadratic branch-flow models
without changing their type.

All voltages are per-unit with the nominal voltage normalised to 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

ZIP_SUM_TOL = 1e-9
CVR_TYPICAL_RANGE = (0.0, 6.0)

DEFAULT_CVR_P = 0.6
DEFAULT_CVR_Q = 3.0


@dataclass(frozen=True)
class ZipCoefficients:
    """Constant-impedance, constant-current and constant-power fractions.

    ``kp = (kp1, kp2, kp3)`` weight ``V**2``, ``V`` and ``1`` in the active
    demand; ``kq`` does the same for reactive demand. Each triple sums to one.
    """

    kp: tuple[float, float, float]
    kq: tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.kp) != 3 or len(self.kq) != 3:
            raise ValueError("ZIP coefficients need three entries for P and for Q")
        object.__setattr__(self, "kp", tuple(float(k) for k in self.kp))
        object.__setattr__(self, "kq", tuple(float(k) for k in self.kq))
        for name, ks in (("kp", self.kp), ("kq", self.kq)):
            if abs(sum(ks) - 1.0) > ZIP_SUM_TOL:
                raise ValueError(f"ZIP {name} coefficients sum to {sum(ks)!r}, expected 1")

    @classmethod
    def constant_power(cls) -> ZipCoefficients:
        return cls((0.0, 0.0, 1.0), (0.0, 0.0, 1.0))

    @classmethod
    def constant_current(cls) -> ZipCoefficients:
        return cls((0.0, 1.0, 0.0), (0.0, 1.0, 0.0))

    @classmethod
    def constant_impedance(cls) -> ZipCoefficients:
        return cls((1.0, 0.0, 0.0), (1.0, 0.0, 0.0))


@dataclass(frozen=True)
class CvrFactors:
    """Percent change in demand per percent change in voltage."""

    cvr_p: float
    cvr_q: float

    def __post_init__(self) -> None:
        lo, hi = CVR_TYPICAL_RANGE
        for name in ("cvr_p", "cvr_q"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise ValueError(f"{name} must be finite, got {val!r}")
            if not lo <= val <= hi:
                warnings.warn(f"{name}={val} outside typical range [{lo}, {hi}]", stacklevel=3)
            object.__setattr__(self, name, val)


# ZIP coefficients of the three load classes used in the load-mix studies.
LOAD_CLASSES: dict[str, ZipCoefficients] = {
    "residential": ZipCoefficients((0.96, -1.17, 1.21), (6.28, -10.16, 4.88)),
    "small_commercial": ZipCoefficients((0.77, -0.84, 1.07), (8.09, -13.65, 6.56)),
    "large_commercial": ZipCoefficients((0.4, -0.41, 1.01), (4.43, -7.99, 4.56)),
}


@dataclass(frozen=True)
class LoadState:
    """Nominal per-unit demand of one single-phase load and its model tag."""

    p0: float
    q0: float
    model: str = "cvr"

    def __post_init__(self) -> None:
        if self.model not in ("zip", "cvr"):
            raise ValueError(f"unknown load model {self.model!r}")
        if self.p0 < 0:
            raise ValueError("loads must have p0 >= 0; model generation as a DG")


def zip_to_cvr(z: ZipCoefficients) -> CvrFactors:
    """CVR factors equivalent to ``z`` at nominal voltage (slope of ZIP at V=1)."""
    return CvrFactors(2.0 * z.kp[0] + z.kp[1], 2.0 * z.kq[0] + z.kq[1])


def cvr_affine(s: LoadState, f: CvrFactors) -> tuple[float, float, float, float]:
    """Affine coefficients of the CVR model in the squared voltage magnitude.

    Returns ``(p_offset, p_slope, q_offset, q_slope)`` such that
    ``p = p_offset + p_slope * v_sq`` and likewise for ``q``.
    """
    hp = 0.5 * f.cvr_p * s.p0
    hq = 0.5 * f.cvr_q * s.q0
    return s.p0 - hp, hp, s.q0 - hq, hq


def eval_cvr_load(s: LoadState, f: CvrFactors, v_sq: float):
    """Evaluate the CVR load model at squared voltage ``v_sq``.

    Returns ``(p, q, coeffs)`` where ``coeffs`` is the tuple from
    :func:`cvr_affine`. Works elementwise when ``v_sq`` is an array.
    """
    coeffs = cvr_affine(s, f)
    p = coeffs[0] + coeffs[1] * v_sq
    q = coeffs[2] + coeffs[3] * v_sq
    return p, q, coeffs


def eval_zip_load(s: LoadState, z: ZipCoefficients, v):
    """Evaluate the ZIP load model at voltage magnitude ``v`` (not squared)."""
    kp, kq = z.kp, z.kq
    p = s.p0 * (kp[0] * v * v + kp[1] * v + kp[2])
    q = s.q0 * (kq[0] * v * v + kq[1] * v + kq[2])
    return p, q


def mix_cvr(weights: dict[str, float]) -> CvrFactors:
    """CVR factors of a composite load given class fractions.

    The CVR model is linear in the factors, so a load made of fractions
    ``w_k`` of classes ``k`` behaves exactly like a load with the weighted
    average factor.
    """
    total = sum(weights.values())
    if total <= 0:
        raise ValueError("load-mix weights must sum to a positive value")
    cp = cq = 0.0
    for name, w in weights.items():
        try:
            f = zip_to_cvr(LOAD_CLASSES[name])
        except KeyError:
            raise ValueError(f"unknown load class {name!r}; known: {sorted(LOAD_CLASSES)}") from None
        cp += w * f.cvr_p
        cq += w * f.cvr_q
    return CvrFactors(cp / total, cq / total)
