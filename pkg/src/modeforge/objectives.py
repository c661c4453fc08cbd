"""Transmission-target objectives over per-wavelength S-matrices.

Each objective is a sum of per-entry terms. A term either targets a magnitude,
``(t - |S|)**2``, or penalises power, ``|S|**2``. ``evaluate`` also returns the
derivative ``D`` with ``df = Re(sum(D * dS))`` for the adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .fdfd import ScatteringMatrix

SQRT_HALF = float(np.sqrt(0.5))
# |S| has no derivative at S = 0. Below this magnitude the term takes the zero
# subgradient, so parity-forbidden entries of a symmetric design (round-off
# sized, random phase) do not inject an asymmetric gradient.
KINK_TOL = 1e-9


@dataclass(frozen=True)
class Term:
    monitor: int
    source: int
    target: float | None  # None = crosstalk power term |S|^2

    def value(self, s: complex) -> float:
        mag = abs(s)
        if self.target is None:
            return mag**2
        return (self.target - mag) ** 2

    def derivative(self, s: complex) -> complex:
        if self.target is None:
            return 2.0 * np.conj(s)
        mag = abs(s)
        if mag < KINK_TOL:
            return 0.0
        return -2.0 * (self.target - mag) * np.conj(s) / mag


@dataclass(frozen=True)
class Objective:
    terms: tuple[Term, ...]
    wavelengths: tuple[float, ...]
    name: str = "general"

    def _lookup(self, smatrices):
        by_wl = {}
        for sm in smatrices:
            by_wl[round(sm.wavelength, 15)] = sm
        out = []
        for wl in self.wavelengths:
            sm = by_wl.get(round(wl, 15))
            if sm is None:
                raise ConfigurationError(f"no S-matrix at wavelength {wl * 1e9:.1f} nm")
            for t in self.terms:
                if (t.monitor, t.source) not in sm:
                    raise ConfigurationError(
                        f"missing S{t.monitor}{t.source} at {wl * 1e9:.1f} nm")
            out.append(sm)
        return out

    def __call__(self, smatrices) -> float:
        return self.evaluate(smatrices)[0]

    def evaluate(self, smatrices) -> tuple[float, list[np.ndarray]]:
        total = 0.0
        derivs = []
        for sm in self._lookup(smatrices):
            d = np.zeros(sm.entries.shape, dtype=complex)
            for t in self.terms:
                i, j = sm.monitors.index(t.monitor), sm.sources.index(t.source)
                s = sm.entries[i, j]
                total += t.value(s)
                d[i, j] += t.derivative(s)
            derivs.append(d)
        return float(total), derivs

    def residuals(self, smatrices) -> np.ndarray:
        """Per-term ``t - |S|`` (or ``|S|`` for crosstalk terms), all wavelengths."""
        out = []
        for sm in self._lookup(smatrices):
            for t in self.terms:
                mag = abs(sm[t.monitor, t.source])
                out.append(mag if t.target is None else t.target - mag)
        return np.array(out)

    def scaled(self, weight: float) -> "WeightedObjective":
        return WeightedObjective(self, weight)


@dataclass(frozen=True)
class WeightedObjective:
    base: Objective
    weight: float

    @property
    def wavelengths(self):
        return self.base.wavelengths

    def __call__(self, smatrices):
        return self.weight * self.base(smatrices)

    def evaluate(self, smatrices):
        f, d = self.base.evaluate(smatrices)
        return self.weight * f, [self.weight * x for x in d]

    def residuals(self, smatrices):
        return self.base.residuals(smatrices)


def general(targets: dict, wavelengths) -> Objective:
    """``sum_lambda sum_m sum_s (t_ms - |S_ms|)**2`` for ``targets[(m, s)] = t_ms``."""
    for (m, s), t in targets.items():
        if not 0.0 <= t <= 1.0:
            raise ConfigurationError(f"target t{m}{s}={t} outside [0, 1]")
    sources = {s for _, s in targets}
    for s in sources:
        total = sum(t**2 for (_, ss), t in targets.items() if ss == s)
        if total > 1 + 1e-12:
            raise ConfigurationError(f"targets for source {s} exceed unit power ({total:.4f})")
    terms = tuple(Term(m, s, float(t)) for (m, s), t in sorted(targets.items()))
    return Objective(terms, tuple(float(w) for w in wavelengths), "general")


def mbs(wavelengths=(1550e-9,)) -> Objective:
    """Balanced two-mode beamsplitter: every output mode targets sqrt(0.5)."""
    obj = general({(m, s): SQRT_HALF for m in (3, 4) for s in (1, 2)}, wavelengths)
    return Objective(obj.terms, obj.wavelengths, "mbs")


def mdm(wavelengths=(1550e-9,)) -> Objective:
    """Mode multiplexer: unit transmission 1->3 and 1->4, crosstalk power 3<-2, 4<-2."""
    terms = (Term(3, 1, 1.0), Term(4, 1, 1.0), Term(3, 2, None), Term(4, 2, None))
    return Objective(terms, tuple(float(w) for w in wavelengths), "mdm")


def tritter(wavelengths=(1550e-9,), sources=(1, 2, 3), monitors=(4, 5, 6)) -> Objective:
    t = 1.0 / np.sqrt(3.0)
    obj = general({(m, s): t for m in monitors for s in sources}, wavelengths)
    return Objective(obj.terms, obj.wavelengths, "tritter")


def objective_general(smatrices, config) -> float:
    return general(config.targets, config.wavelengths)(smatrices)


def objective_mbs(smatrices, config=None) -> float:
    wls = config.wavelengths if config is not None else [sm.wavelength for sm in smatrices]
    return mbs(wls)(smatrices)


def objective_mdm(smatrices) -> float:
    return mdm([sm.wavelength for sm in smatrices])(smatrices)


def objective_tritter(smatrices, sources=(1, 2, 3), monitors=(4, 5, 6)) -> float:
    return tritter([sm.wavelength for sm in smatrices], sources, monitors)(smatrices)


def from_matrix(wavelength: float, monitors, sources, entries) -> ScatteringMatrix:
    return ScatteringMatrix(wavelength, monitors, sources, np.asarray(entries, dtype=complex))
