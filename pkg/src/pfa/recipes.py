"""Per-layer compression recipes computed from response spectra.

Three strategies are provided:

* :func:`recipe_en` keeps, in every layer, the smallest number of filters
  whose leading spectral energy reaches a threshold ``tau``.
* :func:`recipe_en_for_budget` picks the largest threshold whose pruned
  model fits a parameter or FLOP budget.
* :func:`recipe_kl` is parameter-free: it maps the KL divergence between
  the spectrum and the uniform distribution linearly onto a keep ratio.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateSpectrum,
    EmptyInput,
    GammaOutOfRange,
    InfeasibleBudget,
    InvalidCount,
    InvalidInput,
    LayerMismatch,
    MissingIndices,
    TauOutOfRange,
)
from .spectral import Spectrum, kl_to_uniform

# float grid values like 2/3 may land a few ulps off k/C
_SNAP = Fraction(1, 2**40)


def kept_from_gamma(gamma: float, channels: int) -> int:
    """``ceil(gamma * channels)`` evaluated on exact rationals.

    Products within a negligible distance of an integer snap to it, so that
    a float such as ``2/3`` maps back to 2 of 3 filters.
    """
    x = Fraction(gamma) * channels
    n = round(x)
    if abs(x - n) <= _SNAP * channels:
        return int(n)
    return math.ceil(x)


class Divergence(enum.Enum):
    KL = "kl"
    # recognised but not implemented
    CHI2 = "chi2"
    WASSERSTEIN = "wasserstein"


@dataclass(frozen=True)
class Method:
    name: str  # "en" | "en_budget" | "kl" | "random" | "identity"
    tau: float | None = None
    budget_kind: str | None = None
    target: int | None = None

    def __str__(self):
        if self.name == "en":
            return f"en({self.tau:g})"
        if self.name == "en_budget":
            return f"en_budget({self.budget_kind}={self.target})"
        return self.name


@dataclass(frozen=True)
class LayerRecipe:
    gamma: float
    kept_count: int
    channels: int
    kept_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise GammaOutOfRange(f"gamma must lie in (0, 1], got {self.gamma!r}")
        if not (1 <= self.kept_count <= self.channels):
            raise InvalidCount(f"kept_count {self.kept_count} outside [1, {self.channels}]")
        if kept_from_gamma(self.gamma, self.channels) != self.kept_count:
            raise InvalidCount(
                f"kept_count {self.kept_count} != ceil({self.gamma!r} * {self.channels})"
            )
        if self.kept_indices is not None:
            idx = tuple(int(i) for i in self.kept_indices)
            if len(idx) != self.kept_count:
                raise InvalidCount(f"{len(idx)} kept indices for kept_count {self.kept_count}")
            if list(idx) != sorted(set(idx)) or (idx and (idx[0] < 0 or idx[-1] >= self.channels)):
                raise InvalidCount("kept_indices must be unique, sorted and within [0, C)")
            object.__setattr__(self, "kept_indices", idx)

    @classmethod
    def from_count(cls, kept_count: int, channels: int, kept_indices=None) -> "LayerRecipe":
        return cls(kept_count / channels, kept_count, channels, kept_indices)


@dataclass(frozen=True)
class Recipe:
    entries: Mapping[str, LayerRecipe]
    method: Method
    provenance: str = ""
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    def kept_counts(self) -> dict[str, int]:
        return {k: e.kept_count for k, e in self.entries.items()}

    def with_indices(self, indices: Mapping[str, Sequence[int]]) -> "Recipe":
        entries = dict(self.entries)
        for layer_id, idx in indices.items():
            if layer_id not in entries:
                raise LayerMismatch(f"no recipe entry for layer {layer_id!r}")
            entries[layer_id] = replace(entries[layer_id], kept_indices=tuple(sorted(idx)))
        return replace(self, entries=entries)

    def require_indices(self):
        missing = [k for k, e in self.entries.items() if e.kept_indices is None]
        if missing:
            raise MissingIndices(f"recipe lacks kept_indices for layers {missing}")


def identity_recipe(channels: Mapping[str, int], provenance: str = "") -> Recipe:
    entries = {
        k: LayerRecipe(1.0, c, c, tuple(range(c))) for k, c in channels.items()
    }
    return Recipe(entries, Method("identity"), provenance)


def energy_at(spectrum: Spectrum, gamma: float) -> float:
    """Energy retained by the leading ``ceil(gamma * C)`` eigenvalues."""
    if spectrum.degenerate:
        raise DegenerateSpectrum(f"{spectrum.layer_id}: energy undefined for a degenerate spectrum")
    if not (0.0 < gamma <= 1.0):
        raise GammaOutOfRange(f"gamma must lie in (0, 1], got {gamma!r}")
    k = kept_from_gamma(gamma, spectrum.channels)
    return float(spectrum.cumulative()[k - 1])


def _check_spectra(spectra: Sequence[Spectrum]):
    if not spectra:
        raise EmptyInput("at least one spectrum is required")
    ids = [s.layer_id for s in spectra]
    if len(set(ids)) != len(ids):
        raise InvalidInput(f"duplicate layer ids in spectra: {ids}")


def _en_count(spectrum: Spectrum, tau: float) -> int:
    return int(np.searchsorted(spectrum.cumulative(), tau, side="left")) + 1


def recipe_en(spectra: Sequence[Spectrum], tau: float, provenance: str = "") -> Recipe:
    _check_spectra(spectra)
    if not (0.0 < tau <= 1.0):
        raise TauOutOfRange(f"tau must lie in (0, 1], got {tau!r}")
    entries = {}
    warnings = []
    for s in spectra:
        if s.degenerate:
            k = 1
            warnings.append(f"{s.layer_id}: degenerate responses, kept 1 filter")
        else:
            k = _en_count(s, tau)
        entries[s.layer_id] = LayerRecipe.from_count(k, s.channels)
    return Recipe(entries, Method("en", tau=float(tau)), provenance, tuple(warnings))


@dataclass(frozen=True)
class Budget:
    kind: str  # "params" | "flops"
    target: int

    def __post_init__(self):
        if self.kind not in ("params", "flops"):
            raise InvalidInput(f"budget kind must be 'params' or 'flops', got {self.kind!r}")
        if self.target <= 0:
            raise InvalidInput("budget target must be positive")


def energy_breakpoints(spectra: Sequence[Spectrum]) -> list[float]:
    """Distinct prefix energies of all layers, in decreasing order.

    ``recipe_en`` changes only at these values, so scanning them covers
    every distinct recipe.
    """
    points = set()
    for s in spectra:
        if not s.degenerate:
            points.update(float(v) for v in s.cumulative())
    return sorted(points, reverse=True)


def recipe_en_for_budget(spectra: Sequence[Spectrum], arch, budget: Budget,
                         provenance: str = "") -> Recipe:
    """Largest-threshold PFA-En recipe whose pruned model fits ``budget``."""
    from .arch import cost_of_counts  # arch imports recipes

    _check_spectra(spectra)
    analyzable = {l.id: l for l in arch.layers if l.analyzable}
    full_channels = arch.output_channels()
    for s in spectra:
        if s.layer_id not in analyzable:
            raise LayerMismatch(f"layer {s.layer_id!r} is not an analyzable layer of the architecture")
        if full_channels[s.layer_id] != s.channels:
            raise LayerMismatch(
                f"layer {s.layer_id!r}: spectrum has {s.channels} channels, "
                f"architecture has {full_channels[s.layer_id]}"
            )

    def cost(counts):
        return getattr(cost_of_counts(arch, counts), budget.kind)

    minimal = cost({s.layer_id: 1 for s in spectra})
    if minimal > budget.target:
        raise InfeasibleBudget(
            f"target {budget.kind}={budget.target} is below the minimal model cost {minimal}"
        )
    chosen = None
    for tau in energy_breakpoints(spectra):
        r = recipe_en(spectra, tau)
        if cost(r.kept_counts()) <= budget.target:
            chosen = r
            break
    if chosen is None:
        # no breakpoints: every layer is degenerate and keeps one filter anyway
        chosen = recipe_en(spectra, 1.0)
    method = Method("en_budget", tau=chosen.method.tau, budget_kind=budget.kind, target=budget.target)
    return replace(chosen, method=method, provenance=provenance)


def kl_gamma(spectrum: Spectrum, base: float = math.e) -> float:
    """Unclamped keep ratio ``1 - KL(lambda, u) / ln C`` (0 for C = 1 is never used)."""
    if spectrum.degenerate:
        raise DegenerateSpectrum(f"{spectrum.layer_id}: KL undefined for a degenerate spectrum")
    C = spectrum.channels
    if C == 1:
        return 1.0
    if base == math.e:
        kl, upper = kl_to_uniform(spectrum), math.log(C)
    else:
        lam = spectrum.values[spectrum.values > 0]
        kl = float(np.sum(lam * (np.log(lam * C) / math.log(base))))
        upper = math.log(C) / math.log(base)
    return min(max(1.0 - kl / upper, 0.0), 1.0)


def recipe_kl(spectra: Sequence[Spectrum], provenance: str = "",
              divergence: Divergence = Divergence.KL) -> Recipe:
    _check_spectra(spectra)
    if divergence is not Divergence.KL:
        raise NotImplementedError(f"divergence {divergence.value!r} is not implemented")
    entries = {}
    warnings = []
    for s in spectra:
        C = s.channels
        if C == 1:
            entries[s.layer_id] = LayerRecipe(1.0, 1, 1)
            continue
        if s.degenerate:
            warnings.append(f"{s.layer_id}: degenerate responses, kept 1 filter")
            entries[s.layer_id] = LayerRecipe.from_count(1, C)
            continue
        gamma = kl_gamma(s)
        if gamma == 0.0:
            warnings.append(f"{s.layer_id}: keep ratio 0 (fully correlated), clamped to 1 filter")
            entries[s.layer_id] = LayerRecipe.from_count(1, C)
            continue
        entries[s.layer_id] = LayerRecipe(gamma, kept_from_gamma(gamma, C), C)
    return Recipe(entries, Method("kl"), provenance, tuple(warnings))
