"""Glue between activation dumps, spectra, recipes and filter selection."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import LayerMismatch
from .recipes import Recipe
from .selection import select_filters
from .spectral import Spectrum, compute_spectrum, kl_to_uniform, pool_responses


def thread_count() -> int:
    """Worker bound from ``PFA_THREADS``; defaults to the available cores."""
    try:
        n = int(os.environ.get("PFA_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def responses_of(dump, pool: str = "max") -> dict:
    return {e.layer_id: pool_responses(e.data, e.layer_id, pool) for e in dump.layers}


def analyze(dump, pool: str = "max", workers: int | None = None) -> list[Spectrum]:
    """Spectrum of every layer in the dump, in manifest order."""
    entries = list(dump.layers)
    return _map(lambda e: compute_spectrum(pool_responses(e.data, e.layer_id, pool)),
                entries, workers or thread_count())


def kl_values(spectra) -> dict:
    return {s.layer_id: (None if s.degenerate else kl_to_uniform(s)) for s in spectra}


def select(dump, recipe: Recipe, pool: str = "max", workers: int | None = None) -> Recipe:
    """Attach correlation-based kept indices to every recipe entry."""
    responses = responses_of(dump, pool)
    missing = [k for k in recipe.entries if k not in responses]
    if missing:
        raise LayerMismatch(f"dump has no responses for recipe layers {missing}")
    items = list(recipe.entries.items())
    for layer_id, e in items:
        if responses[layer_id].channels != e.channels:
            raise LayerMismatch(
                f"{layer_id}: dump has {responses[layer_id].channels} channels, recipe expects {e.channels}"
            )
    results = _map(lambda kv: select_filters(responses[kv[0]], kv[1].kept_count),
                   items, workers or thread_count())
    return recipe.with_indices({r.layer_id: r.kept_indices for r in results})
