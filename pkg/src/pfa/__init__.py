"""Principal Filter Analysis: response-correlation driven structured pruning."""

from .arch import ArchSpec, LayerSpec, apply_recipe, cost, flops, footprint
from .recipes import Budget, Recipe, energy_at, recipe_en, recipe_en_for_budget, recipe_kl
from .selection import select_filters
from .spectral import ResponseMatrix, Spectrum, compute_spectrum, kl_to_uniform, pool_responses

__version__ = "0.1.0"
