"""Desk-scale compression study on the reference network.

The harness trains the full model over several seeds, dumps responses of
the best one, derives PFA-En and PFA-KL recipes, fine-tunes each compressed
net from the selected filters and from scratch, and compares against
randomly pruned nets of matched footprint. An optional arm repeats the
analysis on a class subset (domain adaptation).
"""

from __future__ import annotations

import csv
import io as _io
import logging
import tempfile
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .. import io as pio
from ..arch import ArchSpec, apply_recipe, cost, cost_of_counts, simple_cnn_mini
from ..errors import InvalidParams
from ..pipeline import analyze, select
from ..recipes import LayerRecipe, Method, Recipe, recipe_en, recipe_kl
from .data import generate_dataset
from .network import Network, init_weights
from .train import TrainConfig, train

log = logging.getLogger(__name__)

CSV_COLUMNS = ("variant", "init", "mean_acc", "std_acc", "min_acc", "max_acc",
               "params_pct", "flops_pct", "seeds")


def capture_points(arch: ArchSpec) -> dict[str, str]:
    """Analyzable layer id -> id of the tensor whose responses get recorded.

    Responses are taken after the batchnorm/ReLU that directly follow a
    layer, i.e. at the end of its conv-bn-relu unit. A residual block whose
    last conv feeds a padding skip is therefore recorded before the add.
    """
    points = {}
    layers = arch.layers
    prunable = arch.output_channels()
    for i, l in enumerate(layers):
        if l.id not in prunable:
            continue
        j = i
        while j + 1 < len(layers) and layers[j + 1].kind in ("batchnorm", "relu"):
            j += 1
        points[l.id] = layers[j].id
    return points


def classifier_id(arch: ArchSpec) -> str:
    return [l.id for l in arch.layers if l.analyzable][-1]


def dump_activations(arch: ArchSpec, weights, dataset, out_dir, include_classifier: bool = False,
                     batch_size: int = 256):
    """Record responses of every analyzable layer over ``dataset`` and write a dump.

    The classifier (last analyzable layer) is skipped unless asked for.
    """
    points = capture_points(arch)
    if not include_classifier:
        points.pop(classifier_id(arch))
    net = Network(arch, weights)
    captured = net.capture(dataset.images, list(points.values()), batch_size)
    tensors = {layer_id: captured[t] for layer_id, t in points.items()}
    meta = {"capture": points, "capture_stage": "after batchnorm/relu following the layer",
            "dataset_seed": dataset.seed, "split": dataset.split,
            "num_classes": dataset.num_classes}
    manifest = pio.save_dump(out_dir, tensors, meta)
    return pio.load_dump(manifest)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    num_classes: int = 4
    n_train: int = 1600
    n_test: int = 600
    n_dump: int = 1000
    image_size: int = 16
    noise: float = 0.7
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6, decay_epochs=4))
    finetune_epochs: int = 3
    full_seeds: int = 3
    seeds: int = 5
    taus: tuple[float, ...] = (0.95,)
    kl: bool = True
    random_trials: int = 20
    random_match: tuple[str, ...] | None = None  # recipe variants to match; None = all
    random_inits: tuple[str, ...] = ("filter_selection",)
    random_tolerance: float = 0.02
    domain_adapt: bool = False
    domain_classes: tuple[int, ...] = (0, 1)
    pool: str = "max"
    workers: int = 1

    def __post_init__(self):
        if self.full_seeds < 1 or self.seeds < 1 or self.random_trials < 0:
            raise InvalidParams("seed and trial counts must be positive")
        if not set(self.random_inits) <= {"filter_selection", "random"}:
            raise InvalidParams("random_inits must be drawn from {'filter_selection', 'random'}")

    @classmethod
    def quick(cls, seed: int = 7, **kw) -> "ExperimentConfig":
        """Small preset for smoke runs (seconds, not minutes)."""
        base = dict(seed=seed, n_train=400, n_test=200, n_dump=200, full_seeds=1, seeds=2,
                    random_trials=2, finetune_epochs=1,
                    train=TrainConfig(epochs=2, decay_epochs=2))
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class ReportRow:
    variant: str
    init: str
    mean_acc: float
    std_acc: float
    min_acc: float
    max_acc: float
    params_pct: float
    flops_pct: float
    seeds: int
    accuracies: tuple[float, ...] = ()
    kept: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    full_accuracy: float
    full_params: int
    full_flops: int
    recipes: dict  # variant -> {layer: kept_count}
    domain_recipes: dict = field(default_factory=dict)
    nearest_centroid: float | None = None
    elapsed: float = 0.0

    def row(self, variant: str, init: str) -> ReportRow:
        for r in self.rows:
            if r.variant == variant and r.init == init:
                return r
        raise KeyError((variant, init))

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.variant, r.init, f"{r.mean_acc:.6f}", f"{r.std_acc:.6f}",
                        f"{r.min_acc:.6f}", f"{r.max_acc:.6f}", f"{r.params_pct:.4f}",
                        f"{r.flops_pct:.4f}", r.seeds])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"full model: accuracy {self.full_accuracy:.4f}, "
                 f"{self.full_params} params, {self.full_flops} FLOPs"]
        if self.nearest_centroid is not None:
            lines.append(f"nearest-centroid baseline on pixels: {self.nearest_centroid:.4f}")
        lines.append("")
        lines.append(f"{'variant':<28}{'init':<18}{'acc':>8}{'std':>8}{'params%':>9}{'flops%':>9}{'n':>4}")
        for r in self.rows:
            lines.append(f"{r.variant:<28}{r.init:<18}{r.mean_acc:>8.4f}{r.std_acc:>8.4f}"
                         f"{r.params_pct:>9.2f}{r.flops_pct:>9.2f}{r.seeds:>4}")
        for title, recipes in (("recipes", self.recipes), ("domain recipes", self.domain_recipes)):
            if recipes:
                lines.append("")
                lines.append(f"{title} (kept filters per layer):")
                for name, counts in recipes.items():
                    lines.append(f"  {name}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
        return "\n".join(lines) + "\n"


def _seed(base: int, tag: str, index: int = 0) -> int:
    return int(np.random.SeedSequence([base, zlib.crc32(tag.encode()), index]).generate_state(1)[0])


def _train_cell(args):
    arch, weights, data, cfg = args
    with threadpool_limits(limits=1):
        return train(arch, weights, data[0], cfg, test=data[1])


def _run(cells, workers):
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_train_cell, cells))
    return [_train_cell(c) for c in cells]


def _row(variant, init, accs, arch, full_cost, kept=None) -> ReportRow:
    c = cost(arch) if isinstance(arch, ArchSpec) else arch
    a = np.array(accs, dtype=np.float64)
    return ReportRow(variant, init, float(a.mean()), float(a.std()), float(a.min()), float(a.max()),
                     100.0 * c.params / full_cost.params, 100.0 * c.flops / full_cost.flops,
                     len(accs), tuple(float(x) for x in accs), dict(kept or {}))


def random_counts(arch: ArchSpec, layer_ids, target_params: int, rng, tol: float = 0.02,
                  max_tries: int = 2000) -> dict[str, int]:
    """Random per-layer filter counts whose pruned model has ``target_params`` +- ``tol``.

    Each try draws a random keep fraction per layer, then rescales all of
    them by a common factor (bisection) to land on the target.
    """
    widths = arch.output_channels()
    caps = np.array([widths[k] for k in layer_ids])

    def counts_for(frac, alpha):
        kept = np.clip(np.ceil(alpha * frac * caps), 1, caps).astype(int)
        return dict(zip(layer_ids, kept.tolist()))

    def params(counts):
        return cost_of_counts(arch, counts).params

    for _ in range(max_tries):
        frac = rng.uniform(0.05, 1.0, size=len(caps))
        lo, hi = 0.0, 1.0 / frac.min()
        for _ in range(40):
            mid = (lo + hi) / 2
            if params(counts_for(frac, mid)) < target_params:
                lo = mid
            else:
                hi = mid
        for alpha in (lo, hi):
            counts = counts_for(frac, alpha)
            if abs(params(counts) - target_params) <= tol * target_params:
                return counts
    raise InvalidParams(f"no random pruning within {tol:.0%} of {target_params} params")


def _finetune_cells(parch, pweights, data, cfg, seeds, tag, base):
    """Cells for filter-selection and random initialisation of one compressed arch."""
    fs = [(parch, pweights, data, replace(cfg, seed=_seed(base, tag + "/fs", s)))
          for s in range(seeds)]
    rnd = [(parch, init_weights(parch, _seed(base, tag + "/init", s)), data,
            replace(cfg, seed=_seed(base, tag + "/rs", s))) for s in range(seeds)]
    return fs, rnd


def _indexed(arch, counts, responses_dump, pool, method="random") -> Recipe:
    widths = arch.output_channels()
    r = Recipe({k: LayerRecipe.from_count(n, widths[k]) for k, n in counts.items()}, Method(method))
    return select(responses_dump, r, pool, workers=1)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    t0 = time.perf_counter()
    cfg = config
    shape = (cfg.image_size, cfg.image_size, 3)
    train_set = generate_dataset(cfg.seed, cfg.num_classes, cfg.n_train, shape, "train", cfg.noise)
    test_set = generate_dataset(cfg.seed, cfg.num_classes, cfg.n_test, shape, "test", cfg.noise)
    data = (train_set, test_set)
    arch = simple_cnn_mini(cfg.num_classes, shape)
    full_cost = cost(arch)
    ft_cfg = replace(cfg.train, epochs=cfg.finetune_epochs)

    from .data import nearest_centroid_accuracy

    centroid = nearest_centroid_accuracy(train_set, test_set)

    # (1) full model over several initialisations, keep the best
    cells = [(arch, init_weights(arch, _seed(cfg.seed, "full/init", s)), data,
              replace(cfg.train, seed=_seed(cfg.seed, "full/sgd", s))) for s in range(cfg.full_seeds)]
    results = _run(cells, cfg.workers)
    accs = [a for _, a in results]
    best = int(np.argmax(accs))
    full_w, full_acc = results[best]
    rows = [_row("full", "random", accs, arch, full_cost)]
    log.info("full model accuracies %s", accs)

    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        work = Path(tmp.name)
    else:
        work = Path(out_dir)
    try:
        dump_set = replace(train_set, images=train_set.images[:cfg.n_dump],
                           labels=train_set.labels[:cfg.n_dump])
        dump = dump_activations(arch, full_w, dump_set, work / "dump_full")
        spectra = analyze(dump, cfg.pool, workers=1)

        # (2) recipes
        recipes = {}
        for tau in cfg.taus:
            recipes[f"pfa_en({tau:g})"] = recipe_en(spectra, tau, "dump_full")
        if cfg.kl:
            recipes["pfa_kl"] = recipe_kl(spectra, "dump_full")
        for name, r in recipes.items():
            recipes[name] = select(dump, r, cfg.pool, workers=1)
            pio.save_recipe(recipes[name], work / f"recipe_{name}.json")

        # (3) fine-tuning from selected filters vs from scratch
        pending = []
        cells = []
        for name, r in recipes.items():
            parch, pw = apply_recipe(arch, full_w, r)
            fs, rnd = _finetune_cells(parch, pw, data, ft_cfg, cfg.seeds, name, cfg.seed)
            pending.append((name, parch, r.kept_counts(), len(cells)))
            cells += fs + rnd
        results = _run(cells, cfg.workers)
        for name, parch, kept, start in pending:
            accs = [a for _, a in results[start:start + 2 * cfg.seeds]]
            rows.append(_row(name, "filter_selection", accs[:cfg.seeds], parch, full_cost, kept))
            rows.append(_row(name, "random", accs[cfg.seeds:], parch, full_cost, kept))

        # (4) random pruning at matched footprints
        layer_ids = dump.layer_ids
        match = cfg.random_match if cfg.random_match is not None else tuple(recipes)
        targets = {}
        for name in match:
            p = cost_of_counts(arch, recipes[name].kept_counts()).params
            targets.setdefault(p, name)
        for target, name in targets.items():
            rng = np.random.default_rng(_seed(cfg.seed, "random/" + name))
            trials = [random_counts(arch, layer_ids, target, rng, cfg.random_tolerance)
                      for _ in range(cfg.random_trials)]
            if not trials:
                continue
            cells, archs = [], []
            for t, counts in enumerate(trials):
                r = _indexed(arch, counts, dump, cfg.pool)
                parch, pw = apply_recipe(arch, full_w, r)
                archs.append(parch)
                for init in cfg.random_inits:
                    w = pw if init == "filter_selection" else init_weights(
                        parch, _seed(cfg.seed, f"random/{name}/init", t))
                    cells.append((parch, w, data, replace(ft_cfg, seed=_seed(cfg.seed, f"random/{name}/sgd", t))))
            results = _run(cells, cfg.workers)
            n_init = len(cfg.random_inits)
            mean_cost = type(full_cost)(
                params=int(np.mean([cost(a).params for a in archs])),
                flops=int(np.mean([cost(a).flops for a in archs])))
            pct = 100.0 * target / full_cost.params
            for j, init in enumerate(cfg.random_inits):
                accs = [a for _, a in results[j::n_init]]
                rows.append(_row(f"random({pct:.1f}%)", init, accs, mean_cost, full_cost))

        # (5) domain adaptation: analyse and fine-tune on a class subset
        domain_recipes = {}
        if cfg.domain_adapt:
            sub_train = train_set.subset(cfg.domain_classes)
            sub_test = test_set.subset(cfg.domain_classes)
            sub_data = (sub_train, sub_test)
            n_sub = min(cfg.n_dump, len(sub_train))
            sub_dump_set = replace(sub_train, images=sub_train.images[:n_sub],
                                   labels=sub_train.labels[:n_sub])
            sub_dump = dump_activations(arch, full_w, sub_dump_set, work / "dump_domain")
            sub_spectra = analyze(sub_dump, cfg.pool, workers=1)
            sub_recipe = select(sub_dump, recipe_kl(sub_spectra, "dump_domain"), cfg.pool, workers=1)
            pio.save_recipe(sub_recipe, work / "recipe_domain_pfa_kl.json")
            tag = "domain" + "".join(str(c) for c in cfg.domain_classes)
            domain_recipes[f"pfa_kl[{cfg.num_classes} classes]"] = recipes.get(
                "pfa_kl", recipe_kl(spectra)).kept_counts()
            domain_recipes[f"pfa_kl[classes {','.join(map(str, cfg.domain_classes))}]"] = \
                sub_recipe.kept_counts()
            parch, pw = apply_recipe(arch, full_w, sub_recipe)
            pfa_fine, pfa_scratch = _finetune_cells(parch, pw, sub_data, ft_cfg, cfg.seeds,
                                                    tag + "/pfa", cfg.seed)
            full_fine, full_scratch = _finetune_cells(arch, full_w, sub_data, ft_cfg, cfg.seeds,
                                                      tag + "/full", cfg.seed)
            groups = [("pfa", "fine", pfa_fine, parch), ("pfa", "scratch", pfa_scratch, parch),
                      ("full", "fine", full_fine, arch), ("full", "scratch", full_scratch, arch)]
            results = _run([c for g in groups for c in g[2]], cfg.workers)
            for k, (what, how, _, a) in enumerate(groups):
                accs = [acc for _, acc in results[k * cfg.seeds:(k + 1) * cfg.seeds]]
                init = "filter_selection" if how == "fine" else "random"
                rows.append(_row(f"{tag}_{what}_{how}", init, accs, a, full_cost,
                                 sub_recipe.kept_counts() if what == "pfa" else None))
    finally:
        if tmp is not None:
            tmp.cleanup()

    report = ExperimentReport(
        rows=rows, full_accuracy=float(full_acc), full_params=full_cost.params,
        full_flops=full_cost.flops,
        recipes={name: r.kept_counts() for name, r in recipes.items()},
        domain_recipes=domain_recipes, nearest_centroid=centroid,
        elapsed=time.perf_counter() - t0,
    )
    if out_dir is not None:
        out = Path(out_dir)
        pio.atomic_write(out / "report.csv", report.to_csv())
        pio.atomic_write(out / "summary.txt", report.summary())
        pio.save_arch(arch, out / "full.arch.json")
        pio.save_weights(full_w, out / "full.weights.pfaw")
    return report


def config_dict(config: ExperimentConfig) -> dict:
    return asdict(config)
