"""``pfa`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import io as pio
from .arch import ArchSpec, apply_recipe, cost
from .errors import IoError, NumericalError, PFAError, ValidationError
from .pipeline import analyze, kl_values, select, thread_count
from .recipes import Budget, recipe_en, recipe_en_for_budget, recipe_kl

log = logging.getLogger("pfa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_analyze(args):
    dump = pio.load_dump(args.dump)
    spectra = analyze(dump, args.pool, workers=thread_count())
    kl = kl_values(spectra)
    pio.save_spectra(spectra, args.out, kl, meta={"pool": args.pool, "dump": dump.manifest_path.parent.name})
    if args.summary:
        for s in spectra:
            k = kl[s.layer_id]
            print(f"{s.layer_id}: C={s.channels} top={s.values[0]:.4f} "
                  f"KL={'degenerate' if k is None else f'{k:.4f}'}")


def cmd_recipe(args):
    targets = [args.target_params is not None, args.target_flops is not None]
    chosen = [args.energy is not None, args.kl] + targets
    if sum(chosen) != 1:
        raise UsageError("give exactly one of --energy, --kl, --target-params, --target-flops")
    if any(targets) != (args.arch is not None):
        raise UsageError("--arch is required with (and only with) --target-params/--target-flops")
    spectra = pio.load_spectra(args.spectra)
    prov = str(args.spectra)
    if args.energy is not None:
        recipe = recipe_en(spectra, args.energy, prov)
    elif args.kl:
        recipe = recipe_kl(spectra, prov)
    else:
        arch = pio.load_arch(args.arch)
        budget = (Budget("params", args.target_params) if args.target_params is not None
                  else Budget("flops", args.target_flops))
        recipe = recipe_en_for_budget(spectra, arch, budget, prov)
    pio.save_recipe(recipe, args.out)
    for w in recipe.warnings:
        log.warning(w)
    if args.summary:
        print(f"method {recipe.method}")
        for k, e in recipe.entries.items():
            print(f"{k}: keep {e.kept_count}/{e.channels} (gamma {e.gamma:.4f})")


def cmd_select(args):
    dump = pio.load_dump(args.dump)
    recipe = pio.load_recipe(args.recipe)
    recipe = select(dump, recipe, args.pool, workers=thread_count())
    pio.save_recipe(recipe, args.out)


def cmd_apply(args):
    arch = pio.load_arch(args.arch)
    weights = pio.load_weights(args.weights, arch)
    recipe = pio.load_recipe(args.recipe)
    new_arch, new_weights = apply_recipe(arch, weights, recipe)
    pio.save_arch(new_arch, f"{args.out_prefix}.arch.json")
    pio.save_weights(new_weights, f"{args.out_prefix}.weights.pfaw")
    if args.summary:
        before, after = cost(arch), cost(new_arch)
        print(f"params {before.params} -> {after.params} ({100 * after.params / before.params:.2f}%)")
        print(f"flops  {before.flops} -> {after.flops} ({100 * after.flops / before.flops:.2f}%)")


def cmd_cost(args):
    arch = pio.load_arch(args.arch)
    if args.input_shape is not None:
        arch = ArchSpec(args.input_shape, arch.layers)
    report = cost(arch)
    doc = {"params": report.params, "flops": report.flops,
           "per_layer": {k: {"params": p, "flops": f} for k, (p, f) in report.per_layer.items()}}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        pio.atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_demo(args):
    from .refnet.experiment import ExperimentConfig, run_experiment

    kw = {"domain_adapt": args.domain_adapt, "workers": thread_count()}
    config = ExperimentConfig.quick(args.seed, **kw) if args.quick else ExperimentConfig(seed=args.seed, **kw)
    report = run_experiment(config, args.out_dir)
    if args.summary:
        sys.stdout.write(report.summary())
    else:
        sys.stdout.write(report.to_csv())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfa", description="Principal Filter Analysis compression toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    a = sub.add_parser("analyze", help="spectra and KL values of a dump")
    a.add_argument("--dump", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--pool", choices=("max", "avg"), default="max")
    a.set_defaults(fn=cmd_analyze)

    r = sub.add_parser("recipe", help="compression recipe from spectra")
    r.add_argument("--spectra", required=True)
    r.add_argument("--energy", type=float, metavar="TAU")
    r.add_argument("--kl", action="store_true")
    r.add_argument("--target-params", type=int, metavar="N")
    r.add_argument("--target-flops", type=int, metavar="N")
    r.add_argument("--arch")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_recipe)

    s = sub.add_parser("select", help="choose kept filters for a recipe")
    s.add_argument("--dump", required=True)
    s.add_argument("--recipe", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pool", choices=("max", "avg"), default="max")
    s.set_defaults(fn=cmd_select)

    ap = sub.add_parser("apply", help="slice an architecture and weights to a recipe")
    ap.add_argument("--arch", required=True)
    ap.add_argument("--weights", required=True)
    ap.add_argument("--recipe", required=True)
    ap.add_argument("--out-prefix", required=True)
    ap.set_defaults(fn=cmd_apply)

    c = sub.add_parser("cost", help="parameter and FLOP count of an architecture")
    c.add_argument("--arch", required=True)
    c.add_argument("--input-shape", type=_shape)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_cost)

    d = sub.add_parser("demo", help="end-to-end experiment on the reference network")
    d.add_argument("--seed", type=int, default=7)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--domain-adapt", action="store_true")
    d.add_argument("--quick", action="store_true", help="tiny configuration for smoke tests")
    d.set_defaults(fn=cmd_demo)

    for sp in (a, r, s, ap, c, d):
        sp.add_argument("--summary", action="store_true", help="print a human-readable summary")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by the parser
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pfa: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"pfa: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, IoError) as exc:
        print(f"pfa: invalid input: {exc}", file=sys.stderr)
        return 2
    except PFAError as exc:
        print(f"pfa: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
