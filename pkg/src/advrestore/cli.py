"""``advrestore`` command line: gen-data, train, attack, report, panel, run."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from . import experiment as ex

OUTPUT_ROOT_ENV = "ADVRESTORE_OUTPUT_ROOT"

log = logging.getLogger("advrestore")


def _csv_list(cast=str):
    def parse(s: str):
        return [cast(t) for t in s.split(",") if t.strip() != ""]
    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config (flags override --config)")
    g.add_argument("--config", type=Path, help="JSON experiment config")
    g.add_argument("--run-dir", type=Path, help="run directory (default: timestamped under $%s)" % OUTPUT_ROOT_ENV)
    g.add_argument("--variants", type=_csv_list())
    g.add_argument("--defenses", type=_csv_list())
    g.add_argument("--width", type=int)
    g.add_argument("--levels", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--val-every", type=int)
    g.add_argument("--train-epsilon", help="FGSM budget for +ADV training, e.g. 8/255")
    g.add_argument("--kinds", type=_csv_list(), help="attack kinds, e.g. cospgd,pgd")
    g.add_argument("--epsilons", type=_csv_list(), help="e.g. 8/255,2/255")
    g.add_argument("--iterations", type=_csv_list(int), help="e.g. 5,10,20 (empty string: clean only)")
    g.add_argument("--alpha", type=float)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--kernel-family")
    g.add_argument("--data-root", help="directory of train/val/test PNG pairs instead of synthetic data")
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=("float32", "float64"))
    g.add_argument("--workers", type=int)
    g.add_argument("--panel-samples", type=int)


def set_if(section: dict, key: str, value) -> None:
    if value is not None:
        section[key] = value


def resolve_config(args, run_dir: Optional[Path] = None) -> ex.ExperimentConfig:
    """--config file, else the run directory's config.json, else defaults; then flag overrides."""
    if args.config:
        d = json.loads(Path(args.config).read_text())
    elif run_dir is not None and (run_dir / "config.json").exists():
        d = json.loads((run_dir / "config.json").read_text())
    else:
        d = ex.ExperimentConfig().to_dict()
    set_if(d, "variants", args.variants)
    set_if(d, "defenses", args.defenses)
    set_if(d, "seed", args.seed)
    set_if(d, "precision", args.precision)
    set_if(d, "workers", args.workers)
    set_if(d, "panel_samples", args.panel_samples)
    model = d.setdefault("model", {})
    set_if(model, "width", args.width)
    set_if(model, "levels", args.levels)
    train = d.setdefault("train", {})
    set_if(train, "steps", args.steps)
    set_if(train, "batch_size", args.batch_size)
    set_if(train, "lr", args.lr)
    set_if(train, "val_every", args.val_every)
    set_if(train, "epsilon", args.train_epsilon)
    attacks = d.setdefault("attacks", {})
    set_if(attacks, "kinds", args.kinds)
    set_if(attacks, "epsilons", args.epsilons)
    set_if(attacks, "iterations", args.iterations)
    set_if(attacks, "alpha", args.alpha)
    ds = d.setdefault("dataset", {})
    set_if(ds, "n_train", args.n_train)
    set_if(ds, "n_val", args.n_val)
    set_if(ds, "n_test", args.n_test)
    set_if(ds, "size", args.size)
    set_if(ds, "kernel_family", args.kernel_family)
    set_if(ds, "root", args.data_root)
    return ex.ExperimentConfig.from_dict(d)


def make_run_dir(explicit: Optional[Path]) -> Path:
    if explicit is not None:
        explicit.mkdir(parents=True, exist_ok=True)
        return explicit
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    run = root / time.strftime("run-%Y%m%d-%H%M%S")
    suffix = 1
    while run.exists():
        run = root / (time.strftime("run-%Y%m%d-%H%M%S") + f"-{suffix}")
        suffix += 1
    run.mkdir(parents=True)
    return run


def _require_run_dir(args) -> Path:
    if args.run_dir is None or not args.run_dir.is_dir():
        raise SystemExit(f"error: --run-dir must name an existing run directory (got {args.run_dir})")
    return args.run_dir


# --- verbs ------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run_dir = make_run_dir(args.run_dir)
    config = resolve_config(args, run_dir)
    (run_dir / "config.json").write_text(config.dumps())
    manifests = ex.write_dataset_files(config, run_dir / "data")
    for split, m in manifests.items():
        print(f"{split}: {m}")
    return 0


def cmd_train(args) -> int:
    run_dir = make_run_dir(args.run_dir)
    config = resolve_config(args, run_dir)
    (run_dir / "config.json").write_text(config.dumps())
    models = ex.train_models(config, run_dir)
    (run_dir / "models.json").write_text(json.dumps(
        {k: {kk: vv for kk, vv in v.items() if kk != "seconds"} for k, v in models.items()},
        indent=1, sort_keys=True))
    for key, info in models.items():
        print(f"{key}: {info['checkpoint']} best_val_psnr={info['best_val_psnr']}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_attack(args) -> int:
    run_dir = _require_run_dir(args)
    config = resolve_config(args, run_dir)
    models = ex.discover_models(config, run_dir)
    splits = ex.prepare_data(config)
    table, cells = ex.evaluate_models(config, run_dir, models, splits)
    manifest = ex.write_outputs(config, run_dir, table, cells, models, splits)
    print((run_dir / "results.md").read_text())
    print(f"failed cells: {manifest['failed_cells']}")
    return 1 if manifest["failed_cells"] else 0


def cmd_report(args) -> int:
    from .plotting import render_report

    run_dir = _require_run_dir(args)
    csv_path = run_dir / "results.csv"
    if not csv_path.exists():
        raise SystemExit(f"error: {csv_path} not found; run `advrestore attack` first")
    table = ex.read_table(csv_path)
    config = resolve_config(args, run_dir)
    ex.emit_table(table, "markdown", run_dir / "results.md", header_lines=ex.report_header(config))
    for fig in render_report(table, run_dir / "figures"):
        print(fig)
    return 1 if table.failed else 0


def cmd_panel(args) -> int:
    from .data import stack_pairs
    from .plotting import plot_spectra

    run_dir = _require_run_dir(args)
    config = resolve_config(args, run_dir)
    key = ex.cell_key(args.variant, args.defense, args.attack, args.epsilon, args.at_iterations)
    ckpt = run_dir / "checkpoints" / f"{ex.model_key(args.variant, args.defense)}.ckpt"
    if not ckpt.exists():
        raise SystemExit(f"error: missing checkpoint {ckpt}")
    config.attacks = ex.AttackGrid(kinds=[args.attack], epsilons=[args.epsilon], alpha=config.attacks.alpha,
                                   iterations=[args.at_iterations])
    config.panel_samples = args.k
    test = ex.prepare_data(config)["test"]
    _, cells, restored = ex.evaluate_model(config, args.variant, args.defense, ckpt, test,
                                           panel_dir=run_dir / "panels", keep_restored=True)
    if any(c["status"] != "ok" for c in cells):
        print(json.dumps(cells, indent=1))
        return 1
    y, x = stack_pairs(test[:1], config.dtype)
    spectra = plot_spectra({"ground truth": x[0], "restored clean": restored["clean"][0],
                            "restored attacked": restored[key][0]},
                           run_dir / "figures" / f"spectra__{key}.png")
    print(run_dir / "panels" / f"panel__{key}.png")
    print(spectra)
    return 0


def cmd_run(args) -> int:
    run_dir = make_run_dir(args.run_dir)
    config = resolve_config(args, run_dir)
    table, manifest = ex.run_experiment(config, run_dir)
    print((run_dir / "results.md").read_text())
    print(f"run directory: {run_dir}")
    return 1 if manifest["failed_cells"] else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advrestore", description=__doc__)
    parser.add_argument("--version", action="version", version=f"advrestore {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs = {
        "gen-data": (cmd_gen_data, "write the synthetic dataset as PNG pairs plus manifests"),
        "train": (cmd_train, "train every (variant, defense) model"),
        "attack": (cmd_attack, "evaluate checkpoints clean and under the attack grid"),
        "report": (cmd_report, "render markdown table and figures from results.csv"),
        "panel": (cmd_panel, "write a reconstruction panel and spectra for one cell"),
        "run": (cmd_run, "train, attack and report in one go"),
    }
    for name, (fn, help_) in verbs.items():
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        if name == "panel":
            p.add_argument("--variant", required=True)
            p.add_argument("--defense", default="none")
            p.add_argument("--attack", default="cospgd")
            p.add_argument("--epsilon", default="8/255")
            p.add_argument("--at-iterations", type=int, default=20)
            p.add_argument("-k", type=int, default=4, help="number of sample rows")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
