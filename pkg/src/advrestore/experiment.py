"""Config-driven experiment grid: train variants (+/- FGSM defense), attack, tabulate."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .attacks import AttackConfig, format_rational, parse_rational, run_attack
from .data import ImagePair, load_pair_dir, make_dataset, save_png, stack_pairs, write_dataset
from .engine import Tensor, no_grad
from .metrics import evaluate_batch
from .nets import ArchVariant, build_model, file_sha256, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_loop

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFENSES = ("none", "adv")
OPTIMIZER_NOTE = "AdamW (decoupled weight decay), cosine lr decay to lr_min, global grad-norm clip"


@dataclass
class AttackGrid:
    kinds: List[str] = field(default_factory=lambda: ["cospgd", "pgd"])
    epsilons: List[str] = field(default_factory=lambda: ["8/255"])
    alpha: float = 0.01
    iterations: List[int] = field(default_factory=lambda: [5, 10, 20])

    def __post_init__(self):
        self.epsilons = [format_rational(parse_rational(e)) for e in self.epsilons]
        self.iterations = sorted(int(i) for i in self.iterations)

    def cells(self) -> List[Tuple[str, str, int]]:
        if not self.iterations:
            return []
        return [(k, e, i) for k in self.kinds for e in self.epsilons for i in self.iterations]


@dataclass
class DatasetSpec:
    n_train: int = 200
    n_val: int = 25
    n_test: int = 50
    size: int = 32
    kernel_family: str = "gaussian"
    seed: int = 0
    root: Optional[str] = None  # directory with train/ val/ test/ sharp+blur PNG pairs


@dataclass
class ExperimentConfig:
    variants: List[str] = field(default_factory=lambda: ["restormer", "baseline", "nafnet",
                                                         "intermediate", "intermediate_relu"])
    defenses: List[str] = field(default_factory=lambda: ["none", "adv"])
    model: dict = field(default_factory=lambda: {"width": 8, "levels": 3})
    train: dict = field(default_factory=dict)
    attacks: AttackGrid = field(default_factory=AttackGrid)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    precision: str = "float64"
    seed: int = 0
    panel_samples: int = 4
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.attacks, dict):
            self.attacks = AttackGrid(**self.attacks)
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if not self.variants:
            raise ValueError("config needs at least one variant")
        bad = [d for d in self.defenses if d not in DEFENSES]
        if bad:
            raise ValueError(f"unknown defenses {bad}; expected {DEFENSES}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        for v in self.variants:
            self.variant(v)  # validates

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def variant(self, kind: str) -> ArchVariant:
        return ArchVariant(kind=kind, **self.model)

    def train_config(self, defense: str) -> TrainConfig:
        opts = {"seed": self.seed, **self.train}
        return TrainConfig(**{**opts, "adversarial": defense == "adv"})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# --- result table ---------------------------------------------------------------------

TABLE_COLUMNS = ("architecture", "defense", "attack", "epsilon", "iterations", "psnr", "ssim",
                 "hf_energy_ratio", "grid_peak_score", "color_mixing_score", "n_images")
_PRECISION = {"psnr": 2, "ssim": 4, "hf_energy_ratio": 4, "grid_peak_score": 4, "color_mixing_score": 4}


@dataclass
class ResultRow:
    architecture: str
    defense: str
    attack: str
    epsilon: str
    iterations: int
    psnr: float = math.nan
    ssim: float = math.nan
    hf_energy_ratio: float = math.nan
    grid_peak_score: float = math.nan
    color_mixing_score: float = math.nan
    n_images: int = 0
    status: str = "ok"

    @property
    def key(self) -> str:
        return cell_key(self.architecture, self.defense, self.attack, self.epsilon, self.iterations)

    def formatted(self) -> List[str]:
        out = []
        for col in TABLE_COLUMNS:
            v = getattr(self, col)
            if col in _PRECISION:
                out.append("ERR" if self.status != "ok" else f"{v:.{_PRECISION[col]}f}")
            else:
                out.append(str(v))
        return out


@dataclass
class ResultTable:
    rows: List[ResultRow] = field(default_factory=list)

    def get(self, architecture, defense, attack="none", epsilon="0", iterations=0) -> ResultRow:
        for r in self.rows:
            if (r.architecture, r.defense, r.attack, r.epsilon, r.iterations) == (
                    architecture, defense, attack, epsilon, iterations):
                return r
        raise KeyError((architecture, defense, attack, epsilon, iterations))

    @property
    def failed(self) -> List[ResultRow]:
        return [r for r in self.rows if r.status != "ok"]


def emit_table(table: ResultTable, fmt: str, path, header_lines: Sequence[str] = ()) -> Path:
    """Write the table as ``csv`` or ``markdown``. Failed cells render as ERR.

    PSNR is printed with 2 decimals, SSIM and spectral scores with 4.
    """
    if not table.rows:
        raise ValueError("cannot emit an empty table")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for r in table.rows:
                w.writerow(r.formatted())
    elif fmt == "markdown":
        lines = list(header_lines)
        if lines:
            lines.append("")
        lines.append("| " + " | ".join(TABLE_COLUMNS) + " |")
        lines.append("|" + "---|" * len(TABLE_COLUMNS))
        for r in table.rows:
            lines.append("| " + " | ".join(r.formatted()) + " |")
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown table format {fmt!r}")
    return path


def read_table(path) -> ResultTable:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            status = "ok" if rec["psnr"] != "ERR" else "error"
            vals = {c: (math.nan if rec[c] == "ERR" else float(rec[c])) for c in _PRECISION}
            rows.append(ResultRow(rec["architecture"], rec["defense"], rec["attack"], rec["epsilon"],
                                  int(rec["iterations"]), n_images=int(rec["n_images"]), status=status, **vals))
    return ResultTable(rows)


# --- cell keys and panels -------------------------------------------------------------

_KEY_RE = re.compile(r"^(?P<architecture>[a-z_]+)__(?P<defense>[a-z]+)__(?P<attack>[a-z]+)"
                     r"__eps(?P<num>\d+)-(?P<den>\d+)__it(?P<iterations>\d+)$")


def cell_key(architecture: str, defense: str, attack: str, epsilon: str, iterations: int) -> str:
    eps = parse_rational(epsilon)
    return f"{architecture}__{defense}__{attack}__eps{eps.numerator}-{eps.denominator}__it{int(iterations)}"


def parse_cell_key(key: str) -> dict:
    """Inverse of ``cell_key``; accepts a bare key or a panel filename."""
    stem = Path(key).name
    if stem.endswith(".png"):
        stem = stem[:-4]
    if stem.startswith("panel__"):
        stem = stem[len("panel__"):]
    m = _KEY_RE.match(stem)
    if not m:
        raise ValueError(f"not a cell key: {key!r}")
    d = m.groupdict()
    return {"architecture": d["architecture"], "defense": d["defense"], "attack": d["attack"],
            "epsilon": format_rational(parse_rational(f"{d['num']}/{d['den']}")),
            "iterations": int(d["iterations"])}


def save_reconstruction_panel(path, x: np.ndarray, y: np.ndarray, restored_clean: np.ndarray,
                              restored_attacked: np.ndarray, k: int) -> np.ndarray:
    """k rows of [ground truth | degraded | restored clean | restored under attack]."""
    k = min(k, len(x))
    h, w = x.shape[2:]
    panel = np.zeros((3, k * h, 4 * w))
    for i in range(k):
        for j, img in enumerate((x[i], y[i], restored_clean[i], restored_attacked[i])):
            panel[:, i * h:(i + 1) * h, j * w:(j + 1) * w] = np.clip(img, 0.0, 1.0)
    save_png(panel, path)
    return panel


# --- stages ------------------------------------------------------------------------------

def prepare_data(config: ExperimentConfig) -> Dict[str, List[ImagePair]]:
    ds = config.dataset
    if ds.root:
        root = Path(ds.root)
        return {split: load_pair_dir(root / split) for split in ("train", "val", "test")
                if (root / split).is_dir()}
    counts = {"train": ds.n_train, "val": ds.n_val, "test": ds.n_test}
    return {split: make_dataset(n, ds.size, ds.size, ds.kernel_family, ds.seed, split)
            for split, n in counts.items() if n > 0}


def dataset_manifest(splits: Dict[str, List[ImagePair]]) -> dict:
    return {split: [{"id": p.id, "seed": p.seed, "kernel": p.blur_descriptor} for p in pairs]
            for split, pairs in splits.items()}


def model_key(variant: str, defense: str) -> str:
    return f"{variant}__{defense}"


def _train_job(args) -> dict:
    config_dict, variant, defense, ckpt_dir = args
    config = ExperimentConfig.from_dict(config_dict)
    splits = prepare_data(config)
    return train_one(config, variant, defense, splits, Path(ckpt_dir))


def train_one(config: ExperimentConfig, variant: str, defense: str,
              splits: Dict[str, List[ImagePair]], ckpt_dir: Path) -> dict:
    key = model_key(variant, defense)
    tcfg = config.train_config(defense)
    model = build_model(config.variant(variant), seed=config.seed, dtype=config.dtype)
    t0 = time.perf_counter()
    trained, tlog = train_loop(model, splits["train"], tcfg, val_pairs=splits.get("val"),
                               checkpoint_dir=ckpt_dir / key)
    elapsed = time.perf_counter() - t0
    path = save_checkpoint(ckpt_dir / f"{key}.ckpt", trained,
                           meta={"variant": variant, "defense": defense, "train_config": tcfg.to_dict()})
    tlog.to_csv(ckpt_dir / f"{key}.trainlog.csv")
    best = max(tlog.val_points, key=lambda t: t[1]) if tlog.val_points else (tcfg.steps, None)
    log.info("trained %s in %.1fs (best val %.3s)", key, elapsed, best[1])
    return {"key": key, "checkpoint": str(path), "sha256": file_sha256(path), "best_step": best[0],
            "best_val_psnr": best[1], "clip_events": tlog.clip_events, "seconds": elapsed}


def train_models(config: ExperimentConfig, run_dir: Path,
                 splits: Optional[Dict[str, List[ImagePair]]] = None) -> Dict[str, dict]:
    ckpt_dir = Path(run_dir) / "checkpoints"
    jobs = [(v, d) for v in config.variants for d in config.defenses]
    if config.workers > 1:
        args = [(config.to_dict(), v, d, str(ckpt_dir)) for v, d in jobs]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_train_job, args))
    else:
        splits = splits or prepare_data(config)
        results = [train_one(config, v, d, splits, ckpt_dir) for v, d in jobs]
    return {r["key"]: r for r in results}


def _restore(model, y: np.ndarray, batch: int = 25) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(y), batch):
            outs.append(model(Tensor(y[i:i + batch])).data)
    return np.clip(np.concatenate(outs), 0.0, 1.0)


def evaluate_model(config: ExperimentConfig, variant: str, defense: str, checkpoint: Path,
                   test: List[ImagePair], panel_dir: Optional[Path] = None,
                   keep_restored: bool = False,
                   traces: Optional[List[dict]] = None) -> Tuple[List[ResultRow], List[dict], dict]:
    """Clean row plus one row per attack cell for one trained model.

    Iteration counts of one (kind, epsilon) pair share a single trajectory: the
    k-step result of a deterministic attack is the k-th iterate of a longer run.
    """
    model, _, _ = load_checkpoint(checkpoint)
    model = model.astype(config.dtype)
    y, x = stack_pairs(test, config.dtype)
    ids = [p.id for p in test]
    rows, cells, restored = [], [], {}
    clean_out = _restore(model, y)
    rep = evaluate_batch(clean_out, x, ids)
    rows.append(_row(variant, defense, "none", "0", 0, rep))
    cells.append({"key": model_key(variant, defense) + "__clean", "status": "ok"})
    if keep_restored:
        restored["clean"] = clean_out
    grid = config.attacks
    for kind in grid.kinds:
        for eps in grid.epsilons:
            its = grid.iterations
            if not its:
                continue
            try:
                if kind == "fgsm":
                    acfg = AttackConfig.fgsm(eps)
                    if its != [1]:
                        raise ValueError("fgsm cells require iterations == [1]")
                else:
                    acfg = AttackConfig(kind, epsilon=eps, alpha=grid.alpha, iterations=max(its),
                                        seed=config.seed)
                res = run_attack(model, y, x, acfg, record=its)
                snaps, err = res.snapshots or {max(its): res.y_adv}, None
                if traces is not None:
                    traces.append({"model": model_key(variant, defense), "attack": kind, "epsilon": eps,
                                   "loss_trace": res.loss_trace,
                                   "grad_zero_fraction": res.grad_sign_stats})
            except Exception as e:  # recorded per cell, other cells continue
                snaps, err = {}, f"{type(e).__name__}: {e}"
            for it in its:
                key = cell_key(variant, defense, kind, eps, it)
                if err is not None:
                    rows.append(ResultRow(variant, defense, kind, eps, it, n_images=len(test), status="error"))
                    cells.append({"key": key, "status": "error", "error": err})
                    continue
                out = _restore(model, snaps[it])
                rep = evaluate_batch(out, x, ids)
                rows.append(_row(variant, defense, kind, eps, it, rep))
                cells.append({"key": key, "status": "ok"})
                if keep_restored:
                    restored[key] = out
                if panel_dir is not None and config.panel_samples > 0:
                    save_reconstruction_panel(panel_dir / f"panel__{key}.png", x, y, clean_out, out,
                                              config.panel_samples)
    return rows, cells, restored


def _row(variant, defense, attack, eps, it, rep) -> ResultRow:
    return ResultRow(variant, defense, attack, eps, it, psnr=rep.mean("psnr"), ssim=rep.mean("ssim"),
                     hf_energy_ratio=rep.mean("hf_energy_ratio"), grid_peak_score=rep.mean("grid_peak_score"),
                     color_mixing_score=rep.mean("color_mixing_score"), n_images=len(rep.rows))


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def report_header(config: ExperimentConfig) -> List[str]:
    return [f"# Robustness results (advrestore {__version__})", "",
            f"- precision: {config.precision}",
            f"- optimizer: {OPTIMIZER_NOTE}",
            f"- train: {json.dumps(config.train_config('none').to_dict(), sort_keys=True)}",
            f"- attacks: alpha={config.attacks.alpha}, epsilons={config.attacks.epsilons}, "
            f"iterations={config.attacks.iterations}"]


def evaluate_models(config: ExperimentConfig, run_dir: Path, models: Dict[str, dict],
                    splits: Dict[str, List[ImagePair]]) -> Tuple[ResultTable, List[dict]]:
    table, cells, traces = ResultTable(), [], []
    panel_dir = Path(run_dir) / "panels"
    for variant in config.variants:
        for defense in config.defenses:
            info = models.get(model_key(variant, defense))
            if info is None or not Path(info["checkpoint"]).exists():
                err = f"missing checkpoint for {model_key(variant, defense)}"
                table.rows.append(ResultRow(variant, defense, "none", "0", 0, status="error"))
                cells.append({"key": model_key(variant, defense) + "__clean", "status": "error", "error": err})
                continue
            rows, c, _ = evaluate_model(config, variant, defense, Path(info["checkpoint"]), splits["test"],
                                        panel_dir=panel_dir, traces=traces)
            table.rows.extend(rows)
            cells.extend(c)
    with open(Path(run_dir) / "attack_traces.jsonl", "w") as fh:
        for t in traces:
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    return table, cells


def write_outputs(config: ExperimentConfig, run_dir: Path, table: ResultTable, cells: List[dict],
                  models: Dict[str, dict], splits: Dict[str, List[ImagePair]]) -> dict:
    run_dir = Path(run_dir)
    emit_table(table, "csv", run_dir / "results.csv")
    emit_table(table, "markdown", run_dir / "results.md", header_lines=report_header(config))
    dmanifest = dataset_manifest(splits)
    (run_dir / "dataset_manifest.json").write_text(json.dumps(dmanifest, indent=1, sort_keys=True))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "config": config.to_dict(),
        "config_sha256": config.sha256(),
        "precision": config.precision,
        "optimizer": OPTIMIZER_NOTE,
        "seeds": {"experiment": config.seed, "dataset": config.dataset.seed},
        "dataset_manifest_sha256": _sha(dmanifest),
        "models": {k: {kk: (str(Path(vv).relative_to(run_dir)) if kk == "checkpoint" else vv)
                       for kk, vv in v.items() if kk != "seconds"} for k, v in models.items()},
        "cells": cells,
        "failed_cells": sum(1 for c in cells if c["status"] != "ok"),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    timings = {k: v.get("seconds") for k, v in models.items()}
    (run_dir / "timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True))
    return manifest


def run_experiment(config: ExperimentConfig, run_dir, figures: bool = True) -> Tuple[ResultTable, dict]:
    """Train every (variant, defense), evaluate clean + every attack cell, write artifacts."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.dumps())
    splits = prepare_data(config)
    models = train_models(config, run_dir, splits)
    table, cells = evaluate_models(config, run_dir, models, splits)
    manifest = write_outputs(config, run_dir, table, cells, models, splits)
    if figures:
        from .plotting import render_report

        render_report(table, run_dir / "figures")
    return table, manifest


def write_dataset_files(config: ExperimentConfig, out_dir) -> Dict[str, Path]:
    splits = prepare_data(config)
    return {split: write_dataset(pairs, out_dir, split) for split, pairs in splits.items()}


def discover_models(config: ExperimentConfig, run_dir) -> Dict[str, dict]:
    """Model records for an evaluate-only run, from ``checkpoints/<variant>__<defense>.ckpt``."""
    run_dir = Path(run_dir)
    saved = run_dir / "models.json"
    known = json.loads(saved.read_text()) if saved.exists() else {}
    out = {}
    for v in config.variants:
        for d in config.defenses:
            key = model_key(v, d)
            path = run_dir / "checkpoints" / f"{key}.ckpt"
            if path.exists():
                info = dict(known.get(key, {}))
                info.update(key=key, checkpoint=str(path), sha256=file_sha256(path))
                out[key] = info
    return out
