"""Experiment runner: ``dicelab {train,sweep,report,oracle}``.

Spec files are YAML with a ``version`` key::

    version: 1
    name: dice-demo
    preset: desk
    seeds: [0, 1, 2]
    train: {variant: DICE, delta: 0.2, epochs: 20}
    data: {K: 4, core_dim: 8, nuisance_dim: 8, rho_s: 0.9, ood_shift: 1.0}
    metrics: {temperature_scaling: true, ood: true, dice_w: false}
    grid: {delta: [0.2, 0.0, -0.05]}

Unknown keys anywhere are rejected. Relative output paths resolve under
``$DICELAB_OUT`` (default: the working directory).
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import math
import os
import statistics
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .config import PRESETS, REDUNDANCY_VARIANTS, TrainConfig
from .datagen import Dataset, SpuriousTaskConfig, make_ood_shift, make_spurious_clusters, split_train_val
from .io import JsonLinesWriter, load_checkpoint, load_dataset, read_jsonl, save_checkpoint, save_dataset
from .metrics import evaluate, ood_scores
from .metrics.ood import dice_times_w_confidence
from .models import Architecture, EnsembleModel
from .training import RunState, TrainingAborted, train_run

log = logging.getLogger("dicelab")

SPEC_VERSION = 1
OUT_ENV = "DICELAB_OUT"
EXIT_OK, EXIT_FAIL, EXIT_SPEC, EXIT_NUMERIC = 0, 1, 2, 3

TOP_KEYS = {"version", "name", "preset", "seeds", "train", "data", "metrics", "grid", "out"}
DATA_DEFAULTS: dict[str, Any] = {
    **{f.name: f.default for f in fields(SpuriousTaskConfig)},
    "seed": None,  # None: follow the run seed
    "val_frac": 0.95,
    "ood_shift": 1.0,
    "path": None,
    "test_path": None,
    "ood_path": None,
}
METRIC_DEFAULTS = {"temperature_scaling": True, "ood": True, "dice_w": False, "eval_every": 1}

SPEC_FILE, SEED_FILE, METRICS_FILE, CKPT_FILE = "spec.yaml", "seed", "metrics.jsonl", "checkpoint.bin"
STATUS_FILE = "status.json"


class SpecError(ValueError):
    pass


# -- specs ---------------------------------------------------------------------


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise SpecError(f"{where}: expected a mapping")
    bad = set(d) - set(allowed)
    if bad:
        raise SpecError(f"{where}: unknown keys {sorted(bad)}")


def load_spec(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    return resolve_spec(raw)


def resolve_spec(raw: Any, *, seed: int | None = None, preset_name: str | None = None) -> dict:
    """Validate and materialise every default. Raises :class:`SpecError`."""
    if not isinstance(raw, dict):
        raise SpecError("spec must be a mapping")
    _check_keys(raw, TOP_KEYS, "spec")
    if raw.get("version") != SPEC_VERSION:
        raise SpecError(f"spec version must be {SPEC_VERSION}, got {raw.get('version')!r}")
    name = preset_name or raw.get("preset", "desk")
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}")
    train = copy.deepcopy(PRESETS[name])
    train.update(raw.get("train") or {})
    seeds = [seed] if seed is not None else raw.get("seeds", [train.get("seed", 0)])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise SpecError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise SpecError("seeds must be distinct")
    train["seed"] = seeds[0]
    try:
        cfg = TrainConfig.from_dict(train)
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"train: {exc}") from exc
    data = dict(DATA_DEFAULTS)
    _check_keys(raw.get("data") or {}, DATA_DEFAULTS, "data")
    data.update(raw.get("data") or {})
    if data["path"] is not None and data["test_path"] is None:
        raise SpecError("data.path needs data.test_path")
    for k in ("path", "test_path", "ood_path"):
        if data[k] is not None and not Path(data[k]).is_file():
            raise SpecError(f"data.{k}: {data[k]} not found")
    if data["path"] is None:
        try:
            _task_config(data, seeds[0])
        except (TypeError, ValueError) as exc:
            raise SpecError(f"data: {exc}") from exc
    metrics = dict(METRIC_DEFAULTS)
    _check_keys(raw.get("metrics") or {}, METRIC_DEFAULTS, "metrics")
    metrics.update(raw.get("metrics") or {})
    grid = raw.get("grid") or {}
    _check_keys(grid, _grid_keys(), "grid")
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise SpecError(f"grid.{k}: expected a non-empty list")
    return {
        "version": SPEC_VERSION,
        "name": str(raw.get("name", "run")),
        "preset": name,
        "seeds": seeds,
        "train": cfg.to_dict(),
        "data": data,
        "metrics": metrics,
        "grid": grid,
        "out": raw.get("out"),
    }


def _grid_keys() -> set[str]:
    return {f.name for f in fields(TrainConfig)} | {f"data.{k}" for k in DATA_DEFAULTS}


def _task_config(data: dict, seed: int) -> SpuriousTaskConfig:
    kw = {k: data[k] for k in (f.name for f in fields(SpuriousTaskConfig))}
    if kw["seed"] is None:
        kw["seed"] = seed
    return SpuriousTaskConfig(**kw)


def parse_grid(items: list[str] | None) -> dict[str, list]:
    """``["delta=0.2,0,-0.05", "M=2,4"]`` -> ``{"delta": [0.2, 0, -0.05], "M": [2, 4]}``."""
    grid: dict[str, list] = {}
    for item in items or []:
        for part in item.split(";"):
            if not part.strip():
                continue
            if "=" not in part:
                raise SpecError(f"grid entry {part!r} must look like key=v1,v2")
            key, vals = part.split("=", 1)
            grid[key.strip()] = [yaml.safe_load(v) for v in vals.split(",")]
    return grid


def expand_grid(grid: dict[str, list]) -> list[dict[str, Any]]:
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def apply_point(spec: dict, point: dict, seed: int) -> dict:
    s = copy.deepcopy(spec)
    for k, v in point.items():
        if k.startswith("data."):
            s["data"][k[5:]] = v
        else:
            s["train"][k] = v
    s["train"]["seed"] = seed
    s["seeds"] = [seed]
    s["grid"] = {}
    try:
        TrainConfig.from_dict(s["train"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"grid point {point}: {exc}") from exc
    return s


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def _resolve_out(out: str | None, spec: dict) -> Path:
    p = Path(out or spec.get("out") or spec["name"])
    return p if p.is_absolute() else output_root() / p


# -- runs ----------------------------------------------------------------------


def build_data(spec: dict, seed: int) -> tuple[Dataset, Dataset, Dataset, Dataset | None]:
    """(train, val, test, ood) for one run."""
    data = spec["data"]
    if data["path"] is not None:
        full, test = load_dataset(data["path"]), load_dataset(data["test_path"])
        ood = load_dataset(data["ood_path"]) if data["ood_path"] else None
    else:
        tcfg = _task_config(data, seed)
        full, test = make_spurious_clusters(tcfg)
        ood = make_ood_shift(tcfg, data["ood_shift"]) if data["ood_shift"] is not None else None
    train, val = split_train_val(full, data["val_frac"], seed)
    return train, val, test, ood


def model_arrays(state: RunState) -> dict[str, np.ndarray]:
    arrays = {f"members/{k}": v for k, v in state.model.members.snapshot().items()}
    if state.model.disc is not None:
        arrays.update({f"disc/{k}": v for k, v in state.model.disc.snapshot().items()})
    if state.bank is not None:
        arrays.update({f"bank/{k}": v.astype(np.float64) for k, v in state.bank.state().items()})
    return arrays


def _arch_meta(arch: Architecture) -> dict:
    d = asdict(arch)
    d["hidden"] = list(arch.hidden)
    d["disc_hidden"] = list(arch.disc_hidden)
    return d


def save_model(path, state: RunState, extra: dict | None = None) -> None:
    meta = {"arch": _arch_meta(state.model.arch), "step": state.step, **(extra or {})}
    save_checkpoint(path, model_arrays(state), meta)


def load_model(path) -> EnsembleModel:
    arrays, meta = load_checkpoint(path)
    arch = Architecture(**meta["arch"])
    rng = np.random.default_rng(0)
    model = EnsembleModel.init(arch, rng, rng if arch.discriminator else None)
    model.members.load({k[8:]: v for k, v in arrays.items() if k.startswith("members/")})
    if model.disc is not None:
        model.disc.load({k[5:]: v for k, v in arrays.items() if k.startswith("disc/")})
    return model


def run_one(spec: dict, run_dir: Path) -> int:
    """Train, evaluate and write a complete run directory; returns an exit code."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed = spec["seeds"][0]
    cfg = TrainConfig.from_dict(spec["train"])
    with open(run_dir / SPEC_FILE, "w", encoding="utf-8") as fh:
        yaml.safe_dump(spec, fh, sort_keys=True)
    (run_dir / SEED_FILE).write_text(f"{seed}\n")
    train, val, test, ood = build_data(spec, seed)
    save_dataset(run_dir / "train.bin", train)
    save_dataset(run_dir / "test.bin", test)
    if ood is not None:
        save_dataset(run_dir / "ood.bin", ood)
    K = train.K
    met = spec["metrics"]
    with JsonLinesWriter(run_dir / METRICS_FILE) as sink:
        try:
            result = train_run(
                cfg, train.x, train.y, val.x, val.y, K=K, train_ids=train.ids, sink=sink,
                eval_every=met["eval_every"],
            )
        except TrainingAborted as exc:
            sink({"kind": "abort", "reason": str(exc), "record": exc.snapshot.get("record")})
            arrays = {f"{g}/{k}": v for g in ("members", "disc") for k, v in exc.snapshot.get(g, {}).items()}
            save_checkpoint(run_dir / "abort.bin", arrays, {"reason": str(exc)})
            _write_status(run_dir, "numeric-abort", str(exc))
            log.error("%s: numeric abort: %s", run_dir, exc)
            return EXIT_NUMERIC
        model = result.model
        rep = evaluate(
            model, test.x, test.y,
            ts_rng=np.random.default_rng([seed, 7]) if met["temperature_scaling"] else None,
            ood_x=ood.x if (ood is not None and met["ood"]) else None,
            dice_w=met["dice_w"],
        )
        sink({"kind": "final", "variant": cfg.variant, "delta": cfg.delta, "seed": seed,
              "step": result.state.step, **rep.to_dict()})
    save_model(run_dir / CKPT_FILE, result.state, {"variant": cfg.variant, "seed": seed})
    _write_status(run_dir, "ok")
    return EXIT_OK


def _write_status(run_dir: Path, status: str, detail: str = "") -> None:
    (run_dir / STATUS_FILE).write_text(json.dumps({"status": status, "detail": detail}, sort_keys=True) + "\n")


def replay(run_dir, out_dir) -> int:
    """Re-run the resolved spec stored in ``run_dir`` into ``out_dir``."""
    with open(Path(run_dir) / SPEC_FILE, encoding="utf-8") as fh:
        spec = yaml.safe_load(fh)
    return run_one(spec, Path(out_dir))


def _point_label(point: dict) -> str:
    if not point:
        return "base"
    return "__".join(f"{k.replace('data.', 'data-')}={point[k]}" for k in sorted(point))


def _sweep_worker(args) -> tuple[str, int]:
    spec, run_dir = args
    try:
        return str(run_dir), run_one(spec, Path(run_dir))
    except Exception:  # isolate one failed run from the rest of the sweep
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        _write_status(Path(run_dir), "error", traceback.format_exc())
        return str(run_dir), EXIT_FAIL


# -- reports -------------------------------------------------------------------

SUMMARY_COLUMNS = [
    "run", "variant", "delta", "seed", "accuracy", "individual_accuracy",
    "ratio_error", "q_statistic", "agreement", "kw_variance", "entropy_diversity",
    "nll", "brier", "ece", "tace", "temperature", "nll_ts", "brier_ts", "ece_ts", "tace_ts",
    "auroc", "aupr_in", "aupr_out", "fpr95", "detection_error",
    "dice_w_auroc", "dice_w_aupr_in", "dice_w_aupr_out", "dice_w_fpr95", "dice_w_detection_error",
]
TRADEOFF_COLUMNS = [
    "variant", "delta", "n_runs", "individual_accuracy", "accuracy",
    "ratio_error", "q_statistic", "agreement", "kw_variance", "entropy_diversity",
]
DYNAMICS_COLUMNS = [
    "run", "variant", "delta", "seed", "epoch", "step", "loss", "redundancy_loss", "cr_estimate",
    "disc_loss", "accuracy", "individual_accuracy", "ratio_error", "nll", "ece",
]
OOD_KEYS = ("auroc", "aupr_in", "aupr_out", "fpr95", "detection_error")


def fmt(v) -> str:
    """CSV cell: empty for missing, ``inf`` for the infinite sentinel, repr otherwise."""
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _median(vals):
    vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return statistics.median(vals) if vals else None


def find_runs(paths) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if (p / METRICS_FILE).is_file():
            runs.append(p)
        elif p.is_dir():
            runs.extend(sorted(q.parent for q in p.rglob(METRICS_FILE)))
    return runs


def summary_row(run_dir: Path, records: list[dict], dice_w_scores: dict | None = None) -> dict:
    final = next((r for r in reversed(records) if r.get("kind") == "final"), {})
    with open(run_dir / SPEC_FILE, encoding="utf-8") as fh:
        spec = yaml.safe_load(fh)
    row = {c: None for c in SUMMARY_COLUMNS}
    variant = spec["train"]["variant"]
    delta = spec["train"]["delta"] if variant in REDUNDANCY_VARIANTS else 0.0
    row.update(run=str(run_dir), variant=variant, delta=delta, seed=spec["seeds"][0])
    for c in SUMMARY_COLUMNS[4:20]:
        row[c] = final.get(c)
    ood = final.get("ood") or {}
    for k in OOD_KEYS:
        row[k] = (ood.get("max_softmax") or {}).get(k)
        row[f"dice_w_{k}"] = (dice_w_scores or ood.get("dice_x_w") or {}).get(k)
    return row


def dynamics_rows(run_dir: Path, records: list[dict], variant, delta, seed) -> list[dict]:
    rows = []
    steps: dict[int, list[dict]] = {}
    for r in records:
        if r.get("kind") == "step":
            steps.setdefault(int(r["epoch"]), []).append(r)
    evals = {int(r["epoch"]): r for r in records if r.get("kind") == "epoch"}
    for ep in sorted(set(steps) | set(evals)):
        st, ev = steps.get(ep, []), evals.get(ep, {})

        def mean(key):
            vals = [s[key] for s in st if s.get(key) is not None]
            return float(np.mean(vals)) if vals else None

        rows.append({
            "run": str(run_dir), "variant": variant, "delta": delta, "seed": seed, "epoch": ep,
            "step": (st[-1]["step"] if st else ev.get("step")),
            "loss": mean("loss"), "redundancy_loss": mean("redundancy_loss"),
            "cr_estimate": mean("cr_estimate"), "disc_loss": mean("disc_loss"),
            **{k: ev.get(k) for k in ("accuracy", "individual_accuracy", "ratio_error", "nll", "ece")},
        })
    return rows


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def dice_w_rescore(run_dir: Path) -> dict | None:
    """Recompute DICE x w OOD scores from a run's checkpoint and stored datasets."""
    if not (run_dir / "ood.bin").is_file():
        return None
    model = load_model(run_dir / CKPT_FILE)
    if model.disc is None or model.arch.discriminator != "conditional":
        return None
    test, ood = load_dataset(run_dir / "test.bin"), load_dataset(run_dir / "ood.bin")
    c_in, _ = dice_times_w_confidence(model, test.x)
    c_out, _ = dice_times_w_confidence(model, ood.x)
    return ood_scores(c_in, c_out)


def make_report(run_dirs, out_dir, dice_w: bool = False) -> dict[str, Path]:
    runs = find_runs(run_dirs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary, dynamics = [], []
    for rd in runs:
        records = read_jsonl(rd / METRICS_FILE)
        row = summary_row(rd, records, dice_w_rescore(rd) if dice_w else None)
        summary.append(row)
        dynamics.extend(dynamics_rows(rd, records, row["variant"], row["delta"], row["seed"]))
    groups: dict[tuple, list[dict]] = {}
    for r in summary:
        groups.setdefault((r["variant"], r["delta"]), []).append(r)
    tradeoff = []
    for (variant, delta), rows in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        point = {"variant": variant, "delta": delta, "n_runs": len(rows)}
        for c in TRADEOFF_COLUMNS[3:]:
            point[c] = _median([r[c] for r in rows])
        tradeoff.append(point)
    paths = {"summary": out_dir / "summary.csv", "tradeoff": out_dir / "tradeoff.csv", "dynamics": out_dir / "dynamics.csv"}
    _write_csv(paths["summary"], SUMMARY_COLUMNS, summary)
    _write_csv(paths["tradeoff"], TRADEOFF_COLUMNS, tradeoff)
    _write_csv(paths["dynamics"], DYNAMICS_COLUMNS, dynamics)
    return paths


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    out = _resolve_out(args.out, spec)
    if len(spec["seeds"]) > 1:
        log.warning("train uses the first seed (%d); use sweep for seed lists", spec["seeds"][0])
        spec = apply_point(spec, {}, spec["seeds"][0])
    log.info("training %s -> %s", spec["train"]["variant"], out)
    return run_one(spec, out)


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    grid = dict(spec["grid"])
    extra = parse_grid(args.grid)
    _check_keys(extra, _grid_keys(), "--grid")
    grid.update(extra)
    points = expand_grid(grid)
    root = _resolve_out(args.out, spec)
    root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for point in points:
        for seed in spec["seeds"]:
            jobs.append((apply_point(spec, point, seed), root / _point_label(point) / f"seed{seed}"))
    (root / "sweep.json").write_text(json.dumps(
        {"grid": grid, "points": points, "seeds": spec["seeds"], "runs": [str(j[1]) for j in jobs]},
        indent=1, sort_keys=True) + "\n")
    log.info("sweep: %d points x %d seeds = %d runs", len(points), len(spec["seeds"]), len(jobs))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    _sweep_summary(root, points, spec["seeds"])
    codes = [c for _, c in results]
    if all(c == EXIT_OK for c in codes):
        return EXIT_OK
    return EXIT_NUMERIC if EXIT_NUMERIC in codes else EXIT_FAIL


def _sweep_summary(root: Path, points: list[dict], seeds: list[int]) -> None:
    keys = sorted({k for p in points for k in p})
    metrics = ["accuracy", "individual_accuracy", "ratio_error", "q_statistic", "ece", "nll"]
    rows = []
    for point in points:
        finals = []
        for seed in seeds:
            f = root / _point_label(point) / f"seed{seed}" / METRICS_FILE
            if f.is_file():
                finals += [r for r in read_jsonl(f) if r.get("kind") == "final"]
        row = {**point, "n_ok": len(finals)}
        for m in metrics:
            row[f"median_{m}"] = _median([r.get(m) for r in finals])
        rows.append(row)
    _write_csv(root / "sweep_summary.csv", keys + ["n_ok"] + [f"median_{m}" for m in metrics], rows)


def cmd_report(args) -> int:
    runs = args.runs
    if not find_runs(runs):
        log.error("no run directories found under %s", runs)
        return EXIT_FAIL
    out = Path(args.out) if args.out else Path(runs[0]) / "report"
    paths = make_report(runs, out, dice_w=args.dice_w_scoring)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracles import run_all

    results = run_all(seed=args.seed if args.seed is not None else 0)
    ok = True
    for name, passed, detail in results:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return EXIT_OK if ok else EXIT_FAIL


def _spec_from_args(args) -> dict:
    if not args.spec:
        raise SpecError("--spec is required")
    try:
        with open(args.spec, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise SpecError(f"cannot read spec {args.spec}: {exc}") from exc
    return resolve_spec(raw, seed=args.seed, preset_name=args.preset)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dicelab", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--spec", help="YAML experiment spec")
        sp.add_argument("--out", help=f"output directory (relative paths resolve under ${OUT_ENV})")
        sp.add_argument("--seed", type=int, help="override the spec's seed list with one seed")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: spec's, else desk)")

    tr = sub.add_parser("train", help="train one run")
    common(tr)
    tr.set_defaults(func=cmd_train)
    sw = sub.add_parser("sweep", help="one run per grid point x seed")
    common(sw)
    sw.add_argument("--grid", action="append", help="key=v1,v2 (repeatable, or ';'-separated)")
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sw.set_defaults(func=cmd_sweep)
    rp = sub.add_parser("report", help="CSV tables and plot data from run directories")
    rp.add_argument("runs", nargs="*", help="run or sweep directories")
    rp.add_argument("--out", help="report directory (default: <first run>/report)")
    rp.add_argument("--dice-w-scoring", action="store_true", help="recompute DICE x w OOD scores from checkpoints")
    rp.set_defaults(func=cmd_report)
    orc = sub.add_parser("oracle", help="run the oracle self-checks")
    orc.add_argument("--seed", type=int)
    orc.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"dicelab: malformed spec: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
