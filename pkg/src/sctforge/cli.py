"""``sctforge`` command line: phantom generation through training, evaluation and reporting.

Every subcommand that produces files writes them under one output
directory together with ``config.json`` (the resolved configuration) and
``run_manifest.json``. Values resolve as flag > config file > default, and
config files with unknown keys are rejected.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .cleaning import DEFAULT_BANDWIDTH, DEFAULT_STRIDE, DEFAULT_THRESHOLD, build_reference, clean_cohort
from .data import (
    DEFAULT_WINDOW, DatasetSplit, PatientVolumePair, list_patient_dirs, load_patient, save_patient,
    slice_pairs, split_dataset,
)
from .errors import CheckpointNotFound, IntegrityError, LoadError, ParameterError, SctForgeError
from .evaluation import (
    SweepTable, evaluate_model, export_loss_curves, export_qualitative, predict_volume, select_best,
    sweep_checkpoints, tissue_kde_compare, to_hu, write_json,
)
from .heuristic import HeuristicInput, optimal_p, token_count, tp_band
from .models import ArchConfig, IdentityGenerator, build_model, count_parameters, parameter_table, variant
from .phantom import PhantomParams, desk_params, generate_cohort, generate_phantom_patient
from .trainer import (
    CheckpointKey, CheckpointStore, PatientSlices, TrainConfig, build_gan_state, loss_log, restore_state,
    train_sem,
)

log = logging.getLogger("sctforge")

RUN_DIR_ENV = "SCTFORGE_RUN_DIR"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
# input problems the user can fix; everything else is a runtime failure
_INVALID = (ParameterError, LoadError, IntegrityError, CheckpointNotFound, FileNotFoundError,
            json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- config plumbing


def _default_root() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


def _read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return json.loads(path.read_text())


def resolve_config(defaults: dict[str, Any], path: str | None, flags: dict[str, Any],
                   required: bool = False) -> dict[str, Any]:
    """Merge defaults, a JSON config file and explicit flags (in increasing priority)."""
    cfg = dict(defaults)
    if path is None and required:
        raise ParameterError("--config is required")
    if path is not None:
        loaded = _read_json(path)
        if not isinstance(loaded, dict):
            raise ParameterError(f"{path}: config must be a JSON object")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ParameterError(f"{path}: unknown config keys {sorted(unknown)}")
        for k, v in loaded.items():
            d = defaults[k]
            if d is not None and not _type_ok(d, v):
                raise ParameterError(f"{path}: key {k!r} expects {type(d).__name__}, got {type(v).__name__}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if k in defaults and v is not None})
    return cfg


def _type_ok(default: Any, value: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


class Run:
    """An output directory with its resolved config and manifest."""

    def __init__(self, out: Path, command: str, config: dict[str, Any]) -> None:
        self.out = out
        self.command = command
        self.config = config
        self.outputs: list[str] = []
        out.mkdir(parents=True, exist_ok=True)
        write_json(config, out / "config.json")
        self._manifest("running")

    def add(self, *paths: Path | str) -> None:
        for p in paths:
            rel = os.path.relpath(p, self.out)
            if rel not in self.outputs:
                self.outputs.append(rel)

    def _manifest(self, status: str) -> None:
        write_json({"command": self.command, "version": __version__, "status": status,
                    "seed": self.config.get("seed"), "config": "config.json", "outputs": self.outputs},
                   self.out / "run_manifest.json")

    def finish(self) -> None:
        self._manifest("complete")


def _out_dir(args: argparse.Namespace, command: str) -> Path:
    return Path(args.out) if args.out else _default_root() / command


def _range(text: str) -> tuple[int, int]:
    """``"50..105"`` or ``"64"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            return int(a), int(b)
        return int(text), int(text)
    except ValueError:
        raise ParameterError(f"expected N or A..B, got {text!r}") from None


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ParameterError(f"expected HxW, got {text!r}") from None


def _load_cohort(root: str | Path) -> dict[str, PatientVolumePair]:
    dirs = list_patient_dirs(root)
    if not dirs:
        raise LoadError(f"no patient directories under {root}")
    return {p.patient_id: p for p in map(load_patient, dirs)}


def _partition(cohort: dict[str, PatientVolumePair], split: DatasetSplit, name: str) -> list[PatientVolumePair]:
    ids = getattr(split, name)
    missing = [i for i in ids if i not in cohort]
    if missing:
        raise LoadError(f"split lists patients absent from the cohort: {missing}")
    return [cohort[i] for i in ids]


def _window(cfg: dict[str, Any]) -> tuple[float, float]:
    return tuple(cfg.get("window", DEFAULT_WINDOW))  # type: ignore[return-value]


# --------------------------------------------------------------------------- phantom-gen / split / clean

PHANTOM_DEFAULTS = {
    "n": 18, "corrupt_fraction": 1 / 6, "seed": 0, "preset": "default",
    "depth": None, "size": None, "noise_sigma": None, "cupping_amplitude": None,
    "streak_count": None, "intensity_shift": None, "reference": True,
}


def _phantom_params(cfg: dict[str, Any]) -> PhantomParams:
    if cfg["preset"] not in ("default", "desk"):
        raise ParameterError(f"unknown preset {cfg['preset']!r}")
    params = desk_params() if cfg["preset"] == "desk" else PhantomParams()
    over: dict[str, Any] = {k: cfg[k] for k in ("noise_sigma", "cupping_amplitude", "streak_count", "intensity_shift")
                            if cfg[k] is not None}
    if cfg["depth"] is not None:
        over["depth_range"] = _range(str(cfg["depth"]))
    if cfg["size"] is not None:
        h, w = _dims(str(cfg["size"]))
        over["height_range"], over["width_range"] = (h, h), (w, w)
    return replace(params, **over)


def cmd_phantom_gen(args: argparse.Namespace) -> int:
    cfg = resolve_config(PHANTOM_DEFAULTS, args.config, vars(args))
    params = _phantom_params(cfg)
    run = Run(_out_dir(args, "phantom"), "phantom-gen", cfg)
    cohort, labels = generate_cohort(cfg["n"], cfg["corrupt_fraction"], params, cfg["seed"])
    for pair in cohort:
        run.add(save_patient(pair, run.out / "cohort"))
    truth = {pid: (k.value if k else None) for pid, k in labels.items()}
    run.add(write_json(truth, run.out / "truth.json"))
    if cfg["reference"]:
        # a separate clean pair for the cleaning stage
        ref = generate_phantom_patient(replace(params, seed=params.seed + cfg["seed"]), "REF", "reference")
        run.add(save_patient(ref, run.out / "reference"))
    run.finish()
    print(f"wrote {len(cohort)} patients ({sum(v is not None for v in truth.values())} anomalous) to {run.out}")
    return EXIT_OK


SPLIT_DEFAULTS = {"cohort": None, "sizes": [35, 15, 10], "seed": 0}


def _sizes(value: Any) -> tuple[int, int, int | None]:
    if isinstance(value, str):
        value = value.split(",")
    parts = [None if str(v) in ("rest", "None", "") else int(v) for v in value]
    if len(parts) != 3:
        raise ParameterError("sizes needs three entries: train,validation,test")
    return parts[0], parts[1], parts[2]  # type: ignore[return-value]


def _do_split(pairs: Sequence[PatientVolumePair], sizes: Any, seed: int) -> DatasetSplit:
    ids = [p.patient_id for p in pairs]
    centers = {p.patient_id: p.center_id for p in pairs}
    return split_dataset(ids, _sizes(sizes), seed=seed, centers=centers)


def cmd_split(args: argparse.Namespace) -> int:
    cfg = resolve_config(SPLIT_DEFAULTS, args.config, vars(args))
    if not cfg["cohort"]:
        raise ParameterError("--cohort is required")
    cohort = _load_cohort(cfg["cohort"])
    split = _do_split(list(cohort.values()), cfg["sizes"], cfg["seed"])
    run = Run(_out_dir(args, "split"), "split", cfg)
    split.save(run.out / "split.json")
    run.add(run.out / "split.json")
    run.finish()
    print(json.dumps({k: len(v) for k, v in split.to_dict().items()}))
    return EXIT_OK


CLEAN_DEFAULTS = {
    "cohort": None, "reference": None, "threshold": DEFAULT_THRESHOLD, "bandwidth": DEFAULT_BANDWIDTH,
    "stride": DEFAULT_STRIDE, "sizes": [35, 15, 10], "seed": 0,
}


def cmd_clean(args: argparse.Namespace) -> int:
    cfg = resolve_config(CLEAN_DEFAULTS, args.config, vars(args))
    if not cfg["cohort"] or not cfg["reference"]:
        raise ParameterError("--cohort and --reference are required")
    cohort = _load_cohort(cfg["cohort"])
    ref_path = Path(cfg["reference"])
    ref_pair = load_patient(ref_path if (ref_path / "meta.json").is_file() else list_patient_dirs(ref_path)[0])
    reference = build_reference(ref_pair, cfg["bandwidth"], cfg["stride"])
    run = Run(_out_dir(args, "clean"), "clean", cfg)
    kept, decisions = clean_cohort(list(cohort.values()), reference, cfg["threshold"], cfg["bandwidth"],
                                   cfg["stride"], log_path=run.out / "clean_report.json")
    run.add(run.out / "clean_report.json")
    for pair in kept:
        run.add(save_patient(pair, run.out / "cohort"))
    split = _do_split(kept, cfg["sizes"], cfg["seed"])
    split.save(run.out / "split.json")
    run.add(run.out / "split.json")
    run.finish()
    counts = {s: sum(d.status == s for d in decisions) for s in ("kept", "repaired", "discarded")}
    print(json.dumps(counts))
    return EXIT_OK


# --------------------------------------------------------------------------- train

TRAIN_DEFAULTS = {
    "cohort": None, "split": None, "variant": "fqga-single", "generator": {}, "discriminator": {},
    "window": list(DEFAULT_WINDOW), **TrainConfig().to_dict(),
}


def _archs(cfg: dict[str, Any]) -> tuple[ArchConfig, ArchConfig]:
    gen, disc = variant(cfg["variant"])
    return (ArchConfig.from_dict({**gen.to_dict(), **cfg["generator"]}),
            ArchConfig.from_dict({**disc.to_dict(), **cfg["discriminator"]}))


def _train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in TrainConfig.__dataclass_fields__})


def train_run(cfg: dict[str, Any], out: Path, patients: Sequence[PatientVolumePair]) -> CheckpointStore:
    tcfg = _train_config(cfg)
    gen, disc = _archs(cfg)
    state = build_gan_state(tcfg, gen, disc)
    store = CheckpointStore(out / "checkpoints", {"variant": cfg["variant"]})
    items = [PatientSlices(p.patient_id, slice_pairs(p, _window(cfg))) for p in patients]
    return train_sem(state, items, tcfg, store)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(TRAIN_DEFAULTS, args.config, vars(args), required=True)
    if not cfg["cohort"] or not cfg["split"]:
        raise ParameterError("cohort and split must be given (flag or config)")
    # validate everything before the run directory exists
    _train_config(cfg)
    _archs(cfg)
    cohort = _load_cohort(cfg["cohort"])
    split = DatasetSplit.load(cfg["split"])
    patients = _partition(cohort, split, "train")
    run = Run(_out_dir(args, "train"), "train", cfg)
    store = train_run(cfg, run.out, patients)
    run.add(store.root / "manifest.json", *(store.root / r["weights_path"] for r in store.records))
    run.finish()
    print(f"{len(store)} checkpoints in {store.root}")
    return EXIT_OK


# --------------------------------------------------------------------------- evaluation stages

EVAL_DEFAULTS = {"train_dir": None, "cohort": None, "split": None, "window": list(DEFAULT_WINDOW)}


def _store(train_dir: str | Path) -> CheckpointStore:
    root = Path(train_dir)
    root = root / "checkpoints" if (root / "checkpoints" / "manifest.json").is_file() else root
    if not (root / "manifest.json").is_file():
        raise LoadError(f"no checkpoint manifest under {train_dir}")
    return CheckpointStore(root)


def _eval_inputs(cfg: dict[str, Any], partition: str) -> tuple[CheckpointStore, list[PatientVolumePair]]:
    for k in ("train_dir", "cohort", "split"):
        if not cfg[k]:
            raise ParameterError(f"{k} is required")
    store = _store(cfg["train_dir"])
    patients = _partition(_load_cohort(cfg["cohort"]), DatasetSplit.load(cfg["split"]), partition)
    if not patients:
        raise ParameterError(f"split has no {partition} patients")
    return store, patients


SWEEP_DEFAULTS = {**EVAL_DEFAULTS, "range": None, "epoch": None, "pass_index": 1}


def sweep_run(cfg: dict[str, Any], store: CheckpointStore, validation: Sequence[PatientVolumePair],
              out: Path) -> tuple[SweepTable, list[Path]]:
    if cfg["range"]:
        lo, hi = _range(str(cfg["range"]))
    else:
        idx = [k.patient_index for k in store.keys()]
        if not idx:
            raise ParameterError("store holds no checkpoints")
        lo, hi = min(idx), max(idx)
    table = sweep_checkpoints(store, (lo, hi), validation, _window(cfg), cfg["epoch"], cfg["pass_index"])
    table.to_csv(out / "sweep.csv")
    payload = {"index_range": list(table.index_range), "rows": table.rows,
               "train_dir": str(cfg["train_dir"]), "cohort": str(cfg["cohort"]), "split": str(cfg["split"])}
    return table, [out / "sweep.csv", write_json(payload, out / "sweep.json")]


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(SWEEP_DEFAULTS, args.config, vars(args))
    store, validation = _eval_inputs(cfg, "validation")
    run = Run(_out_dir(args, "sweep"), "sweep", cfg)
    table, paths = sweep_run(cfg, store, validation, run.out)
    run.add(*paths)
    run.finish()
    for r in table.rows:
        print(f"{r['checkpoint_key']}\tpsnr={r['psnr']:.3f}\tssim={r['ssim']:.4f}")
    return EXIT_OK


SELECT_DEFAULTS = {"sweep": None, "rule": "psnr", "slices": [0], "window": list(DEFAULT_WINDOW)}


def select_run(cfg: dict[str, Any], sweep_payload: dict[str, Any], out: Path) -> tuple[str, list[Path]]:
    table = SweepTable(sweep_payload["rows"], tuple(sweep_payload["index_range"]))  # type: ignore[arg-type]
    choice = select_best(table, cfg["rule"])
    paths = [write_json(choice.to_dict(), out / "selection.json")]
    # qualitative check of the choice and its neighbours always accompanies it
    store = _store(sweep_payload["train_dir"])
    validation = _partition(_load_cohort(sweep_payload["cohort"]), DatasetSplit.load(sweep_payload["split"]),
                            "validation")
    for key in [choice.checkpoint_key, *choice.neighbors]:
        model = restore_state(store, CheckpointKey.parse(key)).generator
        pairs = _pick_slices(validation, cfg["slices"], _window(cfg))
        paths += export_qualitative(model, pairs, out / "images", tag=key)
    return choice.checkpoint_key, paths


def _pick_slices(patients: Sequence[PatientVolumePair], indices: Sequence[int], window) -> list:
    picked = []
    for p in patients:
        sl = slice_pairs(p, window)
        for i in indices:
            if not 0 <= i < len(sl):
                raise ParameterError(f"slice {i} outside {p.patient_id} (depth {len(sl)})")
            picked.append(sl[i])
    return picked


def cmd_select(args: argparse.Namespace) -> int:
    cfg = resolve_config(SELECT_DEFAULTS, args.config, vars(args))
    if not cfg["sweep"]:
        raise ParameterError("--sweep is required")
    payload = _read_json(cfg["sweep"])
    run = Run(_out_dir(args, "select"), "select", cfg)
    key, paths = select_run(cfg, payload, run.out)
    run.add(*paths)
    run.finish()
    print(key)
    return EXIT_OK


TEST_DEFAULTS = {**EVAL_DEFAULTS, "checkpoint": None, "selection": None, "partition": "test",
                 "roi": [-200.0, 200.0]}


def _checkpoint_key(cfg: dict[str, Any], store: CheckpointStore) -> CheckpointKey:
    if cfg["checkpoint"]:
        return CheckpointKey.parse(cfg["checkpoint"])
    if cfg["selection"]:
        return CheckpointKey.parse(_read_json(cfg["selection"])["checkpoint_key"])
    keys = [k for k in store.keys() if k.pass_index == 1]
    if not keys:
        raise CheckpointNotFound("store holds no checkpoints")
    return keys[-1]


def test_run(cfg: dict[str, Any], store: CheckpointStore, patients: Sequence[PatientVolumePair],
             key: CheckpointKey, out: Path) -> tuple[dict[str, Any], Path]:
    model = restore_state(store, key).generator
    window = _window(cfg)
    result = evaluate_model(model, patients, window)
    baseline = evaluate_model(IdentityGenerator(), patients, window)
    tissue = []
    for p in patients:
        cmp = tissue_kde_compare(p.ct, p.cbct, to_hu(predict_volume(model, p, window), window), tuple(cfg["roi"]))
        tissue.append({"patient_id": p.patient_id, "sct_to_ct": cmp.sct_to_ct, "cbct_to_ct": cmp.cbct_to_ct})
    payload = {"checkpoint_key": str(key), "variant": store.header.get("variant"),
               "model": result.to_dict(), "identity": baseline.to_dict(), "tissue_kde": tissue}
    return payload, write_json(payload, out / "test_metrics.json")


def _validate_or_test(args: argparse.Namespace, command: str, partition: str) -> int:
    cfg = resolve_config(TEST_DEFAULTS, args.config, vars(args))
    cfg["partition"] = partition
    store, patients = _eval_inputs(cfg, partition)
    key = _checkpoint_key(cfg, store)
    store.record(key)
    run = Run(_out_dir(args, command), command, cfg)
    payload, path = test_run(cfg, store, patients, key, run.out)
    run.add(path)
    run.finish()
    m, b = payload["model"]["aggregate"], payload["identity"]["aggregate"]
    print(f"{key}: psnr {m['psnr']:.3f} (identity {b['psnr']:.3f}), ssim {m['ssim']:.4f}")
    return EXIT_OK


def cmd_test(args: argparse.Namespace) -> int:
    return _validate_or_test(args, "test", "test")


def cmd_validate(args: argparse.Namespace) -> int:
    return _validate_or_test(args, "validate", "validation")


REPORT_DEFAULTS = {"inputs": [], "plots": True}


def report_run(test_payloads: Sequence[dict[str, Any]], stores: Sequence[CheckpointStore], out: Path,
               plots: bool = True) -> list[Path]:
    rows = []
    for p in test_payloads:
        for name, block in (("identity", p["identity"]), (p.get("variant") or "model", p["model"])):
            if name == "identity" and any(r["model"] == "identity" for r in rows):
                continue
            a = block["aggregate"]
            rows.append({"model": name, "checkpoint": p["checkpoint_key"] if name != "identity" else "-",
                         **{k: a[k] for k in ("psnr", "ssim", "mae", "mse", "psnr_of_mean_mse")}})
    lines = ["| model | checkpoint | PSNR | SSIM | MAE | MSE |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['model']} | {r['checkpoint']} | {_fmt(r['psnr'], 2)} | {r['ssim']:.3f} "
                     f"| {r['mae']:.4f} | {r['mse']:.5f} |")
    paths = [write_json({"rows": rows}, out / "report.json")]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    paths.append(out / "report.md")
    for store in stores:
        series = loss_log(store)
        if series:
            tag = store.header.get("variant", store.root.parent.name)
            paths += export_loss_curves(series, out / "losses" / tag, plots=plots)
    return paths


def _fmt(v: Any, digits: int) -> str:
    return v if isinstance(v, str) else f"{v:.{digits}f}"


def cmd_report(args: argparse.Namespace) -> int:
    cfg = resolve_config(REPORT_DEFAULTS, args.config, vars(args))
    if not cfg["inputs"]:
        raise ParameterError("give at least one test output directory (--inputs)")
    payloads, stores = [], []
    for d in cfg["inputs"]:
        payload = _read_json(Path(d) / "test_metrics.json")
        payloads.append(payload)
        manifest = _read_json(Path(d) / "config.json")
        if manifest.get("train_dir"):
            stores.append(_store(manifest["train_dir"]))
    run = Run(_out_dir(args, "report"), "report", cfg)
    run.add(*report_run(payloads, stores, run.out, cfg["plots"]))
    run.finish()
    print((run.out / "report.md").read_text(), end="")
    return EXIT_OK


EXPORT_DEFAULTS = {**EVAL_DEFAULTS, "checkpoint": None, "selection": None, "partition": "test", "slices": [0]}


def cmd_export_images(args: argparse.Namespace) -> int:
    cfg = resolve_config(EXPORT_DEFAULTS, args.config, vars(args))
    if cfg["partition"] not in ("train", "validation", "test"):
        raise ParameterError(f"unknown partition {cfg['partition']!r}")
    store, patients = _eval_inputs(cfg, cfg["partition"])
    key = _checkpoint_key(cfg, store)
    store.record(key)
    pairs = _pick_slices(patients, cfg["slices"], _window(cfg))
    run = Run(_out_dir(args, "images"), "export-images", cfg)
    run.add(*export_qualitative(restore_state(store, key).generator, pairs, run.out, tag=str(key)))
    run.finish()
    print(f"{len(pairs)} images in {run.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- info commands


def cmd_param_count(args: argparse.Namespace) -> int:
    if args.variant:
        gen, disc = variant(args.variant)
        cfg = gen if args.arch in (None, "generator") else disc
    elif args.config:
        cfg = ArchConfig.from_dict(_read_json(args.config))
    else:
        if not args.arch:
            raise ParameterError("give --arch, --variant or --config")
        cfg = ArchConfig(args.arch, fqga_layers=args.fqga_layers, resblocks=args.resblocks)
    model = build_model(cfg)
    rows = parameter_table(model)
    total = count_parameters(model)
    if args.json:
        print(json.dumps({"config": cfg.to_dict(), "layers": rows, "total": total}, indent=2))
        return EXIT_OK
    width = max(len(r[0]) for r in rows)
    for name, kind, n in rows:
        print(f"{name:<{width}}  {kind:<16} {n:>12,}")
    print(f"{'total':<{width}}  {'':<16} {total:>12,}")
    return EXIT_OK


def cmd_heuristic(args: argparse.Namespace) -> int:
    res = _dims(args.res)
    slices = _range(args.slices)
    if (args.params is None) == (args.ratio is None):
        raise ParameterError("give exactly one of --params or --ratio")
    if args.params is not None:
        band = tp_band(HeuristicInput(args.params, res, slices, args.iterations))
        out = band.to_dict()
        rec = [optimal_p(t)[0] for t in band.tokens]
        text = f"T in [{band.tokens[0]:,}, {band.tokens[1]:,}]  T/P in [{band.ratio[0]:.3f}, {band.ratio[1]:.3f}]"
    else:
        if args.ratio <= 0:
            raise ParameterError("--ratio must be positive")
        ratio = int(args.ratio) if float(args.ratio).is_integer() else args.ratio
        tokens = [token_count(res, s, args.iterations) for s in slices]
        rec = [optimal_p(t, ratio)[0] for t in tokens]
        out = {"T_min": tokens[0], "T_max": tokens[1], "target_ratio": args.ratio}
        text = f"T in [{tokens[0]:,}, {tokens[1]:,}]  recommended P in [{float(rec[0]):,.0f}, {float(rec[1]):,.0f}]"
    out["recommended_P"] = [p if isinstance(p, int) else float(p) for p in rec]
    print(json.dumps(out) if args.json else text)
    return EXIT_OK


# --------------------------------------------------------------------------- reproduce

REPRODUCE_DEFAULTS = {
    "seed": 0, "n": 9, "corrupt_fraction": 0.0, "preset": "desk", "sizes": [5, 2, None],
    "variants": ["fqga-single", "cyclegan-m"], "epochs": 1, "arch_overrides": {},
    "threshold": DEFAULT_THRESHOLD, "roi": [-200.0, 200.0], "slices": [0], "plots": True,
}


def reproduce(cfg: dict[str, Any], out: Path, skip_train: bool = False) -> dict[str, Any]:
    """phantom-gen, clean, split, train each variant, sweep, select, test, report.

    Stage outputs live in subdirectories of ``out``; ``skip_train`` reuses
    existing checkpoints and only re-runs the evaluation stages.
    """
    unknown = set(cfg["arch_overrides"]) - set(cfg["variants"])
    if unknown:
        raise ParameterError(f"arch_overrides for variants not being trained: {sorted(unknown)}")
    for name, over in cfg["arch_overrides"].items():
        bad = set(over) - {"generator", "discriminator"}
        if bad:
            raise ParameterError(f"arch_overrides[{name!r}] accepts generator/discriminator only, got {sorted(bad)}")
    phantom_cfg = {**PHANTOM_DEFAULTS, **{k: cfg[k] for k in ("n", "corrupt_fraction", "seed", "preset")}}
    params = _phantom_params(phantom_cfg)
    cohort, labels = generate_cohort(cfg["n"], cfg["corrupt_fraction"], params, cfg["seed"])
    ref = generate_phantom_patient(replace(params, seed=params.seed + cfg["seed"]), "REF", "reference")
    data = out / "data"
    if not skip_train:
        shutil.rmtree(data, ignore_errors=True)
        for p in cohort:
            save_patient(p, data / "cohort")
        write_json({pid: (k.value if k else None) for pid, k in labels.items()}, data / "truth.json")
        kept, decisions = clean_cohort(cohort, build_reference(ref), cfg["threshold"],
                                       log_path=data / "clean_report.json")
        for p in kept:
            save_patient(p, data / "cleaned")
        _do_split(kept, cfg["sizes"], cfg["seed"]).save(data / "split.json")
    cleaned = _load_cohort(data / "cleaned")
    split = DatasetSplit.load(data / "split.json")
    train = _partition(cleaned, split, "train")
    validation = _partition(cleaned, split, "validation")
    test = _partition(cleaned, split, "test")

    payloads, stores = [], []
    for name in cfg["variants"]:
        vdir = out / name
        tcfg = {**TRAIN_DEFAULTS, "variant": name, "epochs": cfg["epochs"], "seed": cfg["seed"],
                "regime": "fqga_paired" if name.startswith("fqga") else "cyclegan",
                "cohort": str(data / "cleaned"), "split": str(data / "split.json"),
                **cfg["arch_overrides"].get(name, {})}
        if not skip_train:
            shutil.rmtree(vdir, ignore_errors=True)
            vdir.mkdir(parents=True)
            write_json(tcfg, vdir / "train_config.json")
            store = train_run(tcfg, vdir, train)
        else:
            store = _store(vdir)
        stores.append(store)
        ecfg = {**SWEEP_DEFAULTS, "train_dir": str(vdir), "cohort": tcfg["cohort"], "split": tcfg["split"]}
        _, (_, sweep_json) = sweep_run(ecfg, store, validation, vdir)
        key, _ = select_run({**SELECT_DEFAULTS, "slices": cfg["slices"]}, _read_json(sweep_json), vdir)
        payload, _ = test_run({**TEST_DEFAULTS, "roi": cfg["roi"]}, store, test, CheckpointKey.parse(key), vdir)
        payloads.append(payload)
    report_run(payloads, stores, out, cfg["plots"])
    return _read_json(out / "report.json")


def cmd_reproduce(args: argparse.Namespace) -> int:
    cfg = resolve_config(REPRODUCE_DEFAULTS, args.config, vars(args))
    out = _out_dir(args, "reproduce")
    if args.skip_train and not (out / "data" / "split.json").is_file():
        raise ParameterError(f"--skip-train needs an earlier run in {out}")
    run = Run(out, "reproduce", cfg)
    report = reproduce(cfg, out, args.skip_train)
    run.add(out / "report.json", out / "report.md")
    run.finish()
    print((out / "report.md").read_text(), end="")
    return EXIT_OK if report["rows"] else EXIT_RUNTIME


# --------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--out", help=f"output directory (default: ${RUN_DIR_ENV}/<command>)")
    if config:
        p.add_argument("--config", help="JSON config; unknown keys are rejected")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-dir", dest="train_dir")
    p.add_argument("--cohort")
    p.add_argument("--split")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sctforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, fn: Callable[[argparse.Namespace], int], help: str, config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        _common(p, config)
        p.set_defaults(func=fn)
        return p

    p = add("phantom-gen", cmd_phantom_gen, "generate a phantom cohort with truth labels")
    p.add_argument("--n", type=int)
    p.add_argument("--corrupt-fraction", dest="corrupt_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("default", "desk"))
    p.add_argument("--depth", help="N or A..B slices")
    p.add_argument("--size", help="HxW")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--cupping-amplitude", dest="cupping_amplitude", type=float)
    p.add_argument("--streak-count", dest="streak_count", type=int)
    p.add_argument("--intensity-shift", dest="intensity_shift", type=float)

    p = add("clean", cmd_clean, "KDE-screen a cohort against a reference pair")
    p.add_argument("--cohort")
    p.add_argument("--reference", help="reference patient directory")
    p.add_argument("--threshold", type=float)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--sizes", help="train,validation,test sizes; 'rest' takes the remainder")
    p.add_argument("--seed", type=int)

    p = add("split", cmd_split, "split a cohort into train/validation/test")
    p.add_argument("--cohort")
    p.add_argument("--sizes")
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "SEM training from a TrainConfig JSON")
    p.add_argument("--cohort")
    p.add_argument("--split")
    p.add_argument("--variant")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = add("sweep", cmd_sweep, "evaluate a range of checkpoints on the validation set")
    _eval_flags(p)
    p.add_argument("--range", help="A..B patient indices (default: all)")
    p.add_argument("--epoch", type=int)
    p.add_argument("--pass-index", dest="pass_index", type=int)

    p = add("select", cmd_select, "pick the best checkpoint of a sweep and export its triptychs")
    p.add_argument("--sweep", help="sweep.json")
    p.add_argument("--rule", choices=("psnr", "ssim", "mae", "mse"))

    for name, fn, help in (("test", cmd_test, "metrics on the test partition"),
                           ("validate", cmd_validate, "metrics on the validation partition")):
        p = add(name, fn, help)
        _eval_flags(p)
        p.add_argument("--checkpoint", help="checkpoint key, e.g. e1_p3_s1")
        p.add_argument("--selection", help="selection.json from `select`")

    p = add("report", cmd_report, "comparison table and loss curves from test outputs")
    p.add_argument("--inputs", nargs="+", help="test output directories")

    p = add("export-images", cmd_export_images, "CBCT | sCT | CT triptychs for chosen slices")
    _eval_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--selection")
    p.add_argument("--partition", choices=("train", "validation", "test"))
    p.add_argument("--slices", type=lambda s: [int(x) for x in s.split(",")])

    p = sub.add_parser("param-count", help="per-layer parameter table")
    p.add_argument("--arch", choices=("fqga_gen", "fqga_disc", "cyclegan_gen", "cyclegan_disc", "generator",
                                      "discriminator"))
    p.add_argument("--variant")
    p.add_argument("--config", help="ArchConfig JSON")
    p.add_argument("--fqga-layers", dest="fqga_layers", type=int, default=1)
    p.add_argument("--resblocks", type=int, default=9)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("heuristic", help="T/P band or recommended parameter count")
    p.add_argument("--res", required=True, help="HxW")
    p.add_argument("--slices", required=True, help="N or A..B")
    p.add_argument("--params", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_heuristic)

    p = add("reproduce", cmd_reproduce, "end-to-end desk-scale pipeline")
    p.add_argument("--skip-train", dest="skip_train", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SctForgeError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
