"""``ecogscreen`` command line: eda, umap-knn, train, finetune, screen, synth.

Every verb reads one JSON config (``--config``), applies flag overrides and
writes its artifacts plus ``report.json`` into ``--out``. Reports contain no
wall-clock values so re-runs are byte-identical; timings go to
``timing.txt``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DataError, extract_stimulus_epochs, list_participants, load_participant
from .knn import EvaluationTable, VARIANTS, evaluate_variant, screening_correlation
from .nn import DivergenceError, ShapeError, TrainConfig, evaluate, fine_tune, load_model, save_model, write_history
from .nn.search import SearchSpace, TaskSpec, hyper_search
from .pipeline import (PrepConfig, dl_condition_split, dl_interval_split, participant_splits,
                       recordings_by_condition)
from .plots import line_plot, scatter_plot
from .spectral import bootstrap_cohort_stats, coherence, dominant_frequencies, fft_magnitude, psd_welch, write_table2
from .synth import SynthConfig, write_cohort
from .umap import UmapConfig

log = logging.getLogger("ecogscreen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "dataset_root": None,
    "participants": None,
    "seed": 0,
    "out": "out",
    "jobs": 1,
    "variant": "both",
    "prep": {f.name: f.default for f in fields(PrepConfig)},
    "umap": {f.name: f.default for f in fields(UmapConfig)},
    "knn": {"k": 4, "threshold": 0.8, "embedding_mode": "transform"},
    "eda": {"n_boot": 1000, "nperseg": 256, "overlap": 0.5},
    "dl": {
        "task": "2class", "family": "cnn", "trials": 10,
        "epochs": 50, "batch_size": 16, "lr": 1e-3, "optimizer": "adam", "patience": 10,
        "search": {f.name: f.default for f in fields(SearchSpace) if f.name != "n_trials"},
    },
    "finetune": {"source_model": None, "target": None, "epochs": 50, "lr": 1e-3},
    "screen": {"knn_table": None, "dl_results": None},
    "synth": {f.name: f.default for f in fields(SynthConfig) if f.name != "seed"},
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node, parts = cfg, key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return _jsonable(cfg)


def _build(cls, params: dict, section: str):
    try:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from None


def _root(cfg) -> Path:
    if not cfg["dataset_root"]:
        raise ConfigError("dataset_root is not set (use --root or the config file)")
    root = Path(cfg["dataset_root"])
    if not root.is_dir():
        raise ConfigError(f"dataset_root {root} does not exist")
    return root


def _participants(cfg) -> list[str]:
    available = list_participants(_root(cfg))
    wanted = cfg["participants"]
    if wanted is None:
        return available
    missing = [p for p in wanted if p not in available]
    if missing:
        raise DataError(f"participants not found under {cfg['dataset_root']}: {missing}")
    return list(wanted)


def _variants(cfg) -> tuple:
    v = cfg["variant"]
    if v == "both":
        return VARIANTS
    if v not in VARIANTS:
        raise ConfigError(f"variant must be processed, unprocessed or both, got {v!r}")
    return (v,)


def tree_hash(root) -> str:
    """Git-style content hash: sha1 blob ids of every file, folded over sorted paths."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        data = p.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{p.relative_to(root).as_posix()} {blob}\n".encode())
    return h.hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _pmap(fn, items, jobs: int):
    """Map preserving input order; parallel across processes when jobs > 1."""
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# eda
# ---------------------------------------------------------------------------

def _eda_one(args):
    cfg, pid = args
    e = cfg["eda"]
    real, imag = recordings_by_condition(load_participant(cfg["dataset_root"], pid))
    fs = real.srate
    psd = {c.condition.value: psd_welch(np.asarray(c.voltages, np.float64).T, fs, e["nperseg"], e["overlap"])
           for c in (real, imag)}
    n = min(real.n_samples, imag.n_samples)
    coh = coherence(np.asarray(real.voltages[:n], np.float64).T, np.asarray(imag.voltages[:n], np.float64).T,
                    fs, e["nperseg"], e["overlap"])
    peaks = {c.condition.value: dominant_frequencies(fft_magnitude(np.asarray(c.voltages, np.float64).T.mean(0), fs),
                                                     3).tolist() for c in (real, imag)}
    row = bootstrap_cohort_stats(extract_stimulus_epochs(real, cfg["prep"]["stim_window"]),
                                 extract_stimulus_epochs(imag, cfg["prep"]["stim_window"]),
                                 n_boot=e["n_boot"], seed=cfg["seed"], fs=fs, nperseg=e["nperseg"],
                                 overlap_fraction=e["overlap"], participant_id=pid)
    return pid, psd, coh, peaks, row


def _spectrum_csv(path: Path, freqs, columns: dict) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz"] + list(columns))
        for i, f in enumerate(freqs):
            w.writerow([f"{f:.6g}"] + [f"{columns[c][i]:.9g}" for c in columns])
    return path


def cmd_eda(cfg, out: Path) -> dict:
    pids = _participants(cfg)
    results = _pmap(_eda_one, [(cfg, p) for p in pids], cfg["jobs"])
    artifacts, rows, metrics = [], [], {}
    pooled_psd, pooled_coh = {}, []
    for pid, psd, coh, peaks, row in results:
        cols = {k: v.values.mean(axis=0) for k, v in psd.items()}
        freqs = psd["real"].freqs_hz
        artifacts.append(_spectrum_csv(out / f"psd_{pid}.csv", freqs, cols))
        artifacts.append(line_plot(out / f"psd_{pid}.svg", freqs, cols, f"PSD {pid}", "Hz", "power/Hz", logy=True))
        cc = coh.values.mean(axis=0)
        artifacts.append(_spectrum_csv(out / f"coherence_{pid}.csv", coh.freqs_hz, {"coherence": cc}))
        artifacts.append(line_plot(out / f"coherence_{pid}.svg", coh.freqs_hz, {"real vs imagery": cc},
                                   f"Coherence {pid}", "Hz", "coherence"))
        for k, v in cols.items():
            pooled_psd.setdefault(k, []).append(v)
        pooled_coh.append(cc)
        rows.append(row)
        metrics[pid] = {"fft_peaks_hz": peaks, "abs_mean_diff": round(row.abs_mean_diff, 6)}
    freqs = results[0][1]["real"].freqs_hz
    pooled = {k: np.mean(v, axis=0) for k, v in pooled_psd.items()}
    artifacts.append(_spectrum_csv(out / "psd_pooled.csv", freqs, pooled))
    artifacts.append(line_plot(out / "psd_pooled.svg", freqs, pooled, "PSD (pooled)", "Hz", "power/Hz", logy=True))
    artifacts.append(_spectrum_csv(out / "coherence_pooled.csv", results[0][2].freqs_hz,
                                   {"coherence": np.mean(pooled_coh, axis=0)}))
    artifacts.append(write_table2(rows, out / "table2.csv"))
    order = sorted(rows, key=lambda r: (r.abs_mean_diff, r.participant_id))
    metrics["abs_mean_diff_order"] = [r.participant_id for r in order]
    return {"metrics": metrics, "artifacts": artifacts}


# ---------------------------------------------------------------------------
# umap-knn
# ---------------------------------------------------------------------------

def _knn_one(args):
    cfg, pid, variants = args
    prep = _build(PrepConfig, cfg["prep"], "prep")
    ucfg = _build(UmapConfig, cfg["umap"], "umap")
    real, imag = recordings_by_condition(load_participant(cfg["dataset_root"], pid))
    splits = participant_splits(real, imag, cfg["seed"], prep, variants)
    row, embeds = {}, {}
    for v in variants:
        tr, te, e_tr, e_te = evaluate_variant(splits[v], ucfg, cfg["seed"], cfg["knn"]["k"],
                                              cfg["knn"]["embedding_mode"])
        row[v] = (tr, te)
        embeds[v] = (e_tr, e_te, splits[v].train.labels, splits[v].test.labels)
    return pid, row, embeds


def run_umap_knn(cfg, out: Path | None, variants) -> tuple[EvaluationTable, list]:
    pids = _participants(cfg)
    table = EvaluationTable(embedding_mode=cfg["knn"]["embedding_mode"])
    artifacts = []
    for pid, row, embeds in _pmap(_knn_one, [(cfg, p, variants) for p in pids], cfg["jobs"]):
        table.rows[pid] = row
        if out is not None:
            for v, (e_tr, e_te, l_tr, l_te) in embeds.items():
                pts = np.vstack([e_tr, e_te])
                labels = np.concatenate([l_tr, l_te])
                hollow = np.r_[np.zeros(len(e_tr), bool), np.ones(len(e_te), bool)]
                artifacts.append(scatter_plot(out / f"embedding_{pid}_{v}.svg", pts, labels,
                                              {0: "real", 1: "imagery"}, f"UMAP {pid} ({v}); rings = test",
                                              "UMAP-1", "UMAP-2", hollow=hollow))
    return table, artifacts


def cmd_umap_knn(cfg, out: Path) -> dict:
    table, artifacts = run_umap_knn(cfg, out, _variants(cfg))
    artifacts.insert(0, table.to_csv(out / "table1.csv"))
    metrics = {pid: {v: {"train": round(s[0], 6), "test": round(s[1], 6)} for v, s in r.items()}
               for pid, r in table.rows.items()}
    metrics["average"] = {v: {"train": round(s[0], 6), "test": round(s[1], 6)} for v, s in table.averages().items()}
    return {"metrics": metrics, "artifacts": artifacts}


# ---------------------------------------------------------------------------
# train / finetune
# ---------------------------------------------------------------------------

def task_split(cfg, pid):
    """Decimated SplitPair for the configured DL task of one participant."""
    prep = _build(PrepConfig, cfg["prep"], "prep")
    real, imag = recordings_by_condition(load_participant(cfg["dataset_root"], pid))
    task = cfg["dl"]["task"]
    if task == "2class":
        return dl_condition_split(real, imag, cfg["seed"], prep)
    if task == "3class":
        return dl_interval_split(real, cfg["seed"], prep)
    raise ConfigError(f"dl.task must be '2class' or '3class', got {task!r}")


def _train_cfg(cfg, epochs=None, lr=None) -> TrainConfig:
    d = cfg["dl"]
    return _build(TrainConfig, {"lr": d["lr"] if lr is None else lr, "batch_size": d["batch_size"],
                                "epochs": d["epochs"] if epochs is None else epochs, "optimizer": d["optimizer"],
                                "seed": cfg["seed"], "patience": d["patience"]}, "dl")


def _train_one(args):
    cfg, pid = args
    split = task_split(cfg, pid)
    n_classes = 2 if cfg["dl"]["task"] == "2class" else 3
    space = _build(SearchSpace, {**cfg["dl"]["search"], "families": (cfg["dl"]["family"],),
                                 "n_trials": cfg["dl"]["trials"]}, "dl.search")
    task = TaskSpec(tuple(split.train.data.shape[1:]) + (1,), n_classes)
    res = hyper_search(space, task, split, seed=cfg["seed"], base_cfg=_train_cfg(cfg))
    return pid, res


def run_train(cfg, out: Path | None) -> dict:
    if cfg["dl"]["trials"] < 1:
        raise ConfigError("dl.trials must be >= 1")
    results = {}
    for pid, res in _pmap(_train_one, [(cfg, p) for p in _participants(cfg)], cfg["jobs"]):
        results[pid] = res
    return results


def cmd_train(cfg, out: Path) -> dict:
    results = run_train(cfg, out)
    artifacts, metrics = [], {}
    tag = f"{cfg['dl']['family']}_{cfg['dl']['task']}"
    for pid, res in results.items():
        artifacts.append(save_model(res.best_model, out / f"model_{pid}_{tag}.ecnn"))
        artifacts.append(write_history(res.best_model, out / f"history_{pid}_{tag}.csv"))
        artifacts.append(res.to_json(out / f"leaderboard_{pid}_{tag}.json"))
        metrics[pid] = {"test_accuracy": res.best["test_acc"], "test_loss": res.best["test_loss"],
                        "best_trial": res.best["trial"], "param_hash": res.best_model.param_hash()}
    artifacts.append(_write_json(out / "dl_results.json",
                                 {"architecture": cfg["dl"]["family"], "task": cfg["dl"]["task"],
                                  "participants": {p: m["test_accuracy"] for p, m in metrics.items()}}))
    return {"metrics": metrics, "artifacts": artifacts}


def cmd_finetune(cfg, out: Path) -> dict:
    f = cfg["finetune"]
    if not f["source_model"]:
        raise ConfigError("finetune.source_model is not set (use --source)")
    src_path = Path(f["source_model"])
    if not src_path.is_file():
        raise ConfigError(f"source model {src_path} not found")
    if not f["target"]:
        raise ConfigError("finetune.target is not set (use --target)")
    source = load_model(src_path)
    split = task_split(cfg, f["target"])
    if tuple(split.train.data.shape[1:]) + (1,) != source.input_shape:
        raise ShapeError(f"source model input {source.input_shape} is incompatible with target data "
                         f"{tuple(split.train.data.shape[1:]) + (1,)}")
    before = evaluate(source, split.test)
    model = fine_tune(source, split, _train_cfg(cfg, f["epochs"], f["lr"]))
    after = evaluate(model, split.test)
    stem = f"finetuned_{f['target']}_from_{src_path.stem}"
    artifacts = [save_model(model, out / f"{stem}.ecnn"), write_history(model, out / f"history_{stem}.csv")]
    metrics = {"target": f["target"], "source_model_sha256": _sha256(src_path),
               "source_param_hash": source.param_hash(),
               "before": {"test_loss": round(before[0], 8), "test_accuracy": round(before[1], 8)},
               "after": {"test_loss": round(after[0], 8), "test_accuracy": round(after[1], 8)},
               "epochs_run": len(model.history) - len(source.history)}
    return {"metrics": metrics, "artifacts": artifacts}


# ---------------------------------------------------------------------------
# screen
# ---------------------------------------------------------------------------

def _read_knn_table(path: Path) -> dict:
    with path.open() as fh:
        rows = list(csv.reader(fh))
    return {r[0]: float(r[2]) for r in rows[1:] if r[0] != "Avg" and r[2] != ""}


def cmd_screen(cfg, out: Path) -> dict:
    s = cfg["screen"]
    artifacts = []
    if s["knn_table"]:
        knn = _read_knn_table(Path(s["knn_table"]))
    else:
        table, _ = run_umap_knn(cfg, None, ("processed",))
        artifacts.append(table.to_csv(out / "table1.csv"))
        knn = table.test_scores("processed")
    if s["dl_results"]:
        dl = json.loads(Path(s["dl_results"]).read_text())["participants"]
    else:
        dl = {pid: res.best["test_acc"] for pid, res in run_train(cfg, None).items()}
    if set(knn) != set(dl):
        raise DataError(f"unmatched participant sets: KNN {sorted(knn)} vs DL {sorted(dl)}")
    pids = sorted(knn)
    rep = screening_correlation([knn[p] for p in pids], [dl[p] for p in pids], cfg["knn"]["threshold"], pids,
                                cfg["dl"]["family"])
    rep.config = {"seed": cfg["seed"], "task": cfg["dl"]["task"], "embedding_mode": cfg["knn"]["embedding_mode"]}
    artifacts.append(rep.to_json(out / "screening.json"))
    artifacts.append(scatter_plot(out / "screening.svg", np.c_[rep.knn_scores, rep.dl_accuracies],
                                  title=f"KNN test score vs DL test accuracy (rho={rep.rho:.3f})",
                                  xlabel="KNN test score", ylabel="DL test accuracy", annotations=pids))
    return {"metrics": {"spearman_rho": round(rep.rho, 6),
                        "verdicts": dict(zip(pids, rep.verdicts))}, "artifacts": artifacts}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(cfg, out: Path) -> dict:
    scfg = _build(SynthConfig, {**cfg["synth"], "seed": cfg["seed"]}, "synth")
    data = write_cohort(scfg, out)
    artifacts = [data / "cohort.json", out / "ground_truth.json"]
    return {"metrics": {"participants": scfg.participant_ids(), "dataset_root": data.as_posix()},
            "artifacts": artifacts}


COMMANDS = {"eda": cmd_eda, "umap-knn": cmd_umap_knn, "train": cmd_train, "finetune": cmd_finetune,
            "screen": cmd_screen, "synth": cmd_synth}


def validate_config(cfg: dict) -> None:
    """Build every typed section once so bad values surface as config errors before any work."""
    _build(PrepConfig, cfg["prep"], "prep")
    _build(UmapConfig, cfg["umap"], "umap")
    _build(SearchSpace, {**cfg["dl"]["search"], "n_trials": cfg["dl"]["trials"]}, "dl.search")
    _train_cfg(cfg)
    if cfg["dl"]["task"] not in ("2class", "3class"):
        raise ConfigError(f"dl.task must be '2class' or '3class', got {cfg['dl']['task']!r}")


def run(command: str, cfg: dict) -> dict:
    """Execute one verb and write ``report.json``; returns the report."""
    validate_config(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = COMMANDS[command](cfg, out)
    wall = time.perf_counter() - t0
    inputs = {"config_sha256": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()}
    if command != "synth":
        inputs["dataset_sha256"] = tree_hash(cfg["dataset_root"])
    report = {
        "command": command,
        "tool_version": __version__,
        "config": cfg,
        "inputs": inputs,
        "metrics": result["metrics"],
        "artifacts": {Path(a).relative_to(out).as_posix() if Path(a).is_relative_to(out) else str(a):
                      _sha256(Path(a)) for a in result["artifacts"]},
    }
    _write_json(out / "report.json", report)
    (out / "timing.txt").write_text(f"{command} wall_clock_s {wall:.3f}\n")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecogscreen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, help="master seed (u64)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--jobs", type=int, help="worker processes (results merged in participant order)")
        s.add_argument("--root", help="dataset root (overrides dataset_root)")
        s.add_argument("--participants", nargs="+", help="participant ids")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. dl.trials=5 (value parsed as JSON)")
        if name == "finetune":
            s.add_argument("--source", help="pretrained model file")
            s.add_argument("--target", help="participant to fine-tune on")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        cfg = load_config(args.config, args.overrides)
        for key in ("seed", "out", "jobs", "participants"):
            if getattr(args, key) is not None:
                cfg[key] = getattr(args, key)
        if args.root is not None:
            cfg["dataset_root"] = args.root
        if args.command == "finetune":
            if args.source is not None:
                cfg["finetune"]["source_model"] = args.source
            if args.target is not None:
                cfg["finetune"]["target"] = args.target
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0 or cfg["seed"] >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg['seed']!r}")
        if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
            raise ConfigError("jobs must be a positive integer")
        if args.command != "synth":
            _root(cfg)
        report = run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(report["metrics"], indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
