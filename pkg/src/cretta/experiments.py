"""Experiment orchestration: cells, summaries, plot data, verification.

A cell is one (method, corruption, severity, seed) run, optionally tagged
with a beta (sweeps) or a delta (non-iid streams).  Cells are independent
and may run in a worker pool; all files are written by the main thread in
sorted order so reruns are byte-identical.

Output layout under the experiment directory:
    config.yaml                       exact echo of the validated config
    environment.txt                   version stamp, no timestamps
    <method>/<corruption>_<severity>/seed<k>.log    one JSON line per batch
    cells.tsv                         one row per cell
    summary.tsv                       one row per method (x beta/delta)
    plots/<corruption>_<severity>.tsv long-format trajectories
"""

from __future__ import annotations

import copy
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__ as PACKAGE_VERSION
from .config import (ExperimentConfig, AdaptConfig, config_to_dict,
                     adapt_config_from_dict, dump_config)
from .engine import EpisodeAbort, run_episode
from .metrics import ece_from_bin_stats, mce, CorruptionErrorTable
from .model import pretrain_source
from .seeding import seed_sequence_for
from .stream import (CorruptionSpec, Dataset, corrupt, dirichlet_stream,
                     gradual_stream, iid_stream, make_dataset, dump_dataset)

#: AdaptConfig overrides per public method name; nested dicts merge.
METHOD_PRESETS = {
    "source": {"loss_variant": "bn_only", "bn_mode": "running",
               "param_mask": "none"},
    "bn_adapt": {"loss_variant": "bn_only", "bn_mode": "batch",
                 "param_mask": "none"},
    "tent": {"loss_variant": "entropy_tent"},
    "pl": {"loss_variant": "pseudo_label"},
    "cretta": {"loss_variant": "cretta"},
    "cretta_uniform": {"loss_variant": "cretta",
                       "weight_mode": "uniform_random"},
    "cretta_cartesian": {"loss_variant": "cretta", "pairing": "cartesian"},
    "no_contrastive": {"loss_variant": "no_contrastive"},
    "no_contrastive_sigma": {"loss_variant": "no_contrastive_sigma"},
    "pairwise_non_residual": {"loss_variant": "pairwise_non_residual"},
    "nce_residual": {"loss_variant": "nce_residual"},
    "nce_non_residual": {"loss_variant": "nce_non_residual"},
    "cretta_buffer_1pct": {"loss_variant": "cretta",
                           "buffer": {"fraction": 0.01}},
    "cretta_buffer_2pct": {"loss_variant": "cretta",
                           "buffer": {"fraction": 0.02}},
    "cretta_surrogate": {"loss_variant": "cretta",
                         "buffer": {"origin": "surrogate_dataset"}},
    "cretta_conf_high": {"loss_variant": "cretta",
                         "buffer": {"origin": "confidence_high"}},
    "cretta_conf_low": {"loss_variant": "cretta",
                        "buffer": {"origin": "confidence_low"}},
    "cretta_augmented": {"loss_variant": "cretta",
                         "buffer": {"augmentation": {
                             "max_rotation_deg": 10.0,
                             "jitter_sigma": 0.05,
                             "probability": 1.0}}},
}

KIND_DEFAULT_METHODS = {
    "single": ["cretta"],
    "compare": ["source", "bn_adapt", "tent", "pl", "cretta"],
    "ablate": ["cretta", "no_contrastive", "no_contrastive_sigma",
               "pairwise_non_residual", "nce_residual", "nce_non_residual",
               "cretta_uniform", "cretta_cartesian", "cretta_buffer_1pct",
               "cretta_buffer_2pct", "cretta_surrogate", "cretta_conf_high",
               "cretta_conf_low"],
    "sweep": ["cretta"],
    "gradual": ["source", "bn_adapt", "tent", "cretta"],
    "noniid": ["tent", "cretta"],
}

KIND_DEFAULT_BETAS = [0.5, 1.0, 2.0, 4.0]

#: metrics emitted per batch into the plot tables, fixed order
PLOT_METRICS = ("accuracy", "mean_confidence", "running_ece",
                "mean_energy_target", "mean_weight", "loss")

ADAPT_STAGES_EXCLUDED = ("Q_eval",)


def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_method(adapt: AdaptConfig, method: str) -> AdaptConfig:
    """Overlay a method preset on the experiment's base adaptation config."""
    if method not in METHOD_PRESETS:
        raise ValueError(f"unknown method {method!r}")
    merged = _deep_merge(config_to_dict(adapt), METHOD_PRESETS[method])
    return adapt_config_from_dict(merged)


def sub_seed(seed: int, tag: str) -> int:
    return int(seed_sequence_for(seed, tag).generate_state(1)[0])


@dataclass
class Cell:
    method: str
    corruption: str
    severity: int
    seed: int
    beta: float | None = None
    delta: float | None = None

    @property
    def method_label(self) -> str:
        label = self.method
        if self.beta is not None:
            label = f"{label}_beta{self.beta:g}"
        if self.delta is not None:
            label = f"{label}_delta{self.delta:g}"
        return label

    @property
    def scenario_label(self) -> str:
        if self.severity < 0:
            return f"{self.corruption}_gradual"
        return f"{self.corruption}_{self.severity}"

    @property
    def log_path(self) -> str:
        return os.path.join(self.method_label, self.scenario_label,
                            f"seed{self.seed}.log")


@dataclass
class CellResult:
    cell: Cell
    status: str
    records: list = field(default_factory=list)
    error: str = ""


def enumerate_cells(cfg: ExperimentConfig) -> list:
    cells = []
    if cfg.kind == "sweep":
        for method in cfg.methods:
            for beta in cfg.betas:
                for corruption in cfg.corruptions:
                    for severity in cfg.severities:
                        for seed in cfg.seeds:
                            cells.append(Cell(method, corruption,
                                              int(severity), int(seed),
                                              beta=float(beta)))
    elif cfg.kind == "noniid":
        for method in cfg.methods:
            for delta in cfg.deltas:
                for corruption in cfg.corruptions:
                    for severity in cfg.severities:
                        for seed in cfg.seeds:
                            cells.append(Cell(method, corruption,
                                              int(severity), int(seed),
                                              delta=float(delta)))
    elif cfg.kind == "gradual":
        for method in cfg.methods:
            for corruption in cfg.corruptions:
                for seed in cfg.seeds:
                    cells.append(Cell(method, corruption, -1, int(seed)))
    else:
        for method in cfg.methods:
            for corruption in cfg.corruptions:
                for severity in cfg.severities:
                    for seed in cfg.seeds:
                        cells.append(Cell(method, corruption, int(severity),
                                          int(seed)))
    return cells


class World:
    """Per-seed datasets and the pretrained source model, built once and
    shared read-only across that seed's cells."""

    def __init__(self, cfg: ExperimentConfig, seed: int,
                 need_surrogate: bool):
        ds = cfg.dataset
        kw = dict(aspect=ds.aspect, spread=ds.spread,
                  redundancy=ds.redundancy, offset=ds.offset)
        self.source_dataset = make_dataset(
            ds.kind, ds.n, ds.dim, ds.classes, ds.separation,
            seed=sub_seed(seed, "source-data"), **kw)
        self.target_dataset = make_dataset(
            ds.kind, ds.target_n, ds.dim, ds.classes, ds.separation,
            seed=sub_seed(seed, "target-data"), **kw)
        self.surrogate_dataset = None
        if need_surrogate:
            self.surrogate_dataset = make_dataset(
                ds.kind, ds.n, ds.dim, ds.classes, ds.separation,
                seed=sub_seed(seed, "surrogate-data"), **kw)
        pt = cfg.pretrain
        widths = [ds.dim] + [int(h) for h in pt.hidden] + [ds.classes]
        self.source_model = pretrain_source(
            self.source_dataset, widths=widths,
            seed=sub_seed(seed, "pretrain"), epochs=pt.epochs, lr=pt.lr,
            batch_size=pt.batch_size)


def build_worlds(cfg: ExperimentConfig) -> dict:
    need_surrogate = cfg.adapt.buffer.origin == "surrogate_dataset" or any(
        METHOD_PRESETS[m].get("buffer", {}).get("origin")
        == "surrogate_dataset" for m in cfg.methods)
    return {int(s): World(cfg, int(s), need_surrogate) for s in cfg.seeds}


def run_cell(cfg: ExperimentConfig, cell: Cell, world: World) -> CellResult:
    adapt = apply_method(cfg.adapt, cell.method)
    adapt.seed = cell.seed
    if cell.beta is not None:
        adapt.beta = cell.beta
    if cfg.kind == "noniid":
        adapt.stream.mode = "dirichlet"
        if cell.delta is not None:
            adapt.stream.delta = cell.delta
    if cfg.kind == "gradual":
        adapt.stream.mode = "gradual"
    adapt.validate()

    stream_seed = sub_seed(cell.seed, "stream")
    scfg = adapt.stream
    if scfg.mode == "gradual":
        severities = [int(s) for s in scfg.severities]
        stream = gradual_stream(world.target_dataset, cell.corruption,
                                severities, scfg.batches_per_stage,
                                adapt.batch_size, seed=stream_seed,
                                eval_batches=scfg.eval_batches)
        length = (1 + len(severities)) * scfg.batches_per_stage \
            + scfg.eval_batches
    else:
        corr_seed = sub_seed(cell.seed, "corruption")
        spec = CorruptionSpec(cell.corruption, cell.severity)
        shifted = corrupt(world.target_dataset.inputs, spec, seed=corr_seed)
        shifted_ds = Dataset(shifted, world.target_dataset.labels,
                             world.target_dataset.num_classes,
                             world.target_dataset.spec)
        if scfg.mode == "dirichlet":
            stream = dirichlet_stream(shifted_ds, scfg.delta,
                                      adapt.batch_size, stream_seed)
        else:
            stream = iid_stream(shifted_ds, adapt.batch_size, stream_seed)
        length = adapt.stream_length

    try:
        episode = run_episode(adapt, world.source_model, stream,
                              source_dataset=world.source_dataset,
                              surrogate_dataset=world.surrogate_dataset,
                              stream_length=length)
        return CellResult(cell, "ok", episode.records)
    except EpisodeAbort as exc:
        return CellResult(cell, "aborted", [], error=str(exc))


# -- aggregation --------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _running_ece_series(records) -> list:
    counts = None
    series = []
    for r in records:
        c = np.asarray(r.bin_counts, dtype=np.float64)
        cs = np.asarray(r.bin_conf_sums, dtype=np.float64)
        ks = np.asarray(r.bin_correct_sums, dtype=np.float64)
        if counts is None:
            counts, conf_sums, correct_sums = c.copy(), cs.copy(), ks.copy()
        else:
            counts += c
            conf_sums += cs
            correct_sums += ks
        series.append(ece_from_bin_stats(counts, conf_sums, correct_sums))
    return series


def _pooled_accuracy(records) -> float | None:
    total = sum(r.batch_size for r in records)
    if total == 0:
        return None
    return sum(r.correct for r in records) / total


def summarize_cell(result: CellResult) -> dict:
    """Scalar metrics for one cell; everything recomputable from the log."""
    cell = result.cell
    row = {
        "method": cell.method_label,
        "corruption": cell.corruption,
        "severity": "gradual" if cell.severity < 0 else cell.severity,
        "beta": cell.beta,
        "delta": cell.delta,
        "seed": cell.seed,
        "status": result.status,
        "batches": len(result.records),
        "acc": None, "final_acc": None, "ece": None, "ece_first": None,
        "ece_last": None, "energy_first": None, "energy_last": None,
        "mean_weight": None, "q_acc": None, "q_eval_acc": None,
        "forwards": None, "backwards": None, "updates": None,
        "precompute_forwards": None, "aux_backwards": None,
        "max_spot_dev": None,
    }
    records = result.records
    if not records:
        return row
    adapt_records = [r for r in records
                     if r.stage not in ADAPT_STAGES_EXCLUDED]
    row["acc"] = float(np.mean([r.accuracy for r in records]))
    if adapt_records:
        tail = adapt_records[-10:]
        row["final_acc"] = _pooled_accuracy(tail)
        series = _running_ece_series(adapt_records)
        row["ece"] = series[-1]
        row["ece_first"] = series[0]
        row["ece_last"] = series[-1]
        row["energy_first"] = adapt_records[0].mean_e_theta_t
        row["energy_last"] = adapt_records[-1].mean_e_theta_t
        weights = [r.mean_weight for r in adapt_records
                   if r.mean_weight is not None]
        if weights:
            row["mean_weight"] = float(np.mean(weights))
        devs = [r.spot_check_dev for r in adapt_records
                if r.spot_check_dev is not None]
        if devs:
            row["max_spot_dev"] = max(devs)
    q_records = [r for r in records if r.stage == "Q"]
    if q_records:
        row["q_acc"] = _pooled_accuracy(q_records)
    qe_records = [r for r in records if r.stage == "Q_eval"]
    if qe_records:
        row["q_eval_acc"] = _pooled_accuracy(qe_records)
    costs = records[-1].costs
    for key in ("forwards", "backwards", "updates", "precompute_forwards",
                "aux_backwards"):
        row[key] = costs[key]
    return row


CELL_COLUMNS = ("method", "corruption", "severity", "beta", "delta", "seed",
                "status", "batches", "acc", "final_acc", "ece", "ece_first",
                "ece_last", "energy_first", "energy_last", "mean_weight",
                "q_acc", "q_eval_acc", "forwards", "backwards", "updates",
                "precompute_forwards", "aux_backwards", "max_spot_dev")

SUMMARY_COLUMNS = ("method", "beta", "delta", "seeds", "acc_mean", "acc_sd",
                   "final_acc", "ece", "ece_first", "ece_last", "mce",
                   "mean_weight", "q_acc", "q_eval_acc")


def cells_table(rows) -> str:
    lines = ["\t".join(CELL_COLUMNS)]
    for row in rows:
        lines.append("\t".join(_fmt(row[c]) for c in CELL_COLUMNS))
    return "\n".join(lines) + "\n"


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def summary_table(cfg: ExperimentConfig, cell_rows) -> str:
    """One row per method label, averaged over seeds and scenarios.  The mCE
    column normalizes by the 'source' method when it is present."""
    groups = {}
    for row in cell_rows:
        groups.setdefault(row["method"], []).append(row)

    # per-(corruption, severity) mean error rates feed the mCE column
    base_errors = {}
    source_rows = groups.get("source", [])
    for row in source_rows:
        if row["acc"] is None or row["severity"] == "gradual":
            continue
        key = (row["corruption"], row["severity"])
        base_errors.setdefault(key, []).append(1.0 - row["acc"])

    lines = ["\t".join(SUMMARY_COLUMNS)]
    for method in sorted(groups):
        rows = [r for r in groups[method] if r["status"] == "ok"]
        if not rows:
            rows = groups[method]
        accs = [r["acc"] for r in rows if r["acc"] is not None]
        out = {
            "method": method,
            "beta": rows[0]["beta"],
            "delta": rows[0]["delta"],
            "seeds": len({r["seed"] for r in rows}),
            "acc_mean": _mean_or_none(accs),
            "acc_sd": float(np.std(accs)) if accs else None,
            "final_acc": _mean_or_none([r["final_acc"] for r in rows]),
            "ece": _mean_or_none([r["ece"] for r in rows]),
            "ece_first": _mean_or_none([r["ece_first"] for r in rows]),
            "ece_last": _mean_or_none([r["ece_last"] for r in rows]),
            "mce": None,
            "mean_weight": _mean_or_none([r["mean_weight"] for r in rows]),
            "q_acc": _mean_or_none([r["q_acc"] for r in rows]),
            "q_eval_acc": _mean_or_none([r["q_eval_acc"] for r in rows]),
        }
        if base_errors:
            errors_f = {}
            for row in rows:
                if row["acc"] is None or row["severity"] == "gradual":
                    continue
                key = (row["corruption"], row["severity"])
                errors_f.setdefault(key, []).append(1.0 - row["acc"])
            if set(errors_f) == set(base_errors) and errors_f:
                table = CorruptionErrorTable(
                    errors_f={k: float(np.mean(v))
                              for k, v in errors_f.items()},
                    errors_f0={k: float(np.mean(v))
                               for k, v in base_errors.items()})
                out["mce"] = mce(table)
        lines.append("\t".join(_fmt(out[c]) for c in SUMMARY_COLUMNS))
    return "\n".join(lines) + "\n"


def plot_tables(results) -> dict:
    """Long-format trajectory rows, one file per scenario.  Every metric in
    PLOT_METRICS is emitted for every batch (nan when undefined), so the row
    count is exactly methods x seeds x batches x metrics."""
    by_scenario = {}
    for result in results:
        by_scenario.setdefault(result.cell.scenario_label, []).append(result)
    tables = {}
    for scenario in sorted(by_scenario):
        lines = ["method\tseed\tbatch\tmetric\tvalue"]
        ordered = sorted(by_scenario[scenario],
                         key=lambda r: (r.cell.method_label, r.cell.seed))
        for result in ordered:
            label = result.cell.method_label
            running = _running_ece_series(result.records)
            for r, run_ece in zip(result.records, running):
                values = {
                    "accuracy": r.accuracy,
                    "mean_confidence": r.mean_confidence,
                    "running_ece": run_ece,
                    "mean_energy_target": r.mean_e_theta_t,
                    "mean_weight": r.mean_weight,
                    "loss": r.loss,
                }
                for metric in PLOT_METRICS:
                    v = values[metric]
                    value = repr(float(v)) if v is not None else "nan"
                    lines.append(f"{label}\t{result.cell.seed}\t"
                                 f"{r.batch_index}\t{metric}\t{value}")
        tables[f"plots/{scenario}.tsv"] = "\n".join(lines) + "\n"
    return tables


# -- experiment driver ---------------------------------------------------------

def compute_experiment(cfg: ExperimentConfig, threads: int = 1) -> dict:
    """Run every cell and return {relative path: file text}.  Pure function
    of the config; writing to disk is the caller's concern."""
    cfg.validate()
    cells = enumerate_cells(cfg)
    worlds = build_worlds(cfg)

    def work(cell: Cell) -> CellResult:
        return run_cell(cfg, cell, worlds[cell.seed])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(cell) for cell in cells]

    files = {}
    for result in results:
        lines = [r.to_json() for r in result.records]
        if result.status != "ok":
            lines.append(json.dumps({"aborted": result.error}))
        files[result.cell.log_path] = "\n".join(lines) + "\n"

    cell_rows = [summarize_cell(r) for r in results]
    files["cells.tsv"] = cells_table(cell_rows)
    files["summary.tsv"] = summary_table(cfg, cell_rows)
    files.update(plot_tables(results))
    files["config.yaml"] = dump_config(cfg)
    files["environment.txt"] = (
        f"package_version\t{PACKAGE_VERSION}\n"
        f"format_version\t{cfg.format_version}\n"
        f"seeds\t{','.join(str(int(s)) for s in cfg.seeds)}\n"
        f"methods\t{','.join(cfg.methods)}\n")

    if cfg.dump_datasets:
        for seed, world in sorted(worlds.items()):
            files[f"datasets/source_seed{seed}.tsv"] = dump_dataset(
                world.source_dataset)
            files[f"datasets/target_seed{seed}.tsv"] = dump_dataset(
                world.target_dataset)

    files["_status"] = "ok" if all(r.status == "ok" for r in results) \
        else "failed"
    return files


def write_experiment(files: dict, out_dir: str, overwrite: bool) -> None:
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not overwrite:
        raise FileExistsError(
            f"{out_dir} is not empty; pass --overwrite to replace it")
    for rel in sorted(files):
        if rel == "_status":
            continue
        path = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(path) or out_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(files[rel])


def run_experiment(cfg: ExperimentConfig, out_dir: str,
                   overwrite: bool = False, threads: int = 1) -> int:
    files = compute_experiment(cfg, threads=threads)
    write_experiment(files, out_dir, overwrite)
    return 0 if files["_status"] == "ok" else 2


def verify_experiment(out_dir: str, threads: int = 1):
    """Recompute every artifact from the echoed config and byte-compare with
    what is on disk.  Returns the sorted list of mismatching paths."""
    from .config import load_config
    echo_path = os.path.join(out_dir, "config.yaml")
    if not os.path.isfile(echo_path):
        raise FileNotFoundError(f"no config echo at {echo_path}")
    cfg = load_config(echo_path)
    files = compute_experiment(cfg, threads=threads)
    mismatches = []
    for rel in sorted(files):
        if rel == "_status":
            continue
        path = os.path.join(out_dir, rel)
        if not os.path.isfile(path):
            mismatches.append(rel)
            continue
        with open(path, "r", encoding="utf-8") as fh:
            if fh.read() != files[rel]:
                mismatches.append(rel)
    return mismatches
