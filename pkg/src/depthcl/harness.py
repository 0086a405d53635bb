"""Sequence orchestration: run, evaluate, checkpoint, resume, report.

A run trains one model through an ordered list of datasets under one
strategy, evaluating on every already-seen dataset after each training
step, and leaves behind a self-describing output directory: resolved
config, per-step checkpoints and strategy state, the evaluation record
and a manifest. Reruns with the same config and seed reproduce the
record bit for bit; interrupted runs resume from the last completed
step.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import continual as cl
from . import data
from . import losses
from . import metrics as mt
from . import models
from .errors import ConfigError, ContractError, EmptyMaskError

SEQUENCE_PRESETS = {
    "indoor_a": ["rooms_dense", "scan_corridor", "rooms_tracks"],
    "indoor_b": ["rooms_dense", "rooms_tracks", "scan_corridor"],
    "outdoor_a": ["terrain_scan", "terrain_wide", "corridor_clean"],
    "outdoor_b": ["terrain_scan", "corridor_clean", "terrain_wide"],
    "mixed": ["terrain_scan", "rooms_dense", "terrain_wide"],
}


@dataclass
class SequenceConfig:
    datasets: list                    # entries: {"preset"|"spec"|"path", ...}
    strategy: str = "finetune"
    seed: int = 0
    out_dir: str = "runs/out"
    eval_fraction: float = 0.2
    hyper: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.datasets:
            raise ConfigError("sequence needs at least one dataset")
        if self.strategy not in cl.VARIANTS:
            raise ConfigError(f"unknown strategy {self.strategy!r}; have {cl.VARIANTS}")
        if not (0 <= self.eval_fraction < 1):
            raise ConfigError("eval_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "SequenceConfig":
        raw = dict(raw)
        if "sequence_preset" in raw:
            name = raw.pop("sequence_preset")
            count = raw.pop("count", 200)
            if name not in SEQUENCE_PRESETS:
                raise ConfigError(f"unknown sequence preset {name!r}")
            raw["datasets"] = [{"preset": p, "count": count} for p in SEQUENCE_PRESETS[name]]
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def from_file(cls, path) -> "SequenceConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            raw = yaml.safe_load(text)
        else:
            raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(canon).hexdigest()[:16]


def _resolve_domain_spec(entry: dict) -> data.DomainSpec:
    if "preset" in entry:
        spec = data.preset(entry["preset"])
        overrides = {k: v for k, v in entry.items() if k not in ("preset", "count")}
        return data.replace(spec, **overrides) if overrides else spec
    if "spec" in entry:
        return data.DomainSpec.from_dict(entry["spec"])
    raise ConfigError(f"dataset entry needs 'preset', 'spec', or 'path': {entry}")


def resolve_datasets(config: SequenceConfig) -> list:
    """Generate or load every dataset in sequence order."""
    out = []
    for k, entry in enumerate(config.datasets):
        if "path" in entry:
            out.append(data.load_dataset(entry["path"]))
            continue
        spec = _resolve_domain_spec(entry)
        count = int(entry.get("count", 200))
        seed = int(np.random.SeedSequence((config.seed, k, 7)).generate_state(1)[0])
        out.append(data.generate_domain(spec, count, seed))
    return out


def _model_config(config: SequenceConfig, datasets) -> models.DepthNetConfig:
    specs = [ds.spec for ds in datasets if ds.spec is not None]
    d_min = config.model.get("d_min", min((s.d_min for s in specs), default=0.2))
    d_max = config.model.get("d_max", max((s.d_max for s in specs), default=5.0))
    widths = tuple(config.model.get("widths", (16, 32, 64)))
    return models.DepthNetConfig(widths=widths, d_min=d_min, d_max=d_max)


def _train_config(config: SequenceConfig) -> cl.TrainConfig:
    loss_keys = {"w_ph", "w_sz", "w_sm", "w_co", "w_st"}
    weights = losses.LossWeights(**{k: v for k, v in config.loss.items() if k in loss_keys})
    flag_keys = {"photo_norm", "tau_reduce", "sz_norm"}
    loss_cfg = losses.LossConfig(**{k: v for k, v in config.loss.items() if k in flag_keys})
    unknown = set(config.loss) - loss_keys - flag_keys
    if unknown:
        raise ConfigError(f"unknown loss keys: {sorted(unknown)}")
    try:
        return cl.TrainConfig(seed=config.seed, weights=weights, loss_config=loss_cfg,
                              **config.train)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def _caps(datasets) -> list:
    caps = []
    for ds in datasets:
        if ds.spec is not None:
            caps.append(mt.RangeCap(ds.spec.d_min, ds.spec.d_max))
        else:
            caps.append(mt.RangeCap(1e-3, 1e3))
    return caps


@dataclass
class RunManifest:
    out_dir: str
    config_hash: str
    code_version: str
    config: dict
    dataset_ids: list
    steps: list = field(default_factory=list)   # {"index", "dataset", "status", "checkpoint", "state", "wall_time_s"}
    record_path: str = "record.csv"
    completed: bool = False

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        return cls(**raw)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_save(path, save_fn) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_fn(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _tree_sum(values: list) -> float:
    """Pairwise summation; deterministic for a fixed value order."""
    n = len(values)
    if n == 1:
        return values[0]
    half = n // 2
    return _tree_sum(values[:half]) + _tree_sum(values[half:])


def evaluate_samples(samples, cap: mt.RangeCap, predict_fn, parallel: bool = False,
                     batch_size: int = 16):
    """Per-frame metrics averaged with a pairwise tree reduction.

    `predict_fn(batch_of_samples) -> list of (H,W) arrays`. Frames whose
    evaluation mask is empty are skipped and counted. Parallel mode only
    changes how per-frame values are computed, never the reduction
    order, so results are bit-identical to the serial path.
    """
    if not len(samples):
        raise ContractError("evaluation split is empty")
    batches = [list(samples[i:i + batch_size]) for i in range(0, len(samples), batch_size)]

    def eval_batch(batch):
        preds = predict_fn(batch)
        out = []
        for s, pred in zip(batch, preds):
            try:
                out.append(mt.frame_metrics(pred, s.gt, cap))
            except EmptyMaskError:
                out.append(None)
        return out

    if parallel and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=min(4, len(batches))) as pool:
            per_batch = list(pool.map(eval_batch, batches))
    else:
        per_batch = [eval_batch(b) for b in batches]

    frames = [f for batch in per_batch for f in batch]
    kept = [f for f in frames if f is not None]
    skipped = len(frames) - len(kept)
    if not kept:
        raise EmptyMaskError("every frame in the split had an empty evaluation mask")
    averaged = {
        name: _tree_sum([getattr(f, name) for f in kept]) / len(kept)
        for name in mt.METRIC_NAMES
    }
    return mt.FrameMetrics(**averaged), skipped


def evaluate_checkpoint(checkpoint_path, dataset, cap: mt.RangeCap,
                        parallel: bool = False):
    """Averaged metrics of a stored model over a dataset's samples."""
    params, model_cfg, _, _ = models.load_checkpoint(checkpoint_path)

    def predict(batch):
        return models.predict_depth_batch(batch, params, model_cfg)

    return evaluate_samples(dataset.samples, cap, predict, parallel=parallel)


# ---------------------------------------------------------------------------
# the sequence runner
# ---------------------------------------------------------------------------


def run_sequence(config: SequenceConfig, resume: bool = False) -> RunManifest:
    out_dir = Path(config.out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "state").mkdir(parents=True, exist_ok=True)

    datasets = resolve_datasets(config)
    dataset_ids = [ds.name if ds.name else f"dataset{k}" for k, ds in enumerate(datasets)]
    # duplicate names would collide in buffers and reports
    dataset_ids = [f"{k}:{name}" for k, name in enumerate(dataset_ids)]
    n = len(datasets)
    model_cfg = _model_config(config, datasets)
    train_cfg = _train_config(config)
    caps = _caps(datasets)

    splits = []
    for k, ds in enumerate(datasets):
        seed = int(np.random.SeedSequence((config.seed, k, 13)).generate_state(1)[0])
        splits.append(data.split_indices(len(ds), config.eval_fraction, seed))

    manifest_path = out_dir / "manifest.json"
    record_path = out_dir / "record.csv"
    manifest = RunManifest(
        out_dir=str(out_dir), config_hash=config.config_hash(), code_version=__version__,
        config=config.to_dict(), dataset_ids=dataset_ids, record_path=str(record_path))

    start_step = 0
    params = models.init_params(model_cfg, config.seed)
    state = cl.StrategyState.create(config.strategy, _hyper(config))
    record = mt.EvalRecord(n)

    if resume and manifest_path.exists():
        previous = RunManifest.load(manifest_path)
        if previous.config_hash != manifest.config_hash:
            raise ConfigError("resume requested but the stored config hash differs")
        done = [s for s in previous.steps if s["status"] == "ok"]
        if done:
            last = done[-1]
            start_step = last["index"] + 1
            params, _, _, _ = models.load_checkpoint(last["checkpoint"])
            state = cl.load_strategy_state(
                last["state"],
                resolve_sample=lambda k, i: datasets[k].samples[i])
            record = mt.EvalRecord.load_csv(record_path)
            manifest.steps = done

    atomic_write_text(out_dir / "config.resolved.json",
                      json.dumps(config.to_dict(), indent=2, sort_keys=True))

    for k in range(start_step, n):
        ds = datasets[k]
        train_idx, _ = splits[k]
        train_samples = [ds.samples[i] for i in train_idx]
        ckpt_path = out_dir / "checkpoints" / f"step{k}.npz"
        state_path = out_dir / "state" / f"step{k}.npz"
        t0 = time.time()
        try:
            params, state, train_log = cl.train_on_dataset(
                state, params, train_samples, model_cfg, train_cfg, dataset_ids[k])
        except cl.TrainingAborted as err:
            # keep the last good parameters and stop the sequence
            _atomic_save(ckpt_path, lambda p: models.save_checkpoint(
                p, err.params, model_cfg, config.seed, extra={"failed_step": k}))
            manifest.steps.append({
                "index": k, "dataset": dataset_ids[k], "status": "numeric-failure",
                "checkpoint": str(ckpt_path), "state": None,
                "wall_time_s": time.time() - t0, "error": str(err)})
            manifest.save(manifest_path)
            return manifest

        _atomic_save(ckpt_path, lambda p: models.save_checkpoint(
            p, params, model_cfg, config.seed,
            extra={"step": k, "dataset": dataset_ids[k]}))
        _atomic_save(state_path, lambda p: cl.save_strategy_state(state, p))

        def predict(batch):
            return models.predict_depth_batch(batch, params, model_cfg)

        for j in range(k + 1):
            _, eval_idx = splits[j]
            eval_samples = [datasets[j].samples[i] for i in eval_idx]
            frame, skipped = evaluate_samples(eval_samples, caps[j], predict)
            for name, value in frame.as_dict().items():
                record.set_entry(name, j, k, value)
            if skipped:
                manifest.steps.append(
                    {"index": k, "dataset": dataset_ids[j], "status": f"eval-skipped-{skipped}"})
        _atomic_save(record_path, lambda p: record.save_csv(p))
        manifest.steps.append({
            "index": k, "dataset": dataset_ids[k], "status": "ok",
            "checkpoint": str(ckpt_path), "state": str(state_path),
            "wall_time_s": time.time() - t0})
        manifest.save(manifest_path)

    manifest.completed = True
    manifest.save(manifest_path)
    return manifest


def _hyper(config: SequenceConfig) -> cl.StrategyHyper:
    try:
        return cl.StrategyHyper(**config.hyper)
    except TypeError as err:
        raise ConfigError(str(err)) from None


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


AGGREGATES = ("avg_forgetting", "avg_performance", "spto")


def summary_row(record: mt.EvalRecord, spto_normalization: str = "mean") -> dict:
    """3 aggregates x 4 frame metrics; None marks undefined cells."""
    row = {}
    summary = record.summary(spto_normalization)
    for agg in AGGREGATES:
        for name in mt.METRIC_NAMES:
            row[f"{agg}_{name}"] = summary[name][agg]
    return row


def emit_report(manifests, out_dir, spto_normalization: str = "mean") -> dict:
    """Tables (CSV + JSON), progression curves (SVG), raw record dumps.

    `manifests` is one RunManifest/path or a list; one table row per
    run. Regenerating from the same manifests is byte-identical.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not isinstance(manifests, (list, tuple)):
        manifests = [manifests]
    loaded = []
    for m in manifests:
        manifest = m if isinstance(m, RunManifest) else RunManifest.load(m)
        record = mt.EvalRecord.load_csv(manifest.record_path)
        loaded.append((manifest, record))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}

    # table: one row per run, 12 aggregate cells each
    header = ["strategy", "sequence"]
    for agg in AGGREGATES:
        header += [f"{agg}_{name}" for name in mt.METRIC_NAMES]
    lines = [",".join(header)]
    rows_json = []
    for manifest, record in loaded:
        strategy = manifest.config.get("strategy", "?")
        sequence = "->".join(manifest.dataset_ids)
        row = summary_row(record, spto_normalization)
        cells = [strategy, sequence]
        for agg in AGGREGATES:
            for name in mt.METRIC_NAMES:
                v = row[f"{agg}_{name}"]
                cells.append("NA" if v is None else repr(float(v)))
        lines.append(",".join(cells))
        rows_json.append({"strategy": strategy, "sequence": sequence,
                          "completed": manifest.completed, **row})
    table_path = out_dir / "report_table.csv"
    atomic_write_text(table_path, "\n".join(lines) + "\n")
    files["table"] = str(table_path)

    json_path = out_dir / "report.json"
    atomic_write_text(json_path, json.dumps(
        {"spto_normalization": spto_normalization, "rows": rows_json},
        indent=2, sort_keys=True))
    files["json"] = str(json_path)

    # error-progression curves: metric vs training step, one line per dataset
    plt.rcParams["svg.hashsalt"] = "depthcl"
    for name in mt.METRIC_NAMES:
        fig, axes = plt.subplots(1, len(loaded), figsize=(5 * len(loaded), 3.4), squeeze=False)
        for ax, (manifest, record) in zip(axes[0], loaded):
            n = record.n
            for j in range(n):
                ks = list(range(j, n))
                vals = [record.values[name][j, k] for k in ks]
                ax.plot(ks, vals, marker="o", label=manifest.dataset_ids[j])
            ax.set_xlabel("training step")
            ax.set_ylabel(name)
            ax.set_xticks(range(n))
            ax.set_title(manifest.config.get("strategy", "?"))
            ax.legend(fontsize=7)
        fig.tight_layout()
        curve_path = out_dir / f"curves_{name}.svg"
        fig.savefig(curve_path, format="svg", metadata={"Date": None})
        plt.close(fig)
        files[f"curves_{name}"] = str(curve_path)

    # raw record dumps
    for i, (manifest, record) in enumerate(loaded):
        dump = out_dir / (f"record_{i}.csv" if len(loaded) > 1 else "record.csv")
        _atomic_save(dump, lambda p: record.save_csv(p))
        files[f"record_{i}"] = str(dump)
    return files


# ---------------------------------------------------------------------------
# hyperparameter sweep
# ---------------------------------------------------------------------------


def run_sweep(base_config: dict, grid: dict, out_dir) -> list:
    """Cartesian grid over dotted config keys, one run per combination."""
    from itertools import product

    out_dir = Path(out_dir)
    keys = sorted(grid)
    combos = list(product(*(grid[k] for k in keys)))
    manifests = []
    for i, combo in enumerate(combos):
        raw = json.loads(json.dumps(base_config))  # deep copy
        for key, value in zip(keys, combo):
            node = raw
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        raw["out_dir"] = str(out_dir / f"combo{i:03d}")
        manifest = run_sequence(SequenceConfig.from_dict(raw))
        manifests.append(manifest)

    lines = ["combo," + ",".join(keys) + ",completed,record"]
    for i, (combo, manifest) in enumerate(zip(combos, manifests)):
        lines.append(",".join([str(i), *map(str, combo),
                               str(manifest.completed), manifest.record_path]))
    atomic_write_text(out_dir / "sweep_summary.csv", "\n".join(lines) + "\n")
    return manifests
