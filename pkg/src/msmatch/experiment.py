"""Declarative experiment configs and the train / sweep / report runners.

Output layout::

    <output_dir>/<config-hash>/
        config.yaml  manifest.json  aggregate.json  aggregate.csv
        <seed>/ manifest.json split.json history.jsonl checkpoint.pt
                report.json report.csv confusion.png
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import datasets as D
from .evaluation import MetricsReport, aggregate_seeds, f1_by_label_budget, plot_confusion
from .model import VARIANTS, ClassifierConfig
from .trainer import TrainConfig, partition_stats, train

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "MSMATCH_DATA_ROOT"
RUN_FORMAT = "msmatch-run/1"
FILE_FORMATS = {"history": "jsonl/1", "report": "json/1", "table": "csv/1", "split": "json/1"}
SEED_FILES = ("manifest.json", "split.json", "history.jsonl", "checkpoint.pt",
              "report.json", "report.csv", "confusion.png")
SWEEP_AXES = ("weight_decay", "variant", "n_labels")


class ConfigError(ValueError):
    """Invalid experiment config; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


class RunFailed(RuntimeError):
    def __init__(self, failures: dict):
        msg = "; ".join(f"seed {s}: {e}" for s, e in failures.items())
        super().__init__(f"{len(failures)} seed(s) failed: {msg}")
        self.failures = failures


class ReportError(RuntimeError):
    pass


def code_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# config types


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synthetic"        # "synthetic" or a folder dataset label (e.g. "eurosat")
    root: str | None = None        # folder datasets; relative paths resolve against $MSMATCH_DATA_ROOT
    modality: str = "rgb"          # rgb | ms
    resize: int | None = None
    # synthetic generator
    n_classes: int = 4
    channels: int = 3
    side: int = 16
    per_class: int = 600
    data_seed: int = 0


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.1
    n_labels_per_class: int = 5
    seeds: tuple = (0, 1, 2)


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "B2"
    dropout: float = 0.3


_GENERATOR_FIELDS = ("n_classes", "channels", "side", "per_class", "data_seed")

# TrainConfig fields owned by the split section
_SPLIT_OWNED = ("seed", "n_labels_per_class")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    output_dir: str = "runs"
    target_accuracy: float | None = None  # reference accuracy shown next to reports

    def to_dict(self) -> dict:
        train_d = dataclasses.asdict(self.train)
        for k in _SPLIT_OWNED:
            train_d.pop(k)
        split_d = dataclasses.asdict(self.split)
        split_d["seeds"] = list(self.split.seeds)
        dataset_d = dataclasses.asdict(self.dataset)
        if self.dataset.name != "synthetic":
            for k in _GENERATOR_FIELDS:
                dataset_d.pop(k)
        return {
            "name": self.name,
            "dataset": dataset_d,
            "split": split_d,
            "train": train_d,
            "model": dataclasses.asdict(self.model),
            "output_dir": self.output_dir,
            "target_accuracy": self.target_accuracy,
        }

    def render(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a mapping")
        _check_keys(d, ("name", "dataset", "split", "train", "model", "output_dir", "target_accuracy"), "")
        dataset = _build(DatasetSpec, d.get("dataset", {}), "dataset")
        split_d = dict(d.get("split", {}) or {})
        if "seeds" in split_d:
            if not isinstance(split_d["seeds"], (list, tuple)):
                raise ConfigError("split.seeds", "must be a list of integers")
            split_d["seeds"] = tuple(split_d["seeds"])
        split = _build(SplitSpec, split_d, "split")
        train_d = dict(d.get("train", {}) or {})
        for k in _SPLIT_OWNED:
            if k in train_d:
                raise ConfigError(f"train.{k}", "set through the split section")
        train_cfg = _build(TrainConfig, train_d, "train", extra={"n_labels_per_class": split.n_labels_per_class})
        model = _build(ModelSpec, d.get("model", {}), "model")
        cfg = cls(
            name=_typed(d.get("name", "experiment"), str, "name"),
            dataset=dataset, split=split, train=train_cfg, model=model,
            output_dir=_typed(d.get("output_dir", "runs"), str, "output_dir"),
            target_accuracy=_typed(d.get("target_accuracy"), float, "target_accuracy", optional=True),
        )
        cfg.check()
        return cfg

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<root>", f"not valid YAML: {exc}") from exc
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.render())

    def check(self) -> None:
        ds, sp, tr, mo = self.dataset, self.split, self.train, self.model
        if ds.modality not in ("rgb", "ms"):
            raise ConfigError("dataset.modality", "must be 'rgb' or 'ms'")
        if ds.resize is not None and ds.resize < 8:
            raise ConfigError("dataset.resize", "must be >= 8")
        if ds.name == "synthetic":
            for f in ("n_classes", "channels", "side", "per_class"):
                if getattr(ds, f) < (2 if f == "n_classes" else 1):
                    raise ConfigError(f"dataset.{f}", "out of range")
            if ds.side < 8:
                raise ConfigError("dataset.side", "must be >= 8")
        else:
            if ds.root is None:
                raise ConfigError("dataset.root", "required for folder datasets")
            for f in _GENERATOR_FIELDS:
                if getattr(ds, f) != getattr(DatasetSpec, f):
                    raise ConfigError(f"dataset.{f}", "only applies to the synthetic dataset")
        if not 0 < sp.test_fraction < 1:
            raise ConfigError("split.test_fraction", "must be in (0, 1)")
        if sp.n_labels_per_class < 1:
            raise ConfigError("split.n_labels_per_class", "must be >= 1")
        if not sp.seeds:
            raise ConfigError("split.seeds", "must be nonempty")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in sp.seeds):
            raise ConfigError("split.seeds", "must be integers")
        if len(set(sp.seeds)) != len(sp.seeds):
            raise ConfigError("split.seeds", "must be distinct")
        if tr.lr0 <= 0:
            raise ConfigError("train.lr0", "must be > 0")
        if tr.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be >= 0")
        if tr.log_every < 1:
            raise ConfigError("train.log_every", "must be >= 1")
        if mo.variant not in VARIANTS:
            raise ConfigError("model.variant", f"must be one of {VARIANTS}")
        if not 0 <= mo.dropout < 1:
            raise ConfigError("model.dropout", "must be in [0, 1)")

    def validate_paths(self) -> None:
        if self.dataset.name != "synthetic":
            root = resolve_root(self.dataset)
            if not root.is_dir():
                raise ConfigError("dataset.root", f"directory not found: {root}")

    def config_hash(self) -> str:
        """Hash of every semantic field; where outputs go and where the data
        lives do not change it (the dataset content hash is in the manifest)."""
        d = self.to_dict()
        d.pop("output_dir")
        d["dataset"].pop("root")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed, n_labels_per_class=self.split.n_labels_per_class)

    def replace(self, **sections) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **sections)
        cfg.check()
        return cfg


def _check_keys(d: dict, allowed, prefix: str) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{prefix}{k}", "unknown field")


def _typed(value, typ, path: str, optional: bool = False):
    if value is None and optional:
        return None
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(path, "expected int, got bool")
    if not isinstance(value, typ):
        raise ConfigError(path, f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def _build(cls, d, prefix: str, extra: dict | None = None):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(prefix, "must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    owned = set(extra or {})
    _check_keys(d, [n for n in names if n not in owned], f"{prefix}.")
    kwargs = {}
    for name, value in d.items():
        default = names[name].default
        if isinstance(default, tuple):
            if any(isinstance(v, bool) or not isinstance(v, int) for v in value):
                raise ConfigError(f"{prefix}.{name}", "must be a list of integers")
            kwargs[name] = tuple(value)
        elif default is None:
            kwargs[name] = value if value is None else _typed(value, str if name == "root" else int,
                                                               f"{prefix}.{name}")
        else:
            kwargs[name] = _typed(value, type(default), f"{prefix}.{name}")
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


# --------------------------------------------------------------------------
# presets


def preset_dir() -> Path:
    return Path(__file__).parent / "presets"


def list_presets() -> list[str]:
    return sorted(p.stem for p in preset_dir().glob("*.yaml"))


def load_preset(name: str) -> ExperimentConfig:
    path = preset_dir() / f"{name}.yaml"
    if not path.exists():
        raise ConfigError("<preset>", f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return ExperimentConfig.load(path)


def load_config(ref: str) -> ExperimentConfig:
    """A file path, or the name of a shipped preset."""
    if os.path.exists(ref):
        return ExperimentConfig.load(ref)
    return load_preset(ref)


# --------------------------------------------------------------------------
# data


def resolve_root(spec: DatasetSpec) -> Path:
    root = Path(spec.root)
    env = os.environ.get(DATA_ROOT_ENV)
    if env and not root.is_absolute():
        return Path(env) / root
    return root


_DATA_CACHE: dict = {}


def load_dataset(spec: DatasetSpec) -> D.LabeledDataset:
    if spec.name == "synthetic":
        key = ("syn", spec.n_classes, spec.channels, spec.side, spec.per_class, spec.data_seed)
        if key not in _DATA_CACHE:
            _DATA_CACHE[key] = D.make_synthetic(spec.n_classes, spec.channels, spec.side, spec.per_class,
                                                spec.data_seed)
        return _DATA_CACHE[key]
    root = resolve_root(spec)
    key = ("folder", str(root.resolve()), spec.modality, spec.resize)
    if key not in _DATA_CACHE:
        fmt = "rgb_image" if spec.modality == "rgb" else "multiband_raster"
        _DATA_CACHE[key] = D.load_folder_dataset(root, fmt, resize_to=spec.resize)
    return _DATA_CACHE[key]


def partition_from_manifest(ds: D.LabeledDataset, split: dict) -> D.SplitPartition:
    index = {sid: i for i, sid in enumerate(ds.ids)}
    try:
        parts = [ds.subset([index[s] for s in split[k]]) for k in ("train_labeled", "train_unlabeled", "test")]
    except KeyError as exc:
        raise ReportError(f"split references unknown sample id {exc}") from exc
    if split.get("channel_stats"):
        stats = (np.asarray(split["channel_stats"]["mean"]), np.asarray(split["channel_stats"]["std"]))
        parts = [p.with_stats(*stats) for p in parts]
    return D.SplitPartition(*parts, seed=split["seed"], source_hash=split.get("dataset_hash", ""))


# --------------------------------------------------------------------------
# train


@dataclass
class RunResult:
    run_dir: Path
    reports: dict  # seed -> MetricsReport
    aggregate: MetricsReport | None
    failures: dict = field(default_factory=dict)


def _manifest_hash(config_hash: str, dataset_hash: str, seed: int) -> str:
    return hashlib.sha256(f"{config_hash}:{dataset_hash}:{seed}".encode()).hexdigest()[:16]


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path, ds: D.LabeledDataset | None = None) -> MetricsReport:
    ds = ds if ds is not None else load_dataset(cfg.dataset)
    seed_dir.mkdir(parents=True, exist_ok=True)
    partition = D.make_partition(ds, cfg.split.test_fraction, cfg.split.n_labels_per_class, seed)
    stats = D.compute_normalization(ds)
    partition = D.SplitPartition(*(p.with_stats(*stats) for p in
                                   (partition.train_labeled, partition.train_unlabeled, partition.test)),
                                 seed=seed, source_hash=partition.source_hash)
    partition.write_manifest(seed_dir / "split.json", stats)
    chash = cfg.config_hash()
    mhash = _manifest_hash(chash, partition.source_hash, seed)
    model_cfg = ClassifierConfig(ds.channels, ds.num_classes, cfg.model.variant, cfg.model.dropout)
    result = train(cfg.train_config(seed), partition, model_cfg, out_dir=seed_dir, manifest_hash=mhash)
    report = result.report
    report.save_json(seed_dir / "report.json")
    report.write_csv(seed_dir / "report.csv")
    plot_confusion(report, seed_dir / "confusion.png", title=f"{cfg.name} seed {seed}")
    manifest = {
        "format": RUN_FORMAT,
        "file_formats": FILE_FORMATS,
        "config_hash": chash,
        "manifest_hash": mhash,
        "dataset_hash": partition.source_hash,
        "seed": seed,
        "code_version": code_version(),
        "config": cfg.to_dict(),
        "files": [f for f in SEED_FILES if f != "manifest.json"],
        "final_test_acc": report.accuracy,
        "best_test_acc": result.best_test_acc,
    }
    (seed_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return report


def run_train(cfg: ExperimentConfig, output_dir=None) -> RunResult:
    """Train every seed of ``cfg``; failures are collected, not fatal for other seeds."""
    cfg.validate_paths()
    base = Path(output_dir if output_dir is not None else cfg.output_dir)
    run_dir = base / cfg.config_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    ds = load_dataset(cfg.dataset)
    reports, failures = {}, {}
    for seed in cfg.split.seeds:
        try:
            reports[seed] = run_seed(cfg, seed, run_dir / str(seed), ds)
            logger.info("%s seed %d: accuracy %.2f", cfg.name, seed, reports[seed].accuracy)
        except Exception as exc:  # recorded per seed, run continues
            logger.exception("%s seed %d failed", cfg.name, seed)
            failures[seed] = f"{type(exc).__name__}: {exc}"
    agg = None
    if reports:
        agg = aggregate_seeds([reports[s] for s in sorted(reports)])
        agg.save_json(run_dir / "aggregate.json")
        agg.write_csv(run_dir / "aggregate.csv")
    run_manifest = {
        "format": RUN_FORMAT,
        "config_hash": cfg.config_hash(),
        "code_version": code_version(),
        "seeds": list(cfg.split.seeds),
        "completed": sorted(reports),
        "failures": {str(k): v for k, v in failures.items()},
        "files": ["config.yaml"] + (["aggregate.json", "aggregate.csv"] if reports else []),
    }
    (run_dir / "manifest.json").write_text(json.dumps(run_manifest, indent=1))
    return RunResult(run_dir, reports, agg, failures)


# --------------------------------------------------------------------------
# sweep


def _axis_value(axis: str, raw):
    if axis == "weight_decay":
        return float(raw)
    if axis == "n_labels":
        return int(raw)
    if raw not in VARIANTS:
        raise ConfigError("sweep.values", f"unknown variant {raw!r}")
    return raw


def sweep_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "weight_decay":
        return cfg.replace(train=dataclasses.replace(cfg.train, weight_decay=value))
    if axis == "variant":
        return cfg.replace(model=dataclasses.replace(cfg.model, variant=value))
    if axis == "n_labels":
        return cfg.replace(split=dataclasses.replace(cfg.split, n_labels_per_class=value),
                           train=dataclasses.replace(cfg.train, n_labels_per_class=value))
    raise ConfigError("sweep.axis", f"must be one of {SWEEP_AXES}")


@dataclass
class SweepTable:
    axis: str
    values: list
    mean: list          # accuracy per value, None on failure
    std: list
    run_dirs: list
    failures: dict

    def cells(self) -> list[str]:
        out = []
        for v, m, s in zip(self.values, self.mean, self.std):
            out.append("failed" if m is None else f"{m:.2f} ± {s:.2f}")
        return out

    def write_csv(self, path) -> None:
        label = {"weight_decay": "Weight decay", "variant": "Model", "n_labels": "Labels per class"}[self.axis]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([label] + [str(v) for v in self.values])
            w.writerow(["Accuracy [%]"] + self.cells())

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": self.values, "mean": self.mean, "std": self.std,
                "run_dirs": [str(p) for p in self.run_dirs], "failures": {str(k): v for k, v in self.failures.items()}}


def run_sweep(cfg: ExperimentConfig, axis: str, values, output_dir=None) -> SweepTable:
    if axis not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"must be one of {SWEEP_AXES}")
    values = [_axis_value(axis, v) for v in values]
    if not values:
        raise ConfigError("sweep.values", "must be nonempty")
    configs = [sweep_config(cfg, axis, v) for v in values]
    base = Path(output_dir if output_dir is not None else cfg.output_dir)
    means, stds, dirs, failures = [], [], [], {}
    for v, sub in zip(values, configs):
        try:
            res = run_train(sub, base)
        except Exception as exc:
            failures[str(v)] = f"{type(exc).__name__}: {exc}"
            means.append(None), stds.append(None), dirs.append(None)
            continue
        dirs.append(res.run_dir)
        if res.failures:
            failures[str(v)] = str(RunFailed(res.failures))
        if res.aggregate is None:
            means.append(None), stds.append(None)
        else:
            means.append(res.aggregate.accuracy)
            stds.append(res.aggregate.std["accuracy"])
    table = SweepTable(axis, values, means, stds, dirs, failures)
    tag = hashlib.sha256(json.dumps([cfg.config_hash(), axis, [str(v) for v in values]]).encode()).hexdigest()[:12]
    out = base / "sweeps" / f"{axis}-{tag}"
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "sweep.csv")
    (out / "sweep.json").write_text(json.dumps(table.to_dict(), indent=1))
    return table


# --------------------------------------------------------------------------
# report


def _seed_dirs(paths) -> list[Path]:
    found, missing = [], []
    for p in map(Path, paths):
        if not p.exists():
            missing.append(str(p))
            continue
        if (p / "report.json").exists() or (p / "split.json").exists():
            found.append(p)
            continue
        subs = sorted(q for q in p.iterdir() if q.is_dir() and (q / "manifest.json").exists())
        if not subs:
            missing.append(str(p / "<seed>/manifest.json"))
        found.extend(subs)
    if missing:
        raise ReportError("missing artifacts: " + ", ".join(missing))
    return found


@dataclass
class ReportGroup:
    config_hash: str
    config: dict
    aggregate: MetricsReport
    seeds: list
    target_accuracy: float | None


@dataclass
class ConsolidatedReport:
    groups: list          # ReportGroup, sorted by (name, n_labels, config_hash)
    duplicates: int       # seed runs dropped because their manifest hash was already seen
    files: list


def run_report(paths, out_dir) -> ConsolidatedReport:
    """Merge finished runs into summary tables, F1-by-budget tables and heatmaps."""
    seed_dirs = _seed_dirs(paths)
    missing = [str(d / f) for d in seed_dirs for f in ("manifest.json", "report.json") if not (d / f).exists()]
    if missing:
        raise ReportError("missing artifacts: " + ", ".join(missing))
    seen, dup = {}, 0
    for d in seed_dirs:
        man = json.loads((d / "manifest.json").read_text())
        if man["manifest_hash"] in seen:
            dup += 1
            continue
        seen[man["manifest_hash"]] = (man, MetricsReport.load_json(d / "report.json"))
    by_cfg: dict = {}
    for mh in sorted(seen):
        man, rep = seen[mh]
        by_cfg.setdefault(man["config_hash"], []).append((man["seed"], man, rep))
    groups = []
    for ch, items in by_cfg.items():
        items.sort(key=lambda t: t[0])
        cfg = items[0][1]["config"]
        groups.append(ReportGroup(ch, cfg, aggregate_seeds([r for _, _, r in items]), [s for s, _, _ in items],
                                  cfg.get("target_accuracy")))
    groups.sort(key=lambda g: (g.config["name"], g.config["split"]["n_labels_per_class"], g.config_hash))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "summary.csv", out / "summary.json"]
    with open(files[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Config", "Hash", "Dataset", "Modality", "Labels per class", "Model", "Weight decay",
                    "Seeds", "Accuracy [%]", "Std", "Target [%]", "Delta"])
        for g in groups:
            c = g.config
            acc, sd = g.aggregate.accuracy, g.aggregate.std["accuracy"]
            tgt = g.target_accuracy
            w.writerow([c["name"], g.config_hash, c["dataset"]["name"], c["dataset"]["modality"],
                        c["split"]["n_labels_per_class"], c["model"]["variant"], c["train"]["weight_decay"],
                        len(g.seeds), f"{acc:.2f}", f"{sd:.2f}", "" if tgt is None else f"{tgt:.2f}",
                        "" if tgt is None else f"{acc - tgt:+.2f}"])
    files[1].write_text(json.dumps([{"config_hash": g.config_hash, "name": g.config["name"], "seeds": g.seeds,
                                     "target_accuracy": g.target_accuracy, "aggregate": g.aggregate.to_dict()}
                                    for g in groups], indent=1))
    for g in groups:
        stem = f"{g.config['name']}-{g.config_hash}"
        g.aggregate.write_csv(out / f"{stem}_per_class.csv")
        plot_confusion(g.aggregate, out / f"{stem}_confusion.png", title=g.config["name"])
        files += [out / f"{stem}_per_class.csv", out / f"{stem}_confusion.png"]

    # F1 against label budget, for configs that differ only in labels per class
    families: dict = {}
    for g in groups:
        key = dict(g.config)
        key["split"] = {k: v for k, v in key["split"].items() if k != "n_labels_per_class"}
        key.pop("name"), key.pop("target_accuracy"), key.pop("output_dir")
        fam = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]
        families.setdefault(fam, {})[g.config["split"]["n_labels_per_class"]] = g.aggregate
    for fam, budgets in families.items():
        if len(budgets) > 1:
            csv_p, png_p = out / f"f1_by_budget-{fam}.csv", out / f"f1_by_budget-{fam}.png"
            f1_by_label_budget(budgets, csv_p, png_p)
            files += [csv_p, png_p]
    return ConsolidatedReport(groups, dup, files)


# --------------------------------------------------------------------------
# eval / saliency on a finished seed directory


def _load_seed_run(seed_dir):
    from .model import load_checkpoint

    seed_dir = Path(seed_dir)
    missing = [str(seed_dir / f) for f in ("manifest.json", "split.json", "checkpoint.pt")
               if not (seed_dir / f).exists()]
    if missing:
        raise ReportError("missing artifacts: " + ", ".join(missing))
    man = json.loads((seed_dir / "manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(man["config"])
    ds = load_dataset(cfg.dataset)
    if man["dataset_hash"] and ds.content_hash() != man["dataset_hash"]:
        raise ReportError(f"dataset content changed since the run (expected hash {man['dataset_hash']})")
    part = partition_from_manifest(ds, json.loads((seed_dir / "split.json").read_text()))
    model, _ = load_checkpoint(seed_dir / "checkpoint.pt")
    return cfg, man, part, model.eval()


def evaluate_run(seed_dir) -> MetricsReport:
    """Re-evaluate a seed directory's checkpoint on its recorded test split."""
    from .trainer import BatchBuilder, evaluate

    cfg, man, part, model = _load_seed_run(seed_dir)
    builder = BatchBuilder(part.test.value_range, partition_stats(part), part.test.channels, man["seed"],
                           cfg.train.ops_per_image)
    return evaluate(model, part.test, builder, cfg.train.eval_batch)


def saliency_for_run(seed_dir, ids, out_dir, target="pred") -> list[Path]:
    """Guided-backprop maps for sample ``ids``; ``target`` is "pred", "true" or a class index."""
    from .saliency import guided_backprop, write_maps

    cfg, man, part, model = _load_seed_run(seed_dir)
    mean, std = partition_stats(part)
    lookup = {}
    for member in (part.test, part.train_labeled, part.train_unlabeled):
        lookup.update({sid: (member, i) for i, sid in enumerate(member.ids)})
    maps = []
    for sid in ids:
        if sid not in lookup:
            raise ReportError(f"sample id {sid!r} not in the run's split")
        member, i = lookup[sid]
        sample = D.normalize(member[i], mean, std)
        sample = sample.replace(sample.pixels.astype(np.float32))
        if target == "pred":
            t = None
        elif target == "true":
            t = int(sample.label)
        else:
            t = int(target)
        maps.append(guided_backprop(model, sample, t))
    return write_maps(maps, out_dir)
