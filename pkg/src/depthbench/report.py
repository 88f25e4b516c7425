"""Experiment runner, report serialization and model comparison."""
from __future__ import annotations

import configparser
import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from . import data, mono, stereo
from .nn import count_flops, count_parameters
from .train import (MetricsReport, OptimizerConfig, Trainer, aggregate, evaluate_model)

SCHEMA_VERSION = 1

MONO_VARIANTS = {
    "4-1-4": ("4-1-4", "leaky_relu"),
    "3-1-3": ("3-1-3", "leaky_relu"),
    "3-1-3-swish": ("3-1-3", "swish"),
}
STEREO_VARIANTS = {"none": None, "spn1": 1, "spn2": 2, "spn4": 4, "spn8": 8}

# Full-scale reference numbers, carried in reports as annotations only.
REFERENCE_VALUES = {
    "mono": {
        "4-1-4": {"parameters": 1966467, "ssim": 0.9895},
        "3-1-3": {"parameters": 489091, "ssim": 0.9903},
        "3-1-3-swish": {"parameters": 489091, "ssim": 0.9871},
    },
    "stereo": {
        "none": {"parameters": 34629, "three_pixel_error": 0.2994},
        "spn1": {"parameters": 34827, "three_pixel_error": 0.3048},
        "spn2": {"parameters": 35277, "three_pixel_error": 0.3193},
        "spn4": {"parameters": 36933, "three_pixel_error": 0.3264},
        "spn8": {"parameters": 43269, "three_pixel_error": 0.3178},
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to a usage error)."""


def variants_for(task: str) -> Dict[str, object]:
    if task == "mono":
        return MONO_VARIANTS
    if task == "stereo":
        return STEREO_VARIANTS
    raise ConfigError(f"unknown task {task!r}; expected mono or stereo")


@dataclass
class DataSource:
    seed: int = 1
    train_count: int = 64
    val_count: int = 16
    height: Optional[int] = None
    width: Optional[int] = None
    manifest: Optional[str] = None
    val_ratio: float = 0.2


@dataclass
class ExperimentConfig:
    task: str = "mono"
    variant: str = "3-1-3"
    experiment_id: str = ""
    max_disparity: int = 32
    data: DataSource = field(default_factory=DataSource)
    train: OptimizerConfig = field(default_factory=OptimizerConfig)
    model_seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.variant not in variants_for(self.task):
            raise ConfigError(f"unknown {self.task} variant {self.variant!r}; "
                              f"choose from {', '.join(variants_for(self.task))}")
        if not self.experiment_id:
            self.experiment_id = f"{self.task}-{self.variant}"
        if self.data.height is None:
            self.data.height = 64 if self.task == "mono" else 48
        if self.data.width is None:
            self.data.width = 64 if self.task == "mono" else 96

    def build_model(self):
        if self.task == "mono":
            structure, act = MONO_VARIANTS[self.variant]
            if self.data.height != self.data.width:
                raise ConfigError("mono inputs must be square")
            cfg = mono.MonoModelConfig(depth_structure=structure, activation=act, input_size=self.data.height)
            return mono.build_mono_model(cfg, self.model_seed)
        cfg = stereo.AnyNetConfig(max_disparity=self.max_disparity, spn_channels=STEREO_VARIANTS[self.variant])
        return stereo.build_anynet(cfg, self.model_seed)


def _coerce(section: configparser.SectionProxy, key: str, current):
    raw = section[key]
    if current is None:
        if raw.lower() in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            return raw
    if isinstance(current, bool):
        return section.getboolean(key)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def load_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse an INI document with [experiment], [data] and [train] sections.

    Keys are the dataclass field names; unknown sections or keys are errors.
    """
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    base = base or ExperimentConfig()
    top = {k: v for k, v in asdict(base).items() if k not in ("data", "train")}
    sections = {"experiment": top, "data": asdict(base.data), "train": asdict(base.train)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        target = sections[name]
        for key in parser[name]:
            if key not in target:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                target[key] = _coerce(parser[name], key, target[key])
            except ValueError as e:
                raise ConfigError(f"bad value for {name}.{key}: {e}") from e
    try:
        return ExperimentConfig(data=DataSource(**sections["data"]), train=OptimizerConfig(**sections["train"]),
                                **sections["experiment"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def generate_samples(task: str, seed: int, count: int, height: int, width: int) -> list:
    if task == "mono":
        return data.gen_synthetic_mono(seed, count, height, width)
    # synthetic disparities stay below a quarter of the width
    return data.gen_synthetic_stereo(seed, count, height, width, max_disp=min(16, (width - 1) // 4))


def load_samples(config: ExperimentConfig):
    """(train, validation) sample lists from a manifest or the synthetic generators."""
    src = config.data
    if src.manifest:
        index, samples = data.load_dataset(src.manifest)
        if index.kind != config.task:
            raise ConfigError(f"manifest holds {index.kind} data but task is {config.task}")
        train_idx, val_idx = data.split_dataset(index, 1.0 - src.val_ratio, src.seed)
        order = {d: i for i, d in enumerate(index.descriptors)}
        return ([samples[order[d]] for d in train_idx.descriptors],
                [samples[order[d]] for d in val_idx.descriptors])
    train = generate_samples(config.task, src.seed, src.train_count, src.height, src.width)
    val = generate_samples(config.task, src.seed + 10_000, src.val_count, src.height, src.width)
    return train, val


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def model_costs(model, height: int, width: int) -> Dict[str, Dict[str, int]]:
    params = count_parameters(model.store)
    shape = (1, 3, height, width)
    if model.task == "mono":
        macs = {"stage1": count_flops(model, shape)["total"]}
    else:
        macs = {f"stage{k}": count_flops(model, shape, up_to_stage=k)["total"] for k in range(1, 5)}
    return {"parameters": params, "macs_per_stage": macs}


def annotate(report: MetricsReport, model, config: ExperimentConfig) -> MetricsReport:
    costs = model_costs(model, config.data.height, config.data.width)
    report.experiment_id = config.experiment_id
    report.variant = config.variant
    report.parameters = costs["parameters"]
    report.macs_per_stage = costs["macs_per_stage"]
    report.model_config = asdict(model.config)
    report.reference_values = dict(REFERENCE_VALUES[config.task][config.variant])
    return report


def run_experiment(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None,
                   log=None) -> MetricsReport:
    """Train, evaluate and write report.json, history.csv, per_sample.csv, model.ckpt."""
    out = Path(out_dir or config.out_dir)
    train_set, val_set = load_samples(config)
    if not train_set or not val_set:
        raise ConfigError("training and validation sets must both be non-empty")
    model = config.build_model()
    trainer = Trainer(model, train_set, config.train, val_samples=val_set)
    every = max(1, config.train.max_steps // 10)
    trainer.train(callback=(lambda s, v: log(f"step {s} loss {v:.6g}") if s % every == 0 else None) if log else None)
    report = annotate(evaluate_model(model, val_set), model, config)
    report.history_ref = "history.csv"
    out.mkdir(parents=True, exist_ok=True)
    data.atomic_write(out / "report.json", emit_report(report, "json"))
    data.atomic_write(out / "per_sample.csv", emit_report(report, "csv"))
    data.atomic_write(out / "history.csv", history_csv(trainer.history))
    data.atomic_write(out / "model.ckpt", trainer.save_checkpoint())
    return report


def _num(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.9g}")
    return x


def _round_tree(obj):
    if isinstance(obj, dict):
        return {k: _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_tree(v) for v in obj]
    return _num(obj)


def report_to_dict(report: MetricsReport) -> dict:
    return _round_tree({
        "schema_version": SCHEMA_VERSION,
        "experiment_id": report.experiment_id,
        "task": report.task,
        "variant": report.variant,
        "parameters": report.parameters,
        "macs_per_stage": report.macs_per_stage,
        "metrics": sorted(report.per_sample),
        "aggregates": {k: report.aggregates[k] for k in sorted(report.aggregates)},
        "per_sample": {k: report.per_sample[k] for k in sorted(report.per_sample)},
        "history_ref": report.history_ref,
        "model_config": report.model_config,
        "reference_values": report.reference_values,
    })


def report_from_dict(d: dict) -> MetricsReport:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema_version {d.get('schema_version')!r}")
    return MetricsReport(task=d["task"], per_sample=d["per_sample"], aggregates=d["aggregates"],
                         experiment_id=d["experiment_id"], parameters=d["parameters"],
                         macs_per_stage=d["macs_per_stage"], history_ref=d["history_ref"],
                         model_config=d["model_config"], variant=d["variant"],
                         reference_values=d["reference_values"])


def read_report(path: Union[str, Path]) -> MetricsReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def _fmt(x) -> str:
    x = _num(x)
    return f"{x:.9g}" if isinstance(x, float) else str(x)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue().encode("utf-8")


def emit_report(report: MetricsReport, fmt: str) -> bytes:
    """json: the full self-contained report; csv: one row per evaluated sample."""
    if fmt == "json":
        return (json.dumps(report_to_dict(report), indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        names = sorted(report.per_sample)
        n = len(report.per_sample[names[0]]) if names else 0
        return _csv(["sample"] + names, [[i] + [report.per_sample[k][i] for k in names] for i in range(n)])
    raise ValueError(f"unknown report format {fmt!r}; expected csv or json")


def history_csv(history) -> bytes:
    parts = sorted({k for p in history.step_parts for k in p})
    rows = [[i + 1] + [p.get(k, "") for k in parts] for i, p in enumerate(history.step_parts)]
    return _csv(["step"] + parts, rows)


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------


def compare_models(reports: Sequence[MetricsReport]) -> dict:
    """Rows sorted by trainable parameters, with size reduction against the largest model."""
    if len(reports) < 2:
        raise ValueError("comparison needs at least two reports")
    tasks = {r.task for r in reports}
    if len(tasks) != 1:
        raise ValueError(f"cannot compare reports of mixed tasks {sorted(tasks)}")
    ordered = sorted(reports, key=lambda r: (r.parameters["trainable"], r.experiment_id))
    largest = max(r.parameters["trainable"] for r in reports)
    metrics = sorted(set.intersection(*(set(r.per_sample) for r in reports)))
    rows = []
    for r in ordered:
        row = {
            "experiment_id": r.experiment_id,
            "variant": r.variant,
            "trainable": r.parameters["trainable"],
            "total": r.parameters["total"],
            "reduction_pct": 100.0 * (1.0 - r.parameters["trainable"] / largest),
        }
        for m in metrics:
            for stat, value in aggregate(r.per_sample[m]).items():
                row[f"{m}.{stat}"] = value
        rows.append(row)
    return _round_tree({"schema_version": SCHEMA_VERSION, "task": tasks.pop(), "metrics": metrics, "rows": rows})


def emit_comparison(table: dict, fmt: str) -> bytes:
    if fmt == "json":
        return (json.dumps(table, indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        header = list(table["rows"][0])
        return _csv(header, [[row[k] for k in header] for row in table["rows"]])
    raise ValueError(f"unknown comparison format {fmt!r}; expected csv or json")
