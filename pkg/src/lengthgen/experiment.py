"""Experiment configs and the data -> train -> evaluate pipeline.

A run directory holds everything needed to reproduce it::

    config.json           the config as given (verbatim echo)
    config.resolved.json  the config after defaults and overrides
    data/                 train / id-test / ood-test line files + dataset.json sidecar
    last.ckpt, metrics.csv, run.json
    report.json, report.csv, report.txt
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional


from . import rng
from .checkpoint import restore_model
from .datagen import DomainSpec, PairSet, SplitSpec, build_ood_suite, make_splits
from .evaluator import EvalReport, ModelPredictor, consistency_violations, hypothesis_report, make_eval_hook
from .model import ModelConfig
from .numtheory import TaskKind, max_result, num_digits
from .tokenizer import LineLayout, decode_fields, encode_batch, read_lines, write_lines
from .trainer import TrainConfig, TrainData, run_training

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
OUTPUT_ROOT_ENV = "LENGTHGEN_OUTPUT_ROOT"
SIDECAR = "dataset.json"


class ConfigValidationError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    task: str = "add"
    modulus: Optional[int] = None
    operand_width: int = 4
    train_lengths: list[int] = field(default_factory=lambda: [3])
    exact_both: bool = False
    gap_floor: Optional[int] = None
    eval_lengths: list[int] = field(default_factory=lambda: [1, 2, 4])
    exact_outward: bool = False
    total: int = 100_000
    train_fraction: float = 0.9
    data_seed: int = 0
    per_set: int = 10_000
    monitor_per_set: int = 1000
    probe_size: int = 1000
    model: dict = field(default_factory=lambda: {"preset": "nano"})
    train: dict = field(default_factory=dict)

    # --- derived views -----------------------------------------------------------

    @property
    def task_kind(self) -> TaskKind:
        return TaskKind.parse(self.task, self.modulus)

    @property
    def layout(self) -> LineLayout:
        return LineLayout.for_task(self.task_kind, self.operand_width)

    @property
    def n(self) -> int:
        return max(self.train_lengths)

    def domain(self) -> DomainSpec:
        return DomainSpec.of(self.task_kind, *self.train_lengths, exact_both=self.exact_both, gap_floor=self.gap_floor)

    def split(self) -> SplitSpec:
        return SplitSpec(self.total, Fraction(self.train_fraction).limit_denominator(10**6), self.data_seed)

    def model_config(self) -> ModelConfig:
        spec = dict(self.model)
        preset = spec.pop("preset", None)
        return ModelConfig.preset(preset, **spec) if preset else ModelConfig(**spec)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train) if self.train else TrainConfig()

    def outward_exact(self, m: int) -> bool:
        return self.exact_outward and m > self.n

    # --- (de)serialisation and validation ------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigValidationError(f"unknown config keys {unknown}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def validate(self) -> "ExperimentConfig":
        try:
            task = self.task_kind
            domain = self.domain()
            self.model_config()
            self.train_config()
            self.split()
        except (ValueError, TypeError) as exc:
            raise ConfigValidationError(str(exc)) from exc
        lengths = set(self.train_lengths) | set(self.eval_lengths)
        if max(lengths) > self.operand_width:
            raise ConfigValidationError(
                f"operand_width {self.operand_width} cannot hold length-{max(lengths)} operands"
            )
        widest = num_digits(max_result(task, max(lengths)))
        if widest > self.layout.answer_width:
            raise ConfigValidationError(f"answer field of {self.layout.answer_width} digits cannot hold {widest}-digit results")
        overlap = set(self.train_lengths) & set(self.eval_lengths)
        if overlap:
            raise ConfigValidationError(f"evaluation lengths {sorted(overlap)} overlap the training lengths")
        if domain.cardinality < 2:
            raise ConfigValidationError("training domain is too small to split")
        return self

    def with_overrides(self, assignments: list[str]) -> "ExperimentConfig":
        """Apply ``key=value`` or ``section.key=value`` assignments (values parsed as JSON when possible)."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigValidationError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            target = d
            parts = key.split(".")
            for p in parts[:-1]:
                target = target.setdefault(p, {})
                if not isinstance(target, dict):
                    raise ConfigValidationError(f"cannot set {key}: {p} is not a section")
            target[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


# --- data ----------------------------------------------------------------------------


@dataclass
class Datasets:
    train: PairSet
    id_test: PairSet
    ood: dict[int, PairSet]

    def monitor_suites(self, cfg: ExperimentConfig) -> dict[str, PairSet]:
        out = {"id": self.id_test.head(cfg.monitor_per_set)}
        for s in self.ood.values():
            out[s.name] = s.head(cfg.monitor_per_set)
        return out

    def final_suites(self) -> dict[str, PairSet]:
        out = {"id": self.id_test}
        for s in self.ood.values():
            out[s.name] = s
        return out


def build_datasets(cfg: ExperimentConfig) -> Datasets:
    cfg.validate()
    domain = cfg.domain()
    train, test = make_splits(domain, cfg.split())
    ood = {}
    inward = [m for m in cfg.eval_lengths if m <= cfg.n]
    outward = [m for m in cfg.eval_lengths if m > cfg.n]
    seed = cfg.data_seed
    if inward:
        ood.update(build_ood_suite(cfg.task_kind, cfg.train_lengths, inward, cfg.per_set, False, seed))
    if outward:
        ood.update(build_ood_suite(cfg.task_kind, cfg.train_lengths, outward, cfg.per_set, cfg.exact_outward, seed))
    return Datasets(train, test, dict(sorted(ood.items())))


def _file_name(kind: str, m: Optional[int] = None) -> str:
    return f"{kind}.txt" if m is None else f"{kind}_{m}.txt"


def write_datasets(cfg: ExperimentConfig, data: Datasets, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lay = cfg.layout
    files = {"train": data.train, "id_test": data.id_test}
    files.update({f"ood_{m}": s for m, s in data.ood.items()})
    entries = {}
    for key, pairs in files.items():
        path = out / f"{key}.txt"
        write_lines(path, encode_batch(pairs.a, pairs.b, pairs.result, lay))
        entries[key] = {
            "file": path.name,
            "count": len(pairs),
            "mode": pairs.mode,
            "name": pairs.name,
            "domain": pairs.spec.to_dict(),
        }
    sidecar = {
        "format_version": FORMAT_VERSION,
        "rng": rng.RNG_VERSION,
        "seed": cfg.data_seed,
        "layout": lay.to_dict(),
        "split": {"total": cfg.total, "train_fraction": cfg.train_fraction},
        "config_digest": cfg.digest(),
        "files": entries,
    }
    (out / SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out


def read_datasets(cfg: ExperimentConfig, data_dir) -> Datasets:
    data_dir = Path(data_dir)
    side_path = data_dir / SIDECAR
    if not side_path.exists():
        raise FileNotFoundError(f"dataset sidecar not found: {side_path}")
    side = json.loads(side_path.read_text())
    if side.get("format_version") != FORMAT_VERSION:
        raise ConfigValidationError(f"{side_path}: unsupported format version {side.get('format_version')}")
    lay = LineLayout(**side["layout"])
    if lay != cfg.layout:
        raise ConfigValidationError(f"{side_path}: layout {lay} does not match the config's {cfg.layout}")
    sets = {}
    for key, entry in side["files"].items():
        path = data_dir / entry["file"]
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        tokens, file_layout = read_lines(path)
        if file_layout != lay:
            raise ConfigValidationError(f"{path}: layout {file_layout} differs from sidecar")
        a, b, result = decode_fields(tokens, lay)
        sets[key] = PairSet(DomainSpec.from_dict(entry["domain"]), a, b, result, entry["mode"], entry["name"])
    ood = {int(k.split("_")[1]): v for k, v in sets.items() if k.startswith("ood_")}
    return Datasets(sets["train"], sets["id_test"], dict(sorted(ood.items())))


# --- train / evaluate -------------------------------------------------------------------


def prepare_run_dir(cfg: ExperimentConfig, run_dir, raw_config: Optional[bytes] = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = raw_config if raw_config is not None else (json.dumps(cfg.to_dict(), indent=2) + "\n").encode()
    (run_dir / "config.json").write_bytes(echo)
    (run_dir / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return run_dir


def train(cfg: ExperimentConfig, run_dir, data: Optional[Datasets] = None, *, resume: bool = True):
    """Train per ``cfg``; datasets are read from ``run_dir/data`` or generated there."""
    cfg.validate()
    run_dir = Path(run_dir)
    data_dir = run_dir / "data"
    if data is None:
        if (data_dir / SIDECAR).exists():
            data = read_datasets(cfg, data_dir)
        else:
            data = build_datasets(cfg)
            write_datasets(cfg, data, data_dir)
    lay = cfg.layout
    monitor = data.monitor_suites(cfg)
    hook = make_eval_hook(cfg.task_kind, cfg.n, lay, monitor, data.id_test.head(cfg.probe_size))
    train_data = TrainData.from_pairs(data.train, lay)
    result = run_training(cfg.model_config(), cfg.train_config(), train_data, monitor, eval_hook=hook, run_dir=run_dir, resume=resume)
    return result, data


def evaluate(cfg: ExperimentConfig, model, data: Datasets, provenance: Optional[dict] = None) -> EvalReport:
    pred = ModelPredictor(model, cfg.layout)
    return hypothesis_report(pred, cfg.task_kind, cfg.n, data.final_suites(), provenance=provenance)


def write_report(report: EvalReport, run_dir) -> None:
    run_dir = Path(run_dir)
    (run_dir / "report.json").write_text(report.to_json() + "\n")
    (run_dir / "report.csv").write_text(report.to_csv())
    (run_dir / "report.txt").write_text(report.pretty() + "\n")


def load_report(run_dir) -> dict:
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report in {run_dir}")
    return json.loads(path.read_text())


def run_experiment(cfg: ExperimentConfig, run_dir, *, raw_config: Optional[bytes] = None) -> EvalReport:
    """Data, training and the final report in one call; resumes an interrupted run."""
    run_dir = prepare_run_dir(cfg, run_dir, raw_config)
    result, data = train(cfg, run_dir)
    report = evaluate(cfg, result.model, data, provenance=provenance(cfg, run_dir, result.step))
    write_report(report, run_dir)
    bad = consistency_violations(report)
    if bad:
        log.warning("inward suites where f and f^ scores differ: %s", bad)
    return report


def provenance(cfg: ExperimentConfig, run_dir, step: int) -> dict:
    return {
        "checkpoint": str(Path(run_dir) / "last.ckpt"),
        "step": step,
        "config_digest": cfg.digest(),
        "data_seed": cfg.data_seed,
        "model_seed": cfg.model_config().seed,
        "train_seed": cfg.train_config().seed,
        "rng": rng.RNG_VERSION,
    }


def cached_run(cfg: ExperimentConfig, root, *, force: bool = False) -> tuple[Path, dict]:
    """Run (or reuse) ``cfg`` under ``root/<name>-<digest>``; returns (run_dir, report dict)."""
    run_dir = Path(root) / f"{cfg.name}-{cfg.digest()}"
    report_path = run_dir / "report.json"
    if force and run_dir.exists():
        for p in sorted(run_dir.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    if not report_path.exists():
        run_experiment(cfg, run_dir)
    return run_dir, json.loads(report_path.read_text())


def load_run_model(run_dir):
    model, ckpt = restore_model(Path(run_dir) / "last.ckpt")
    model.eval()
    return model, ckpt
