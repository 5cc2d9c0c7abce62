"""Experiment orchestration: configs, seeding, training runs with checkpoint
selection, Monte-Carlo statistics and CSV export."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from . import arith, datagen, model, posenc
from .datagen import DomainSpec, SamplerSpec
from .theory import flow as th_flow
from .theory.task import TheoryTask, rpe_kernel

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV = "LENGEN_OUT"
STAGES = ("data", "init", "train", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "lengen_out"))


def stage_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per pipeline stage, spawned from one master seed."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {name: np.random.default_rng(ss) for name, ss in zip(STAGES, children)}


# ---------------------------------------------------------------- config


@dataclass
class TrainBudget:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 200
    min_lr_frac: float = 0.05
    checkpoint_frac: float = 0.05

    def lr_at(self, step: int) -> float:
        warm = min(1.0, step / self.warmup) if self.warmup > 0 else 1.0
        decay = max(self.min_lr_frac, 1.0 - step / max(self.steps, 1))
        return self.lr * warm * decay


@dataclass
class ValidationSpec:
    length: int | None = None  # None disables checkpoint selection (last checkpoint wins)
    size: int = 200


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    domain: dict = field(default_factory=lambda: {"operation": "add", "l": 5, "l_s": 2})
    sampler: str = "uniform"
    model: dict = field(default_factory=lambda: {"preset": "toy", "pe": {"variant": "rpe"}})
    train: TrainBudget = field(default_factory=TrainBudget)
    eval_lengths: list = field(default_factory=lambda: [2, 3, 4])
    eval_size: int = 500
    validation: ValidationSpec = field(default_factory=ValidationSpec)
    out_dir: str | None = None
    theory: dict | None = None
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainBudget(**self.train)
        if isinstance(self.validation, dict):
            self.validation = ValidationSpec(**self.validation)
        self.eval_lengths = [int(x) for x in self.eval_lengths]

    def validate(self) -> "ExperimentConfig":
        if self.version != SCHEMA_VERSION:
            raise ValueError(f"config schema version {self.version} is not supported (expected {SCHEMA_VERSION})")
        if self.theory is not None:
            return self
        spec = self.domain_spec()
        if any(L < 1 for L in self.eval_lengths):
            raise ValueError("evaluation lengths must be >= 1")
        if any(L > spec.l for L in self.eval_lengths):
            raise ValueError("evaluation length exceeds the format length l")
        v = self.validation.length
        if v is not None and not spec.l_s < v <= spec.l:
            raise ValueError("validation length must exceed l_s (and fit in l) when selection is enabled")
        if self.train.steps < 0 or self.train.batch < 1:
            raise ValueError("invalid training budget")
        SamplerSpec.parse(self.sampler)
        return self

    def domain_spec(self) -> DomainSpec:
        return DomainSpec(**self.domain)

    def model_config(self) -> model.ModelConfig:
        spec = self.domain_spec()
        m = dict(self.model)
        base = dict(model.PRESETS[m.pop("preset", "toy")])
        pe = dict(m.pop("pe", {"variant": "rpe"}))
        base.update(m)
        seq_len = 2 * spec.l + 1 if spec.operation == "add" else spec.l + spec.multiplier_len + 1
        variant = pe.pop("variant", "rpe")
        if variant == "upe" and "uniform_positions" not in pe:
            pe["uniform_positions"] = list(range(spec.multiplier_len))
        pe.setdefault("max_offset", seq_len)
        pe.setdefault("max_len", seq_len)
        base.setdefault("max_len", seq_len)
        return model.ModelConfig(pe=posenc.PEScheme(variant, **pe), **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if not (k == "theory" and v is None)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "eval" in d:
            ev = d.pop("eval")
            d.setdefault("eval_lengths", ev.get("lengths", [2, 3, 4]))
            d.setdefault("eval_size", ev.get("size", 500))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh)).validate()

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("lengen.presets").iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    res = resources.files("lengen.presets") / f"{name}.yaml"
    if not res.is_file():
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return ExperimentConfig.from_dict(yaml.safe_load(res.read_text(encoding="utf-8"))).validate()


# ---------------------------------------------------------------- tables and CSV


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def export_csv(header: Sequence[str], rows: Iterable[Sequence], path) -> Path:
    """UTF-8 CSV, header first, floats at 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def _parse(cell: str):
    for conv in (int, float):
        try:
            return conv(cell)
        except ValueError:
            pass
    return cell


def read_csv(path) -> tuple[list[str], list[list]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[_parse(c) for c in row] for row in r]


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)  # (checkpoint, bucket, metric, value, count)
    HEADER = ("checkpoint", "bucket", "metric", "value", "count")

    def add(self, checkpoint: int, bucket: str, metric: str, value: float, count: int) -> None:
        if count <= 0:
            raise ValueError("metric rows need a positive sample count")
        self.rows.append((int(checkpoint), str(bucket), str(metric), float(value), int(count)))

    def get(self, bucket: str, metric: str = "exact_match", checkpoint: int | None = None) -> float:
        hits = [r for r in self.rows if r[1] == bucket and r[2] == metric and (checkpoint is None or r[0] == checkpoint)]
        if not hits:
            raise KeyError((bucket, metric, checkpoint))
        return hits[-1][3]

    def to_csv(self, path) -> Path:
        return export_csv(self.HEADER, self.rows, path)

    @classmethod
    def from_csv(cls, path) -> "MetricsTable":
        _, rows = read_csv(path)
        return cls([(int(r[0]), str(r[1]), str(r[2]), float(r[3]), int(r[4])) for r in rows])


# ---------------------------------------------------------------- training pipeline


@dataclass
class RunResult:
    metrics: MetricsTable
    best_checkpoint: int
    params: dict
    cfg: model.ModelConfig
    out_dir: Path | None = None


def _eval_sets(cfg: ExperimentConfig, spec: DomainSpec, rng) -> tuple[dict, list]:
    sets = {L: datagen.length_dataset(spec, L, cfg.eval_size, rng) for L in cfg.eval_lengths}
    val = []
    if cfg.validation.length is not None:
        val = datagen.length_dataset(spec, cfg.validation.length, cfg.validation.size, rng)
    return sets, val


def select_checkpoint(scores: dict[int, float]) -> int:
    """Highest validation accuracy; ties go to the earliest checkpoint."""
    best = max(scores.values())
    return min(k for k, v in scores.items() if v == best)


def run_experiment(cfg: ExperimentConfig, out_dir=None, keep_checkpoints: bool = True) -> RunResult:
    """Generate data, train, select the best checkpoint by longer-length validation, evaluate.

    Every stage failure surfaces as :class:`StageError` tagged with the stage
    name; files already written are left in place.
    """
    with stage("config"):
        cfg.validate()
        if cfg.theory is not None:
            raise ValueError("theory configs run through run_theory")
        spec = cfg.domain_spec()
        mcfg = cfg.model_config()
        sampler = SamplerSpec.parse(cfg.sampler, seed=cfg.seed)
        out = Path(out_dir) if out_dir is not None else (Path(cfg.out_dir) if cfg.out_dir else None)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            cfg.dump(out / "config.yaml")
            (out / "meta.json").write_text(json.dumps({"started": time.strftime("%Y-%m-%dT%H:%M:%S")}))
    rngs = stage_rngs(cfg.seed)
    tb = cfg.train
    table = MetricsTable()

    with stage("data"):
        eval_sets, val_set = _eval_sets(cfg, spec, rngs["eval"])
        stream = datagen.dataset_stream(spec, sampler, tb.steps * tb.batch, rngs["data"])

    with stage("init"):
        params = model.init_params(mcfg, rngs["init"])
        opt = model.AdamW(lr=tb.lr, weight_decay=tb.weight_decay)

    def checkpoint(step):
        if out is not None and keep_checkpoints:
            ck = out / "checkpoints"
            ck.mkdir(exist_ok=True)
            model.save_checkpoint(ck / f"step{step:07d}.npz", mcfg, params, opt, {"step": step})
        kept[step] = {k: v.copy() for k, v in params.items()}
        if val_set:
            acc = model.evaluate(params, mcfg, val_set)["exact_match"]
            scores[step] = acc
            table.add(step, f"val_len{cfg.validation.length}", "exact_match", acc, len(val_set))
            log.info("step %d validation exact match %.4f", step, acc)

    scores: dict[int, float] = {}
    kept: dict[int, dict] = {}
    with stage("train"):
        every = max(1, int(round(tb.steps * tb.checkpoint_frac)))
        marks = set(range(every, tb.steps + 1, every)) | {tb.steps}
        if tb.steps == 0:
            checkpoint(0)
        for step in range(1, tb.steps + 1):
            batch = model.make_batch([next(stream) for _ in range(tb.batch)], mcfg.pe)
            stats = model.train_step(params, opt, mcfg, batch, rng=rngs["train"], lr=tb.lr_at(step))
            if not np.isfinite(stats["loss"]):
                raise FloatingPointError(f"non-finite loss at step {step}")
            if step in marks:
                table.add(step, "train", "loss", stats["loss"], tb.batch)
                checkpoint(step)

    with stage("eval"):
        best = select_checkpoint(scores) if scores else max(kept)
        params = kept[best]
        for L, samples in eval_sets.items():
            preds = model.predict_samples(params, mcfg, samples)
            ex = model.score_predictions(samples, preds, "exact")
            table.add(best, f"len{L}", "exact_match", ex["exact_match"], ex["count"])
            for rank, acc in model.score_predictions(samples, preds, "per_digit")["per_digit"].items():
                table.add(best, f"len{L}", f"digit{rank}", acc, len(samples))
            for c, (acc, n) in model.score_predictions(samples, preds, "by_complexity")["by_complexity"].items():
                table.add(best, f"len{L}", f"cascade{c}", acc, n)

    if out is not None:
        with stage("export"):
            table.to_csv(out / "metrics.csv")
            export_csv(("checkpoint", "selected"), [(k, int(k == best)) for k in sorted(kept)], out / "selection.csv")
            if mcfg.pe.pairwise:
                tables = [params[k] for k in sorted(p for p in params if p == "pe" or p.startswith("pe."))]
                posenc.export_positional_map(tables, mcfg.pe, out / "positional_map")
            meta = json.loads((out / "meta.json").read_text())
            meta["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
            (out / "meta.json").write_text(json.dumps(meta))
    return RunResult(table, best, params, mcfg, out)


def rerun_selection(out_dir, validation_samples: Sequence, cfg: model.ModelConfig | None = None) -> int:
    """Re-score every saved checkpoint on the given validation set and pick the winner again."""
    scores = {}
    for path in sorted(Path(out_dir, "checkpoints").glob("step*.npz")):
        mcfg, params, _, extra = model.load_checkpoint(path)
        scores[int(extra["step"])] = model.evaluate(params, cfg or mcfg, validation_samples)["exact_match"]
    if not scores:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    return select_checkpoint(scores)


def evaluate_checkpoint(path, spec: DomainSpec, lengths: Sequence[int], size: int, seed: int) -> MetricsTable:
    mcfg, params, _, extra = model.load_checkpoint(path)
    rng = stage_rngs(seed)["eval"]
    table = MetricsTable()
    step = int(extra.get("step", 0))
    for L in lengths:
        samples = datagen.length_dataset(spec, L, size, rng)
        table.add(step, f"len{L}", "exact_match", model.evaluate(params, mcfg, samples)["exact_match"], size)
    return table


# ---------------------------------------------------------------- statistics


def _dist_rows(label: str, values: np.ndarray, total: int):
    counts = np.bincount(values)
    cum = np.cumsum(counts)
    return [(label, k, int(c), c / total, cum[k] / total) for k, c in enumerate(counts)]


STATS_HEADER = ("convention", "value", "count", "probability", "cumulative")


def cascade_dist(digits: int, samples: int, seed: int = 0, chunk: int = 200_000) -> list[tuple]:
    """Cascade-length histogram of uniform digit-vector pairs, under both conventions.

    ``with_generator`` counts the position that creates the carry; ``nines_only``
    counts only the run of 9-sums it travels through.
    """
    rng = np.random.default_rng(seed)
    acc = {True: [], False: []}
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        if digits == 0:
            a = b = np.zeros((n, 1), dtype=np.int64)
        else:
            a = rng.integers(0, 10, size=(n, digits))
            b = rng.integers(0, 10, size=(n, digits))
        for gen in (True, False):
            acc[gen].append(arith.cascade_lengths(a, b, count_generator=gen))
        done += n
    rows = []
    for gen, label in ((True, "with_generator"), (False, "nines_only")):
        rows += _dist_rows(label, np.concatenate(acc[gen]) if acc[gen] else np.zeros(0, int), samples)
    return rows


def mul_dep_dist(digits: int, samples: int, multiplier_len: int = 1, seed: int = 0, chunk: int = 200_000) -> list[tuple]:
    """Histogram of carry-pass counts for a uniform exact-length multiplier times a uniform multiplicand."""
    rng = np.random.default_rng(seed)
    out = []
    done = 0
    lo, hi = 10 ** (multiplier_len - 1), 10**multiplier_len
    while done < samples:
        n = min(chunk, samples - done)
        mult = rng.integers(max(lo, 1), hi, size=n)
        b = rng.integers(0, 10, size=(n, digits))
        out.append(arith.mul_levels(mult, b, multiplier_len))
        done += n
    return _dist_rows("levels", np.concatenate(out), samples)


def complexity_hist(spec: DomainSpec, sampler: str, count: int, seed: int = 0) -> list[tuple]:
    samp = SamplerSpec.parse(sampler, seed=seed)
    vals = np.array([s.meta["complexity"] for s in datagen.dataset_stream(spec, samp, count)], dtype=np.int64)
    return _dist_rows(samp.kind, vals, count)


# ---------------------------------------------------------------- theory runs


def theory_task(d: dict, rng=None) -> TheoryTask:
    kw = {k: d[k] for k in ("n", "n1", "d", "alpha", "w") if k in d}
    if "betas" in d:
        kw["betas"] = tuple(d["betas"])
    elif "beta" in d:
        kw["betas"] = (float(d["beta"]),) * int(d.get("m", 1))
    if d.get("random_theta", True):
        return TheoryTask.random(rng or np.random.default_rng(d.get("seed", 0)), **kw)
    return TheoryTask(**kw)


def run_theory(kind: str, task: TheoryTask, flow: th_flow.FlowConfig, log_every: int = 100,
               test_mode: str = "analytic", out_dir=None) -> th_flow.TrainResult:
    """Population SGD run; writes loss.csv (step, train_loss) and positions.csv (position, test_loss)."""
    with stage("theory"):
        res = th_flow.sgd_population_train(kind, task, flow, log_every=log_every, test_mode=test_mode)
    if out_dir is not None:
        with stage("export"):
            out = Path(out_dir)
            export_csv(("step", "train_loss"), res.losses, out / f"{kind}_loss.csv")
            export_csv(("position", "test_loss"), enumerate(res.test_loss), out / f"{kind}_positions.csv")
            export_csv(gram_header(task.n), gram_rows(res), out / f"{kind}_gram.csv")
    return res


def gram_matrix(res: th_flow.TrainResult) -> np.ndarray:
    st = res.state
    if res.kind == "rpe":
        return rpe_kernel(st) * float(st.v @ st.v)
    return st.gram()


def gram_header(n: int) -> list[str]:
    return ["row"] + [f"c{j}" for j in range(n)]


def gram_rows(res: th_flow.TrainResult):
    return [[i, *row] for i, row in enumerate(gram_matrix(res))]


def flow_table(series: th_flow.GramSeries) -> tuple[list[str], list[list]]:
    ts, H = series.trajectory()
    return ["t"] + [f"A{j}" for j in range(H.shape[1])], [[t, *h] for t, h in zip(ts, H)]


def run_theory_config(cfg: ExperimentConfig, out_dir=None) -> dict[str, th_flow.TrainResult]:
    """Run every model kind listed under ``theory.runs`` and export its tables."""
    with stage("config"):
        cfg.validate()
        th = dict(cfg.theory or {})
        runs = th.pop("runs", {"rpe": {}})
        task = theory_task({**th, "seed": cfg.seed})
        out = Path(out_dir) if out_dir is not None else (Path(cfg.out_dir) if cfg.out_dir else None)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            cfg.dump(out / "config.yaml")
    results = {}
    for kind, fl in runs.items():
        flow = th_flow.FlowConfig(seed=cfg.seed, **fl)
        results[kind] = run_theory(kind, task, flow, log_every=max(1, flow.steps // 200), out_dir=out)
    return results
