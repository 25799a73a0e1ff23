"""Training loop, evaluation, retain-rate sweeps and multi-seed aggregation.

Configuration is an INI file (``configparser`` grammar) with the sections
``[experiment]``, ``[model]``, ``[drop]``, ``[optim]`` and ``[data]``; see
``configs/`` and the README for every key. ``profile = desk`` in
``[experiment]`` preloads the desk-scale preset, and explicit keys override it.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import (AugmentPolicy, Dataset, augment, default_data_dir, load_cifar,
                   normalize_images, subset_sample, synthetic_dataset)
from .drop import DropSpec, retention_schedule
from .errors import ConfigError, DataError
from .layers import softmax_cross_entropy
from .models import ModelConfig, build_model
from .optim import LrSchedule, SgdState, sgd_step
from .tensor import Rng

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "train_loss", "train_error", "test_error", "lr", "retain_rate"]

DESK_PROFILE = {
    "experiment": {"epochs": "30", "batch_size": "128"},
    "model": {"family": "plain", "n": "1", "width": "4"},
    "optim": {"lr": "0.1", "schedule": "step", "milestones": "15,23", "factor": "0.2",
              "momentum": "0.9", "weight_decay": "0.0005"},
    "data": {"dataset": "cifar10", "subset_classes": "10", "subset_per_class": "500",
             "test_per_class": "200"},
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 200
    batch_size: int = 128
    eval_batch_size: int = 500
    seeds: tuple[int, ...] = (0,)
    augment: bool = True
    dataset: str = "cifar10"
    data_dir: str | None = None
    data_seed: int = 0
    subset_classes: int = 0
    subset_per_class: int = 0
    test_per_class: int = 0
    synthetic_classes: int = 10
    synthetic_per_class: int = 100
    synthetic_test_per_class: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.seeds) < 1:
            raise ConfigError("at least one seed is required")
        if self.dataset not in ("cifar10", "cifar100", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.schedule.total_epochs != self.epochs:
            self.schedule = replace(self.schedule, total_epochs=self.epochs)

    @property
    def drop(self) -> DropSpec:
        return self.model.drop

    def with_rate(self, rate: float) -> "TrainConfig":
        return replace(self, model=replace(self.model, drop=replace(self.model.drop, rate=rate)))


# ------------------------------------------------------------------- config io


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _bool(text: str) -> bool:
    return configparser.RawConfigParser.BOOLEAN_STATES[text.strip().lower()]


def parse_config(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    if parser.get("experiment", "profile", fallback="").strip() == "desk":
        merged = configparser.ConfigParser(interpolation=None)
        merged.read_dict(DESK_PROFILE)
        merged.read_string(text)
        parser = merged
    known = {"experiment", "model", "drop", "optim", "data"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    def get(section, key, default):
        return parser.get(section, key, fallback=default)

    try:
        drop = DropSpec(
            method=get("drop", "method", "none"),
            rate=float(get("drop", "rate", "1.0")),
            schedule=get("drop", "schedule", "constant"),
            start_rate=float(get("drop", "start_rate", "1.0")),
            end_rate=float(get("drop", "end_rate", get("drop", "rate", "1.0"))),
            granularity=get("drop", "granularity", "per_sample"),
        )
        epochs = int(get("experiment", "epochs", "200"))
        model = ModelConfig(
            family=get("model", "family", "resnet"),
            n=int(get("model", "n", "1")),
            width_factor=int(get("model", "width", "1")),
            num_classes=int(get("model", "num_classes", "10")),
            drop=drop,
            include_stem_drop=_bool(get("model", "include_stem_drop", "true")),
            include_projection_drop=_bool(get("model", "include_projection_drop", "true")),
        )
        schedule = LrSchedule(
            kind=get("optim", "schedule", "step"),
            base_lr=float(get("optim", "lr", "0.1")),
            milestones=_ints(get("optim", "milestones", "60,120,160")),
            factor=float(get("optim", "factor", "0.2")),
            lr_min=float(get("optim", "lr_min", "0.0")),
            total_epochs=epochs,
        )
        data_dir = get("data", "data_dir", "") or None
        return TrainConfig(
            model=model,
            schedule=schedule,
            momentum=float(get("optim", "momentum", "0.9")),
            weight_decay=float(get("optim", "weight_decay", "0.0005")),
            epochs=epochs,
            batch_size=int(get("experiment", "batch_size", "128")),
            eval_batch_size=int(get("experiment", "eval_batch_size", "500")),
            seeds=_ints(get("experiment", "seeds", "0")),
            augment=_bool(get("experiment", "augment", "true")),
            dataset=get("data", "dataset", "cifar10"),
            data_dir=data_dir,
            data_seed=int(get("data", "data_seed", "0")),
            subset_classes=int(get("data", "subset_classes", "0")),
            subset_per_class=int(get("data", "subset_per_class", "0")),
            test_per_class=int(get("data", "test_per_class", "0")),
            synthetic_classes=int(get("data", "synthetic_classes", "10")),
            synthetic_per_class=int(get("data", "synthetic_per_class", "100")),
            synthetic_test_per_class=int(get("data", "synthetic_test_per_class", "50")),
        )
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    """Serialize ``cfg`` back into the INI grammar accepted by ``parse_config``."""
    m, d, s = cfg.model, cfg.model.drop, cfg.schedule
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict({
        "experiment": {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                       "eval_batch_size": cfg.eval_batch_size,
                       "seeds": ",".join(map(str, cfg.seeds)), "augment": cfg.augment},
        "model": {"family": m.family, "n": m.n, "width": m.width_factor, "num_classes": m.num_classes,
                  "include_stem_drop": m.include_stem_drop,
                  "include_projection_drop": m.include_projection_drop},
        "drop": {"method": d.method, "rate": repr(d.rate), "schedule": d.schedule,
                 "start_rate": repr(d.start_rate), "end_rate": repr(d.end_rate),
                 "granularity": d.granularity},
        "optim": {"lr": repr(s.base_lr), "schedule": s.kind, "milestones": ",".join(map(str, s.milestones)),
                  "factor": repr(s.factor), "lr_min": repr(s.lr_min), "momentum": repr(cfg.momentum),
                  "weight_decay": repr(cfg.weight_decay)},
        "data": {"dataset": cfg.dataset, "data_dir": cfg.data_dir or "", "data_seed": cfg.data_seed,
                 "subset_classes": cfg.subset_classes, "subset_per_class": cfg.subset_per_class,
                 "test_per_class": cfg.test_per_class, "synthetic_classes": cfg.synthetic_classes,
                 "synthetic_per_class": cfg.synthetic_per_class,
                 "synthetic_test_per_class": cfg.synthetic_test_per_class},
    })
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ------------------------------------------------------------------- data


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """Train and test splits; channel means come from the (possibly subsetted) train split."""
    if cfg.dataset == "synthetic":
        train = synthetic_dataset(cfg.synthetic_classes, cfg.synthetic_per_class, cfg.data_seed, "train")
        test = synthetic_dataset(cfg.synthetic_classes, cfg.synthetic_test_per_class, cfg.data_seed, "test")
        return train.with_means(), test
    data_dir = default_data_dir() or cfg.data_dir
    if not data_dir:
        raise DataError(f"no data directory for {cfg.dataset}: set [data] data_dir or DROPFILTER_DATA_DIR")
    train, test = load_cifar(data_dir, cfg.dataset)
    if cfg.subset_classes:
        rng = Rng(cfg.data_seed).child("subset")
        train = subset_sample(train, cfg.subset_classes, cfg.subset_per_class, rng.child("train"))
        test = subset_sample(test, cfg.subset_classes, cfg.test_per_class, rng.child("test"),
                             class_ids=train.class_ids)
    return train.with_means(), test


# ------------------------------------------------------------------ metrics


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    seed: int = 0
    failed: bool = False
    failed_epoch: int | None = None

    @property
    def final_test_error(self) -> float:
        return self.rows[-1]["test_error"] if self.rows and not self.failed else math.nan

    @property
    def final_train_error(self) -> float:
        return self.rows[-1]["train_error"] if self.rows and not self.failed else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r["epoch"]] + [f"{r[k]:.6g}" for k in CSV_HEADER[1:]])
        return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def evaluate(model, dataset: Dataset, means: np.ndarray, batch_size: int = 500) -> float:
    """Top-1 error of ``model`` in eval mode (all drop sites inactive)."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    wrong = 0
    for start in range(0, n, batch_size):
        x = normalize_images(dataset.images[start:start + batch_size], means)
        logits = model.forward(x, train=False)
        wrong += int(np.sum(np.argmax(logits, axis=1) != dataset.labels[start:start + batch_size]))
    return wrong / n


def _train_batch_images(ds: Dataset, idx: np.ndarray, policy: AugmentPolicy, root: Rng, epoch: int):
    if not policy.enabled:
        return ds.images[idx]
    return np.stack([augment(ds.images[i], policy, root.child("augment", epoch, int(i))) for i in idx])


def train_run(cfg: TrainConfig, seed: int, out_dir=None, data: tuple[Dataset, Dataset] | None = None,
              return_model: bool = False):
    """Train one model for ``cfg.epochs`` epochs and record per-epoch metrics.

    Every random choice is keyed by ``seed`` and a label path (shuffle,
    augmentation per image, drop masks per site and step), so a (config, seed)
    pair always produces the same rows. A non-finite loss stops the run and
    marks it failed.
    """
    train, test = data if data is not None else load_data(cfg)
    model_cfg = replace(cfg.model, num_classes=train.num_classes)
    model = build_model(model_cfg, seed)
    params = [p for _, p in model.named_params()]
    opt = SgdState(lr=cfg.schedule.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    policy = AugmentPolicy(enabled=cfg.augment)
    root = Rng(seed)
    means = train.channel_means
    metrics = RunMetrics(seed=seed)
    n = len(train)

    for epoch in range(cfg.epochs):
        opt.lr = cfg.schedule(epoch)
        rate = retention_schedule(cfg.drop, epoch, cfg.epochs)
        model.set_rate(rate)
        order = root.child("shuffle", epoch).permutation(n)
        loss_sum, wrong = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = normalize_images(_train_batch_images(train, idx, policy, root, epoch), means)
            y = train.labels[idx]
            model.begin_step(root.child("drop", epoch, step))
            model.zero_grad()
            logits = model.forward(x, train=True)
            loss, grad = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                metrics.failed, metrics.failed_epoch = True, epoch
                log.warning("seed %d diverged at epoch %d", seed, epoch)
                break
            model.backward(grad)
            sgd_step(params, opt)
            loss_sum += loss * len(idx)
            wrong += int(np.sum(np.argmax(logits, axis=1) != y))
        if metrics.failed:
            break
        test_error = evaluate(model, test, means, cfg.eval_batch_size)
        metrics.rows.append({"epoch": epoch, "train_loss": loss_sum / n, "train_error": wrong / n,
                             "test_error": test_error, "lr": opt.lr, "retain_rate": rate})
        log.info("seed %d epoch %d loss %.4f train_err %.4f test_err %.4f", seed, epoch,
                 loss_sum / n, wrong / n, test_error)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics.to_csv())
        (out / "config.ini").write_text(dump_config(cfg))
        (out / "run.json").write_text(json.dumps({
            "method": cfg.drop.method, "rate": cfg.drop.rate, "seed": seed, "model": model_cfg.name,
            "failed": metrics.failed, "failed_epoch": metrics.failed_epoch,
            "final_test_error": None if metrics.failed else metrics.final_test_error,
            "final_train_error": None if metrics.failed else metrics.final_train_error,
        }, indent=2) + "\n")
        if not metrics.failed:
            save_checkpoint(model, out / "checkpoint.bin")
    if return_model:
        return metrics, model
    return metrics


# -------------------------------------------------------------- aggregation


@dataclass
class Summary:
    mean: float
    std: float
    runs: int
    failed: int = 0
    single_run: bool = False


def aggregate_runs(results) -> Summary:
    """Mean and sample standard deviation (n-1) of final test errors.

    Accepts ``RunMetrics`` objects or plain floats; failed runs and NaNs are
    excluded and counted. A single surviving run reports std 0 with
    ``single_run`` set.
    """
    values, failed = [], 0
    for r in results:
        v = r.final_test_error if isinstance(r, RunMetrics) else float(r)
        if isinstance(r, RunMetrics) and r.failed or not math.isfinite(v):
            failed += 1
            continue
        values.append(v)
    if not values:
        return Summary(math.nan, math.nan, 0, failed)
    arr = np.asarray(values)
    if len(arr) == 1:
        return Summary(float(arr[0]), 0.0, 1, failed, single_run=True)
    return Summary(float(arr.mean()), float(arr.std(ddof=1)), len(arr), failed)


SUMMARY_HEADER = ["method", "rate", "mean_test_error", "std_test_error", "runs", "failed", "single_run"]


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in rows:
        w.writerow([r["method"], f"{r['rate']:.6g}", f"{r['mean_test_error']:.6g}",
                    f"{r['std_test_error']:.6g}", r["runs"], r["failed"], int(r["single_run"])])
    return buf.getvalue()


def _sweep_cell(args):
    cfg, rate, seed, out_dir, data = args
    run_dir = None if out_dir is None else Path(out_dir) / f"rate_{rate:g}" / f"seed_{seed}"
    return rate, seed, train_run(cfg.with_rate(rate), seed, run_dir, data)


def sweep_retain_rate(cfg: TrainConfig, rates, seeds, out_dir=None, jobs: int = 1,
                      data: tuple[Dataset, Dataset] | None = None) -> list[dict]:
    """Train every (rate, seed) pair and summarize the final test error per rate.

    Rates are taken literally as the method's parameter: p for dropout,
    DropFilter and DropPath (1 means no drop), q for ScaleFilter (0 means no
    drop).
    """
    rates = [float(r) for r in rates]
    seeds = [int(s) for s in seeds]
    if not rates:
        raise ConfigError("sweep needs at least one rate")
    if data is None:
        data = load_data(cfg)
    cells = [(cfg, r, s, out_dir, data) for r in rates for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    table = []
    for r in rates:
        summ = aggregate_runs([m for rate, _, m in results if rate == r])
        table.append({"method": cfg.drop.method, "rate": r, "mean_test_error": summ.mean,
                      "std_test_error": summ.std, "runs": summ.runs, "failed": summ.failed,
                      "single_run": summ.single_run})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.csv").write_text(summary_csv(table))
    return table


def aggregate_dir(in_dir) -> list[dict]:
    """Summarize every ``run.json`` below ``in_dir`` grouped by (method, rate)."""
    groups: dict[tuple[str, float], list[float]] = {}
    for path in sorted(Path(in_dir).rglob("run.json")):
        info = json.loads(path.read_text())
        err = info.get("final_test_error")
        value = math.nan if info.get("failed") or err is None else float(err)
        groups.setdefault((info["method"], float(info["rate"])), []).append(value)
    if not groups:
        raise DataError(f"no run.json files found under {in_dir}")
    table = []
    for (method, rate), values in sorted(groups.items()):
        summ = aggregate_runs(values)
        table.append({"method": method, "rate": rate, "mean_test_error": summ.mean,
                      "std_test_error": summ.std, "runs": summ.runs, "failed": summ.failed,
                      "single_run": summ.single_run})
    return table

