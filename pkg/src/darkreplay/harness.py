"""Experiment orchestration: configs, runs, records, grid search, multi-seed."""
from __future__ import annotations

import glob
import hashlib
import itertools
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, nn
from . import rng as rngmod
from . import streams
from .data import load_mnist, rotate_each, split_validation
from .methods import ConfigError, Learner, MethodConfig, make_learner, train_joint

SETTINGS = ("seq_mnist_class", "seq_mnist_task", "perm_mnist", "rot_mnist", "mnist360")
BUFFER_SIZES = (200, 500, 1000, 5120)
M360_BUFFERS = (200, 500, 1000)
DATA_ENV = "DER_MNIST_DIR"
DEFAULT_DATA_DIR = "/root/data/mnist"
VALIDATION_FRACTION = 0.10
VALIDATION_SPLIT_SEED = 0
N_BASELINE_INITS = 10
FDR_NO_BOUNDARIES = "fdr needs task boundaries, which mnist360 does not have"


def default_data_dir() -> str:
    return os.environ.get(DATA_ENV, DEFAULT_DATA_DIR)


_FAMILIES = {"seq_mnist_class": "seq", "seq_mnist_task": "seq", "perm_mnist": "perm",
             "rot_mnist": "rot", "mnist360": "m360"}


def family(setting: str) -> str:
    if setting not in _FAMILIES:
        raise ConfigError(f"unknown setting {setting!r}; choose from {', '.join(SETTINGS)}")
    return _FAMILIES[setting]


# Selected hyperparameters per (setting family, method, buffer). Entries are
# lr, alpha, beta and, for MNIST-360, stream batch size and replay batch size.
# Buffer None means the method has no buffer. The tabulated alpha weighs a
# per-element mean of squared logit differences; the logit term used here sums
# over classes, so defaults_for divides alpha by the number of classes.
_H = {}


def _put(fam, kind, buffers, lr, alpha=0.0, beta=0.0, bs=None, mbs=None):
    for b in buffers:
        _H[(fam, kind, b)] = dict(lr=lr, alpha=alpha, beta=beta, batch_size=bs, replay_batch_size=mbs)


_put("seq", "sgd", [None], 0.03)
_put("seq", "joint", [None], 0.03)
_put("seq", "er", [200], 0.01)
_put("seq", "er", [500, 5120], 0.1)
_put("seq", "der", [200], 0.03, 0.2)
_put("seq", "der", [500], 0.03, 1.0)
_put("seq", "der", [5120], 0.1, 0.5)
_put("seq", "derpp", [200], 0.03, 0.2, 1.0)
_put("seq", "derpp", [500], 0.03, 1.0, 0.5)
_put("seq", "derpp", [5120], 0.1, 0.2, 0.5)
_put("seq", "fdr", [200], 0.03, 0.5)
_put("seq", "fdr", [500, 5120], 0.1, 0.2)
_put("seq", "agem_r", [200, 500, 5120], 0.1)

_put("perm", "sgd", [None], 0.2)
_put("perm", "joint", [None], 0.2)
_put("perm", "er", [200, 500, 5120], 0.2)
_put("perm", "der", [200, 500], 0.2, 1.0)
_put("perm", "der", [5120], 0.2, 0.5)
_put("perm", "derpp", [200], 0.1, 1.0, 1.0)
_put("perm", "derpp", [500], 0.2, 1.0, 0.5)
_put("perm", "derpp", [5120], 0.2, 0.5, 1.0)
_put("perm", "fdr", [200], 0.1, 1.0)
_put("perm", "fdr", [500], 0.1, 0.3)
_put("perm", "fdr", [5120], 0.1, 1.0)
_put("perm", "agem_r", [200, 500, 5120], 0.1)

_put("rot", "sgd", [None], 0.2)
_put("rot", "joint", [None], 0.2)
_put("rot", "er", [200, 500, 5120], 0.2)
_put("rot", "der", [200], 0.2, 1.0)
_put("rot", "der", [500, 5120], 0.2, 0.5)
_put("rot", "derpp", [200], 0.1, 1.0, 0.5)
_put("rot", "derpp", [500], 0.2, 0.5, 1.0)
_put("rot", "derpp", [5120], 0.2, 0.5, 0.5)
_put("rot", "fdr", [200], 0.1, 1.0)
_put("rot", "fdr", [500], 0.2, 0.3)
_put("rot", "fdr", [5120], 0.2, 1.0)
_put("rot", "agem_r", [200], 0.1)
_put("rot", "agem_r", [500, 5120], 0.3)

_put("m360", "sgd", [None], 0.1, bs=4)
_put("m360", "joint", [None], 0.1, bs=4)
_put("m360", "er", [200, 500], 0.2, bs=1, mbs=16)
_put("m360", "er", [1000], 0.2, bs=4, mbs=16)
_put("m360", "agem_r", [200, 500], 0.1, bs=16, mbs=128)
_put("m360", "agem_r", [1000], 0.1, bs=4, mbs=128)
_put("m360", "der", [200], 0.1, 0.5, bs=16, mbs=64)
_put("m360", "der", [500], 0.2, 0.5, bs=16, mbs=16)
_put("m360", "der", [1000], 0.1, 0.5, bs=8, mbs=16)
_put("m360", "derpp", [200, 500], 0.2, 0.5, 1.0, bs=16, mbs=16)
_put("m360", "derpp", [1000], 0.2, 0.2, 1.0, bs=16, mbs=128)

DEFAULT_HYPERPARAMETERS = _H

# Grid-search spaces per (setting family, method); alpha on the tabulated scale.
GRIDS = {
    ("seq", "sgd"): {"lr": [0.01, 0.03, 0.1]},
    ("seq", "joint"): {"lr": [0.01, 0.03, 0.1]},
    ("seq", "er"): {"lr": [0.01, 0.03, 0.1]},
    ("seq", "der"): {"lr": [0.03, 0.1], "alpha": [0.2, 0.5, 1.0]},
    ("seq", "derpp"): {"lr": [0.03, 0.1], "alpha": [0.2, 0.5, 1.0], "beta": [0.2, 0.5, 1.0]},
    ("perm", "sgd"): {"lr": [0.03, 0.1, 0.2]},
    ("perm", "joint"): {"lr": [0.03, 0.1, 0.2]},
    ("perm", "der"): {"lr": [0.1, 0.2], "alpha": [0.5, 1.0]},
    ("perm", "derpp"): {"lr": [0.1, 0.2], "alpha": [0.5, 1.0], "beta": [0.5, 1.0]},
    ("m360", "der"): {"replay_batch_size": [16, 64, 128], "lr": [0.1, 0.2],
                      "batch_size": [1, 4, 8, 16], "alpha": [0.5, 1.0]},
}


def n_classes_for(setting: str) -> int:
    return streams.M360_DIGITS if family(setting) == "m360" else 10


def defaults_for(setting: str, kind: str, buffer: int | None) -> dict:
    """Tabulated hyperparameters with alpha converted to the summed logit term."""
    out = tabulated(setting, kind, buffer)
    out["alpha"] = out["alpha"] / n_classes_for(setting)
    return out


def tabulated(setting: str, kind: str, buffer: int | None) -> dict:
    """The table entry as stored (alpha on the per-element scale)."""
    fam = family(setting)
    key = (fam, kind, buffer if kind not in ("sgd", "joint") else None)
    if key in _H:
        return dict(_H[key])
    # an untabulated buffer size borrows the nearest tabulated one
    sizes = sorted(b for (f, k, b) in _H if f == fam and k == kind and b is not None)
    if not sizes or buffer is None:
        raise ConfigError(f"no default hyperparameters for {kind} on {setting}")
    nearest = min(sizes, key=lambda b: (abs(b - buffer), b))
    return dict(_H[(fam, kind, nearest)])


@dataclass
class ExperimentConfig:
    setting: str
    method: MethodConfig
    seed: int = 0
    epochs_per_task: int = 1
    batch_size: int | None = None
    n_tasks: int | None = None  # domain settings only; default 20
    data_dir: str | None = None
    validation: bool = False  # train on 90% of train, score on the held-out 10%
    output_dir: str | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; choose from {', '.join(SETTINGS)}")
        if self.epochs_per_task < 1:
            raise ConfigError("epochs_per_task must be at least 1")
        if self.setting == "mnist360":
            if self.method.kind == "fdr":
                raise ConfigError(FDR_NO_BOUNDARIES)
            if self.method.buffer_capacity and self.method.buffer_capacity not in M360_BUFFERS:
                raise ConfigError(f"mnist360 buffers must be one of {M360_BUFFERS}")
        if self.batch_size is None:
            self.batch_size = {"seq": streams.SEQ_BATCH, "perm": streams.DOMAIN_BATCH,
                               "rot": streams.DOMAIN_BATCH, "m360": streams.M360_BATCH}[family(self.setting)]
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def buffer_size(self) -> int:
        return self.method.buffer_capacity

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Build from a JSON-style dict; missing hyperparameters are filled in
        from the defaults table for the setting, method and buffer."""
        d = dict(d)
        if "setting" not in d or "method" not in d:
            raise ConfigError("config needs 'setting' and 'method'")
        m = d.pop("method")
        m = {"kind": m} if isinstance(m, str) else dict(m)
        if "buffer_size" in d:
            m.setdefault("buffer_capacity", d.pop("buffer_size"))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        kind = m.get("kind")
        if d["setting"] == "mnist360" and kind == "fdr":
            raise ConfigError(FDR_NO_BOUNDARIES)
        needs_defaults = any(k not in m for k in ("lr", "alpha", "beta")) or (
            d["setting"] == "mnist360" and d.get("batch_size") is None)
        if needs_defaults:
            table = defaults_for(d["setting"], kind, m.get("buffer_capacity"))
            for k in ("lr", "alpha", "beta"):
                m.setdefault(k, table[k])
            if table["replay_batch_size"] is not None:
                m.setdefault("replay_batch_size", table["replay_batch_size"])
            if table["batch_size"] is not None and d.get("batch_size") is None:
                d["batch_size"] = table["batch_size"]
        try:
            method = MethodConfig(**m)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(method=method, **d)


def default_config(setting: str, kind: str, buffer: int | None = None, seed: int = 0, **extra) -> ExperimentConfig:
    d = {"setting": setting, "method": {"kind": kind}, "seed": seed, **extra}
    if buffer:
        d["method"]["buffer_capacity"] = buffer
    return ExperimentConfig.from_dict(d)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as fh:
        d = json.load(fh)
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(d)


# -- records ---------------------------------------------------------------------

def artifact_version() -> str:
    """sha1 over this package's sources, so records name the code that made them."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class ResultsRecord:
    config: dict
    final_avg_accuracy: float  # percent
    accuracy_matrix: list | None = None  # fractions; None where not evaluated
    task_il_matrix: list | None = None
    final_avg_accuracy_task_il: float | None = None
    bwt: float | None = None  # percentage points
    fwt: float | None = None
    forgetting: float | None = None
    random_baseline: list | None = None
    wall_time: float = 0.0
    artifact_version: str = ""
    rng_digest: str = ""
    checkpoint: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ResultsRecord":
        return cls(**json.loads(text))

    def deterministic_view(self) -> str:
        """The record without wall time, which is the only nondeterministic field."""
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)

    def experiment_config(self) -> ExperimentConfig:
        d = dict(self.config)
        d["method"] = MethodConfig(**d["method"])
        return ExperimentConfig(**d)


def record_path(root, config: ExperimentConfig) -> Path:
    return (Path(root) / config.setting / config.method.kind
            / str(config.method.buffer_capacity) / f"{config.seed}.json")


# -- running -----------------------------------------------------------------

def _datasets(config: ExperimentConfig):
    data_dir = config.data_dir or default_data_dir()
    if not Path(data_dir).is_dir():
        raise FileNotFoundError(f"MNIST directory not found: {data_dir}")
    train, test = load_mnist(data_dir)
    if config.validation:
        train, test = split_validation(train, VALIDATION_FRACTION, VALIDATION_SPLIT_SEED)
    return train, test


def build_stream(config: ExperimentConfig, train, test):
    fam = family(config.setting)
    if fam == "seq":
        return streams.sequential_stream(train, test, "class_il", config.seed,
                                         config.batch_size, config.epochs_per_task)
    if fam in ("perm", "rot"):
        return streams.domain_stream(train, test, "permuted" if fam == "perm" else "rotated",
                                     config.n_tasks or streams.DOMAIN_TASKS, config.seed,
                                     config.batch_size, config.epochs_per_task)
    return streams.Mnist360Stream(train, streams.M360_ROUNDS, config.batch_size, config.seed)


def _pct(x):
    return None if x is None else float(100.0 * x)


def _matrix_to_list(a: np.ndarray) -> list:
    return [[None if np.isnan(v) else float(v) for v in row] for row in a]


def _transfer(a: np.ndarray, baseline: np.ndarray):
    full = np.nan_to_num(a, nan=0.0)  # only entries with i <= t + 1 are read
    return (_pct(metrics.backward_transfer(full)), _pct(metrics.forward_transfer(full, baseline)),
            _pct(metrics.forgetting(full)))


def _train_tasks(learner, stream, n_classes, config, on_task_end):
    boundaries = learner.needs_boundaries
    for t, task in enumerate(stream.tasks):
        for batch in stream.batches(task):
            learner.observe(batch.inputs, batch.labels)
        if boundaries:
            learner.on_boundary()
        on_task_end(t)


def _evaluate_entries(model, stream, t, a_class, a_task):
    """Row t of the accuracy matrices, for tasks up to t + 1 (enough for
    BWT, forgetting and FWT)."""
    limit = min(t + 1, len(stream.tasks) - 1)
    for i in range(limit + 1):
        task = stream.tasks[i]
        x, y = stream.test_set(task)
        pred = nn.predict(model, x)
        a_class[t, i] = np.count_nonzero(pred == y) / len(y)
        if a_task is not None:
            a_task[t, i] = metrics.accuracy(model, x, y, task.classes)


def run(config: ExperimentConfig, save: bool = True, keep_learner: bool = False):
    """Train and evaluate one configuration; returns a ResultsRecord.

    With ``keep_learner`` the trained learner is returned as well.
    """
    start = time.perf_counter()
    train, test = _datasets(config)
    fam = family(config.setting)
    n_classes = n_classes_for(config.setting)
    model = nn.DenseModel.mnist(n_classes, rngmod.stream(config.seed, "init"))
    learner = make_learner(model, config.method, config.seed, config.batch_size)
    stream = build_stream(config, train, test)
    rec = dict(config=config.to_dict())

    if fam == "m360":
        if config.method.kind == "joint":
            train_joint(model, stream.joint_batches(rngmod.stream(config.seed, "joint")), config.method.lr)
        else:
            for batch in stream:
                learner.observe(batch.inputs, batch.labels)
        x, y, _ = streams.mnist360_test_set(test)
        rec["final_avg_accuracy"] = _pct(metrics.accuracy(model, x, y))
    else:
        T = len(stream.tasks)
        seq = fam == "seq"
        if config.method.kind == "joint":
            gen = rngmod.stream(config.seed, "joint")
            for _ in range(config.epochs_per_task):
                train_joint(model, stream.joint_batches(gen), config.method.lr)
            final = metrics.evaluate(model, stream, task_il=False)
            rec["final_avg_accuracy"] = _pct(np.mean(final))
            rec["accuracy_matrix"] = [final]
            if seq:
                final_t = metrics.evaluate(model, stream, task_il=True)
                rec["task_il_matrix"] = [final_t]
                rec["final_avg_accuracy_task_il"] = _pct(np.mean(final_t))
        else:
            a_class = np.full((T, T), np.nan)
            a_task = np.full((T, T), np.nan) if seq else None
            _train_tasks(learner, stream, n_classes, config,
                         lambda t: _evaluate_entries(model, stream, t, a_class, a_task))
            baseline = metrics.random_baseline(stream, n_classes, config.seed, N_BASELINE_INITS, task_il=False)
            rec["accuracy_matrix"] = _matrix_to_list(a_class)
            rec["random_baseline"] = [float(v) for v in baseline]
            rec["final_avg_accuracy"] = _pct(a_class[-1].mean())
            rec["bwt"], rec["fwt"], rec["forgetting"] = _transfer(a_class, baseline)
            if seq:
                base_t = metrics.random_baseline(stream, n_classes, config.seed, N_BASELINE_INITS, task_il=True)
                rec["task_il_matrix"] = _matrix_to_list(a_task)
                rec["final_avg_accuracy_task_il"] = _pct(a_task[-1].mean())
                bwt, fwt, frg = _transfer(a_task, base_t)
                rec["extra"] = {"task_il_bwt": bwt, "task_il_fwt": fwt, "task_il_forgetting": frg,
                                "task_il_random_baseline": [float(v) for v in base_t]}

    if config.setting == "seq_mnist_task":
        # task-incremental runs report the masked evaluation as primary
        rec["accuracy_matrix"], rec["task_il_matrix"] = rec["task_il_matrix"], rec["accuracy_matrix"]
        rec["final_avg_accuracy"], rec["final_avg_accuracy_task_il"] = (
            rec["final_avg_accuracy_task_il"], rec["final_avg_accuracy"])
        rec["extra"] = dict(rec.get("extra", {}), primary_protocol="task_il")
    rec["artifact_version"] = artifact_version()
    rec["rng_digest"] = rngmod.state_digest(learner.rngs)
    record = ResultsRecord(**rec)
    if save and config.output_dir:
        path = record_path(config.output_dir, config)
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt = path.with_suffix(".ckpt.npz")
        learner.save(ckpt)
        record.checkpoint = str(ckpt)
        record.wall_time = time.perf_counter() - start
        path.write_text(record.to_json())
    record.wall_time = time.perf_counter() - start
    return (record, learner) if keep_learner else record


# -- selection and aggregation -----------------------------------------------

@dataclass
class GridResult:
    best: ExperimentConfig
    scores: list[tuple[dict, float]]


def _grid_points(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must be nonempty")
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _apply_point(base: ExperimentConfig, point: dict, alpha_divisor: float = 1.0) -> ExperimentConfig:
    m = {k: v for k, v in point.items() if k in MethodConfig.__dataclass_fields__}
    if "alpha" in m:
        m["alpha"] = m["alpha"] / alpha_divisor
    e = {k: v for k, v in point.items() if k in ExperimentConfig.__dataclass_fields__}
    return replace(base, method=replace(base.method, **m), **e)


def selection_score(record: ResultsRecord, setting: str) -> float:
    """Class/Task-IL: mean of both final accuracies; otherwise the final accuracy."""
    if family(setting) == "seq" and record.final_avg_accuracy_task_il is not None:
        return (record.final_avg_accuracy + record.final_avg_accuracy_task_il) / 2
    return record.final_avg_accuracy


def grid_search(setting: str, kind: str, buffer: int | None, grid: dict | None = None,
                seed: int = 0, data_dir: str | None = None, workers: int = 1,
                tabulated_alpha: bool = True, **extra) -> GridResult:
    """Pick the point with the best validation score; ties go to lower lr,
    then lower alpha, then lower beta.

    With ``tabulated_alpha`` grid alphas are on the per-element scale of the
    defaults table and get divided by the number of classes.
    """
    if grid is None:
        grid = GRIDS.get((family(setting), kind))
        if grid is None:
            raise ConfigError(f"no default grid for {kind} on {setting}")
    base = default_config(setting, kind, buffer, seed, data_dir=data_dir, validation=True, **extra)
    points = _grid_points(grid)
    divisor = n_classes_for(setting) if tabulated_alpha else 1.0
    configs = [_apply_point(base, p, divisor) for p in points]

    def score(cfg):
        return selection_score(run(cfg, save=False), setting)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scores = list(pool.map(score, configs))
    order = sorted(range(len(points)), key=lambda i: (
        -scores[i], configs[i].method.lr, configs[i].method.alpha, configs[i].method.beta))
    best = replace(configs[order[0]], validation=False)
    return GridResult(best, [(points[i], scores[i]) for i in range(len(points))])


@dataclass
class SeedSummary:
    mean: float
    std: float | None
    values: list[float]
    seeds: list[int]
    task_il_mean: float | None = None
    task_il_std: float | None = None
    records: list = field(default_factory=list, repr=False)


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), (float(v.std(ddof=1)) if len(v) > 1 else None)


def multi_seed(config: ExperimentConfig, n: int = 10, workers: int = 1) -> SeedSummary:
    """Run seeds ``config.seed + i`` for ``i < n``; mean and sample stddev."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    seeds = [config.seed + i for i in range(n)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(lambda s: run(replace(config, seed=s)), seeds))
    values = [r.final_avg_accuracy for r in records]
    mean, std = _mean_std(values)
    summary = SeedSummary(mean, std, values, seeds, records=records)
    task = [r.final_avg_accuracy_task_il for r in records]
    if all(v is not None for v in task):
        summary.task_il_mean, summary.task_il_std = _mean_std(task)
    return summary


# -- probes over saved runs ------------------------------------------------------

PROBES = ("ece", "fisher", "flatness", "buffer-retrain", "buffer-finetune")
CHUNK = 10000


def _test_chunks(config: ExperimentConfig, stream, test):
    if family(config.setting) == "m360":
        x, y, _ = streams.mnist360_test_set(test)
        yield x, y
        return
    for task in stream.tasks:
        yield stream.test_set(task)


def _train_chunks(config: ExperimentConfig, stream, max_examples: int | None, seed: int):
    """The union of every task's (transformed) training data, in pieces.

    ``max_examples`` keeps a seeded random subset spread evenly over tasks.
    """
    gen = rngmod.stream(seed, "probe/subset")
    if family(config.setting) == "m360":
        steps = stream.steps()
        pos = np.concatenate([s.positions for s in steps])
        ang = np.concatenate([s.angles for s in steps])
        if max_examples is not None and max_examples < pos.size:
            keep = np.sort(gen.choice(pos.size, max_examples, replace=False))
            pos, ang = pos[keep], ang[keep]
        for s in range(0, pos.size, CHUNK):
            raw = stream.train.inputs(pos[s:s + CHUNK])
            yield rotate_each(raw, ang[s:s + CHUNK]), stream.train.labels[pos[s:s + CHUNK]]
        return
    per_task = None if max_examples is None else max(1, max_examples // len(stream.tasks))
    for task in stream.tasks:
        n = len(task.train)
        rows = np.arange(n)
        if per_task is not None and per_task < n:
            rows = np.sort(gen.choice(n, per_task, replace=False))
        for s in range(0, rows.size, CHUNK):
            idx = rows[s:s + CHUNK]
            yield task.train.transformed(task.transform, idx), task.train.labels[idx]


def _retrain_epochs(config: ExperimentConfig, stream) -> int:
    if family(config.setting) == "m360":
        return len(stream.pairs)
    return config.epochs_per_task * len(stream.tasks)


def probe(record: ResultsRecord, kind: str, max_examples: int | None = None,
          sigmas=metrics.DEFAULT_SIGMAS, n_draws: int = 10, k: int = 10,
          finetune_epochs: int = 5, seed: int | None = None, data_dir: str | None = None,
          out_dir: str | None = None) -> dict:
    """Run one analysis probe on the checkpoint a record points to."""
    if kind not in PROBES:
        raise ConfigError(f"unknown probe {kind!r}; choose from {', '.join(PROBES)}")
    config = record.experiment_config()
    if data_dir:
        config = replace(config, data_dir=data_dir)
    if not record.checkpoint or not Path(record.checkpoint).exists():
        raise FileNotFoundError(f"record has no readable checkpoint: {record.checkpoint}")
    learner = Learner.load(record.checkpoint)
    seed = config.seed if seed is None else seed
    train, test = _datasets(config)
    stream = build_stream(config, train, test)
    n_classes = n_classes_for(config.setting)
    model = learner.model
    out: dict = {"probe": kind, "setting": config.setting, "method": config.method.kind,
                 "buffer": config.method.buffer_capacity, "seed": config.seed}

    if kind == "ece":
        report = metrics.ece_over(model, _test_chunks(config, stream, test))
        out["ece"] = report.ece
        out["bins"] = [asdict(b) for b in report.bins]
        if out_dir:
            metrics.write_reliability(Path(out_dir) / "reliability.dat", report)
    elif kind == "fisher":
        out["fisher_trace"] = metrics.fisher_trace_over(
            model, _train_chunks(config, stream, max_examples, seed))
    elif kind == "flatness":
        curve = metrics.flatness_probe(
            model, lambda: _train_chunks(config, stream, max_examples, seed),
            sigmas=sigmas, n_draws=n_draws, seed=seed)
        out["sigmas"], out["mean_loss"] = curve.sigmas, curve.mean_loss
        if out_dir:
            metrics.write_flatness_curve(Path(out_dir) / "flatness.dat", curve)
    else:
        if learner.buffer is None:
            raise ConfigError(f"{config.method.kind} keeps no buffer to probe")
        buffer_model = metrics.train_on_buffer(
            learner.buffer, n_classes, _retrain_epochs(config, stream),
            config.batch_size, config.method.lr, seed)
        if kind == "buffer-retrain":
            accs = [metrics.accuracy(buffer_model, x, y) for x, y in _test_chunks(config, stream, test)]
            out["accuracy"] = float(100 * np.mean(accs))
        else:
            before, after = [], []
            for x, y in _test_chunks(config, stream, test):
                res = metrics.buffer_finetune_probe(buffer_model, x, y, k=k, epochs=finetune_epochs,
                                                    lr=config.method.lr, seed=seed)
                before.append(res.before)
                after.append(res.after)
            out["accuracy_before"] = float(100 * np.mean(before))
            out["accuracy_after"] = float(100 * np.mean(after))
    return out


# -- reporting -------------------------------------------------------------------

REPORT_METRICS = ("final_avg_accuracy", "final_avg_accuracy_task_il", "bwt", "fwt", "forgetting")


def load_records(pattern: str) -> list[ResultsRecord]:
    paths = sorted(glob.glob(pattern, recursive=True))
    return [ResultsRecord.from_json(Path(p).read_text()) for p in paths if not p.endswith(".ckpt.npz")]


def record_rows(records) -> list[dict]:
    """One row per (method, setting, buffer, seed, metric)."""
    rows = []
    for r in records:
        c = r.config
        for name in REPORT_METRICS:
            value = getattr(r, name)
            if value is not None:
                rows.append({"method": c["method"]["kind"], "setting": c["setting"],
                             "buffer": c["method"]["buffer_capacity"], "seed": c["seed"],
                             "metric": name, "value": value})
    return rows


def markdown_report(records) -> str:
    groups: dict = {}
    for r in records:
        c = r.config
        key = (c["setting"], c["method"]["kind"], c["method"]["buffer_capacity"])
        groups.setdefault(key, []).append(r.final_avg_accuracy)
    lines = ["| setting | method | buffer | runs | accuracy (mean ± std) |",
             "|---|---|---|---|---|"]
    for (setting, kind, buf), vals in sorted(groups.items()):
        mean, std = _mean_std(vals)
        spread = "n/a" if std is None else f"{std:.2f}"
        lines.append(f"| {setting} | {kind} | {buf} | {len(vals)} | {mean:.2f} ± {spread} |")
    return "\n".join(lines) + "\n"
