"""Experiment specifications, their config-file format, and the runner.

A single-experiment file holds one ``[experiment]`` section of flat
``key = value`` lines.  A matrix file holds a ``[DEFAULT]`` section with the
shared settings and one section per cell; the section name becomes the cell
name.  Keys prefixed ``hp.``, ``train.`` and ``reg.`` map onto the fields of
:class:`HyperParams`, :class:`TrainConfig` and :class:`RegressionConfig`.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import enum
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..losses import HyperParams
from ..regression import (PredictionReport, RegressionConfig, fit_active_subspace, make_regressor, metrics)
from ..training import TrainConfig, TrainingAborted, build_dataset, train, uniform_sample
from ..transforms import Prnn, RevNet
from .checkpoint import save_checkpoint
from .functions import TestFunction

log = logging.getLogger(__name__)

# method label -> what produces the active coordinates
METHODS = {"drills": "prnn", "nll": "revnet", "as": "active_subspace"}
RESULT_COLUMNS = ("method", "function", "domain", "d", "k_star", "N", "seed", "NRMSE", "RL1", "mean")

_SECTION = "experiment"
_GROUPS = {"hp": HyperParams, "train": TrainConfig, "reg": RegressionConfig}
# fields owned by ExperimentSpec rather than the nested configs
_SKIP = {"hp": {"k_star"}, "train": {"seed"}, "reg": set()}


@dataclass
class ExperimentSpec:
    function: str
    d: int
    domain: str = "A"
    N: int = 500
    M: int | None = None
    k_star: int = 1
    methods: tuple = ("drills",)
    seeds: tuple = (0,)
    hp: HyperParams = field(default_factory=HyperParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    reg: RegressionConfig = field(default_factory=RegressionConfig)
    prnn_layers: tuple | None = None
    revnet_blocks: int = 10
    revnet_step: float = 0.25
    revnet_width: int | None = None
    name: str = ""

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; known: {', '.join(METHODS)}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("replicate seeds must be distinct")
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.hp.k_star != self.k_star:
            self.hp = dataclasses.replace(self.hp, k_star=self.k_star)
        self.test_function()  # validates function, d and domain

    def test_function(self) -> TestFunction:
        return TestFunction(self.function, self.d, self.domain)

    @property
    def n_test(self) -> int:
        return self.M if self.M is not None else (1000 if self.d <= 3 else 10000)

    # -- config text -------------------------------------------------------

    def to_items(self) -> dict[str, str]:
        items = {}
        for f in dataclasses.fields(self):
            if f.name in _GROUPS or f.name == "name":
                continue
            items[f.name] = _format(getattr(self, f.name))
        for prefix in _GROUPS:
            obj = getattr(self, prefix)
            for f in dataclasses.fields(obj):
                if f.name not in _SKIP[prefix]:
                    items[f"{prefix}.{f.name}"] = _format(getattr(obj, f.name))
        return items

    def to_config(self) -> str:
        cp = _parser()
        cp[_SECTION] = self.to_items()
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_items(cls, items, name: str = "") -> "ExperimentSpec":
        top, groups = {}, {p: {} for p in _GROUPS}
        own = {f.name for f in dataclasses.fields(cls)} - set(_GROUPS) - {"name"}
        for key, text in items.items():
            prefix, _, rest = key.partition(".")
            if rest and prefix in groups:
                allowed = {f.name for f in dataclasses.fields(_GROUPS[prefix])} - _SKIP[prefix]
                if rest not in allowed:
                    raise ValueError(f"unknown key {key!r}")
                groups[prefix][rest] = _parse(text)
            elif key in own:
                top[key] = _parse(text)
            else:
                raise ValueError(f"unknown key {key!r}")
        for required in ("function", "d"):
            if required not in top:
                raise ValueError(f"missing required key {required!r}")
        for key in ("methods", "seeds", "prnn_layers"):
            if key in top and top[key] is not None and not isinstance(top[key], tuple):
                top[key] = (top[key],)
        if "seeds" in top and top["seeds"] is None:
            top["seeds"] = ()
        hp_kw = groups["hp"]
        if hp_kw.get("omega") is not None and not isinstance(hp_kw["omega"], tuple):
            hp_kw["omega"] = (hp_kw["omega"],)
        reg_kw = groups["reg"]
        if "nn_hidden" in reg_kw and not isinstance(reg_kw["nn_hidden"], tuple):
            reg_kw["nn_hidden"] = (reg_kw["nn_hidden"],)
        hp = HyperParams(k_star=int(top.get("k_star", 1)), **hp_kw)
        return cls(hp=hp, train=TrainConfig(**groups["train"]), reg=RegressionConfig(**reg_kw),
                   name=name, **top)

    @classmethod
    def from_config(cls, text: str) -> "ExperimentSpec":
        cp = _parser()
        cp.read_string(text)
        if not cp.has_section(_SECTION):
            raise ValueError(f"config has no [{_SECTION}] section")
        return cls.from_items(dict(cp[_SECTION]))


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive (N, M)
    return cp


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        parts = [_format(v) for v in value]
        return ", ".join(parts) + ("," if len(parts) == 1 else "")
    return str(value)


def _scalar(text: str):
    low = text.lower()
    if low == "none":
        return None
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _parse(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_scalar(p.strip()) for p in text.split(",") if p.strip())
    if text == "":
        return ()
    return _scalar(text)


def load_spec(path) -> ExperimentSpec:
    return ExperimentSpec.from_config(Path(path).read_text(encoding="utf-8"))


def load_matrix(path_or_text) -> list[ExperimentSpec]:
    """Cells of a matrix file, in file order.  A single-experiment file is a
    one-cell matrix."""
    text = path_or_text if "\n" in str(path_or_text) else Path(path_or_text).read_text(encoding="utf-8")
    cp = _parser()
    cp.read_string(text)
    if not cp.sections():
        raise ValueError("matrix file defines no cells")
    return [ExperimentSpec.from_items(dict(cp[s]), name=s if s != _SECTION else "") for s in cp.sections()]


def benchmark_suite() -> list[ExperimentSpec]:
    """The shipped matrix of benchmark cells."""
    text = resources.files("drills.bench").joinpath("suites/benchmarks.ini").read_text(encoding="utf-8")
    return load_matrix(text)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


@dataclass
class ReplicateOutcome:
    method: str
    seed: int
    nrmse: float
    rl1: float
    predictions: np.ndarray | None = None
    model: object = None
    history: object = None
    error: str | None = None


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    outcomes: list[ReplicateOutcome]
    reports: dict[str, PredictionReport]

    def rows(self) -> list[list[str]]:
        return result_rows(self.spec, self.outcomes)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


def build_transform(spec: ExperimentSpec, method: str, seed: int):
    rng = np.random.default_rng(seed)
    if METHODS[method] == "prnn":
        return Prnn.create(spec.d, rng, spec.prnn_layers)
    return RevNet.create(spec.d, rng, spec.revnet_blocks, spec.revnet_step, spec.revnet_width)


def test_set(spec: ExperimentSpec, seed: int):
    """Uniform test inputs and exact values for one replicate."""
    fn = spec.test_function()
    X = uniform_sample(spec.n_test, fn.lo, fn.hi, [seed, 0x7E57])
    return X, fn.value(X)


test_set.__test__ = False  # not a pytest function


def fit_method(spec: ExperimentSpec, method: str, data, seed: int):
    """Train (or fit) the dimension-reduction model for one method.

    Returns (model, history); history is None for the active subspace.
    """
    if METHODS[method] == "active_subspace":
        return fit_active_subspace(data, spec.k_star), None
    cfg = dataclasses.replace(spec.train, seed=seed)
    return train(build_transform(spec, method, seed), data, spec.hp, cfg)


def run_replicate(spec: ExperimentSpec, seed: int) -> list[ReplicateOutcome]:
    fn = spec.test_function()
    data = build_dataset(fn, spec.N, seed)
    X, f_true = test_set(spec, seed)
    out = []
    for method in spec.methods:
        try:
            model, history = fit_method(spec, method, data, seed)
        except TrainingAborted as exc:
            log.warning("%s seed %d: %s", method, seed, exc)
            out.append(ReplicateOutcome(method, seed, float("nan"), float("nan"), error=str(exc)))
            continue
        pred = make_regressor(model, data, spec.reg).predict(X)
        nrmse, rl1 = metrics(f_true, pred)
        out.append(ReplicateOutcome(method, seed, nrmse, rl1, pred, model, history))
    return out


def run_experiment(spec: ExperimentSpec, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Run every replicate seed, then write results, checkpoints and loss
    histories under ``out_dir`` (if given).

    Replicates may run in worker processes; outcomes are merged in seed
    order, so output does not depend on ``jobs``.
    """
    if not spec.seeds:
        return ExperimentResult(spec, [], {})
    if jobs > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(run_replicate, [spec] * len(spec.seeds), spec.seeds))
    else:
        per_seed = [run_replicate(spec, s) for s in spec.seeds]
    outcomes = [o for group in per_seed for o in group]
    outcomes.sort(key=lambda o: (spec.methods.index(o.method), spec.seeds.index(o.seed)))

    reports = {}
    for method in spec.methods:
        mine = [o for o in outcomes if o.method == method]
        ok = [o for o in mine if o.error is None]
        preds = np.stack([o.predictions for o in ok]) if ok else np.empty((0, spec.n_test))
        reports[method] = PredictionReport(
            preds,
            float(np.mean([o.nrmse for o in ok])) if ok else float("nan"),
            float(np.mean([o.rl1 for o in ok])) if ok else float("nan"),
            [(o.seed, o.nrmse, o.rl1) for o in mine],
        )
    result = ExperimentResult(spec, outcomes, reports)
    if out_dir is not None:
        write_artifacts(result, out_dir)
    return result


def result_rows(spec: ExperimentSpec, outcomes) -> list[list[str]]:
    head = [spec.function, spec.domain, str(spec.d), str(spec.k_star), str(spec.N)]
    rows = []
    for method in spec.methods:
        mine = [o for o in outcomes if o.method == method]
        for o in mine:
            rows.append([method, *head, str(o.seed), repr(o.nrmse), repr(o.rl1), "false"])
        ok = [o for o in mine if o.error is None]
        if mine:
            mean_n = float(np.mean([o.nrmse for o in ok])) if ok else float("nan")
            mean_r = float(np.mean([o.rl1 for o in ok])) if ok else float("nan")
            rows.append([method, *head, "", repr(mean_n), repr(mean_r), "true"])
    return rows


def rows_to_csv(rows, header=RESULT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_artifacts(result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.to_csv(), encoding="ascii", newline="")
    (out / "experiment.ini").write_text(result.spec.to_config(), encoding="ascii", newline="")
    aborted = [o for o in result.outcomes if o.error is not None]
    if aborted:
        lines = rows_to_csv([[o.method, str(o.seed), o.error] for o in aborted], ("method", "seed", "error"))
        (out / "aborted.csv").write_text(lines, encoding="utf-8", newline="")
    for o in result.outcomes:
        if o.history is None:
            continue
        stem = f"{o.method}_seed{o.seed}"
        (out / "checkpoints").mkdir(exist_ok=True)
        (out / "history").mkdir(exist_ok=True)
        save_checkpoint(o.model, out / "checkpoints" / f"{stem}.ckpt")
        o.history.write_csv(out / "history" / f"{stem}.csv")
