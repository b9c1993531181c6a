"""Run configuration: one JSON document, validated before any work starts.

Sections: task, teacher, meta_train, db, sr, select, tune, evaluate, seeds,
output_dir. Unknown keys anywhere are rejected. ``seeds.base`` fills every
per-stage ``seed`` that the document leaves unset.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .l2o_teacher import MetaTrainConfig, TeacherConfig
from .optimizers import ClassicalConfig, FeatureParams
from .symreg import SRConfig, config_to_dict
from .tasks import PRESETS, TaskSpec
from .tuner import TuneConfig

SECTIONS = ("task", "teacher", "meta_train", "db", "sr", "select", "tune", "evaluate", "seeds", "output_dir")


class ConfigError(ValueError):
    pass


def _keys(cls, extra=()) -> set:
    return {f.name for f in fields(cls)} | set(extra)


def _check(data, allowed, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _build(cls, data, where, extra=()):
    _check(data, _keys(cls, extra), where)
    try:
        return cls(**{k: v for k, v in data.items() if k not in extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def task_from(data, where="task") -> TaskSpec:
    """A preset name (p1, p2, p3), or an object with an optional ``preset`` plus overrides."""
    if isinstance(data, str):
        if data not in PRESETS:
            raise ConfigError(f"{where}: unknown preset {data!r}; choose from {sorted(PRESETS)}")
        return PRESETS[data]
    _check(data, _keys(TaskSpec, ("preset",)), where)
    base = asdict(task_from(data["preset"], where)) if "preset" in data else {}
    base.update({k: v for k, v in data.items() if k != "preset"})
    return _build(TaskSpec, base, where)


def task_to_dict(spec: TaskSpec) -> dict:
    d = asdict(spec)
    d["layers"] = list(d["layers"])
    return d


@dataclass
class TeacherSection:
    """``kind`` l2o meta-trains a recurrent teacher; classical uses ``optimizer`` directly."""

    kind: str = "l2o"
    model: TeacherConfig = field(default_factory=TeacherConfig)
    optimizer: ClassicalConfig | None = None
    init_seed: int = 0

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "init_seed": self.init_seed}
        if self.kind == "l2o":
            out["model"] = asdict(self.model)
        else:
            out["optimizer"] = asdict(self.optimizer)
        return out


def _teacher(data, base_seed) -> TeacherSection:
    _check(data, {"kind", "model", "optimizer", "init_seed"}, "teacher")
    kind = data.get("kind", "l2o")
    if kind not in ("l2o", "classical"):
        raise ConfigError(f"teacher.kind must be l2o or classical, got {kind!r}")
    seed = data.get("init_seed", base_seed)
    if kind == "classical":
        if "optimizer" not in data:
            raise ConfigError("teacher.optimizer is required when teacher.kind is classical")
        return TeacherSection(kind, optimizer=_build(ClassicalConfig, data["optimizer"], "teacher.optimizer"),
                              init_seed=seed)
    model = dict(data.get("model", {}))
    _check(model, _keys(TeacherConfig), "teacher.model")
    if "feature_params" in model:
        model["feature_params"] = _build(FeatureParams, model["feature_params"], "teacher.model.feature_params")
    return TeacherSection(kind, _build(TeacherConfig, model, "teacher.model"), None, seed)


@dataclass
class DBSection:
    n: int = 5000
    steps_per_task: int = 100
    coords_per_step: int = 8
    horizon: int = 20
    max_tasks: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.coords_per_step < 1 or self.max_tasks < 1:
            raise ValueError("n, coords_per_step and max_tasks must be positive")
        if self.steps_per_task < self.horizon:
            raise ValueError("steps_per_task must be at least the horizon")


@dataclass
class SelectSection:
    delta: float = 0.05

    def __post_init__(self):
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")


@dataclass
class TuneSection:
    """Tuning target and skeleton source: the distilled equation, or a tanh-form fit to the DB."""

    config: TuneConfig = field(default_factory=TuneConfig)
    task: TaskSpec | None = None
    skeleton: str = "distilled"
    eq6_lags: int = 5
    eq6_gamma: float = 1.0


def _tune(data, base_seed) -> TuneSection:
    own = {"task", "skeleton", "eq6_lags", "eq6_gamma"}
    _check(data, _keys(TuneConfig) | own, "tune")
    cfg = {k: v for k, v in data.items() if k not in own}
    cfg.setdefault("seed", base_seed)
    section = TuneSection(_build(TuneConfig, cfg, "tune"),
                          task_from(data["task"], "tune.task") if "task" in data else None,
                          data.get("skeleton", "distilled"), data.get("eq6_lags", 5), data.get("eq6_gamma", 1.0))
    if section.skeleton not in ("distilled", "eq6"):
        raise ConfigError(f"tune.skeleton must be distilled or eq6, got {section.skeleton!r}")
    if section.eq6_lags < 0 or section.eq6_gamma == 0:
        raise ConfigError("tune.eq6_lags must be >= 0 and tune.eq6_gamma non-zero")
    return section


DEFAULT_BASELINES = tuple(ClassicalConfig("sgd", lr=lr) for lr in (0.1, 0.01, 0.001))


@dataclass
class EvalSection:
    steps: int = 100
    seeds: list = field(default_factory=lambda: list(range(20)))
    task: TaskSpec | None = None
    baselines: tuple = DEFAULT_BASELINES


def _evaluate(data) -> EvalSection:
    _check(data, {"steps", "seeds", "task", "baselines"}, "evaluate")
    seeds = data.get("seeds", 20)
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("evaluate.seeds must be a positive count or a non-empty list of integers")
    steps = data.get("steps", 100)
    if not isinstance(steps, int) or steps < 1:
        raise ConfigError("evaluate.steps must be a positive integer")
    baselines = tuple(_build(ClassicalConfig, b, f"evaluate.baselines[{i}]")
                      for i, b in enumerate(data.get("baselines", [asdict(b) for b in DEFAULT_BASELINES])))
    task = task_from(data["task"], "evaluate.task") if "task" in data else None
    return EvalSection(steps, seeds, task, baselines)


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=lambda: PRESETS["p1"])
    teacher: TeacherSection = field(default_factory=TeacherSection)
    meta_train: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    db: DBSection = field(default_factory=DBSection)
    sr: SRConfig = field(default_factory=SRConfig)
    select: SelectSection = field(default_factory=SelectSection)
    tune: TuneSection = field(default_factory=TuneSection)
    evaluate: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: str = "runs/default"

    @property
    def tune_task(self) -> TaskSpec:
        return self.tune.task or self.task

    @property
    def eval_task(self) -> TaskSpec:
        return self.evaluate.task or self.task

    def to_dict(self) -> dict:
        """Fully resolved document; loading it back gives an equal config."""
        tune = asdict(self.tune.config)
        tune.update(skeleton=self.tune.skeleton, eq6_lags=self.tune.eq6_lags, eq6_gamma=self.tune.eq6_gamma)
        if self.tune.task is not None:
            tune["task"] = task_to_dict(self.tune.task)
        ev = {"steps": self.evaluate.steps, "seeds": list(self.evaluate.seeds),
              "baselines": [asdict(b) for b in self.evaluate.baselines]}
        if self.evaluate.task is not None:
            ev["task"] = task_to_dict(self.evaluate.task)
        return {"task": task_to_dict(self.task), "teacher": self.teacher.to_dict(),
                "meta_train": asdict(self.meta_train), "db": asdict(self.db), "sr": config_to_dict(self.sr),
                "select": asdict(self.select), "tune": tune, "evaluate": ev,
                "seeds": {"base": self.seed}, "output_dir": self.output_dir}


def _with_seed(data: dict, seed: int) -> dict:
    out = dict(data)
    out.setdefault("seed", seed)
    return out


def from_dict(data: dict, seed: int | None = None, output_dir: str | None = None,
              workers: int | None = None) -> RunConfig:
    """Validate a config document; command-line overrides replace ``seeds.base``, ``output_dir``, ``sr.workers``."""
    _check(data, SECTIONS, "config")
    seeds = data.get("seeds", {})
    _check(seeds, {"base"}, "seeds")
    base = seeds.get("base", 0) if seed is None else seed
    if not isinstance(base, int) or base < 0:
        raise ConfigError("seeds.base must be a non-negative integer")
    if seed is not None:
        # an explicit --seed wins over per-stage seeds as well
        data = {k: ({**v, "seed": seed} if k in ("meta_train", "db", "sr", "tune") and isinstance(v, dict) else v)
                for k, v in data.items()}
    sr = _with_seed(data.get("sr", {}), base)
    if workers is not None:
        sr["workers"] = workers
    _check(sr, _keys(SRConfig), "sr")
    if "operator_subset" in sr and sr["operator_subset"] is not None:
        sr["operator_subset"] = tuple(sr["operator_subset"])
    out = data.get("output_dir", "runs/default") if output_dir is None else output_dir
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir must be a non-empty string")
    return RunConfig(
        task=task_from(data.get("task", "p1")),
        teacher=_teacher(data.get("teacher", {}), base),
        meta_train=_build(MetaTrainConfig, _with_seed(data.get("meta_train", {}), base), "meta_train"),
        db=_build(DBSection, _with_seed(data.get("db", {}), base), "db"),
        sr=_build(SRConfig, sr, "sr"),
        select=_build(SelectSection, data.get("select", {}), "select"),
        tune=_tune(data.get("tune", {}), base),
        evaluate=_evaluate(data.get("evaluate", {})),
        seed=base,
        output_dir=out,
    )


def load(path, **overrides) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data, **overrides)
