"""Run configuration: strict JSON schema with every default written out explicitly."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .distill import TrainConfig
from .ode import RolloutConfig
from .student import StudentConfig
from .teacher import TeacherSpec

CONFIG_VERSION = 1
METRIC_NAMES = ("sliced_wasserstein", "diversity", "endpoint_alignment")


class ConfigError(ValueError):
    pass


def _strict(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


@dataclass
class EvalConfig:
    n_samples: int = 2000
    metrics: list = field(default_factory=lambda: list(METRIC_NAMES))
    n_projections: int = 256
    projection_seed: int = 0
    reference: dict = field(default_factory=lambda: {"teacher_substeps": 128})

    def __post_init__(self):
        bad = set(self.metrics) - set(METRIC_NAMES)
        if bad:
            raise ConfigError(f"eval: unknown metrics {sorted(bad)}")
        _strict("eval.reference", self.reference, ["teacher_substeps"])
        if int(self.reference.get("teacher_substeps", 128)) < 1 or self.n_samples < 2:
            raise ConfigError("eval: need teacher_substeps >= 1 and n_samples >= 2")
        self.reference = {"teacher_substeps": int(self.reference.get("teacher_substeps", 128))}


@dataclass
class IOConfig:
    out_dir: str = "run"
    dataset_csv: str | None = None


@dataclass
class ToyFitConfig:
    n_targets: int = 4
    C: int = 2
    L: int = 1
    K: int = 8
    iters: int = 20000
    lr: float = 1e-2
    tol: float = 0.0
    seed: int = 0


@dataclass
class RunConfig:
    teacher: TeacherSpec
    student: StudentConfig
    train: TrainConfig
    rollout: RolloutConfig
    eval: EvalConfig
    io: IOConfig
    seed: int = 0
    toyfit: ToyFitConfig | None = None

    def to_dict(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "train": self.train.to_dict(),
            "rollout": asdict(self.rollout),
            "eval": asdict(self.eval),
            "io": asdict(self.io),
        }
        if self.toyfit is not None:
            d["toyfit"] = asdict(self.toyfit)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, section: str, d: dict | None):
    d = dict(d or {})
    _strict(section, d, [f.name for f in fields(cls)])
    try:
        return cls(**d)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from err


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document and fill in every default."""
    _strict("config", doc, ["version", "seed", "teacher", "student", "train", "rollout", "eval", "io", "toyfit"])
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {doc.get('version')!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    if "teacher" not in doc:
        raise ConfigError("config needs a teacher section")
    try:
        teacher = TeacherSpec.from_dict(doc["teacher"])
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"teacher: {err}") from err
    sdoc = dict(doc.get("student", {}))
    sdoc.setdefault("dim", teacher.dim)
    sdoc.setdefault("n_classes", len(teacher.class_ids))
    student = _build(StudentConfig, "student", sdoc)
    if student.dim != teacher.dim:
        raise ConfigError(f"student dim {student.dim} != teacher dim {teacher.dim}")
    if student.n_classes != len(teacher.class_ids) or teacher.class_ids != list(range(len(teacher.class_ids))):
        raise ConfigError("teacher classes must be 0..n-1 and match student.n_classes")
    tdoc = dict(doc.get("train", {}))
    if "seed" in tdoc and tdoc["seed"] != seed:
        raise ConfigError("train.seed differs from the top-level seed")
    tdoc["seed"] = seed
    train = _build(TrainConfig, "train", tdoc)
    rollout = _build(RolloutConfig, "rollout", doc.get("rollout"))
    ev = _build(EvalConfig, "eval", doc.get("eval"))
    io = _build(IOConfig, "io", doc.get("io"))
    toy = _build(ToyFitConfig, "toyfit", doc["toyfit"]) if "toyfit" in doc else None
    return RunConfig(teacher, student, train, rollout, ev, io, seed, toy)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err.msg} at line {err.lineno})") from err
    return parse_config(doc)
