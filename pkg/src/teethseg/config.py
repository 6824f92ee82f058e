"""Run configuration file: model architecture plus trainer settings, as flat JSON."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .losses import LOSS_VARIANTS
from .model import ModelConfig
from .preprocess import DEFAULT_RADII


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class RunConfig:
    depth: int = 4
    base_width: int = 8
    num_classes: int = 33
    use_deep_supervision: bool = True
    use_swin: bool = True
    use_tab: bool = True
    swin_window: int = 2
    dropout_p: float = 0.1
    height: int = 64
    width: int = 128
    epochs: int = 50
    batch: int = 2
    seed: int = 0
    lr: float = 1e-4
    eps: float = 1e-6
    loss: str = "squared-dice"
    radii: list[int] = field(default_factory=lambda: list(DEFAULT_RADII))
    data_dir: str | None = None
    out_dir: str | None = None

    @property
    def model(self) -> ModelConfig:
        return ModelConfig.from_dict(asdict(self))

    def with_model(self, model: ModelConfig) -> RunConfig:
        d = asdict(self)
        d.update(model.to_dict())
        return RunConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def problems(self) -> list[str]:
        errs = self.model.problems()
        if self.epochs < 0:
            errs.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1:
            errs.append(f"batch must be >= 1, got {self.batch}")
        if not self.lr > 0:
            errs.append(f"lr must be positive, got {self.lr}")
        if not self.eps > 0:
            errs.append(f"eps must be positive, got {self.eps}")
        if self.loss not in LOSS_VARIANTS:
            errs.append(f"loss must be one of {list(LOSS_VARIANTS)}, got {self.loss!r}")
        if self.radii and (any(r < 1 for r in self.radii) or any(b <= a for a, b in zip(self.radii, self.radii[1:]))):
            errs.append(f"radii must be positive and strictly increasing, got {self.radii}")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError(errs)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        """Build from a JSON object; every problem (unknown key, wrong type, bad value) is reported together."""
        if not isinstance(doc, dict):
            raise ConfigError([f"config must be a JSON object, got {type(doc).__name__}"])
        spec = {f.name: f for f in fields(cls)}
        errs = [f"unknown key {k!r}" for k in doc if k not in spec]
        kwargs = {}
        for name, value in doc.items():
            if name not in spec:
                continue
            problem = _type_problem(name, value, cls.__dataclass_fields__[name].type)
            if problem:
                errs.append(problem)
            else:
                kwargs[name] = float(value) if spec[name].type == "float" else value
        if errs:
            raise ConfigError(errs)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunConfig:
        with open(path) as f:
            return cls.from_json(f.read())


def _type_problem(name: str, value, annotation: str) -> str | None:
    is_int = isinstance(value, int) and not isinstance(value, bool)
    ok = {
        "int": is_int,
        "float": is_int or isinstance(value, float),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "list[int]": isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value),
        "str | None": value is None or isinstance(value, str),
    }.get(annotation)
    if ok is None:
        raise TypeError(f"no type rule for {annotation}")
    if not ok:
        return f"{name}: expected {annotation}, got {json.dumps(value)}"
    return None
