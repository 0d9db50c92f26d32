"""Experiment configuration: one YAML document, unknown keys rejected."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .synth import SynthConfig
from .train import LearningRates, LossWeights


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WeightsConfig(_Strict):
    lambda_ssim: float = Field(0.2, ge=0, le=1)
    lambda_smooth: float = Field(0.01, ge=0)
    lambda_drift: float = Field(0.01, ge=0)
    drift_decay_end_step: int | None = Field(None, ge=0)
    total_steps: int = Field(2000, ge=1)
    lambda_depth: float = 0.0
    lambda_opacity: float = 0.0
    lambda_reg: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        self.to_weights()
        return self

    def to_weights(self) -> LossWeights:
        return LossWeights(**self.model_dump())


class OptimConfig(_Strict):
    means: float = Field(1.6e-4, ge=0)
    colors: float = Field(2.5e-3, ge=0)
    opacities: float = Field(5e-2, ge=0)
    log_scales: float = Field(5e-3, ge=0)
    rotations: float = Field(5e-3, ge=0)
    pose_translation: tuple[float, float] = (5e-4, 1e-4)
    pose_rotation: tuple[float, float] = (1e-5, 5e-6)
    # constant Adam rates leave a noise floor that grows the loss late in a run
    attribute_decay: float = Field(0.01, gt=0, le=1)
    # multiplies the means rate, the usual scene-extent scaling of the position step
    mean_lr_scale: float = Field(10.0, gt=0)
    train_poses: bool = True
    eval_every: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)

    def learning_rates(self) -> LearningRates:
        return LearningRates(self.means, self.colors, self.opacities, self.log_scales, self.rotations, self.pose_translation, self.pose_rotation, self.attribute_decay)


class InitConfig(_Strict):
    """Perturbation applied to ground-truth Gaussians to form the starting point."""

    mean_sigma: float = Field(0.05, ge=0)
    color_sigma: float = Field(0.08, ge=0)
    log_scale_sigma: float = Field(0.1, ge=0)
    from_labels: bool = True


class SweepConfig(_Strict):
    delta_taus: list[float] = [0.0, 0.05, 0.1, 0.2, 0.3]
    speeds: list[float] = [10.0]
    modes: list[Literal["dust", "single"]] = ["dust", "single"]


class TheoryConfig(_Strict):
    instances: int = Field(100, ge=1)
    ntk_width: int = Field(32, ge=8)
    ntk_height: int = Field(32, ge=8)


class ExperimentConfig(_Strict):
    seed: int = 0
    output_dir: str = "out"
    mode: Literal["dust", "single"] = "dust"
    threads: int = Field(1, ge=1)
    synth: SynthConfig = SynthConfig()
    weights: WeightsConfig = WeightsConfig()
    optim: OptimConfig = OptimConfig()
    init: InitConfig = InitConfig()
    sweep: SweepConfig = SweepConfig()
    theory: TheoryConfig = TheoryConfig()

    def synth_config(self, **overrides) -> SynthConfig:
        upd = {"seed": self.seed}
        upd.update(overrides)
        return SynthConfig.model_validate({**self.synth.model_dump(), **upd})


def _node_line(root, loc) -> int | None:
    """1-based line of the YAML node at a pydantic error location (closest existing ancestor)."""
    node = root
    line = None if node is None else node.start_mark.line + 1
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = (k, v)
                    break
            if nxt is None:
                return line
            node = nxt[1]
            line = nxt[0].start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def parse_config(text: str, name: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{name}:{mark.line + 1}" if mark else name
        raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}:1: top level must be a mapping")
    if "synth" in data and isinstance(data["synth"], dict) and "seed" in data["synth"]:
        line = _node_line(root, ("synth", "seed"))
        raise ConfigError(f"{name}:{line}: synth.seed is not accepted; set the top-level seed")
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        msgs = []
        for err in e.errors():
            loc = tuple(x for x in err["loc"] if not (isinstance(x, str) and x.startswith("function-")))
            line = _node_line(root, loc)
            dotted = ".".join(str(x) for x in loc) or "<root>"
            msgs.append(f"{name}:{line if line else '?'}: {dotted}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from e


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    return parse_config(text, str(path), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    data = cfg.model_dump(mode="json")
    data["synth"].pop("seed", None)
    return yaml.safe_dump(data, sort_keys=False)
