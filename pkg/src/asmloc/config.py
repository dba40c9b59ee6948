"""Configuration dataclasses with validation and JSON round-tripping.

Hyper-parameter names follow the usual notation (lambda_fg, beta, gamma,
H, delta, alpha) so config files read like the method description.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError


def _check(cond, path, msg):
    if not cond:
        raise ConfigurationError(f"{path}: {msg}")


def _from_dict(cls, data, path):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigurationError(f"{path}.{key}: unknown field")
        sub = _NESTED.get((cls.__name__, key))
        if sub is not None and value is not None:
            value = _from_dict(sub, value, f"{path}.{key}")
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def to_dict(cfg):
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        return v
    return conv(cfg)


@dataclass
class ModelConfig:
    num_classes: int = 20
    feature_dim: int = 2048
    embed_dim: Optional[int] = None
    kernel_width: int = 3
    topk_divisor: float = 8.0
    H: int = 8
    attention_depth: int = 1
    lambda_fg: float = 1.0
    lambda_bg: float = 0.5
    lambda_abg: float = 0.5
    lambda_ins: float = 1.0
    beta: float = 0.2
    gamma: float = 6.0
    gamma_unit: str = "snippets"
    snippet_duration: float = 0.64
    delta: float = 0.5
    alpha: float = 0.7
    use_dss: bool = True
    dss_for_proposals: bool = False
    use_intra: bool = True
    use_inter: bool = True
    use_ins: bool = True
    init_scale: float = 1.0

    @property
    def C(self):
        return self.num_classes

    @property
    def E(self):
        return self.embed_dim or self.feature_dim

    @property
    def gamma_snippets(self):
        if self.gamma_unit == "seconds":
            return self.gamma / self.snippet_duration
        return self.gamma

    def validate(self, path="model"):
        _check(self.num_classes >= 1, f"{path}.num_classes", "must be >= 1")
        _check(self.feature_dim >= 1, f"{path}.feature_dim", "must be >= 1")
        _check(self.E >= 1, f"{path}.embed_dim", "must be >= 1")
        _check(self.kernel_width >= 1 and self.kernel_width % 2 == 1,
               f"{path}.kernel_width", "must be a positive odd integer")
        _check(self.topk_divisor >= 1, f"{path}.topk_divisor", "must be >= 1")
        _check(self.H >= 1 and self.E % self.H == 0, f"{path}.H", "must divide embed_dim")
        _check(self.attention_depth >= 0, f"{path}.attention_depth", "must be >= 0")
        for name in ("lambda_fg", "lambda_bg", "lambda_abg", "lambda_ins", "beta"):
            _check(getattr(self, name) >= 0, f"{path}.{name}", "must be >= 0")
        _check(self.gamma_unit in ("snippets", "seconds"), f"{path}.gamma_unit",
               "must be 'snippets' or 'seconds'")
        _check(self.gamma_snippets >= 1, f"{path}.gamma", "must be >= 1 snippet")
        _check(self.snippet_duration > 0, f"{path}.snippet_duration", "must be > 0")
        _check(0 < self.alpha <= 1, f"{path}.alpha", "must lie in (0, 1]")
        _check(self.delta >= 0, f"{path}.delta", "must be >= 0")
        return self

    def topk(self, T):
        return max(1, math.ceil(T / self.topk_divisor))

    @classmethod
    def thumos(cls, **kw):
        return cls(**{**dict(lambda_fg=1.0, lambda_bg=0.5, lambda_abg=0.5, beta=0.2,
                             gamma=6.0, H=8, delta=0.5, alpha=0.7), **kw})

    @classmethod
    def activitynet(cls, **kw):
        return cls(**{**dict(lambda_fg=5.0, lambda_bg=0.5, lambda_abg=0.5, beta=0.2,
                             gamma=10.0, H=8, delta=0.0, alpha=0.3), **kw})


BUCKETS = (("XS", 0.0, 1.0), ("S", 1.0, 2.0), ("M", 2.0, 4.0), ("L", 4.0, 6.0), ("XL", 6.0, math.inf))


def _grid(start, stop, step):
    n = int(round((stop - start) / step)) + 1
    return tuple(round(start + i * step, 10) for i in range(n))


@dataclass
class EvalConfig:
    iou_thresholds: tuple = _grid(0.1, 0.7, 0.1)
    sweep_start: float = 0.1
    sweep_stop: float = 0.9
    sweep_step: float = 0.025
    nms_iou: float = 0.45
    class_threshold: float = 0.1
    buckets: tuple = BUCKETS

    def __post_init__(self):
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        self.buckets = tuple((str(n), float(lo), float(hi)) for n, lo, hi in self.buckets)

    @property
    def attention_thresholds(self):
        return _grid(self.sweep_start, self.sweep_stop, self.sweep_step)

    def validate(self, path="eval"):
        t = np.asarray(self.iou_thresholds)
        _check(len(t) > 0 and np.all(t > 0) and np.all(t <= 1) and np.all(np.diff(t) > 0),
               f"{path}.iou_thresholds", "must be strictly increasing in (0, 1]")
        _check(0 < self.sweep_start <= self.sweep_stop < 1 and self.sweep_step > 0,
               f"{path}.sweep_start", "threshold sweep must lie in (0, 1) with positive step")
        _check(0 < self.nms_iou < 1, f"{path}.nms_iou", "must lie in (0, 1)")
        _check(0 <= self.class_threshold < 1, f"{path}.class_threshold", "must lie in [0, 1)")
        edges = [b[1] for b in self.buckets] + [self.buckets[-1][2]]
        _check(edges[0] == 0 and math.isinf(edges[-1])
               and all(b[2] == nb[1] for b, nb in zip(self.buckets, self.buckets[1:]))
               and all(b[1] < b[2] for b in self.buckets),
               f"{path}.buckets", "must partition (0, inf)")
        return self

    @classmethod
    def thumos(cls, **kw):
        return cls(**{**dict(iou_thresholds=_grid(0.1, 0.7, 0.1), sweep_start=0.1,
                             sweep_stop=0.9, sweep_step=0.025, nms_iou=0.45), **kw})

    @classmethod
    def activitynet(cls, **kw):
        return cls(**{**dict(iou_thresholds=_grid(0.5, 0.95, 0.05), sweep_start=0.005,
                             sweep_stop=0.02, sweep_step=0.005, nms_iou=0.9), **kw})


@dataclass
class RefinementSchedule:
    epochs: int = 100
    steps: int = 3
    patience: int = 5
    max_final_epochs: int = 50
    min_delta: float = 1e-4

    def validate(self, path="schedule"):
        _check(self.epochs >= 1, f"{path}.epochs", "must be >= 1")
        _check(self.steps >= 0, f"{path}.steps", "must be >= 0")
        _check(self.patience >= 1, f"{path}.patience", "must be >= 1")
        _check(self.max_final_epochs >= 0, f"{path}.max_final_epochs", "must be >= 0")
        return self


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16

    def validate(self, path="optim"):
        _check(self.lr > 0, f"{path}.lr", "must be > 0")
        _check(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, f"{path}.beta1", "betas must lie in [0, 1)")
        _check(self.batch_size >= 1, f"{path}.batch_size", "must be >= 1")
        return self


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    synthetic: Optional["SyntheticConfig"] = None
    test_videos: int = 50
    fixed_T: Optional[int] = None

    def validate(self, path="data"):
        _check((self.manifest is None) != (self.synthetic is None), path,
               "exactly one of 'manifest' or 'synthetic' must be given")
        if self.synthetic is not None:
            self.synthetic.validate(f"{path}.synthetic")
            _check(self.test_videos >= 0, f"{path}.test_videos", "must be >= 0")
        if self.fixed_T is not None:
            _check(self.fixed_T >= 1, f"{path}.fixed_T", "must be >= 1")
        return self


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: RefinementSchedule = field(default_factory=RefinementSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self):
        self.data.validate("data")
        self.model.validate("model")
        self.schedule.validate("schedule")
        self.eval.validate("eval")
        self.optim.validate("optim")
        if self.data.synthetic is not None:
            _check(self.data.synthetic.num_classes == self.model.num_classes, "model.num_classes",
                   "must equal data.synthetic.num_classes")
            _check(self.data.synthetic.feature_dim == self.model.feature_dim, "model.feature_dim",
                   "must equal data.synthetic.feature_dim")
        return self

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "config")

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return to_dict(self)


def model_config_from_dict(data):
    return _from_dict(ModelConfig, data, "model")


def eval_config_from_dict(data):
    if data and "buckets" in data:
        data = dict(data)
        data["buckets"] = [(n, float(lo), float(hi)) for n, lo, hi in data["buckets"]]
    return _from_dict(EvalConfig, data, "eval")


def apply_override(tree: dict, dotted: str, value):
    """Set ``tree[a][b][c] = value`` for ``dotted == 'a.b.c'``."""
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"{dotted}: '{k}' is not an object")
    node[keys[-1]] = value
    return tree


from .dataset import SyntheticConfig  # noqa: E402  (resolve the forward reference)

_NESTED = {
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "model"): ModelConfig,
    ("RunConfig", "schedule"): RefinementSchedule,
    ("RunConfig", "eval"): EvalConfig,
    ("RunConfig", "optim"): OptimConfig,
    ("DataConfig", "synthetic"): SyntheticConfig,
}
