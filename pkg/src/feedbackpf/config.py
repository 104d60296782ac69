"""Experiment configuration: a strict YAML schema validated with pydantic."""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .models import (
    BearingOnlyScenario,
    DynamicsModel,
    GaussianInitial,
    MixtureDensity1D,
    build_linear_model,
)

SCHEMA_VERSION = 1

# names available inside custom_1d expressions; ``x`` is an (n, 1) array
_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "arctan", "sinh", "cosh",
                 "pi", "where", "minimum", "maximum", "sign")
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GaussianSpec(_Strict):
    kind: Literal["gaussian"] = "gaussian"
    mean: float = 0.0
    var: float = Field(1.0, gt=0)


class MixtureSpec(_Strict):
    kind: Literal["mixture"] = "mixture"
    weights: list[float] = [0.3, 0.4, 0.3]
    means: list[float] = [-1.0, 0.0, 1.0]
    variances: list[float] = [0.2, 0.2, 0.2]


Density1DSpec = Annotated[Union[GaussianSpec, MixtureSpec], Field(discriminator="kind")]


def _compile_expression(text, what):
    try:
        code = compile(text, f"<{what}>", "eval")
    except SyntaxError as exc:
        raise ValueError(f"invalid expression {text!r}: {exc.msg}") from None
    bad = [n for n in code.co_names if n not in _EXPR_NAMESPACE and n not in ("x", "np")]
    if bad:
        raise ValueError(f"expression {text!r} uses unknown names {bad}")
    return code


def expression_function(text, what="expression"):
    """Vectorised callable for an expression in ``x`` (numpy functions allowed)."""
    code = _compile_expression(text, what)
    namespace = dict(_EXPR_NAMESPACE, np=np, __builtins__={})

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(eval(code, namespace, {"x": x}), dtype=float), x.shape).copy()

    f.__name__ = what
    f.expression = text
    return f


class LinearModelSpec(_Strict):
    kind: Literal["linear"]
    A: list[list[float]]
    H: list[list[float]]
    initial_mean: list[float]
    initial_cov: list[list[float]]
    process_noise_scale: Optional[list[list[float]]] = None
    obs_noise_scale: Optional[list[list[float]]] = None

    def build(self) -> DynamicsModel:
        return build_linear_model(self.A, self.H, self.initial_mean, self.initial_cov,
                                  self.process_noise_scale, self.obs_noise_scale)


class BearingModelSpec(_Strict):
    kind: Literal["bearing_only"]
    sigma_b: float = Field(0.1, gt=0)
    sigma_w: float = Field(0.017, gt=0)
    sensors: list[tuple[float, float]] = [(-1.0, -2.0), (1.0, -2.0)]
    initial_state: tuple[float, float, float, float] = (2.0, 0.2, 10.0, -5.0)
    prior_mean: Optional[tuple[float, float, float, float]] = None
    prior_cov: Optional[list[list[float]]] = None

    @field_validator("sensors")
    @classmethod
    def _two_sensors(cls, v):
        if len(v) != 2:
            raise ValueError("exactly two sensors are required")
        return v

    def scenario(self) -> BearingOnlyScenario:
        return BearingOnlyScenario(sigma_b=self.sigma_b, sigma_w=self.sigma_w, sensors=tuple(self.sensors),
                                   initial_state=self.initial_state, prior_mean=self.prior_mean,
                                   prior_cov=None if self.prior_cov is None else tuple(map(tuple, self.prior_cov)))

    def build(self) -> DynamicsModel:
        return self.scenario().to_model()


class Custom1DModelSpec(_Strict):
    kind: Literal["custom_1d"]
    drift: str
    observation: str
    process_noise: float = Field(1.0, gt=0)
    obs_noise: float = Field(1.0, gt=0)
    initial: Density1DSpec = GaussianSpec()

    @field_validator("drift", "observation")
    @classmethod
    def _compiles(cls, v, info):
        _compile_expression(v, info.field_name)
        return v

    def build(self) -> DynamicsModel:
        return DynamicsModel(
            dim_state=1, dim_obs=1,
            drift=expression_function(self.drift, "drift"),
            observation=expression_function(self.observation, "observation"),
            process_noise_scale=[[self.process_noise]],
            obs_noise_scale=[[self.obs_noise]],
            initial_density=build_density_1d(self.initial),
            name="custom_1d",
        )


ModelSpec = Annotated[Union[LinearModelSpec, BearingModelSpec, Custom1DModelSpec], Field(discriminator="kind")]


def build_density_1d(spec):
    if spec.kind == "gaussian":
        return GaussianInitial([spec.mean], [[spec.var]])
    return MixtureDensity1D(spec.weights, spec.means, spec.variances)


class TimeSpec(_Strict):
    t0: float = 0.0
    dt: float = Field(gt=0)
    steps: int = Field(gt=0)


class FpfOptionsSpec(_Strict):
    n_cells: int = Field(5, ge=1)
    width: Optional[float] = Field(None, gt=0)
    grid_points: int = Field(401, ge=5)
    gain_clip: Optional[float] = Field(None, gt=0)


class GridOptionsSpec(_Strict):
    lo: Optional[float] = None
    hi: Optional[float] = None
    dx: float = Field(0.01, gt=0)
    substeps: int = Field(1, ge=1)


def _check_options(spec, options):
    try:
        spec(**options)
    except ValidationError as exc:
        err = exc.errors()[0]
        where = ".".join(str(p) for p in err["loc"])
        raise ValueError(f"options.{where}: {err['msg']}") from None


class FilterSpec(_Strict):
    kind: Literal["fpf", "kalman_bucy", "ks_grid"]
    name: Optional[str] = None
    gain: Optional[Literal["kalman", "constant", "galerkin", "dns_kde"]] = None
    N: Optional[int] = Field(None, ge=1)
    options: dict = {}

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "fpf":
            if self.gain is None:
                raise ValueError("fpf filters need a gain strategy")
            if self.N is None:
                raise ValueError("fpf filters need a particle count N")
            _check_options(FpfOptionsSpec, self.options)
        elif self.kind == "ks_grid":
            _check_options(GridOptionsSpec, self.options)
        elif self.options:
            raise ValueError("kalman_bucy takes no options")
        return self

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"fpf_{self.gain}" if self.kind == "fpf" else self.kind


class GainBenchSpec(_Strict):
    density: Density1DSpec = MixtureSpec()
    observation: str = "x**2"
    domain: tuple[float, float] = (-2.0, 2.0)
    grid_dx: float = Field(1e-3, gt=0)
    grid_radius: float = Field(8.0, gt=0)
    cells: list[int] = [1, 5, 15]
    particles: int = Field(1000, ge=2)
    lam: Optional[float] = Field(None, gt=0)

    @field_validator("observation")
    @classmethod
    def _compiles(cls, v):
        _compile_expression(v, "observation")
        return v


class ExperimentConfig(_Strict):
    schema_: Literal[1] = Field(alias="schema")
    seed: int = Field(ge=0, lt=2 ** 64)
    output_dir: str = "out"
    model: Optional[ModelSpec] = None
    time: Optional[TimeSpec] = None
    filters: list[FilterSpec] = []
    reference: Optional[str] = None
    snapshot_times: list[float] = []
    metrics: list[Literal["rmse", "moments", "l1", "gain", "poincare"]] = ["rmse", "moments", "l1", "gain", "poincare"]
    gain_bench: Optional[GainBenchSpec] = None

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _sections(self):
        if self.filters and (self.model is None or self.time is None):
            raise ValueError("filter experiments need model and time sections")
        if not self.filters and self.gain_bench is None:
            raise ValueError("at least one filter (or a gain_bench section) is required")
        kind = self.model.kind if self.model is not None else None
        scalar = kind == "custom_1d" or (kind == "linear" and len(self.model.A) == 1)
        for i, f in enumerate(self.filters):
            if f.kind == "kalman_bucy" and kind == "custom_1d":
                raise ValueError(f"filters[{i}]: kalman_bucy needs a linear or bearing_only model")
            if f.kind == "ks_grid" and not scalar:
                raise ValueError(f"filters[{i}]: ks_grid needs a scalar model")
            if f.gain == "kalman" and kind != "linear":
                raise ValueError(f"filters[{i}]: the kalman gain strategy needs a linear model")
            if f.gain in ("galerkin", "dns_kde") and not scalar:
                raise ValueError(f"filters[{i}]: the {f.gain} gain strategy needs a scalar model")
        labels = [f.label for f in self.filters]
        if len(set(labels)) != len(labels):
            raise ValueError(f"filter names must be unique, got {labels}")
        return self


# ---------------------------------------------------------------------------
# loading


def _line_of(node, loc):
    """Best-effort 1-based line number of a pydantic error location in the YAML tree."""
    line = None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = [(k, v) for k, v in node.value if k.value == key]
            if match:
                line = match[0][0].start_mark.line + 1
                node = match[0][1]
            # no match: a discriminator tag or a missing field; stay on this node
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
    return line


def _field_path(loc, data):
    parts = []
    for key in loc:
        if isinstance(key, int):
            parts.append(f"[{key}]")
        elif key in ("linear", "bearing_only", "custom_1d", "gaussian", "mixture", "function-after"):
            continue
        else:
            parts.append(("." if parts else "") + str(key))
    return "".join(parts) or "<root>"


def parse_config(text: str, source="<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        tree = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"{source}: YAML parse error: {getattr(exc, 'problem', exc)}", line=line) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping", line=1)
    if "schema" not in data:
        raise ConfigError("missing schema version (expected 'schema: 1')", field="schema")
    if data["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {data['schema']!r}; this toolkit reads schema "
                          f"{SCHEMA_VERSION}", field="schema", line=_line_of(tree, ("schema",)))
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(err["loc"])
        raise ConfigError(err["msg"], field=_field_path(loc, data), line=_line_of(tree, loc)) from None
    check_cfl(cfg, tree)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def check_cfl(cfg: ExperimentConfig, tree=None):
    """Reject a time step the grid reference cannot integrate stably."""
    from .reference import ks_cfl_limit

    for i, f in enumerate(cfg.filters):
        if f.kind != "ks_grid":
            continue
        model = cfg.model.build()
        if model.dim_state != 1:
            raise ConfigError("ks_grid needs a scalar model", field=f"filters[{i}].kind")
        opts = GridOptionsSpec(**f.options)
        density0 = initial_grid(model, opts)
        limit = ks_cfl_limit(model, density0) * opts.substeps
        if cfg.time.dt > limit * (1 + 1e-12):
            line = _line_of(tree, ("time", "dt")) if tree is not None else None
            raise ConfigError(f"dt={cfg.time.dt:g} violates the ks_grid stability limit {limit:.3g} "
                              f"(dx={opts.dx:g}, substeps={opts.substeps}); use a smaller dt or more substeps",
                              field="time.dt", line=line)


def initial_grid(model, opts: GridOptionsSpec):
    from .reference import initial_grid_density

    return initial_grid_density(model, lo=opts.lo, hi=opts.hi, dx=opts.dx)


__all__ = [
    "ExperimentConfig",
    "FilterSpec",
    "GainBenchSpec",
    "load_config",
    "parse_config",
    "expression_function",
    "build_density_1d",
    "SCHEMA_VERSION",
]
