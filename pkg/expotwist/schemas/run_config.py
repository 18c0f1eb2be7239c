"""Experiment configuration: a TOML document with one level of sections.

Unknown keys are rejected everywhere. Validation errors come back as
ConfigError carrying the dotted key and the line it sits on.
"""

import inspect
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from expotwist.config import settings
from expotwist.core.errors import ConfigError
from expotwist.core.families import MODEL_BUILDERS, build_cost, build_model
from expotwist.schemas.model import CostSpec, ModelSpec, TimeGrid

Vector = Union[float, List[float]]
Pipeline = Literal["value", "twist", "reweight", "control", "checks", "meanfield"]
PIPELINES = ("value", "twist", "reweight", "control", "checks", "meanfield")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    family: Literal["bm", "linear", "ou", "poisson", "compound_poisson"]
    dim: int = Field(1, ge=1)
    sigma: Optional[float] = Field(None, ge=0.0)
    drift: Optional[Vector] = None
    x0: Optional[Vector] = None
    slope: Optional[float] = None
    theta: Optional[float] = None
    mean: Optional[Vector] = None
    rate: Optional[float] = Field(None, ge=0.0)
    jump_size: Optional[Vector] = None
    jump_mean: Optional[Vector] = None
    jump_std: Optional[float] = Field(None, ge=0.0)
    initial: Optional[Literal["point", "gaussian"]] = None
    initial_std: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _family_params(self):
        accepted = set(inspect.signature(MODEL_BUILDERS[self.family]).parameters)
        for key in self.model_fields_set - {"family"}:
            if key not in accepted:
                raise ValueError(f"'{key}' is not a parameter of model family '{self.family}'")
        if self.family in ("poisson", "compound_poisson") and self.rate is None:
            raise ValueError(f"model family '{self.family}' requires 'rate'")
        return self

    def build(self) -> ModelSpec:
        params = self.model_dump(exclude_unset=True, exclude={"family"})
        if "dim" not in params:
            params["dim"] = self.dim
        return build_model(self.family, **params)


class CostSection(_Section):
    running: Literal["zero", "constant", "quadratic"] = "zero"
    running_coef: float = Field(0.0, ge=0.0)
    terminal: Literal["zero", "quadratic", "linear"] = "zero"
    terminal_coef: float = Field(0.0, ge=0.0)

    def build(self) -> CostSpec:
        return build_cost(self.running, self.running_coef, self.terminal, self.terminal_coef)


class GridSection(_Section):
    horizon: float = Field(1.0, gt=0.0)
    n_steps: int = Field(1000, ge=1)

    def build(self) -> TimeGrid:
        return TimeGrid(horizon=self.horizon, n_steps=self.n_steps)


class SurfaceSection(_Section):
    # auto: closed form when the pair is a known benchmark, Monte Carlo surface otherwise
    source: Literal["auto", "analytic", "surface"] = "auto"
    nodes_per_axis: int = Field(41, ge=2)
    n_sub: int = Field(1000, ge=2)
    n_time_nodes: int = Field(21, ge=2)
    box_width: float = Field(6.0, gt=0.0)


class RunSection(_Section):
    n_paths: int = Field(..., ge=2)
    seed: int = Field(default_factory=lambda: settings.default_seed, ge=0, lt=2 ** 64)
    stream: int = Field(0, ge=0, lt=2 ** 32)
    pipelines: List[Pipeline] = Field(default_factory=lambda: ["value", "twist", "reweight", "control", "checks"])
    output_dir: Optional[str] = None
    workers: int = Field(1, ge=1)
    inject_wrong_drift: bool = False
    dump_paths: int = Field(0, ge=0)


class ControlSection(_Section):
    policies: List[Literal["optimal", "zero"]] = Field(default_factory=lambda: ["optimal", "zero"])
    # extra policies s * u* for each factor s
    scales: List[float] = Field(default_factory=list)


class ChecksSection(_Section):
    n_bins: int = Field(10, ge=3)
    test_function: Literal["x", "x2"] = "x"
    integrability_p: float = Field(1.5, gt=1.0, lt=2.0)
    pde: bool = True
    value_martingale: bool = True
    threshold: float = Field(settings.residual_z_threshold, gt=0.0)


class MeanFieldSection(_Section):
    objective: Literal["linear", "quadratic"] = "quadratic"
    slope: float = Field(1.0, ge=0.0)
    curvature: float = Field(1.0, ge=0.0)
    theta: float = Field(0.5, gt=0.0, le=1.0)
    tol: float = Field(1e-3, gt=0.0)
    max_iter: int = Field(30, ge=1)


class RunConfig(_Section):
    name: str = "experiment"
    model: ModelSection
    cost: CostSection = Field(default_factory=CostSection)
    grid: GridSection = Field(default_factory=GridSection)
    surface: SurfaceSection = Field(default_factory=SurfaceSection)
    run: RunSection
    control: ControlSection = Field(default_factory=ControlSection)
    checks: ChecksSection = Field(default_factory=ChecksSection)
    meanfield: MeanFieldSection = Field(default_factory=MeanFieldSection)

    @property
    def output_dir(self) -> Path:
        if self.run.output_dir:
            return Path(self.run.output_dir).expanduser()
        return settings.clean_output_dir / self.name

    def echo(self) -> dict:
        """Every field with defaults applied, as written to the manifest."""
        return self.model_dump(mode="json")


# --- Parsing ---

_TOML_LINE = re.compile(r"line (\d+)")


def _line_of(text: str, loc) -> Optional[int]:
    """1-based line of a dotted key; the section header when the key itself is absent."""
    parts = [str(p) for p in loc if not isinstance(p, int)]
    if not parts:
        return None
    section, key = (None, parts[0]) if len(parts) == 1 else (parts[0], parts[1])
    current = None
    header_line = None
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped.strip("[]").strip()
            if current == section:
                header_line = n
            continue
        if current == section and re.match(rf"{re.escape(key)}\s*=", stripped):
            return n
        if section is None and current is None and re.match(rf"{re.escape(key)}\s*=", stripped):
            return n
    return header_line


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _TOML_LINE.search(str(e))
        raise ConfigError(f"malformed config: {e}", line=int(match.group(1)) if match else None) from e

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        loc = error["loc"]
        key = ".".join(str(p) for p in loc)
        if error["type"] == "extra_forbidden":
            message = f"unknown key '{key}'"
        elif error["type"] == "missing":
            message = f"missing required key '{key}'"
        else:
            message = f"invalid value for '{key}': {error['msg']}"
        raise ConfigError(message, key=key, line=_line_of(text, loc)) from e


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
