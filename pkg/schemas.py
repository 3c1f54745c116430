import json
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field, ValidationError

from errors import ConfigError
from grid import Grid, GridSet
from harness import InequalityId
from kernels import KernelKind, KernelSpec

SCHEMA_VERSION = 1
BESSEL_HYPOTHESIS = "alpha>0 and s>1 be such that alpha*s <= n"


class Mode(str, Enum):
    CAPACITY = "capacity"
    CHOQUET = "choquet"
    FUNCTIONAL = "functional"
    MAXIMAL = "maximal"
    VERIFY = "verify"
    KERNEL_CHECK = "kernel-check"


class FunctionalChoice(str, Enum):
    GAMMA = "gamma"
    BETA = "beta"
    LAMBDA = "lambda"
    KV = "kv"
    MULT = "mult"
    MEASURE = "measure"


class OutputFormat(str, Enum):
    JSON = "json"
    CSV = "csv"


class KernelConfig(BaseModel):
    kind: KernelKind = Field(default=KernelKind.BESSEL, description="bessel or riesz")
    alpha: float = Field(default=0.5, description="Order of the potential")
    dim: int = Field(default=1, description="Spatial dimension n")


class GridConfig(BaseModel):
    points_per_axis: int = Field(default=256, description="N, a power of two")
    half_extent: float = Field(default=4.0, description="L; the grid covers [-L, L]^n")


class SolverSettings(BaseModel):
    tol: float = Field(default=1e-3, description="Relative duality gap tolerance")
    max_iters: int = Field(default=20000, description="Iteration cap per solve")
    seed: int = Field(default=0, description="Seed of every randomized step")


class LevelsConfig(BaseModel):
    k_min: int = Field(default=-12, description="Lowest dyadic level exponent")
    k_max: int = Field(default=6, description="Highest dyadic level exponent")
    levels_per_octave: int = Field(default=1, description="Level subdivision per power of two")


class IOConfig(BaseModel):
    out: Optional[str] = Field(default=None, description="Report path (JSON)")
    format: OutputFormat = Field(default=OutputFormat.JSON, description="Additional table format")
    field: Optional[str] = Field(default=None, description="Input field (binary or .json)")
    field_out: Optional[str] = Field(default=None, description="Where to write the main output field")
    histogram: Optional[str] = Field(default=None, description="Gnuplot ratio histogram path (verify)")
    store: Optional[str] = Field(default=None, description="Artifact store root for relative output names")


class TaskConfig(BaseModel):
    s: float = Field(default=2.0, description="Capacity exponent s > 1")
    set: Optional[str] = Field(default=None, description="Set expression, e.g. box:0,1+ball:3,0.5")
    which: Optional[str] = Field(default=None, description="Functional kind or inequality id")
    q: Optional[float] = Field(default=None, description="Power for choquet/thm13, threshold exponent for maximal")
    p: float = Field(default=2.0, description="Exponent of the multiplier norm")
    radii: str = Field(default="auto", description="'auto' or comma-separated radii in (0, 1]")
    global_radii: bool = Field(default=False, description="Global maximal function (Riesz only)")
    samples: int = Field(default=50, description="Samples per family")
    family: Optional[str] = Field(default=None, description="Sample family name")
    refine: bool = Field(default=False, description="Also run at 2N and record the drift")
    polish: bool = Field(default=False, description="Polish the beta witness by projected gradient")
    contrast: bool = Field(default=False, description="Pair a Riesz pointwise run with the Bessel kernel")
    jobs: Optional[int] = Field(default=None, description="Worker pool size")


class ExperimentConfig(BaseModel):
    schema_version: int = Field(default=SCHEMA_VERSION, description="Config schema version")
    mode: Mode = Field(description="Subcommand to run")
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    levels: LevelsConfig = Field(default_factory=LevelsConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(kind=self.kernel.kind, alpha=self.kernel.alpha, dim=self.kernel.dim)

    def build_grid(self) -> Grid:
        return Grid(self.kernel.dim, self.grid.points_per_axis, self.grid.half_extent)

    def problems(self) -> list[str]:
        """Every violated precondition, in a stable order."""
        found = []
        k, g, t = self.kernel, self.grid, self.task
        if self.schema_version != SCHEMA_VERSION:
            found.append(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if k.dim not in (1, 2, 3):
            found.append(f"kernel.dim must be 1, 2 or 3, got {k.dim}")
        if not k.alpha > 0:
            found.append(f"kernel.alpha must be positive, got {k.alpha}")
        if not t.s > 1:
            found.append(f"task.s must exceed 1, got {t.s}")
        if k.kind is KernelKind.BESSEL and k.alpha * t.s > k.dim:
            found.append(f"alpha*s = {k.alpha * t.s:g} > n = {k.dim}: the Bessel mode needs {BESSEL_HYPOTHESIS}")
        if k.kind is KernelKind.RIESZ and not k.alpha < k.dim:
            found.append(f"Riesz kernel needs 0 < alpha < n, got alpha={k.alpha}, n={k.dim}")
        n = g.points_per_axis
        if n < 2 or n & (n - 1):
            found.append(f"grid.points_per_axis must be a power of two, got {n}")
        if not g.half_extent > 0:
            found.append(f"grid.half_extent must be positive, got {g.half_extent}")
        if not 0 < self.solver.tol < 1:
            found.append(f"solver.tol must lie in (0, 1), got {self.solver.tol}")
        if self.solver.max_iters < 1:
            found.append(f"solver.max_iters must be at least 1, got {self.solver.max_iters}")
        if not self.levels.k_min < self.levels.k_max:
            found.append(f"levels.k_min must be below levels.k_max, got {self.levels.k_min}:{self.levels.k_max}")
        if self.levels.levels_per_octave < 1:
            found.append("levels.levels_per_octave must be at least 1")
        if t.q is not None and not t.q > 0:
            found.append(f"task.q must be positive, got {t.q}")
        if t.samples < 1:
            found.append(f"task.samples must be at least 1, got {t.samples}")
        if t.jobs is not None and t.jobs < 1:
            found.append(f"task.jobs must be at least 1, got {t.jobs}")
        found += self._mode_problems()
        return found

    def _mode_problems(self) -> list[str]:
        found = []
        t = self.task
        h = 2 * self.grid.half_extent / max(self.grid.points_per_axis, 1)
        needs_cover = False
        if self.mode is Mode.CAPACITY and not t.set:
            found.append("capacity needs task.set")
        if self.mode in (Mode.CHOQUET, Mode.MAXIMAL) and not self.io.field:
            found.append(f"{self.mode.value} needs io.field")
        if self.mode is Mode.FUNCTIONAL:
            choices = [c.value for c in FunctionalChoice]
            if t.which not in choices:
                found.append(f"functional needs task.which in {choices}, got {t.which!r}")
            elif t.which in ("beta", "lambda"):
                needs_cover = True
            if t.which == "mult" and not t.p > 1:
                found.append(f"task.p must exceed 1, got {t.p}")
            if t.which == "measure" and not t.set:
                found.append("the measure norm needs task.set (the set whose capacitary measure is normed)")
            elif t.which not in ("measure", None) and not (self.io.field or t.set):
                found.append("functional needs io.field or task.set")
        if self.mode is Mode.MAXIMAL and t.global_radii and self.kernel.kind is not KernelKind.RIESZ:
            found.append("the global maximal function is available for the Riesz kernel only")
        if self.mode is Mode.VERIFY:
            ids = [i.value for i in InequalityId]
            if t.which not in ids:
                found.append(f"verify needs task.which in {ids}, got {t.which!r}")
            elif t.which in ("quasi_add", "thm12_band"):
                needs_cover = True
            if t.which == "thm13_maximal" and t.q is None:
                found.append("thm13_maximal needs task.q")
            if t.which == "lemma31_bessel" and self.kernel.kind is not KernelKind.BESSEL:
                found.append("lemma31_bessel runs with the Bessel kernel")
            if t.which == "vwh_riesz" and self.kernel.kind is not KernelKind.RIESZ:
                found.append("vwh_riesz runs with the Riesz kernel")
            if t.which == "two_sided_kernel" and self.kernel.kind is not KernelKind.BESSEL:
                found.append("two_sided_kernel runs with the Bessel kernel")
        if self.mode is Mode.KERNEL_CHECK and self.grid.half_extent < 4:
            found.append(f"kernel-check needs grid.half_extent >= 4, got {self.grid.half_extent}")
        if needs_cover and not h < 0.25:
            found.append(f"grid spacing {h:g} must be below 1/4 to resolve the unit-ball cover")
        if t.radii != "auto":
            try:
                radii = [float(r) for r in t.radii.split(",")]
            except ValueError:
                found.append(f"task.radii must be 'auto' or comma-separated numbers, got {t.radii!r}")
            else:
                if any(not 0 < r <= 1 for r in radii):
                    found.append("task.radii must lie in (0, 1]")
        return found

    def validated(self) -> "ExperimentConfig":
        found = self.problems()
        if found:
            raise ConfigError(found)
        return self


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a JSON config; syntax errors carry line and column, schema errors every location."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    return parse_config(raw, source=str(path))


def parse_config(raw: dict[str, Any], source: str = "config") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError([
            f"{source}: {'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        ]) from e


def _numbers(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def parse_set(expr: str, grid: Grid) -> GridSet:
    """Union of `box:lo,hi` (cube), `box:lo_1..lo_n,hi_1..hi_n` and `ball:c_1..c_n,r` terms joined by '+'."""
    E = GridSet.empty(grid)
    for term in expr.split("+"):
        kind, _, args = term.strip().partition(":")
        try:
            values = _numbers(args)
        except ValueError as e:
            raise ConfigError(f"set term {term!r}: {e}") from e
        if kind == "box" and len(values) == 2:
            E = E | GridSet.box(grid, values[0], values[1])
        elif kind == "box" and len(values) == 2 * grid.dim:
            E = E | GridSet.box(grid, values[: grid.dim], values[grid.dim:])
        elif kind == "ball" and len(values) == grid.dim + 1:
            E = E | GridSet.ball(grid, values[: grid.dim], values[-1])
        else:
            raise ConfigError(f"set term {term!r} does not match box:lo,hi or ball:center,radius in {grid.dim}D")
    return E


def parse_radii(text: str) -> Optional[list[float]]:
    return None if text == "auto" else _numbers(text)


# --- reports ---


class ReportMetadata(BaseModel):
    started: datetime
    finished: datetime
    duration_seconds: float
    host: str
    python: str
    payload_sha256: str = Field(description="SHA-256 of the canonical payload JSON")


class ReportEnvelope(BaseModel):
    payload: dict[str, Any]
    metadata: ReportMetadata


class CapacitySummary(BaseModel):
    value: float = Field(description="Cap_{alpha,s}(E), int f^s normalization")
    gap: float
    iterations: int
    cells: int
    measure: float = Field(description="Lebesgue measure of E")
    identities: tuple[float, float, float] = Field(
        description="mu(E)/Cap, int V dmu / Cap, int (G*mu)^s' / Cap"
    )
    min_V: float = Field(description="min of the nonlinear potential over E")


class ChoquetSummary(BaseModel):
    value: float
    lower: float
    upper: float
    q: float = 1.0
    per_level: list[tuple[float, float]]


class FunctionalSummary(BaseModel):
    kind: str
    value: float
    certified: bool
    label: Optional[str] = None
    details: dict[str, Any] = Field(default_factory=dict)
    witness_path: Optional[str] = None


class MaximalSummary(BaseModel):
    radii: list[float]
    max_value: float
    boundary_policy: str
    domination_ratio: Optional[float] = None
    field_path: Optional[str] = None


class GoldenCheck(BaseModel):
    name: str
    expected: float
    observed: float
    rel_error: float
    passed: bool


class KernelCheckSummary(BaseModel):
    golden: list[GoldenCheck]
    c_near: Optional[float] = None
    c_far: Optional[float] = None

