"""Data models for experiment configuration."""

import math
from enum import StrEnum
from pathlib import Path
from typing import Annotated, Literal

from pydantic import BaseModel, Field, PositiveFloat, PositiveInt, model_validator

from .problem import Heterogeneity
from .topology import TopologyKind


class Variant(StrEnum):
    PARALLEL = "parallel"
    GOSSIP = "gossip"
    LOCAL = "local"
    GOSSIP_PGA = "gossip_pga"
    GOSSIP_AGA = "gossip_aga"


class AlgorithmFamily(StrEnum):
    GOSSIP = "gossip"
    GOSSIP_PGA = "gossip_pga"
    LOCAL = "local"


class TopologyModel(StrEnum):
    """Asymptotic spectral-gap models used by the transient-time tables."""

    GRID = "grid"  # 1 - beta = 1/n, |N_i| = 5
    RING = "ring"  # 1 - beta = 1/n^2, |N_i| = 3


class ConstantStep(BaseModel):
    kind: Literal["constant"] = "constant"
    gamma: float = Field(
        ..., ge=0, description="Constant learning rate (0 freezes the iterates)"
    )


class HalvingStep(BaseModel):
    kind: Literal["halving"] = "halving"
    gamma0: PositiveFloat = Field(default=0.2, description="Initial learning rate")
    every: PositiveInt = Field(
        default=1000, description="Iterations between successive halvings"
    )


class Theorem1Step(BaseModel):
    kind: Literal["theorem1"] = "theorem1"
    gamma: PositiveFloat | None = Field(
        default=None,
        description="Resolved constant step size (filled in from problem constants)",
    )


StepSchedule = Annotated[
    ConstantStep | HalvingStep | Theorem1Step, Field(discriminator="kind")
]


class AGASettings(BaseModel):
    """Gossip-AGA period adaptation."""

    H_init: PositiveInt = Field(default=4, description="Initial averaging period")
    warmup_iters: int | None = Field(
        default=None,
        ge=0,
        description="Warm-up iterations K_w (default: first learning-rate phase)",
    )


class RunConfig(BaseModel):
    """One algorithm configuration executed for every trial."""

    name: str | None = Field(default=None, description="Label used in output files")
    variant: Variant = Field(..., description="Algorithm variant")
    T: PositiveInt = Field(..., description="Total number of iterations")
    H: PositiveInt | None = Field(
        default=None, description="Global averaging period (null means never)"
    )
    step_schedule: StepSchedule = Field(
        default_factory=HalvingStep, description="Learning-rate schedule"
    )
    batch_size: PositiveInt = Field(default=1, description="Mini-batch size per node")
    full_batch: bool = Field(
        default=False, description="Use exact local gradients (sigma = 0)"
    )
    seed: int | None = Field(
        default=None, description="RNG seed (defaults to the experiment seed)"
    )
    aga: AGASettings = Field(default_factory=AGASettings)
    init: list[float] | None = Field(
        default=None, description="Common initial vector (default: zeros)"
    )

    @property
    def label(self) -> str:
        return self.name or str(self.variant)

    @property
    def period(self) -> float:
        """Averaging period with ``math.inf`` standing for "never"."""
        return math.inf if self.H is None else float(self.H)


class CommModel(BaseModel):
    """Alpha-theta communication cost model."""

    alpha: PositiveFloat = Field(..., description="Point-to-point latency (s)")
    theta: PositiveFloat = Field(..., description="Time to transmit one scalar (s)")
    d: PositiveInt = Field(..., description="Model dimension")
    n: PositiveInt = Field(..., description="Number of nodes")
    degree: PositiveInt = Field(
        default=3, description="Gossip neighborhood size |N_i| (self included)"
    )


class ProblemSpec(BaseModel):
    n: PositiveInt = Field(..., description="Number of nodes")
    M: PositiveInt = Field(..., description="Samples per node")
    d: PositiveInt = Field(..., description="Feature dimension")
    heterogeneity: Heterogeneity = Field(
        default=Heterogeneity.NON_IID, description="Data distribution across nodes"
    )
    seed: int = Field(default=0, description="Dataset seed")


class TopologySpec(BaseModel):
    kind: TopologyKind = Field(..., description="Topology kind")
    rows: PositiveInt | None = Field(default=None, description="Grid rows")
    cols: PositiveInt | None = Field(default=None, description="Grid columns")


class TransientSettings(BaseModel):
    enabled: bool = Field(default=False, description="Detect transient stages")
    reference: str = Field(
        default="parallel", description="Name of the Parallel SGD reference run"
    )
    rel_tol: float = Field(default=0.05, ge=0, description="Relative match tolerance")
    window: PositiveInt = Field(
        default=50, description="Logged points the match must be sustained for"
    )


class ReferenceSettings(BaseModel):
    tol: PositiveFloat = Field(default=1e-10, description="Gradient-norm tolerance")
    max_iters: PositiveInt = Field(default=10_000, description="Solver budget")
    mc_samples: PositiveInt | None = Field(
        default=None, description="Samples for sigma^2 (null: exact over M)"
    )
    probes: int = Field(default=8, ge=0, description="Random probe directions")


class TheoryTableSpec(BaseModel):
    families: list[AlgorithmFamily] = Field(
        default_factory=lambda: [AlgorithmFamily.GOSSIP, AlgorithmFamily.GOSSIP_PGA]
    )
    topology_models: list[TopologyModel] = Field(
        default_factory=lambda: [TopologyModel.GRID, TopologyModel.RING]
    )
    scenarios: list[Heterogeneity] = Field(
        default_factory=lambda: [Heterogeneity.IID, Heterogeneity.NON_IID]
    )
    n_values: list[PositiveInt] = Field(
        default_factory=lambda: [2**k for k in range(4, 11)],
        description="Network sizes for the log-log slope fit",
    )
    profile_periods: list[PositiveInt] = Field(
        default_factory=lambda: [3, 6, 12, 24, 48],
        description="Periods for the profiled-overhead table",
    )


class ExperimentConfig(BaseModel):
    """Main configuration: one problem, one topology, several runs."""

    problem: ProblemSpec
    topology: TopologySpec
    runs: list[RunConfig] = Field(default_factory=list)
    trials: PositiveInt = Field(default=1, description="Trials per run")
    log_interval: PositiveInt = Field(default=10, description="Logging grid step")
    seed: int = Field(default=0, description="Master seed for trial streams")
    sizes: list[PositiveInt] | None = Field(
        default=None, description="Network sizes to sweep (overrides problem.n)"
    )
    comm_model: CommModel | None = Field(default=None)
    output_dir: Path = Field(default=Path("results"), description="Output directory")
    transient: TransientSettings = Field(default_factory=TransientSettings)
    reference: ReferenceSettings = Field(default_factory=ReferenceSettings)
    theory: TheoryTableSpec = Field(default_factory=TheoryTableSpec)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        names = [run.label for run in self.runs]
        if len(set(names)) != len(names):
            raise ValueError(f"Run names must be unique, got {names}")
        spec = self.topology
        if spec.kind == TopologyKind.GRID and spec.rows and spec.cols:
            if spec.rows * spec.cols != self.problem.n or self.sizes:
                raise ValueError(
                    f"Grid {spec.rows}x{spec.cols} does not match n={self.problem.n}"
                )
        return self


class RunnerSettings(BaseModel):
    """Runtime settings for the experiment runner."""

    output_dir: Path | None = Field(
        default=None, description="Override the configured output directory"
    )
    trials: PositiveInt | None = Field(default=None, description="Override trials")
    seed: int | None = Field(default=None, description="Override the master seed")
    parallel: PositiveInt | None = Field(
        default=None, description="Worker processes (default: CPU count)"
    )
    log_level: str = Field(default="INFO", description="Logging level")
