from typing import List, Literal, Optional

from pydantic import BaseModel, Field


# --- model_core ---
class Violation(BaseModel):
    """One invariant broken at one probe point"""
    t: float
    x: List[float]
    check: str
    message: str


class ValidationReport(BaseModel):
    n_probes: int
    violations: List[Violation] = Field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def messages(self) -> List[str]:
        return [v.message for v in self.violations]


# --- girsanov ---
class EntropyReport(BaseModel):
    n_paths: int
    z_hat: float
    minus_log_z: float
    mean_phi: float
    entropy: float
    gap: float
    ess: float
    minus_log_z_stderr: float = 0.0
    mean_phi_stderr: float = 0.0
    entropy_stderr: float = 0.0


# --- generator_check / feynman_kac ---
class ResidualRow(BaseModel):
    lo: float
    hi: float
    mean: float
    stderr: float
    z: float
    count: int


class NodeResidual(BaseModel):
    t: float
    x: List[float]
    residual: float
    tolerance: float
    stderr: float = 0.0


class ResidualReport(BaseModel):
    kind: Literal["martingale", "pde", "value_martingale"]
    rows: List[ResidualRow] = Field(default_factory=list)
    nodes: List[NodeResidual] = Field(default_factory=list)
    max_abs_z: float = 0.0
    max_abs_residual: float = 0.0
    threshold: float = 4.0
    passed: bool = True
    skipped: int = 0
    notes: List[str] = Field(default_factory=list)


class IntegrabilityReport(BaseModel):
    p: float
    estimate: float
    stderr: float
    estimate_half: float
    n_paths: int
    relative_drift: float
    stable: bool


# --- control_eval ---
class RankingRow(BaseModel):
    policy_name: str
    J: float
    stderr: float
    gap_to_minus_logZ: Optional[float] = None
    excluded: int = 0


class RankingReport(BaseModel):
    rows: List[RankingRow] = Field(default_factory=list)
    reference: Optional[str] = None
    red_flags: List[str] = Field(default_factory=list)

    def by_name(self, name: str) -> RankingRow:
        for row in self.rows:
            if row.policy_name == name:
                return row
        raise KeyError(name)


# --- meanfield_solver ---
class MeanFieldStep(BaseModel):
    iter: int
    c: float
    m: float
    objective: float
    entropy: float
    m_stderr: float = 0.0


class MeanFieldResult(BaseModel):
    c_star: float
    m_star: float
    m_stderr: float
    iterations: int
    converged: bool
    trace: List[MeanFieldStep] = Field(default_factory=list)


# --- cli_runner ---
class CheckResult(BaseModel):
    """One row of the run summary"""
    pipeline: str
    name: str
    passed: bool
    value: Optional[float] = None
    reference: Optional[float] = None
    tolerance: Optional[float] = None
    detail: str = ""
