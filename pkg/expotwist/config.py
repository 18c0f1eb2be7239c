from typing import ClassVar
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    app_name: ClassVar[str] = "expotwist"
    version: ClassVar[str] = "0.2.0"

    # --- SEEDING ---
    # Used whenever a run config does not pin its own seed.
    # Override with EXPOTWIST_DEFAULT_SEED in the environment or .env
    default_seed: int = 20240917
    jump_mc_seed: int = 7919

    # Storage paths
    log_dir: Path = Path("storage/logs")
    log_level: str = "INFO"
    output_dir: Path = Path("storage/runs")

    # --- NUMERICS ---
    # Floor applied before every division by the value function
    eps_v: float = 1e-12
    # Finite differences use fd_relative_step * (1 + |x|) unless a step is given
    fd_relative_step: float = 1e-4
    # Jump expectations fall back to fixed-seed sampling when no quadrature exists
    jump_mc_draws: int = 10_000
    jump_quadrature_nodes: int = 40
    divergence_threshold: float = 1e12
    condition_limit: float = 1e10

    # --- SIMULATION ---
    chunk_size: int = 4096
    workers: int = 1
    max_initial_proposals: int = 10_000_000
    min_initial_acceptance: float = 1e-6
    # Thinning proposals per path and step; lambda / v explodes where v hits eps_v
    max_jump_proposals_per_step: float = 1e5

    # --- CHECKS ---
    residual_z_threshold: float = 4.0
    bias_constant: float = 1.0

    model_config = SettingsConfigDict(env_file=".env", env_prefix="EXPOTWIST_", extra="ignore")

    @property
    def clean_output_dir(self) -> Path:
        return self.output_dir.expanduser()


settings = Settings()
