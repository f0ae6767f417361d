"""Application configuration using Pydantic settings."""

from pydantic import BaseModel, ConfigDict
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings loaded from the environment.

    Only the artifact directory can be overridden this way (``RIEMEXT_OUTPUT_DIR``);
    every numerical choice lives in :class:`Tolerances` or on the command line.
    """

    model_config = SettingsConfigDict(env_prefix="RIEMEXT_", env_file=".env", extra="ignore")

    # Artifacts
    output_dir: str = "./artifacts"


class Tolerances(BaseModel):
    """Numerical policy constants shared by the geometry modules."""

    model_config = ConfigDict(frozen=True)

    # Quadrature
    gauss_nodes: int = 3
    length_rel_tol: float = 1e-12
    max_length_panels: int = 1024

    # Metric length of sampled paths
    partition_rel_change: float = 1e-4

    # Extension
    seeley_order: int = 3
    t_beta_grid: int = 20
    collar_width_m: float = 0.5
    epsilon: float = 1.0
    lipschitz_slack: float = 0.02
    collar_cap: float = 0.5
    halving_iterations: int = 20
    fermi_step: float = 5e-3

    # Completeness
    crossing_slack: float = 0.05
    q2_guard: float = 1e-6
    q2_pair_cap: int = 10_000
    max_active_bumps: int = 6

    # Geodesics and Riccati
    rk4_step: float = 1e-3
    speed_rel_tol: float = 1e-6

    # Sampling
    random_walks: int = 32
    audit_trials: int = 50


settings = Settings()
tolerances = Tolerances()
