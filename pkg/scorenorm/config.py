from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # App
    APP_NAME: str = "scorenorm"
    LOG_LEVEL: str = "INFO"

    # Workers (per-matrix E-step fan-out)
    MAX_WORKERS: int = 4

    # EM training
    EM_TOL: float = 1e-8
    EM_MAX_ITERS: int = 500
    EM_MONOTONICITY_TOL: float = 1e-9  # relative to |objective|
    INIT_LOADING_SCALE: float = 0.1
    VARIANCE_FLOOR: float = 1e-6
    CHOLESKY_JITTER: float = 1e-10
    RIDGE: float = 1e-10

    # Classical norms
    DEGENERATE_STD: float = 1e-12

    # Metrics
    LLR_BOUND: float = 50.0

    # Run defaults
    DEFAULT_SEED: int = 0
    DEFAULT_PRIOR: float = 0.5
    DEFAULT_DIM: int = 1

    model_config = SettingsConfigDict(env_file=".env", env_prefix="SCORENORM_")


settings = Settings()
