import os

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Class to hold the library's config values."""

    THREADS: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str | None = None

    # HTTP front end
    CORS_ORIGINS: list[str] = ["http://localhost:3000", "http://localhost:3001"]
    HOST: str = "127.0.0.1"
    PORT: int = Field(default=8000, ge=1, le=65535)

    FD_STEP: float = Field(default=1e-6, gt=0)
    FD_DIAGNOSTIC_STEP: float = Field(default=1e-4, gt=0)

    SO3_TOLERANCE: float = Field(default=1e-10, gt=0)
    SO3_REPAIR_TOLERANCE: float = Field(default=1e-6, gt=0)

    FEASIBILITY_TOLERANCE: float = Field(default=1e-9, gt=0)
    TIE_TOLERANCE: float = Field(default=1e-9, gt=0)
    ACTIVE_TOLERANCE: float = Field(default=1e-6, gt=0)
    RANK_TOLERANCE: float = Field(default=1e-8, gt=0)

    NEWTON_TOLERANCE: float = Field(default=1e-12, gt=0)
    NEWTON_MAX_ITERS: int = Field(default=50, ge=1)

    PENALTY_TOLERANCE: float = Field(default=1e-9, gt=0)
    MULTIPLIER_TOLERANCE: float = Field(default=1e-6, gt=0)

    model_config = SettingsConfigDict(
        env_prefix="DGMP_",
        env_file=".env",
        extra="ignore",
    )


# Load settings from the environment and the .env file
settings = Settings()
