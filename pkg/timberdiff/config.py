from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Application settings
    log_level: str = Field("INFO")
    log_file: Optional[str] = Field(None)

    # Worker threads for k-d tree queries (0 = all cores)
    threads: int = Field(0, ge=0)

    # Monitoring
    enable_metrics: bool = Field(True)
    metrics_file: Optional[str] = Field(None)

    # Processing defaults; the CLI takes millimetres and converts
    voxel_size_mm: float = Field(2.0, gt=0)
    sample_density: float = Field(1e6, gt=0)
    projection_tolerance_mm: float = Field(5.0, gt=0)
    seed: int = Field(0, ge=0)

    # Application metadata
    app_name: str = Field("timberdiff")
    version: str = Field("0.1.0")

    model_config = SettingsConfigDict(
        env_file=".env", env_prefix="TIMBERDIFF_", extra='ignore')

    @property
    def workers(self) -> int:
        """Worker count in scipy's convention (-1 = all cores)"""
        return -1 if self.threads == 0 else self.threads


settings = Settings()
