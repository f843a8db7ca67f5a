"""
Конфигурация движка DFM
Параметры переопределяются через переменные окружения или .env
"""
from pydantic_settings import BaseSettings


class EngineConfig(BaseSettings):
    """Настройки движка"""

    # === ИДЕНТИФИКАЦИЯ ===
    ENGINE_NAME: str = "DFM Desk Engine"
    API_VERSION: str = "1.0"

    # === DATABASE (реестр запусков) ===
    DATABASE_URL: str = "sqlite+aiosqlite:///./dfm_runs.db"
    DATABASE_ECHO: bool = False

    # === ОТЧЕТЫ И ЛОГИ ===
    REPORTS_DIR: str = "./reports"
    LOG_LEVEL: str = "INFO"
    REFERENCE_CONFIG: str = "configs/reference.json"

    # === ЧИСЛЕННЫЕ ОГРАНИЧЕНИЯ ===
    DEFAULT_SEED: int = 20240601
    STATE_SPACE_CAP: int = 1_000_000  # |support(q)| * K^D для marginal_oracle
    POSTERIOR_SUPPORT_CAP: int = 100_000  # |support(q)| для oracle_posterior
    BETA_CLAMP_EPS: float = 1e-3

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        extra = "allow"


# Singleton instance
config = EngineConfig()
