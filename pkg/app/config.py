import logging.config
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"


class Settings(BaseSettings):
    log_level: str = "INFO"

    celery_broker_url: str = "redis://localhost:6379/0"
    celery_result_backend: str = "redis://localhost:6379/0"
    celery_always_eager: bool = True

    ablation_executor: Literal["process", "celery"] = "process"
    workers: int = 1
    prefetch_workers: int = 0

    model_config = SettingsConfigDict(env_prefix="RIQA_", env_file=".env", extra="ignore")


settings = Settings()


def configure_logging(level: str | None = None) -> None:
    logging.config.dictConfig({
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "generic": {"format": LOG_FORMAT, "datefmt": "%H:%M:%S"},
        },
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "stream": "ext://sys.stderr",
                "formatter": "generic",
            },
        },
        "root": {"level": (level or settings.log_level).upper(), "handlers": ["console"]},
    })
