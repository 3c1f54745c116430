import os
from functools import lru_cache

import logfire
from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, Field

load_dotenv(find_dotenv())


class Settings(BaseModel):
    cache_dir: str | None = Field(
        default=None,
        description="Directory of the on-disk capacity cache (CAPTOOL_CACHE_DIR)",
    )
    jobs: int = Field(
        default_factory=lambda: os.cpu_count() or 1,
        ge=1,
        description="Worker pool size for independent sub-solves (CAPTOOL_JOBS)",
    )
    log_level: str = Field(
        default="info",
        description="Console log level (CAPTOOL_LOG_LEVEL)",
    )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    values = {
        "cache_dir": os.getenv("CAPTOOL_CACHE_DIR") or None,
        "log_level": os.getenv("CAPTOOL_LOG_LEVEL", default="info"),
    }
    if os.getenv("CAPTOOL_JOBS"):
        values["jobs"] = int(os.environ["CAPTOOL_JOBS"])
    return Settings(**values)


_configured = False


def configure_logging(console: bool = True, send: bool | str = "if-token-present") -> None:
    """Configure logfire once; spans leave the machine only when LOGFIRE_TOKEN is set."""
    global _configured
    if _configured:
        return
    settings = get_settings()
    logfire.configure(
        service_name="captool",
        send_to_logfire=send,
        console=logfire.ConsoleOptions(min_log_level=settings.log_level) if console else False,
    )
    _configured = True
