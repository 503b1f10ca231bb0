"""
Main entry point for the slimdet command-line toolkit.
"""
import sys
from pathlib import Path

from loguru import logger

from .infrastructure.config import settings
from .interface import cli


def setup_logging(verbose: bool = False) -> None:
    """Configure logging: stderr always, a rotating file when SLIMDET_LOG_FILE is set."""
    # Remove default logger
    logger.remove()

    # stdout carries results only
    level = "DEBUG" if verbose else settings.log_level
    logger.add(sys.stderr, format=settings.log_format, level=level, colorize=True)

    if settings.log_file:
        log_file = Path(settings.log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_file,
            format=settings.log_format,
            level=level,
            rotation="10 MB",
            retention="7 days",
            compression="zip",
        )

    logger.debug(f"{settings.app_name} v{settings.app_version}, {settings.threads} thread(s)")


def main() -> None:
    """Main application entry point."""
    sys.exit(cli.main(setup=setup_logging))


if __name__ == "__main__":
    main()
