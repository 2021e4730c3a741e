import logging
import sys

from dotenv import load_dotenv
from pydantic import ValidationError

# Load environment variables
load_dotenv()

from config.logging import setup_logging
from config.settings import get_settings

from src.cli import run
from src.cli.commands import EXIT_CONFIG


def main() -> int:
    """Command-line entry point."""

    try:
        settings = get_settings()
    except ValidationError as e:
        print(f"Invalid NEARID_* environment: {e}", file=sys.stderr)
        return EXIT_CONFIG
    setup_logging(settings.log_level, settings.logs_path or None)
    logger = logging.getLogger(__name__)
    logger.debug(f"Arguments: {sys.argv[1:]}")

    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
