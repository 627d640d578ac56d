# scorenorm/main.py
import logging

from scorenorm.config import settings
from scorenorm.api.commands import cli

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

logger = logging.getLogger(__name__)


def main():
    logger.debug(f"Starting {settings.APP_NAME}")
    cli(obj={})


if __name__ == "__main__":
    main()
