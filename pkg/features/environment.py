import shutil
import tempfile
from pathlib import Path

from eventsourcing.utils import clear_topic_cache

from countaug.logging_config import configure_logging


def before_all(context) -> None:
    log_level = context.config.userdata.get("log_level", "WARNING")
    context.loggers = configure_logging(log_level)


def before_scenario(context, scenario) -> None:
    context.config.setup_logging()
    context.workdir = Path(tempfile.mkdtemp(prefix="countaug-"))
    context.parameters = {}
    context.result = None
    context.error = None


def after_scenario(context, scenario) -> None:
    shutil.rmtree(context.workdir, ignore_errors=True)
    clear_topic_cache()
