import os
import sys
from typing import (TYPE_CHECKING, Any, Callable, Dict, List, Optional,
                    TypeVar, Union)

from loguru import logger as loguru_logger

from .errors import ConfigError

if TYPE_CHECKING:
    from .app import ExperimentApp

LOGGER = loguru_logger
E = TypeVar("E", bound=Exception)

LOG_LEVEL_ENV = "DTNLAB_LOG_LEVEL"
DEFAULT_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level:<8} | {message} {extra}"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class Runtime:
    """
    Process-wide execution environment for experiment commands.

    The Runtime owns the logging setup and turns the outcome of an `ExperimentApp`
    into an exit status. Only one instance exists per process; later constructions
    return the first instance unchanged so that a command cannot silently reconfigure
    logging halfway through a sweep.

    Features:
        - loguru sinks (stderr by default, files or callables on request)
        - `{extra}` column carrying bound context such as epoch, task or span timings
        - exit status mapping for command failures
    """

    _instance = None
    _initialized = False

    def __new__(cls, *args, **kwargs):
        if cls._instance is None:
            cls._instance = super(Runtime, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(
        self,
        log_level: Optional[str] = None,
        log_format: Optional[str] = None,
        sinks: Optional[List[Union[Dict[str, Any], Callable]]] = None,
    ):
        """
        Args:
            log_level: Minimum level for sinks without their own level. Falls back to
                the DTNLAB_LOG_LEVEL environment variable, then INFO.
            log_format: loguru format string; `{extra}` is appended when missing.
            sinks: Callables or dicts of `logger.add()` keyword arguments (must include 'sink').

        Example:
            runtime = Runtime(
                log_level="DEBUG",
                sinks=[
                    {"sink": sys.stderr, "level": "INFO"},
                    {"sink": "runs/train.log", "level": "DEBUG"},
                ],
            )
        """
        if self._initialized:
            return
        self.log_level = log_level or os.environ.get(LOG_LEVEL_ENV, "INFO")
        self._configure_logger(log_format, sinks)
        self.logger = loguru_logger
        self._initialized = True

        global LOGGER
        LOGGER = loguru_logger

    def _configure_logger(
        self,
        log_format: Optional[str] = None,
        sinks: Optional[List[Union[Dict[str, Any], Callable]]] = None,
    ) -> None:
        loguru_logger.remove()
        if log_format is None:
            log_format = DEFAULT_FORMAT
        elif "{extra}" not in log_format:
            log_format += " {extra}"

        if not sinks:
            loguru_logger.add(sink=sys.stderr, format=log_format, level=self.log_level)
            return

        for sink in sinks:
            if callable(sink):
                loguru_logger.add(sink=sink, format=log_format, level=self.log_level)
            else:
                sink_config = sink.copy()
                sink_config.setdefault("format", log_format)
                sink_config.setdefault("level", self.log_level)
                loguru_logger.add(**sink_config)

    @staticmethod
    def run_app(app: "ExperimentApp[E]", exit_on_error: bool = False) -> int:
        """
        Execute the app's step and map the outcome to an exit status.

        Configuration problems exit with 2, every other failure with 1.

        Args:
            app: The command to run
            exit_on_error: Call sys.exit with the failure status instead of returning it
        """

        def failed(error: Exception) -> int:
            LOGGER.bind(command=app.name).error(f"Command failed: {error}")
            return EXIT_CONFIG if isinstance(error, ConfigError) else EXIT_FAILURE

        def succeeded(_) -> int:
            LOGGER.bind(command=app.name).info("Command completed successfully")
            return EXIT_OK

        status = app.run().match(failed, succeeded).run()
        if status != EXIT_OK and exit_on_error:
            sys.exit(status)
        return status
