from abc import ABC, abstractmethod
from typing import Generic, Optional, TypeVar

from .effect import Step
from .runtime import Runtime

E = TypeVar("E", bound=Exception)


class ExperimentApp(Generic[E], ABC):
    """
    Base class for CLI commands.

    A command describes its work as a single `Step` pipeline in `run()`; executing it and
    translating failures into exit codes is left to `Runtime.run_app`.

    Usage:
        class TrainCommand(ExperimentApp[Exception]):
            name = "train"

            def run(self) -> Step[Exception, None]:
                return Step.log_info("training").then(Step.attempt(self._train))

        status = Runtime.run_app(TrainCommand(config, out_dir))
    """

    name: str = "app"

    def __init__(self, runtime: Optional[Runtime] = None):
        self._runtime = runtime if runtime else Runtime()

    @abstractmethod
    def run(self) -> Step[E, None]:
        """Return the command's pipeline without executing it."""
        pass
