from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Generic, Optional, TypeVar

from . import runtime

A = TypeVar("A")
B = TypeVar("B")
E = TypeVar("E", bound=Exception | None)


@dataclass
class Step(Generic[E, A]):
    """
    A lazily evaluated stage of an experiment pipeline (load data, build, train, report).

    A Step either produces a value or carries the exception that stopped it. Nothing
    happens until run() is called, so commands can assemble their whole pipeline first
    and the Runtime decides what a failure means for the process.

    Type Variables:
        E: Error type (None or an Exception subclass)
        A: Value produced on success
    """

    _compute: Callable[[], tuple[E, Optional[A]]]

    @staticmethod
    def success(value: A) -> Step[None, A]:
        """Lift a plain value, e.g. an already loaded dataset, into a pipeline."""
        return Step(lambda: (None, value))

    @staticmethod
    def fail(error: Exception) -> Step[Exception, None]:
        """A stage that stops the pipeline with `error`."""
        return Step(lambda: (error, None))

    @staticmethod
    def attempt(f: Callable[[], A]) -> Step[E, A]:
        """
        Wrap a library call that may raise (loading files, building a model, training).

        Any exception raised by `f` lands in the error channel instead of propagating.
        """

        def safe_compute():
            try:
                return None, f()
            except Exception as e:
                return e, None

        return Step(safe_compute)

    @staticmethod
    def unit() -> Step[None, None]:
        return Step.success(None)

    def map(self, f: Callable[[A], B]) -> Step[E, B]:
        """Transform the produced value; errors pass through untouched."""

        def new_compute():
            error, value = self._compute()
            if error is not None:
                return error, None
            return None, f(value)

        return Step(new_compute)

    def flat_map(self, f: Callable[[A], Step[E, B]]) -> Step[E, B]:
        """Continue with a stage that depends on this stage's value."""

        def new_compute():
            error, value = self._compute()
            if error is not None:
                return error, None
            return f(value)._compute()

        return Step(new_compute)

    def then(self, that: Step[E, B]) -> Step[E, B]:
        """Continue with `that`, discarding this stage's value."""
        return self.flat_map(lambda _: that)

    def tap(self, f: Callable[[A], object]) -> Step[E, A]:
        """
        Run a side effect on the value (write an artifact, log a metric) and keep the value.
        An exception raised by `f` becomes the step's error.
        """

        def new_compute():
            error, value = self._compute()
            if error is not None:
                return error, None
            try:
                f(value)
            except Exception as e:
                return e, None
            return None, value

        return Step(new_compute)

    def ensure(self, predicate: Callable[[A], bool], error: Callable[[A], Exception]) -> Step[E, A]:
        """Fail with `error(value)` unless `predicate(value)` holds."""

        def new_compute():
            err, value = self._compute()
            if err is not None:
                return err, None
            if not predicate(value):
                return error(value), None
            return None, value

        return Step(new_compute)

    def recover(self, handler: Callable[[E], Step[E, A]]) -> Step[E, A]:
        """Replace a failure with the stage returned by `handler`."""

        def new_compute():
            error, value = self._compute()
            if error is not None:
                return handler(error)._compute()
            return None, value

        return Step(new_compute)

    def match(self, failure: Callable[[E], B], success: Callable[[A], B]) -> Step[None, B]:
        """Fold both outcomes into a value; the resulting step cannot fail."""

        def fold_compute():
            error, value = self._compute()
            if error is not None:
                return None, failure(error)
            return None, success(value)

        return Step(fold_compute)

    @staticmethod
    def chain_all(*steps: Step[E, A]) -> Step[E, A] | Step[None, None]:
        """Run independent stages in order, keeping the last value."""
        if not steps:
            return Step.unit()

        result = steps[0]
        for step in steps[1:]:
            result = result.then(step)
        return result

    def run(self) -> E | Optional[A]:
        """Execute the pipeline. Returns the value, or the exception that stopped it."""
        error, value = self._compute()
        if error is not None:
            return error
        return value

    @staticmethod
    def log_debug(message: str, **kwargs) -> Step[None, None]:
        return Step.attempt(lambda: runtime.LOGGER.debug(message, **kwargs))

    @staticmethod
    def log_info(message: str, **kwargs) -> Step[None, None]:
        return Step.attempt(lambda: runtime.LOGGER.info(message, **kwargs))

    @staticmethod
    def log_warning(message: str, **kwargs) -> Step[None, None]:
        return Step.attempt(lambda: runtime.LOGGER.warning(message, **kwargs))

    @staticmethod
    def log_span(name: str, log_msg: str, operation: Step[E, A]) -> Step[E, A]:
        """
        Time `operation` and log `log_msg` with a bound `spans={name: "<ms>ms"}` field.

        The message is logged whether the operation succeeded or not, so slow failing
        stages (a diverging training run, say) still show up with their duration.
        """

        def execute_with_timing() -> tuple[E, A | None]:
            start_time = time.time_ns()
            error, value = operation._compute()
            elapsed_ms = (time.time_ns() - start_time) / 1_000_000
            span_logger = runtime.LOGGER.bind(spans={name: f"{elapsed_ms:.2f}ms"})
            span_logger.info(log_msg)
            return error, value

        return Step(execute_with_timing)
