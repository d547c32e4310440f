"""
Sequencing helpers for sweeps: run one Step per feature, per run directory or per seed.
"""

from typing import Callable, TypeVar

from .effect import Step

A = TypeVar("A")
B = TypeVar("B")
E = TypeVar("E", bound=Exception | None)


def foreach(items: list[A], f: Callable[[A], Step[E, B]]) -> Step[E, list[B]]:
    """
    Apply `f` to every item in order and collect the values.

    Stops at the first failing item and returns its error; later items are never started.
    The items are only visited when the resulting step is run.
    """

    def process_all():
        results: list[B] = []
        for item in items or []:
            try:
                result = f(item).run()
            except Exception as e:
                return e, None
            if isinstance(result, Exception):
                return result, None
            results.append(result)
        return None, results

    return Step(process_all)


def partition(
    items: list[A], f: Callable[[A], Step[E, B]]
) -> Step[None, tuple[list[Exception], list[B]]]:
    """
    Apply `f` to every item, keeping failures and successes apart instead of stopping.

    Useful when a report should cover whatever runs could be loaded and list the rest.
    """

    def process_all():
        failures: list[Exception] = []
        successes: list[B] = []
        for item in items or []:
            try:
                result = f(item).run()
            except Exception as e:
                failures.append(e)
                continue
            if isinstance(result, Exception):
                failures.append(result)
            else:
                successes.append(result)
        return None, (failures, successes)

    return Step(process_all)
