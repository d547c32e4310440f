import sys
from dataclasses import dataclass
from unittest import TestCase

from src.dtnlab.effect import Step
from src.dtnlab.runtime import Runtime


@dataclass
class Checkpoint:
    run: str
    epoch: int


class StorageError(Exception):
    pass


class TestStep(TestCase):
    runtime = Runtime(sinks=[{"sink": sys.stderr, "level": "INFO"}])

    def test_success(self):
        self.assertEqual(Step.success(42).run(), 42)

    def test_fail(self):
        result = Step.fail(ValueError("boom")).run()
        self.assertIsInstance(result, ValueError)
        self.assertEqual(str(result), "boom")

    def test_attempt_success(self):
        self.assertEqual(Step.attempt(lambda: 1 + 1).run(), 2)

    def test_attempt_failure(self):
        def load():
            raise StorageError("disk full")

        result = Step.attempt(load).run()
        self.assertIsInstance(result, StorageError)

    def test_nothing_runs_before_run(self):
        calls = []
        step = Step.attempt(lambda: calls.append("loaded")).map(lambda _: calls.append("mapped"))
        self.assertEqual(calls, [])
        step.run()
        self.assertEqual(calls, ["loaded", "mapped"])

    def test_map_success(self):
        self.assertEqual(Step.success(3).map(lambda x: x * 2).run(), 6)

    def test_map_failure(self):
        result = Step.fail(ValueError("bad")).map(lambda x: x * 2).run()
        self.assertIsInstance(result, ValueError)

    def test_flat_map_success(self):
        step = Step.success(Checkpoint("dtn", 3)).flat_map(lambda c: Step.success(c.epoch + 1))
        self.assertEqual(step.run(), 4)

    def test_flat_map_failure(self):
        step = Step.success(1).flat_map(lambda _: Step.fail(StorageError("missing")))
        self.assertIsInstance(step.run(), StorageError)

    def test_then(self):
        self.assertEqual(Step.success(1).then(Step.success("next")).run(), "next")

    def test_tap_keeps_value(self):
        seen = []
        self.assertEqual(Step.success(5).tap(seen.append).run(), 5)
        self.assertEqual(seen, [5])

    def test_tap_error_becomes_failure(self):
        def write(_):
            raise StorageError("read-only")

        self.assertIsInstance(Step.success(5).tap(write).run(), StorageError)

    def test_ensure(self):
        positive = lambda s: s.ensure(lambda v: v > 0, lambda v: ValueError(f"{v} is not positive"))
        self.assertEqual(positive(Step.success(2)).run(), 2)
        result = positive(Step.success(-1)).run()
        self.assertIsInstance(result, ValueError)
        self.assertEqual(str(result), "-1 is not positive")

    def test_recover_success(self):
        step = Step.success(1).recover(lambda e: Step.success(0))
        self.assertEqual(step.run(), 1)

    def test_recover_failure(self):
        step = Step.fail(StorageError("gone")).recover(lambda e: Step.success(f"recovered from {e}"))
        self.assertEqual(step.run(), "recovered from gone")

    def test_match(self):
        fold = lambda s: s.match(lambda e: f"failed: {e}", lambda v: f"got {v}")
        self.assertEqual(fold(Step.success(7)).run(), "got 7")
        self.assertEqual(fold(Step.fail(ValueError("x"))).run(), "failed: x")

    def test_chain_all(self):
        order = []
        step = Step.chain_all(
            Step.attempt(lambda: order.append(1)),
            Step.attempt(lambda: order.append(2)),
            Step.success("last"),
        )
        self.assertEqual(step.run(), "last")
        self.assertEqual(order, [1, 2])

    def test_chain_all_empty(self):
        self.assertIsNone(Step.chain_all().run())

    def test_chain_all_stops_at_failure(self):
        order = []
        step = Step.chain_all(
            Step.attempt(lambda: order.append(1)),
            Step.fail(ValueError("stop")),
            Step.attempt(lambda: order.append(3)),
        )
        self.assertIsInstance(step.run(), ValueError)
        self.assertEqual(order, [1])

    def test_log_steps(self):
        step = Step.log_debug("debug").then(Step.log_info("info")).then(Step.log_warning("warning"))
        self.assertIsNone(step.run())

    def test_log_span_passes_value_and_error(self):
        self.assertEqual(Step.log_span("load", "Loaded", Step.success(9)).run(), 9)
        failed = Step.log_span("load", "Loaded", Step.fail(StorageError("gone"))).run()
        self.assertIsInstance(failed, StorageError)

    def test_pipeline(self):
        def load(run: str) -> Step:
            if run == "missing":
                return Step.fail(StorageError(f"no checkpoint for {run}"))
            return Step.success(Checkpoint(run, 4))

        def resume(run: str) -> Step:
            return (
                load(run)
                .ensure(lambda c: c.epoch < 10, lambda c: ValueError("already finished"))
                .map(lambda c: Checkpoint(c.run, c.epoch + 1))
                .flat_map(lambda c: Step.log_info(f"resuming {c.run} at {c.epoch}").then(Step.success(c)))
            )

        self.assertEqual(resume("dtn").run(), Checkpoint("dtn", 5))
        self.assertIsInstance(resume("missing").run(), StorageError)
