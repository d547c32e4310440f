from dataclasses import dataclass
from unittest import TestCase, mock

from src.dtnlab.app import ExperimentApp
from src.dtnlab.effect import Step
from src.dtnlab.errors import ConfigError
from src.dtnlab.runtime import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, Runtime


@dataclass
class Settings:
    run: str
    epochs: int


class MockTrainer:
    def __init__(self, settings: Settings):
        self.settings = settings

    def fit(self):
        if self.settings.epochs < 1:
            return Step.fail(ConfigError("must be >= 1", key_path="training.epochs"))
        if self.settings.run == "diverge":
            return Step.fail(ValueError("loss is nan"))
        return Step.success(f"trained {self.settings.run} for {self.settings.epochs} epochs")


class FakeTrainCommand(ExperimentApp[Exception]):
    name = "fake-train"

    def __init__(self, settings: Settings, runtime: Runtime = None):
        super().__init__(runtime)
        self.trainer = MockTrainer(settings)

    def run(self) -> Step[Exception, None]:
        return (
            Step.log_info(f"Training {self.trainer.settings.run}")
            .then(self.trainer.fit())
            .flat_map(lambda message: Step.log_info(message))
        )


class TestExperimentApp(TestCase):
    def test_successful_command(self):
        status = Runtime.run_app(FakeTrainCommand(Settings("dtn", 2)))
        self.assertEqual(status, EXIT_OK)

    def test_failed_command(self):
        status = Runtime.run_app(FakeTrainCommand(Settings("diverge", 2)))
        self.assertEqual(status, EXIT_FAILURE)

    def test_config_error_status(self):
        status = Runtime.run_app(FakeTrainCommand(Settings("dtn", 0)))
        self.assertEqual(status, EXIT_CONFIG)

    @mock.patch("sys.exit")
    def test_run_app_with_exit(self, mock_exit):
        Runtime.run_app(FakeTrainCommand(Settings("diverge", 2)), exit_on_error=True)
        mock_exit.assert_called_once_with(EXIT_FAILURE)

    @mock.patch("sys.exit")
    def test_no_exit_on_success(self, mock_exit):
        Runtime.run_app(FakeTrainCommand(Settings("dtn", 1)), exit_on_error=True)
        mock_exit.assert_not_called()

    def test_runtime_is_a_singleton(self):
        first = Runtime()
        self.assertIs(Runtime(log_level="DEBUG"), first)
        self.assertIs(FakeTrainCommand(Settings("dtn", 1))._runtime, first)
