import json
import math
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np
import torch

from src.dtnlab.dataset import TabularDataset
from src.dtnlab.errors import ConfigError, ShapeError, TrainingDiverged
from src.dtnlab.metrics import auc
from src.dtnlab.models import DTN, SHARED_BOTTOM, build_model, predict
from src.dtnlab.schema import CATEGORICAL, CONTINUOUS, FeatureSchema, FeatureSpec
from src.dtnlab.training import (LOSS_EPSILON, TrainConfig, compute_loss,
                                 make_optimizer, train)
from tests.helpers import random_dataset, tiny_config, tiny_schema


def separable_dataset(n_rows, seed):
    schema = FeatureSchema(
        features=(
            FeatureSpec("signal", CONTINUOUS, embedding_dim=4, mean=0.0, std=1.0),
            FeatureSpec("site", CATEGORICAL, vocab_size=4, embedding_dim=4),
        ),
        tasks=("ctr", "cvr"),
    )
    rng = np.random.default_rng(seed)
    signal = rng.standard_normal(n_rows)
    labels = np.stack([signal > 0, signal > 0.5], axis=1).astype(np.int8)
    return TabularDataset(schema, rng.integers(0, 4, (n_rows, 1)), signal[:, None], labels)


class TestTrainConfig(TestCase):
    def test_invalid_values_name_their_key(self):
        cases = {
            "training.learning_rate": dict(learning_rate=-1e-3),
            "training.batch_size": dict(batch_size=0),
            "training.epochs": dict(epochs=0),
            "training.eps": dict(eps=0.0),
            "training.loss_weights": dict(loss_weights={"ctr": 0.0, "cvr": 0.0}),
        }
        for key, kwargs in cases.items():
            with self.assertRaises(ConfigError) as caught:
                TrainConfig(**kwargs)
            self.assertEqual(caught.exception.key_path, key)

    def test_zero_learning_rate_is_accepted(self):
        self.assertEqual(TrainConfig(learning_rate=0.0).learning_rate, 0.0)

    def test_weights(self):
        self.assertEqual(TrainConfig().weights_for(["ctr", "cvr"]), {"ctr": 1.0, "cvr": 1.0})
        self.assertEqual(TrainConfig(loss_weights={"ctr": 2.0}).weights_for(["ctr", "cvr"]), {"ctr": 2.0, "cvr": 0.0})
        with self.assertRaises(ConfigError):
            TrainConfig(loss_weights={"atc": 1.0}).weights_for(["ctr", "cvr"])


class TestLoss(TestCase):
    def test_half_probability_costs_ln2(self):
        predictions = {"ctr": torch.full((4,), 0.5), "cvr": torch.full((4,), 0.5)}
        labels = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        breakdown = compute_loss(predictions, labels)
        self.assertAlmostEqual(float(breakdown.components["ctr"]), math.log(2), places=12)
        self.assertAlmostEqual(float(breakdown.total), 2 * math.log(2), places=12)

    def test_perfect_predictions_hit_the_clip_floor(self):
        labels = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        predictions = {"ctr": labels[:, 0].clone(), "cvr": labels[:, 1].clone()}
        breakdown = compute_loss(predictions, labels)
        for component in breakdown.components.values():
            self.assertLessEqual(float(component), -math.log(1 - LOSS_EPSILON) + 1e-12)

    def test_total_is_the_weighted_sum(self):
        torch.manual_seed(0)
        predictions = {"ctr": torch.rand(16), "cvr": torch.rand(16)}
        labels = torch.randint(0, 2, (16, 2)).float()
        breakdown = compute_loss(predictions, labels, {"ctr": 1.0, "cvr": 0.0})
        self.assertEqual(float(breakdown.total), float(breakdown.components["ctr"]))
        weighted = compute_loss(predictions, labels, {"ctr": 0.3, "cvr": 2.0})
        expected = 0.3 * weighted.components["ctr"] + 2.0 * weighted.components["cvr"]
        self.assertAlmostEqual(float(weighted.total), float(expected), places=12)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            compute_loss({"ctr": torch.rand(4)}, torch.zeros(4, 2))
        with self.assertRaises(ShapeError):
            compute_loss({"ctr": torch.rand(3), "cvr": torch.rand(4)}, torch.zeros(4, 2))


class TestOptimizer(TestCase):
    def test_first_adam_step(self):
        parameter = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        optimizer = make_optimizer([parameter], TrainConfig(learning_rate=0.01))
        (0.5 * parameter.sum()).backward()
        optimizer.step()
        self.assertAlmostEqual(parameter.item(), 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), places=12)


class TestTrain(TestCase):
    def setUp(self):
        self.schema = tiny_schema()
        self.train_data = random_dataset(self.schema, 200, seed=1)
        self.eval_data = random_dataset(self.schema, 100, seed=2)

    def test_zero_learning_rate_leaves_parameters_untouched(self):
        model = build_model(DTN, self.schema, tiny_config())
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(model, self.train_data, self.eval_data, TrainConfig(learning_rate=0.0, epochs=2, batch_size=64))
        for name, value in model.state_dict().items():
            self.assertTrue(torch.equal(value, before[name]), name)

    def test_history_is_written_per_epoch(self):
        model = build_model(DTN, self.schema, tiny_config())
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "history.jsonl"
            result = train(model, self.train_data, self.eval_data, TrainConfig(epochs=3, batch_size=64, patience=5), path)
            lines = [json.loads(line) for line in path.read_text().splitlines()]
        self.assertEqual(len(lines), len(result.history))
        self.assertEqual([r["epoch"] for r in lines], [1, 2, 3])
        self.assertEqual(set(lines[0]["task_losses"]), {"ctr", "cvr"})
        self.assertIn(result.best_epoch, (1, 2, 3))
        self.assertIsNotNone(result.best_auc)

    def test_early_stopping(self):
        model = build_model(SHARED_BOTTOM, self.schema, tiny_config())
        result = train(model, self.train_data, self.eval_data, TrainConfig(learning_rate=0.0, epochs=20, patience=2))
        self.assertEqual(len(result.history), 3)
        self.assertEqual(result.best_epoch, 1)

    def test_same_seed_same_weights(self):
        config = TrainConfig(epochs=2, batch_size=32, seed=7, deterministic=True)
        first = train(build_model(DTN, self.schema, tiny_config()), self.train_data, self.eval_data, config).model
        second = train(build_model(DTN, self.schema, tiny_config()), self.train_data, self.eval_data, config).model
        for (name, a), b in zip(first.state_dict().items(), second.state_dict().values()):
            self.assertTrue(torch.equal(a, b), name)

    def test_learns_a_separable_task(self):
        train_data, eval_data = separable_dataset(2000, 0), separable_dataset(1000, 1)
        model = build_model(SHARED_BOTTOM, train_data.schema, tiny_config(expert_hidden=(16,)))
        result = train(model, train_data, eval_data, TrainConfig(learning_rate=1e-2, epochs=15, batch_size=64, patience=5))
        scores = predict(result.model, eval_data)
        self.assertGreater(auc(scores[:, 0], eval_data.labels[:, 0]), 0.98)
        self.assertGreater(auc(scores[:, 1], eval_data.labels[:, 1]), 0.98)

    def test_divergence_names_the_layer(self):
        model = build_model(DTN, self.schema, tiny_config())
        with torch.no_grad():
            model.towers["ctr"].net[-1].bias.fill_(float("nan"))
        with self.assertRaises(TrainingDiverged) as caught:
            train(model, self.train_data, self.eval_data, TrainConfig(epochs=1))
        self.assertIn("tower:ctr", str(caught.exception))
        self.assertEqual(caught.exception.history, [])
        self.assertIs(caught.exception.model, model)

    def test_schema_mismatch(self):
        model = build_model(DTN, self.schema, tiny_config())
        other = separable_dataset(10, 0)
        with self.assertRaises(ShapeError):
            train(model, other, other, TrainConfig(epochs=1))
