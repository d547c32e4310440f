import math
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np
import pandas as pd
import torch
from loguru import logger

from src.dtnlab.dataset import TabularDataset
from src.dtnlab.errors import SchemaError
from src.dtnlab.importance import fi_report, permutation_feature_importance
from src.dtnlab.models import DTN, SHARED_BOTTOM, build_model
from src.dtnlab.schema import CATEGORICAL, CONTINUOUS, FeatureSchema, FeatureSpec
from src.dtnlab.training import TrainConfig, train
from tests.helpers import NO_MEMONET_FIMS, random_dataset, tiny_config, tiny_schema


def signal_dataset(n_rows, seed):
    """ctr follows `clicks`, cvr follows `orders`, `noise` drives neither."""
    schema = FeatureSchema(
        features=(
            FeatureSpec("clicks", CONTINUOUS, embedding_dim=4, mean=0.0, std=1.0),
            FeatureSpec("orders", CONTINUOUS, embedding_dim=4, mean=0.0, std=1.0),
            FeatureSpec("noise", CATEGORICAL, vocab_size=5, embedding_dim=4),
        ),
        tasks=("ctr", "cvr"),
    )
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((n_rows, 2))
    labels = (values > 0).astype(np.int8)
    return TabularDataset(schema, rng.integers(0, 5, (n_rows, 1)), values, labels)


class TestPermutationImportance(TestCase):
    def setUp(self):
        self.schema = tiny_schema()
        self.data = random_dataset(self.schema, 150, seed=4)

    def test_a_feature_the_model_cannot_see_has_zero_importance(self):
        model = build_model(DTN, self.schema, tiny_config(shared_fims=NO_MEMONET_FIMS, task_fims=NO_MEMONET_FIMS))
        with torch.no_grad():
            model.embedding.tables["device"].weight.zero_()
        for task in self.schema.tasks:
            self.assertEqual(permutation_feature_importance(model, self.data, "device", task, repeats=3), 0.0)

    def test_same_seed_same_importance(self):
        model = build_model(DTN, self.schema, tiny_config())
        first = permutation_feature_importance(model, self.data, "price", "cvr", repeats=2, seed=9)
        second = permutation_feature_importance(model, self.data, "price", "cvr", repeats=2, seed=9)
        self.assertEqual(first, second)

    def test_unknown_feature_or_task(self):
        model = build_model(DTN, self.schema, tiny_config())
        with self.assertRaises(SchemaError):
            permutation_feature_importance(model, self.data, "colour", "ctr")
        with self.assertRaises(SchemaError):
            permutation_feature_importance(model, self.data, "price", "atc")

    def test_trained_model_depends_on_each_task_signal(self):
        train_data, test_data = signal_dataset(2000, 0), signal_dataset(800, 1)
        model = build_model(SHARED_BOTTOM, train_data.schema, tiny_config(expert_hidden=(16,)))
        model = train(model, train_data, test_data, TrainConfig(learning_rate=1e-2, epochs=10, batch_size=64)).model
        report = fi_report(model, test_data, repeats=2, seed=0)
        self.assertGreater(report.fi("clicks", "ctr"), 0.2)
        self.assertGreater(report.fi("orders", "cvr"), 0.2)
        self.assertLess(abs(report.fi("noise", "ctr")), 0.05)
        self.assertEqual(report.rank("clicks", "ctr"), 1)
        self.assertEqual(report.rank("orders", "cvr"), 1)


class TestFIReport(TestCase):
    def setUp(self):
        self.schema = tiny_schema()
        self.data = random_dataset(self.schema, 150, seed=5)
        self.model = build_model(DTN, self.schema, tiny_config())
        self.report = fi_report(self.model, self.data, repeats=1, seed=3)

    def test_ranks_are_permutations(self):
        for k in range(len(self.schema.tasks)):
            self.assertEqual(sorted(self.report.ranks[:, k]), [1, 2, 3, 4])
        order = np.argsort(-self.report.values[:, 0], kind="stable")
        self.assertEqual(self.report.ranks[order[0], 0], 1)

    def test_table_and_scatter(self):
        table = self.report.table()
        self.assertEqual(list(table.columns), ["feature", "FI_ctr", "FI_cvr", "Rank_ctr", "Rank_cvr"])
        self.assertEqual(list(table["feature"]), ["site", "device", "price", "age"])
        scatter = self.report.scatter()
        self.assertEqual(list(scatter.columns), ["feature", "x", "y"])
        np.testing.assert_array_equal(scatter["y"], table["FI_cvr"])

    def test_correlation(self):
        rho = self.report.correlation("ctr", "cvr")
        self.assertGreaterEqual(rho, -1.0)
        self.assertLessEqual(rho, 1.0)
        self.assertAlmostEqual(self.report.correlation("ctr", "cvr", ["site", "device", "price", "age"]), rho)

    def test_matches_the_single_feature_call(self):
        single = permutation_feature_importance(self.model, self.data, "age", "ctr", repeats=1, seed=3)
        self.assertAlmostEqual(self.report.fi("age", "ctr"), single, places=12)

    def test_subsets(self):
        report = fi_report(self.model, self.data, features=["site", "price"], tasks=["cvr"], repeats=1)
        self.assertEqual(report.table().shape, (2, 3))
        with self.assertRaises(SchemaError):
            fi_report(self.model, self.data, tasks=["atc"], repeats=1)

    def test_write(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.report.write(Path(tmp) / "fi")
            written = sorted(p.name for p in (Path(tmp) / "fi").iterdir())
            self.assertEqual(written, ["fi_correlation.csv", "fi_report.csv", "fi_scatter.csv"])
            correlation = pd.read_csv(Path(tmp) / "fi" / "fi_correlation.csv")
            self.assertEqual(list(correlation.columns), ["first", "second", "spearman"])

    def test_constant_importance_has_no_rank_correlation(self):
        model = build_model(DTN, self.schema, tiny_config(shared_fims=NO_MEMONET_FIMS, task_fims=NO_MEMONET_FIMS))
        with torch.no_grad():
            for parameter in model.embedding.parameters():
                parameter.zero_()
        messages = []
        sink = logger.add(messages.append, level="WARNING", format="{message}")
        try:
            report = fi_report(model, self.data, repeats=1)
        finally:
            logger.remove(sink)
        np.testing.assert_array_equal(report.values, 0.0)
        self.assertTrue(math.isnan(report.correlation("ctr", "cvr")))
        self.assertTrue(any("undefined" in m for m in messages))
        with tempfile.TemporaryDirectory() as tmp:
            report.write(tmp)
            self.assertTrue(pd.read_csv(Path(tmp) / "fi_correlation.csv")["spearman"].isna().all())
