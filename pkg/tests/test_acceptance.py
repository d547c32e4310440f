"""
End-to-end behavior checks that train real models. They take minutes, so they only run with
DTNLAB_SLOW=1; the Census-Income check additionally needs DTNLAB_CENSUS_DIR pointing at the
directory holding census-income.data and census-income.test.
"""

import os
import statistics
from dataclasses import replace
from pathlib import Path
from unittest import TestCase, skipUnless

import numpy as np

from src.dtnlab.census import load_census_income
from src.dtnlab.dataset import split_rows
from src.dtnlab.gating import SHARED
from src.dtnlab.importance import fi_report
from src.dtnlab.inspection import KeepList, extract_gate_weights, trim_model
from src.dtnlab.interactions import GDCN, MASKNET, MEMONET, MLP, FIMSpec
from src.dtnlab.metrics import evaluate_model, rela_impr
from src.dtnlab.models import (DTN, MMOE, PLE, SHARED_BOTTOM, ModelConfig,
                               build_model)
from src.dtnlab.schema import CATEGORICAL
from src.dtnlab.synthetic import (SyntheticFeature, SyntheticPair,
                                  SyntheticSpec, cross_fields,
                                  default_synthetic_spec, draw_validation,
                                  duplicate_task_labels, generate_synthetic)
from src.dtnlab.training import TrainConfig, train

SLOW = os.environ.get("DTNLAB_SLOW") == "1"
CENSUS_DIR = os.environ.get("DTNLAB_CENSUS_DIR")

SMALL_FIMS = (
    FIMSpec(GDCN, cross_layers=2),
    FIMSpec(MEMONET, codebook_size=256, code_dim=4),
    FIMSpec(MASKNET, mask_hidden=32, mask_bottleneck=8),
    FIMSpec(MLP, hidden=(32,)),
)
SMALL_MODEL = ModelConfig(
    output_dim=16,
    tower_hidden=(16,),
    expert_hidden=(32,),
    interaction=FIMSpec(MASKNET, mask_hidden=32, mask_bottleneck=8),
    shared_fims=SMALL_FIMS,
    task_fims=SMALL_FIMS,
)
SMALL_TRAINING = TrainConfig(learning_rate=3e-3, batch_size=256, epochs=8, patience=2, deterministic=True)


def mean_auc(model, data):
    return float(evaluate_model(model, data, "run")["auc"].mean())


@skipUnless(SLOW, "set DTNLAB_SLOW=1 to train models")
class TestDivergence(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.train_data, cls.test_data, cls.schema, cls.truth = generate_synthetic(
            12_000, 4_000, default_synthetic_spec(embedding_dim=8), seed=0
        )
        cls.valid_data = draw_validation(4_000, cls.schema, cls.truth, seed=0)
        cls.model_config = SMALL_MODEL.with_default_cross_fields(cross_fields(cls.truth))
        model = build_model(DTN, cls.schema, cls.model_config)
        cls.model = train(model, cls.train_data, cls.valid_data, SMALL_TRAINING).model
        cls.report = fi_report(cls.model, cls.test_data, repeats=3, seed=0)

    def test_task_exclusive_features(self):
        for feature in self.truth.exclusive_to("ctr"):
            self.assertGreater(self.report.fi(feature, "ctr"), 5 * max(self.report.fi(feature, "cvr"), 0.0), feature)

    def test_relevant_features_rank_in_opposite_orders(self):
        relevant = sorted(set(self.truth.relevant_features("ctr")) | set(self.truth.relevant_features("cvr")))
        self.assertLess(self.report.correlation("ctr", "cvr", relevant), 0.0)

    def test_duplicated_labels_agree(self):
        train_data = duplicate_task_labels(self.train_data, "ctr", "cvr")
        valid_data = duplicate_task_labels(self.valid_data, "ctr", "cvr")
        test_data = duplicate_task_labels(self.test_data, "ctr", "cvr")
        model = train(build_model(DTN, self.schema, self.model_config), train_data, valid_data, SMALL_TRAINING).model
        report = fi_report(model, test_data, features=self.truth.relevant_features("ctr"), repeats=3)
        self.assertGreaterEqual(report.correlation("ctr", "cvr"), 0.9)


def pair_only_spec():
    """Each task's label is driven by one categorical pair; two more categorical columns are noise."""
    return SyntheticSpec(
        tasks=("ctr", "cvr"),
        features=(
            SyntheticFeature("ctr_cross_a", CATEGORICAL, categories=4),
            SyntheticFeature("ctr_cross_b", CATEGORICAL, categories=4),
            SyntheticFeature("cvr_cross_a", CATEGORICAL, categories=4),
            SyntheticFeature("cvr_cross_b", CATEGORICAL, categories=4),
            SyntheticFeature("shared_signal", coefficients={"ctr": 0.3, "cvr": 0.3}),
            SyntheticFeature("noise_a", CATEGORICAL, categories=6),
            SyntheticFeature("noise_b", CATEGORICAL, categories=6),
        ),
        pairs=(
            SyntheticPair("ctr_cross_a", "ctr_cross_b", {"ctr": 3.0}),
            SyntheticPair("cvr_cross_a", "cvr_cross_b", {"cvr": 3.0}),
        ),
        embedding_dim=8,
    )


@skipUnless(SLOW, "set DTNLAB_SLOW=1 to train models")
class TestGateOracle(TestCase):
    def test_gate_prefers_the_module_matching_the_generating_pair(self):
        train_data, _, schema, truth = generate_synthetic(10_000, 10, pair_only_spec(), seed=0)

        def memonet(*fields):
            return FIMSpec(MEMONET, output_dim=16, codebook_size=256, code_dim=4, cross_fields=fields)

        sets = {
            SHARED: (FIMSpec(MLP, output_dim=16, hidden=(16,)),),
            "ctr": (memonet("ctr_cross_a", "ctr_cross_b"), memonet("noise_a", "noise_b")),
            "cvr": (memonet("cvr_cross_a", "cvr_cross_b"), memonet("noise_a", "noise_b")),
        }
        model = build_model(DTN, schema, replace(SMALL_MODEL, mfi_sets=sets))
        valid_data = draw_validation(3_000, schema, truth, seed=0)
        model = train(model, train_data, valid_data, replace(SMALL_TRAINING, learning_rate=1e-2)).model
        report = extract_gate_weights(model, train_data)
        for task in ("ctr", "cvr"):
            weights = report.gate(f"{task}_specific").sort_values("position")["mean_weight"].to_numpy()
            self.assertEqual(int(np.argmax(weights)), 0, task)


@skipUnless(SLOW, "set DTNLAB_SLOW=1 to train models")
class TestTrimByGateWeight(TestCase):
    def test_low_weight_module_costs_less(self):
        low_costs, high_costs = [], []
        finetune = replace(SMALL_TRAINING, epochs=1)
        for seed in range(3):
            train_data, test_data, schema, truth = generate_synthetic(8_000, 3_000, default_synthetic_spec(), seed=seed)
            valid_data = draw_validation(3_000, schema, truth, seed=seed)
            model_config = SMALL_MODEL.with_default_cross_fields(cross_fields(truth))
            model = build_model(DTN, schema, replace(model_config, seed=seed))
            model = train(model, train_data, valid_data, replace(SMALL_TRAINING, seed=seed)).model
            report = extract_gate_weights(model, train_data)
            means = [np.mean(report.module_weights(SHARED, i)) for i in range(len(SMALL_FIMS))]
            base = mean_auc(model, test_data)
            for index, costs in ((int(np.argmin(means)), low_costs), (int(np.argmax(means)), high_costs)):
                keep = [i for i in range(len(SMALL_FIMS)) if i != index]
                trimmed = trim_model(model, KeepList({SHARED: keep}))
                trimmed = train(trimmed, train_data, valid_data, finetune).model
                costs.append(base - mean_auc(trimmed, test_data))
        self.assertLess(sum(low_costs), sum(high_costs))


@skipUnless(SLOW and CENSUS_DIR, "set DTNLAB_SLOW=1 and DTNLAB_CENSUS_DIR to run the Census-Income check")
class TestCensusIncome(TestCase):
    PROTOCOL = TrainConfig(learning_rate=1e-3, batch_size=2048, epochs=20, patience=3, deterministic=True)

    @classmethod
    def setUpClass(cls):
        directory = Path(CENSUS_DIR)
        cls.train_data, test_file, cls.schema = load_census_income(
            directory / "census-income.data", directory / "census-income.test", embedding_dim=16
        )
        cls.valid_data, cls.test_data = split_rows(test_file, 0.5, seed=0)

    def median_aucs(self, kind):
        runs = []
        for seed in range(3):
            model = build_model(kind, self.schema, ModelConfig(output_dim=128, seed=seed))
            model = train(model, self.train_data, self.valid_data, replace(self.PROTOCOL, seed=seed)).model
            runs.append(evaluate_model(model, self.test_data, kind)["auc"].tolist())
        return [statistics.median(task) for task in zip(*runs)]

    def test_reference_aucs(self):
        shared_bottom = self.median_aucs(SHARED_BOTTOM)
        self.assertAlmostEqual(shared_bottom[0], 0.9361, delta=0.015)
        self.assertAlmostEqual(shared_bottom[1], 0.9915, delta=0.005)
        mmoe = self.median_aucs(MMOE)
        self.assertAlmostEqual(mmoe[0], 0.9410, delta=0.015)
        ple = self.median_aucs(PLE)
        self.assertAlmostEqual(ple[0], 0.9521, delta=0.015)
        dtn = self.median_aucs(DTN)
        self.assertGreaterEqual(rela_impr(dtn[0], shared_bottom[0]), 3.0)
        self.assertGreaterEqual(dtn[0], ple[0])
        self.assertGreaterEqual(ple[0], mmoe[0])
        self.assertGreaterEqual(mmoe[0], shared_bottom[0])
