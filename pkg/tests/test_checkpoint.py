import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np
import torch

from src.dtnlab.checkpoint import CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint
from src.dtnlab.errors import CheckpointError
from src.dtnlab.gating import SHARED
from src.dtnlab.inspection import KeepList, trim_model
from src.dtnlab.interactions import parameter_count
from src.dtnlab.models import ARCHITECTURES, DTN, SFM, build_model, predict
from tests.helpers import random_dataset, tiny_config, tiny_schema


class TestCheckpoint(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "run" / "model.pt"
        self.schema = tiny_schema()
        self.data = random_dataset(self.schema, 40)

    def tearDown(self):
        self.tmp.cleanup()

    def assertSameModel(self, first, second):
        self.assertEqual(first.kind, second.kind)
        self.assertEqual(list(first.state_dict()), list(second.state_dict()))
        for (name, a), b in zip(first.state_dict().items(), second.state_dict().values()):
            self.assertTrue(torch.equal(a, b), name)
        np.testing.assert_array_equal(predict(first, self.data), predict(second, self.data))

    def test_round_trip_for_every_architecture(self):
        for kind in ARCHITECTURES:
            model = build_model(kind, self.schema, tiny_config(seed=5))
            save_checkpoint(model, self.path)
            self.assertSameModel(model, load_checkpoint(self.path))

    def test_round_trip_of_a_budgeted_model(self):
        model = build_model(SFM, self.schema, tiny_config(parameter_budget=12_000))
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(parameter_count(loaded), parameter_count(model))
        self.assertSameModel(model, loaded)

    def test_round_trip_of_a_trimmed_model(self):
        model = build_model(DTN, self.schema, tiny_config())
        trimmed = trim_model(model, KeepList({SHARED: [0, 2], "cvr": [1]}))
        save_checkpoint(trimmed, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.gates["cvr_other"].size, 6)
        self.assertSameModel(trimmed, loaded)

    def test_round_trip_of_a_double_model(self):
        model = build_model(DTN, self.schema, tiny_config()).double()
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(next(loaded.parameters()).dtype, torch.float64)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_unreadable_file(self):
        self.path.parent.mkdir(parents=True)
        self.path.write_bytes(b"not a checkpoint")
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_foreign_format(self):
        self.path.parent.mkdir(parents=True)
        torch.save({"format": "other/1"}, self.path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_shape_mismatch(self):
        save_checkpoint(build_model(DTN, self.schema, tiny_config()), self.path)
        payload = torch.load(self.path, weights_only=True)
        name = next(iter(payload["shapes"]))
        payload["shapes"][name] = [1, 2, 3]
        torch.save(payload, self.path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_parameters_that_do_not_fit(self):
        save_checkpoint(build_model(DTN, self.schema, tiny_config()), self.path)
        payload = torch.load(self.path, weights_only=True)
        self.assertEqual(payload["format"], CHECKPOINT_FORMAT)
        payload["config"]["output_dim"] = 4
        payload["config"]["mfi_sets"] = None
        torch.save(payload, self.path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)
