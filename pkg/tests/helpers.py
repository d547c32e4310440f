"""Small schemas, datasets and model configs shared by the test modules."""

import numpy as np

from src.dtnlab.dataset import TabularDataset
from src.dtnlab.interactions import GDCN, MASKNET, MEMONET, MLP, FIMSpec
from src.dtnlab.models import ModelConfig
from src.dtnlab.schema import CATEGORICAL, CONTINUOUS, FeatureSchema, FeatureSpec

TINY_FIMS = (
    FIMSpec(GDCN, cross_layers=1),
    FIMSpec(MEMONET, codebook_size=32, code_dim=4),
    FIMSpec(MASKNET, mask_hidden=8, mask_bottleneck=4),
    FIMSpec(MLP, hidden=(8,)),
)
NO_MEMONET_FIMS = (
    FIMSpec(GDCN, cross_layers=1),
    FIMSpec(MASKNET, mask_hidden=8, mask_bottleneck=4),
    FIMSpec(MLP, hidden=(8,)),
)


def tiny_schema(embedding_dim: int = 4, dependent: bool = True) -> FeatureSchema:
    return FeatureSchema(
        features=(
            FeatureSpec("site", CATEGORICAL, vocab_size=6, embedding_dim=embedding_dim),
            FeatureSpec("device", CATEGORICAL, vocab_size=5, embedding_dim=embedding_dim),
            FeatureSpec("price", CONTINUOUS, embedding_dim=embedding_dim, mean=0.0, std=1.0),
            FeatureSpec("age", CONTINUOUS, embedding_dim=embedding_dim, mean=0.0, std=1.0),
        ),
        tasks=("ctr", "cvr"),
        task_dependencies={"cvr": "ctr"} if dependent else {},
    )


def random_dataset(schema: FeatureSchema, n_rows: int, seed: int = 0) -> TabularDataset:
    """Uniform ids, N(0, 1) values and coin-flip labels with both classes in every task."""
    rng = np.random.default_rng(seed)
    categorical = np.stack([rng.integers(0, f.vocab_size, n_rows) for f in schema.categorical], axis=1)
    continuous = rng.standard_normal((n_rows, len(schema.continuous)))
    labels = rng.integers(0, 2, (n_rows, len(schema.tasks)))
    labels[0], labels[1] = 0, 1
    return TabularDataset(schema, categorical, continuous, labels)


def tiny_config(**overrides) -> ModelConfig:
    values = dict(
        output_dim=8,
        tower_hidden=(8,),
        expert_hidden=(8,),
        num_experts=3,
        interaction=FIMSpec(MASKNET, mask_hidden=8, mask_bottleneck=4),
        shared_fims=TINY_FIMS,
        task_fims=TINY_FIMS,
    )
    values.update(overrides)
    return ModelConfig(**values)
