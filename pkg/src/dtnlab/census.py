"""
UCI Census-Income (KDD) ingestion in the two-task setup used by the MMoE benchmark lineage:
task `income` (over 50K) and task `marital` (never married), 40 predictors.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import TabularDataset
from .errors import DataFormatError
from .runtime import LOGGER
from .schema import (CATEGORICAL, CONTINUOUS, DEFAULT_EMBEDDING_DIM, OOV_ID,
                     FeatureSchema, FeatureSpec)

COLUMNS = [
    "age", "class_worker", "det_ind_code", "det_occ_code", "education", "wage_per_hour",
    "hs_college", "marital_stat", "major_ind_code", "major_occ_code", "race", "hisp_origin",
    "sex", "union_member", "unemp_reason", "full_or_part_emp", "capital_gains",
    "capital_losses", "stock_dividends", "tax_filer_stat", "region_prev_res",
    "state_prev_res", "det_hh_fam_stat", "det_hh_summ", "instance_weight", "mig_chg_msa",
    "mig_chg_reg", "mig_move_reg", "mig_same", "mig_prev_sunbelt", "num_emp",
    "fam_under_18", "country_father", "country_mother", "country_self", "citizenship",
    "own_or_self", "vet_question", "vet_benefits", "weeks_worked", "year", "income_50k",
]

CATEGORICAL_COLUMNS = [
    "class_worker", "det_ind_code", "det_occ_code", "education", "hs_college",
    "major_ind_code", "major_occ_code", "race", "hisp_origin", "sex", "union_member",
    "unemp_reason", "full_or_part_emp", "tax_filer_stat", "region_prev_res",
    "state_prev_res", "det_hh_fam_stat", "det_hh_summ", "mig_chg_msa", "mig_chg_reg",
    "mig_move_reg", "mig_same", "mig_prev_sunbelt", "fam_under_18", "country_father",
    "country_mother", "country_self", "citizenship", "vet_question",
]

INCOME_COLUMN = "income_50k"
MARITAL_COLUMN = "marital_stat"
INCOME_POSITIVE = "50000+."
NEVER_MARRIED = "Never married"
TASKS = ("income", "marital")

PREDICTORS = [c for c in COLUMNS if c not in (INCOME_COLUMN, MARITAL_COLUMN)]
CONTINUOUS_COLUMNS = [c for c in PREDICTORS if c not in CATEGORICAL_COLUMNS]
OVERFLOW_COLUMN = "_overflow"


def _read_raw(path: str | Path) -> pd.DataFrame:
    # the extra trailing column catches rows with one field too many, including the first
    try:
        frame = pd.read_csv(
            path,
            header=None,
            names=[*COLUMNS, OVERFLOW_COLUMN],
            index_col=False,
            dtype=str,
            skipinitialspace=True,
            keep_default_na=False,
        )
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DataFormatError(f"{path}: {e}", row=int(match.group(1)) if match else None) from e
    malformed = (frame[COLUMNS].isna().any(axis=1) | frame[OVERFLOW_COLUMN].notna()).to_numpy()
    if malformed.any():
        raise DataFormatError(
            f"{path}: expected {len(COLUMNS)} comma-separated fields",
            row=int(np.argmax(malformed)) + 1,
        )
    return frame.drop(columns=OVERFLOW_COLUMN)


def _numeric(frame: pd.DataFrame, path: str | Path) -> pd.DataFrame:
    numeric = frame[CONTINUOUS_COLUMNS].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        column = numeric.columns[numeric.iloc[row].isna().to_numpy()][0]
        raise DataFormatError(
            f"{path}: non-numeric value {frame.iloc[row][column]!r} in {column}", row=row + 1
        )
    return numeric.astype(np.float64)


def _labels(frame: pd.DataFrame, never_married_positive: bool) -> np.ndarray:
    income = (frame[INCOME_COLUMN].str.strip() == INCOME_POSITIVE).to_numpy()
    never_married = (frame[MARITAL_COLUMN].str.strip() == NEVER_MARRIED).to_numpy()
    marital = never_married if never_married_positive else ~never_married
    return np.stack([income, marital], axis=1).astype(np.int8)


def _encode(
    frame: pd.DataFrame,
    numeric: pd.DataFrame,
    schema: FeatureSchema,
    never_married_positive: bool,
) -> TabularDataset:
    categorical = np.zeros((len(frame), len(schema.categorical)), dtype=np.int64)
    for column, spec in enumerate(schema.categorical):
        lookup = {value: i + 1 for i, value in enumerate(spec.vocabulary)}
        categorical[:, column] = frame[spec.name].map(lookup).fillna(OOV_ID).to_numpy(np.int64)
    continuous = np.zeros((len(frame), len(schema.continuous)), dtype=np.float32)
    for column, spec in enumerate(schema.continuous):
        continuous[:, column] = (numeric[spec.name].to_numpy() - spec.mean) / spec.std
    return TabularDataset(
        schema=schema,
        categorical_ids=categorical,
        continuous_values=continuous,
        labels=_labels(frame, never_married_positive),
    )


def load_census_income(
    train_path: str | Path,
    test_path: str | Path,
    never_married_positive: bool = True,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
) -> tuple[TabularDataset, TabularDataset, FeatureSchema]:
    """
    Load `census-income.data` / `census-income.test`.

    Vocabularies and standardization statistics come from the train split only; test
    values unseen in train map to the out-of-vocabulary id 0. "?" is an ordinary
    category value.
    """
    train_raw, test_raw = _read_raw(train_path), _read_raw(test_path)
    train_numeric, test_numeric = _numeric(train_raw, train_path), _numeric(test_raw, test_path)

    features = []
    for name in PREDICTORS:
        if name in CATEGORICAL_COLUMNS:
            vocabulary = tuple(sorted(train_raw[name].unique()))
            features.append(
                FeatureSpec(
                    name=name,
                    kind=CATEGORICAL,
                    vocab_size=len(vocabulary) + 1,
                    embedding_dim=embedding_dim,
                    vocabulary=vocabulary,
                )
            )
        else:
            values = train_numeric[name]
            std = float(values.std(ddof=0))
            features.append(
                FeatureSpec(
                    name=name,
                    kind=CONTINUOUS,
                    embedding_dim=embedding_dim,
                    mean=float(values.mean()),
                    std=std if std > 0 else 1.0,
                )
            )
    schema = FeatureSchema(features=tuple(features), tasks=TASKS)

    train = _encode(train_raw, train_numeric, schema, never_married_positive)
    test = _encode(test_raw, test_numeric, schema, never_married_positive)
    LOGGER.bind(train_rows=len(train), test_rows=len(test)).info(
        f"Loaded census-income with {len(schema.features)} predictors"
    )
    return train, test, schema
