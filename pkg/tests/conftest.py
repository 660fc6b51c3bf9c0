"""Shared fixtures.

The golden-replication tests need the public college-proximity extract of
the NLS young-men cohort (one row per person, the standard ``card.csv``
header: lwage, educ, nearc4, smsa66, smsa, black, south66, south, exper,
expersq, reg661..reg669).  Point IVLATE_CARD_CSV at the file, or drop it
at data/card.csv; the tests skip with a notice when it is absent.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest

import ivlate as iv

CARD_ENV = "IVLATE_CARD_CSV"
CARD_DEFAULT = Path(__file__).resolve().parent.parent / "data" / "card.csv"

COLUMN_MAP = {"y": "lwage", "d": "educ", "z": "nearc4"}
TREATMENT_RULE = ">12"
# cell covariates in table order: SMSA66, SMSA76, Black, South66, South76
DISCRETE5 = ("smsa66", "smsa", "black", "south66", "south")
FULL_CONTROLS = (
    "exper", "expersq",
    "reg661", "reg662", "reg663", "reg664", "reg665",
    "reg666", "reg667", "reg668", "reg669",
    "black", "smsa66", "smsa", "south",
)


def card_csv_path() -> Path | None:
    env = os.environ.get(CARD_ENV)
    if env:
        return Path(env)
    if CARD_DEFAULT.exists():
        return CARD_DEFAULT
    return None


@pytest.fixture(scope="session")
def card_sample() -> iv.Sample:
    path = card_csv_path()
    if path is None or not path.exists():
        pytest.skip(
            "college-proximity CSV not found; set IVLATE_CARD_CSV or place "
            "it at data/card.csv to run the golden-replication tests"
        )
    sample = iv.load_sample(path, COLUMN_MAP, iv.TreatmentRule.parse(TREATMENT_RULE))
    missing = [c for c in DISCRETE5 + FULL_CONTROLS[:2] if c not in sample.covariates]
    if missing:
        pytest.skip(f"data file lacks expected columns {missing}")
    return sample


@pytest.fixture(scope="session")
def card_restricted(card_sample):
    """Restricted sample and its cell table (cells of fewer than 5 rows
    dropped), as used by the within-cell analyses."""
    table = iv.build_cells(card_sample, DISCRETE5)
    table, _ = iv.restrict_cells(table, 5)
    sample = iv.subset_to_cells(card_sample, table)
    return sample, table
