"""
reports.py - CSV and JSON writers for experiment outputs

Every table row carries the (scenario, rule, estimator, m, seed) provenance
columns. Floats go through one fixed format so that identical inputs give
identical bytes.
"""
from typing import Any, Dict, Optional, Union
import json
import logging
import os

import numpy as np
import pandas as pd
import scipy

from config import CSV_FLOAT_FORMAT, LAB_VERSION

logger = logging.getLogger(__name__)

PROVENANCE_COLUMNS = ["scenario", "rule", "estimator", "m", "seed"]


def with_provenance(frame: pd.DataFrame, scenario: str, rule: str, estimator: str,
                    m: Optional[int], seed: int) -> pd.DataFrame:
    frame = frame.copy()
    values = {"scenario": scenario, "rule": rule, "estimator": estimator,
              "m": "" if m is None else m, "seed": seed}
    for position, column in enumerate(PROVENANCE_COLUMNS):
        if column in frame.columns:
            continue
        frame.insert(position, column, values[column])
    return frame


def package_versions() -> Dict[str, str]:
    return {"vcglab": LAB_VERSION, "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__}


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


class ReportWriter:
    """Collects tables and documents, then writes them all at once."""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.tables: Dict[str, pd.DataFrame] = {}
        self.documents: Dict[str, Dict[str, Any]] = {}

    def add_table(self, filename: str, frame: pd.DataFrame):
        self.tables[filename] = frame

    def add_document(self, filename: str, tree: Dict[str, Any]):
        self.documents[filename] = _jsonable(tree)

    def write(self) -> Dict[str, str]:
        os.makedirs(self.output_dir, exist_ok=True)
        written = {}
        for filename, frame in self.tables.items():
            path = os.path.join(self.output_dir, filename)
            frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
            written[filename] = path
        for filename, tree in self.documents.items():
            path = os.path.join(self.output_dir, filename)
            with open(path, 'w') as f:
                json.dump(tree, f, indent=2, sort_keys=True)
                f.write("\n")
            written[filename] = path
        logger.info(f"Wrote {len(written)} file(s) to {self.output_dir}")
        return written


def read_summary(path: Union[str, os.PathLike]) -> Dict[str, Any]:
    with open(path, 'r') as f:
        return json.load(f)
