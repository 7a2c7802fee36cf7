"""JSON-serializable experiment reports.

Reports are plain dicts under a thin dataclass: config echoes the inputs,
results holds numbers and small arrays, assertions maps check names to
booleans.  Everything except timing is a pure function of the inputs, so two
runs with the same config produce byte-identical reports once timing is
stripped.  NaN is mapped to null on write; numpy scalars and arrays are
converted to plain Python so round-trips through json are exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return None if not np.isfinite(val) and np.isnan(val) else val
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__} into a report")


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    results: dict
    assertions: dict
    timing: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.assertions.values())

    def to_json(self, indent: int = 2) -> str:
        payload = {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "config": _jsonable(self.config),
            "results": _jsonable(self.results),
            "assertions": {k: bool(v) for k, v in self.assertions.items()},
            "timing": _jsonable(self.timing),
        }
        return json.dumps(payload, indent=indent, sort_keys=False)

    @staticmethod
    def from_json(text: str) -> "ExperimentReport":
        payload = json.loads(text)
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {version!r}")
        return ExperimentReport(
            experiment=payload["experiment"],
            config=payload["config"],
            results=payload["results"],
            assertions=payload["assertions"],
            timing=payload.get("timing", {}),
            schema_version=version,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @staticmethod
    def load(path) -> "ExperimentReport":
        with open(path) as fh:
            return ExperimentReport.from_json(fh.read())
