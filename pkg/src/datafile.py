# GroupWeightOpt
# Copyright (C) 2024  GroupWeightOpt contributors

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as
# published by the Free Software Foundation, either version 3 of the
# License, or (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.

# You should have received a copy of the GNU Affero General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

"""Files read and written by the command line interface.

Dataset CSV has the header `y,g,x0,...,x{d-1}`. Shifts, weights and
manifests are JSON, optimization traces JSON lines.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

import config
import core
import log_config
import misc
from bilevel import BilevelResult, TraceRecord
from dataset import GroupedDataset
from weights import ShiftSpec, SimplexWeights

log = log_config.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DatasetSchema:
    """Expected shape of a dataset file. None accepts any value."""

    d: Optional[int] = None
    n_groups: Optional[int] = None

    def header(self, d: int) -> list[str]:
        return ["y", "g"] + [f"x{j}" for j in range(d)]


def _check_header(header: list[str], schema: DatasetSchema) -> int:
    if header[:2] != ["y", "g"]:
        raise core.SchemaError(f"header must start with y,g, got {','.join(header)}")
    d = len(header) - 2
    expected = schema.header(d)
    if header != expected:
        raise core.SchemaError(
            f"feature columns must be x0..x{d - 1}, got {','.join(header[2:])}"
        )
    if d < 1:
        raise core.SchemaError("no feature columns")
    if schema.d is not None and d != schema.d:
        raise core.SchemaError(
            f"expected {schema.d} feature columns, the file has {d}"
        )
    return d


def _parse_float(value: str, line: int, column: str) -> float:
    try:
        f = float(value)
    except ValueError as e:
        raise core.ParseError(f"column {column}: not a number {value!r}", line) from e
    if not math.isfinite(f):
        raise core.DataValueError(f"column {column}: non-finite value {value}", line)
    return f


def _parse_label(value: str, line: int) -> int:
    f = _parse_float(value, line, "y")
    if f not in (0.0, 1.0):
        raise core.DataValueError(f"y must be 0 or 1, got {value}", line)
    return int(f)


def _parse_group(value: str, line: int, n_groups: Optional[int]) -> int:
    try:
        g = int(value)
    except ValueError as e:
        raise core.ParseError(f"column g: not an integer {value!r}", line) from e
    if g < 1:
        raise core.DataValueError(f"g must be a positive integer, got {value}", line)
    if n_groups is not None and g > n_groups:
        raise core.DataValueError(f"g must be at most {n_groups}, got {value}", line)
    return g


def load_csv(path: Path, schema: Optional[DatasetSchema] = None) -> GroupedDataset:
    """Read a dataset file, row order preserved.

    Raises:
        core.SchemaError: Missing, extra or misnamed columns.
        core.ParseError: Unparsable entry or wrong number of fields.
        core.DataValueError: Label, group or feature out of range.
    """
    schema = schema or DatasetSchema()
    path = Path(path)
    targets: list[int] = []
    groups: list[int] = []
    rows: list[list[float]] = []
    with open(path, encoding="utf8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise core.SchemaError(f"{path} is empty") from None
        d = _check_header(header, schema)
        for fields in reader:
            line = reader.line_num
            if not fields:
                continue
            if len(fields) != d + 2:
                raise core.ParseError(
                    f"expected {d + 2} fields, got {len(fields)}", line
                )
            targets.append(_parse_label(fields[0], line))
            groups.append(_parse_group(fields[1], line, schema.n_groups))
            rows.append(
                [_parse_float(v, line, f"x{j}") for j, v in enumerate(fields[2:])]
            )
    if not rows:
        raise core.SizeError(f"{path} has no observations")
    log.info(f"Read {len(rows)} observations with {d} features from {path}")
    return GroupedDataset(
        np.array(rows, dtype=float),
        np.array(targets, dtype=float),
        np.array(groups, dtype=int),
        schema.n_groups,
    )


def dataset_csv(data: GroupedDataset) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(DatasetSchema().header(data.d))
    for y, g, x in zip(data.targets, data.groups, data.features):
        # repr is the shortest string that parses back to the same float.
        writer.writerow([int(y), int(g)] + [repr(float(v)) for v in x])
    return out.getvalue()


def write_csv(path: Path, data: GroupedDataset) -> Path:
    return misc.atomic_write_text(path, dataset_csv(data))


def write_table(
    path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]
) -> Path:
    """Plain CSV table, floats in shortest round trip notation."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row]
        )
    return misc.atomic_write_text(path, out.getvalue())


def _read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise core.ParseError(f"{path}: {e.msg}", e.lineno) from e


def read_shift(path: Path) -> ShiftSpec:
    """Read `{"p_train": [...], "p_test": [...]}`."""
    obj = _read_json(path)
    if not isinstance(obj, dict) or set(obj) != {"p_train", "p_test"}:
        raise core.SchemaError(f"{path} must have exactly the keys p_train, p_test")
    return ShiftSpec(np.array(obj["p_train"]), np.array(obj["p_test"]))


def write_shift(path: Path, shift: ShiftSpec) -> Path:
    return misc.atomic_write_text(
        path,
        misc.stable_json({"p_train": shift.p_train, "p_test": shift.p_test}) + "\n",
    )


def read_run_config(path: Path) -> dict[str, Any]:
    """Read a JSON run configuration, keys are lower case option names."""
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise core.SchemaError(f"{path} must contain a JSON object")
    return {str(k).replace("-", "_").lower(): v for k, v in obj.items()}


def trace_jsonl(trace: Sequence[TraceRecord]) -> str:
    return "".join(misc.stable_json(record.to_dict()) + "\n" for record in trace)


def write_trace(path: Path, trace: Sequence[TraceRecord]) -> Path:
    return misc.atomic_write_text(path, trace_jsonl(trace))


def read_trace(path: Path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf8") as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise core.ParseError(e.msg, i) from e
    return records


def weights_dict(result: BilevelResult) -> dict[str, Any]:
    kind = "p" if isinstance(result.weights, SimplexWeights) else "v"
    initial = (
        result.initial_weights.p
        if isinstance(result.initial_weights, SimplexWeights)
        else result.initial_weights.v
    )
    values = (
        result.weights.p
        if isinstance(result.weights, SimplexWeights)
        else result.weights.v
    )
    return {
        "method": result.method.value,
        "kind": kind,
        "weights": values,
        "initial_weights": initial,
        "theta": result.theta.theta,
        "initial_theta": result.initial_theta.theta,
        "objective": result.objective,
        "initial_objective": result.initial_objective,
        "selected_step": result.selected_step,
        "steps": len(result.trace) - 1,
        "q": None if result.q is None else result.q.q,
        "pinned_group": result.pinned_group,
        "inferred_labels": result.inferred_labels,
        "merges": result.merges,
        "jtt_upweight": result.jtt_upweight,
    }


def write_weights(path: Path, result: BilevelResult) -> Path:
    return misc.atomic_write_text(
        path, misc.stable_json(weights_dict(result), indent=2) + "\n"
    )


@dataclasses.dataclass
class RunManifest:
    """Provenance of one CLI run. Every emitted file is listed with its
    sha256 digest."""

    command: str
    config: dict[str, Any]
    seeds: list[int]
    inputs: dict[str, str] = dataclasses.field(default_factory=dict)
    outputs: dict[str, str] = dataclasses.field(default_factory=dict)
    version: str = config.VERSION
    commit: str = dataclasses.field(
        default_factory=lambda: misc.get_current_commit_hash(default="undetermined")
    )
    # Set if the run failed; outputs then list what was written before.
    error: Optional[str] = None

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = misc.sha256_file(path)

    def add_output(self, path: Path) -> None:
        self.outputs[Path(path).name] = misc.sha256_file(path)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "program": config.PROGRAM,
            "version": self.version,
            "commit": self.commit,
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        if self.error is not None:
            d["error"] = self.error
        return d

    def write(self, path: Path) -> Path:
        return misc.atomic_write_text(
            path, misc.stable_json(self.to_dict(), indent=2) + "\n"
        )

    def verify(self, directory: Path) -> list[str]:
        """Names of outputs whose digest does not match the file."""
        return [
            name
            for name, digest in self.outputs.items()
            if misc.sha256_file(Path(directory, name)) != digest
        ]
