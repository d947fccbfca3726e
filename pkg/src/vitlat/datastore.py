"""Measurement records: schema, CSV/JSONL ingestion, persistence and splits."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import DataError

CSV_COLUMNS = (
    "model_id", "node_id", "op_kind", "device", "framework", "core_config",
    "precision", "target", "latency_us", "flop_count", "traffic_bytes",
)
FRAMEWORKS = ("torch_mobile", "tflite")
PRECISIONS = ("fp32", "int8")
TARGETS = ("cpu", "gpu")


@dataclass(frozen=True)
class Context:
    device: str
    framework: str = "torch_mobile"
    core_config: str = "1xbig"
    precision: str = "fp32"
    target: str = "cpu"

    def key(self) -> str:
        return "/".join((self.device, self.framework, self.core_config, self.precision, self.target))

    def to_dict(self) -> dict:
        return {
            "device": self.device, "framework": self.framework, "core_config": self.core_config,
            "precision": self.precision, "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Context":
        return cls(d["device"], d["framework"], d["core_config"], d["precision"], d["target"])


@dataclass(frozen=True)
class MeasurementRecord:
    model_id: str
    node_id: int
    op_kind: str
    context: Context
    latency_us: Decimal
    flop_count: Optional[int] = None
    traffic_bytes: Optional[int] = None
    # values of unknown trailing columns, kept verbatim
    extra: tuple = ()

    @property
    def latency(self) -> float:
        return float(self.latency_us)

    def key(self) -> tuple:
        return self.model_id, self.node_id, self.context


@dataclass
class MeasurementSet:
    records: list = field(default_factory=list)
    extra_columns: tuple = ()
    # join problems found against op graphs at ingestion time
    flags: list = field(default_factory=list, compare=False)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def model_ids(self) -> list:
        return sorted({r.model_id for r in self.records})

    def contexts(self) -> list:
        return sorted({r.context for r in self.records}, key=Context.key)

    def by_model(self) -> dict:
        out = {}
        for r in self.records:
            out.setdefault(r.model_id, []).append(r)
        return out

    def select(self, model_ids) -> "MeasurementSet":
        keep = set(model_ids)
        return MeasurementSet([r for r in self.records if r.model_id in keep], self.extra_columns)


def format_latency(value: float) -> Decimal:
    """Decimal microseconds at 0.1 ns resolution, never below the resolution."""
    d = Decimal(f"{value:.4f}")
    return d if d > 0 else Decimal("0.0001")


def _opt_int(value, name: str, row: int) -> Optional[int]:
    if value is None or value == "":
        return None
    if isinstance(value, bool) or isinstance(value, float):
        raise DataError(f"row {row}: {name} {value!r} is not an integer")
    try:
        return int(value)
    except ValueError:
        raise DataError(f"row {row}: {name} {value!r} is not an integer") from None


def _check_fields(row: int, values: dict) -> None:
    for name in ("model_id", "op_kind", "device", "core_config"):
        if not values[name]:
            raise DataError(f"row {row}: empty {name}")
    if values["framework"] not in FRAMEWORKS:
        raise DataError(f"row {row}: framework {values['framework']!r} not in {FRAMEWORKS}")
    if values["precision"] not in PRECISIONS:
        raise DataError(f"row {row}: precision {values['precision']!r} not in {PRECISIONS}")
    if values["target"] not in TARGETS:
        raise DataError(f"row {row}: target {values['target']!r} not in {TARGETS}")


def _record_from_values(row: int, values: dict, extra: tuple) -> MeasurementRecord:
    _check_fields(row, values)
    try:
        node_id = int(values["node_id"])
    except (TypeError, ValueError):
        raise DataError(f"row {row}: node_id {values['node_id']!r} is not an integer") from None
    try:
        latency = Decimal(str(values["latency_us"]))
    except InvalidOperation:
        raise DataError(f"row {row}: latency_us {values['latency_us']!r} is not a decimal") from None
    if not latency.is_finite() or latency <= 0:
        raise DataError(f"row {row}: latency_us must be > 0, got {values['latency_us']}")
    ctx = Context(values["device"], values["framework"], values["core_config"], values["precision"], values["target"])
    return MeasurementRecord(
        model_id=values["model_id"],
        node_id=node_id,
        op_kind=values["op_kind"],
        context=ctx,
        latency_us=latency,
        flop_count=_opt_int(values["flop_count"], "flop_count", row),
        traffic_bytes=_opt_int(values["traffic_bytes"], "traffic_bytes", row),
        extra=extra,
    )


def _reject_duplicates(records) -> None:
    seen = {}
    for i, r in enumerate(records, 1):
        k = r.key()
        if k in seen:
            raise DataError(
                f"row {i}: duplicate (model_id, node_id, context) {r.model_id}/{r.node_id} first seen at row {seen[k]}"
            )
        seen[k] = i


def parse_csv(text: str) -> MeasurementSet:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return MeasurementSet()
    n = len(CSV_COLUMNS)
    if tuple(header[:n]) != CSV_COLUMNS:
        raise DataError(f"header must start with {','.join(CSV_COLUMNS)}; got {','.join(header[:n])}")
    extra_cols = tuple(header[n:])
    records = []
    for i, row in enumerate(reader, 1):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"row {i}: expected {len(header)} fields, got {len(row)}")
        values = dict(zip(CSV_COLUMNS, row[:n]))
        records.append(_record_from_values(i, values, tuple(row[n:])))
    _reject_duplicates(records)
    return MeasurementSet(records, extra_cols)


def parse_jsonl(text: str) -> MeasurementSet:
    records = []
    extra_cols = None
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"row {i}: invalid JSON ({exc.msg})") from None
        missing = [c for c in CSV_COLUMNS if c not in d]
        if missing:
            raise DataError(f"row {i}: missing fields {missing}")
        extra = d.get("extra", {})
        cols = tuple(extra)
        if extra_cols is None:
            extra_cols = cols
        elif cols != extra_cols:
            raise DataError(f"row {i}: extra fields {cols} differ from {extra_cols}")
        records.append(_record_from_values(i, d, tuple(extra.values())))
    _reject_duplicates(records)
    return MeasurementSet(records, extra_cols or ())


def ingest(path, format: Optional[str] = None, graphs=None) -> MeasurementSet:
    """Load and validate a measurement file (``csv`` or ``jsonl``).

    When ``graphs`` is given, records that do not resolve to a node of the
    same kind are listed in ``flags``.
    """
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix == ".jsonl" else "csv")
    text = path.read_text()
    if fmt == "csv":
        ms = parse_csv(text)
    elif fmt == "jsonl":
        ms = parse_jsonl(text)
    else:
        raise DataError(f"unknown format {fmt!r}")
    if graphs is not None:
        ms.flags = check_join(ms, graphs)
    return ms


def _row(r: MeasurementRecord) -> list:
    c = r.context
    return [
        r.model_id, str(r.node_id), r.op_kind, c.device, c.framework, c.core_config, c.precision,
        c.target, str(r.latency_us),
        "" if r.flop_count is None else str(r.flop_count),
        "" if r.traffic_bytes is None else str(r.traffic_bytes),
        *r.extra,
    ]


def to_csv(ms: MeasurementSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + tuple(ms.extra_columns))
    for r in ms.records:
        w.writerow(_row(r))
    return buf.getvalue()


def to_jsonl(ms: MeasurementSet) -> str:
    lines = []
    for r in ms.records:
        c = r.context
        d = {
            "model_id": r.model_id, "node_id": r.node_id, "op_kind": r.op_kind,
            "device": c.device, "framework": c.framework, "core_config": c.core_config,
            "precision": c.precision, "target": c.target, "latency_us": str(r.latency_us),
            "flop_count": r.flop_count, "traffic_bytes": r.traffic_bytes,
        }
        if ms.extra_columns:
            d["extra"] = dict(zip(ms.extra_columns, r.extra))
        lines.append(json.dumps(d))
    return "".join(line + "\n" for line in lines)


def serialize(ms: MeasurementSet, format: str = "csv") -> str:
    if format == "csv":
        return to_csv(ms)
    if format == "jsonl":
        return to_jsonl(ms)
    raise DataError(f"unknown format {format!r}")


def write_atomic(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ms: MeasurementSet, path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix == ".jsonl" else "csv")
    write_atomic(path, serialize(ms, fmt))


def check_join(ms: MeasurementSet, graphs: Iterable) -> list:
    """Records whose (model_id, node_id) has no graph node of the same kind."""
    index = {g.arch_id: g for g in graphs}
    problems = []
    for i, r in enumerate(ms.records, 1):
        g = index.get(r.model_id)
        if g is None:
            problems.append(f"row {i}: unknown model_id {r.model_id}")
        elif not 0 <= r.node_id < len(g.nodes):
            problems.append(f"row {i}: {r.model_id} has no node {r.node_id}")
        elif g.nodes[r.node_id].kind != r.op_kind:
            problems.append(f"row {i}: node {r.node_id} of {r.model_id} is {g.nodes[r.node_id].kind}, record says {r.op_kind}")
    return problems


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple
    test_ids: tuple
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train_ids": list(self.train_ids), "test_ids": list(self.test_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["train_ids"]), tuple(d["test_ids"]), d["seed"])


def split(ids, n_train: int, seed: int) -> SplitSpec:
    """Deterministic shuffle of the sorted ids; first ``n_train`` go to training."""
    ids = sorted(set(ids))
    if not 0 < n_train < len(ids):
        raise DataError(f"n_train must be in [1, {len(ids) - 1}], got {n_train}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    return SplitSpec(tuple(sorted(shuffled[:n_train])), tuple(sorted(shuffled[n_train:])), seed)


def with_context(ms: MeasurementSet, **changes) -> MeasurementSet:
    return MeasurementSet(
        [replace(r, context=replace(r.context, **changes)) for r in ms.records], ms.extra_columns
    )
