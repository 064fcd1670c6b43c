"""Raw interaction records: parsing, validation and serialization.

A record is either an Ether transaction or a contract call. Files use the
column names of the raw block data export::

    blockNumber,timestamp,from,to,fromIsContract,toIsContract,callingFunction,value
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

from .errors import (
    EmptyAccountId,
    MissingColumn,
    NegativeAmount,
    NonNumericValue,
    RecordError,
)

COLUMNS = (
    "blockNumber",
    "timestamp",
    "from",
    "to",
    "fromIsContract",
    "toIsContract",
    "callingFunction",
    "value",
)

_TRUE = {"1", "true", "True", "TRUE", "yes"}
_FALSE = {"0", "false", "False", "FALSE", "no", ""}


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    block_number: int
    timestamp: int
    sender: str
    receiver: str
    from_is_contract: bool
    to_is_contract: bool
    calling_function: str | None
    value: int

    @property
    def is_call(self) -> bool:
        return self.calling_function is not None

    def to_row(self) -> dict:
        return {
            "blockNumber": self.block_number,
            "timestamp": self.timestamp,
            "from": self.sender,
            "to": self.receiver,
            "fromIsContract": int(self.from_is_contract),
            "toIsContract": int(self.to_is_contract),
            "callingFunction": self.calling_function or "",
            "value": self.value,
        }


def _int_field(row, key, rownum):
    raw = row[key]
    if isinstance(raw, bool):
        raise NonNumericValue(f"row {rownum}: {key} is not an integer: {raw!r}", row=rownum)
    if isinstance(raw, int):
        return raw
    text = str(raw).strip()
    try:
        return int(text)
    except ValueError:
        # tolerate "5.0"-style exports but never fractional amounts
        try:
            as_float = float(text)
        except ValueError:
            raise NonNumericValue(
                f"row {rownum}: {key} is not an integer: {raw!r}", row=rownum
            ) from None
        if not as_float.is_integer():
            raise NonNumericValue(
                f"row {rownum}: {key} is not an integer: {raw!r}", row=rownum
            ) from None
        return int(as_float)


def _bool_field(row, key, rownum):
    raw = row[key]
    if isinstance(raw, bool):
        return raw
    if isinstance(raw, int) and raw in (0, 1):
        return bool(raw)
    text = "" if raw is None else str(raw).strip()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise NonNumericValue(f"row {rownum}: {key} is not a boolean: {raw!r}", row=rownum)


def parse_row(row: dict, rownum: int) -> InteractionRecord:
    """Validate one mapping of column name to raw value."""
    missing = [c for c in COLUMNS if c not in row and c != "callingFunction"]
    if missing:
        raise MissingColumn(f"row {rownum}: missing column(s) {', '.join(missing)}", row=rownum)

    sender = str(row["from"] or "").strip()
    receiver = str(row["to"] or "").strip()
    if not sender:
        raise EmptyAccountId(f"row {rownum}: empty 'from' account", row=rownum)
    if not receiver:
        raise EmptyAccountId(f"row {rownum}: empty 'to' account", row=rownum)

    value = _int_field(row, "value", rownum)
    if value < 0:
        raise NegativeAmount(f"row {rownum}: negative value {value}", row=rownum)
    timestamp = _int_field(row, "timestamp", rownum)
    if timestamp <= 0:
        raise NonNumericValue(f"row {rownum}: timestamp must be positive, got {timestamp}", row=rownum)
    block = _int_field(row, "blockNumber", rownum)

    from_ca = _bool_field(row, "fromIsContract", rownum)
    to_ca = _bool_field(row, "toIsContract", rownum)
    fn = row.get("callingFunction")
    fn = None if fn is None else str(fn).strip() or None
    if fn is not None and not to_ca:
        raise RecordError(
            f"row {rownum}: callingFunction set but 'to' is not a contract", row=rownum
        )
    return InteractionRecord(block, timestamp, sender, receiver, from_ca, to_ca, fn, value)


def _iter_csv(stream: IO[str]) -> Iterator[tuple[int, dict]]:
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"header is missing column(s) {', '.join(missing)}", row=1)
    # header is row 1, so data starts at row 2
    for i, row in enumerate(reader, start=2):
        yield i, row


def _iter_jsonl(stream: IO[str]) -> Iterator[tuple[int, dict]]:
    for i, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError(f"row {i}: invalid JSON ({exc.msg})", row=i) from None
        if not isinstance(obj, dict):
            raise RecordError(f"row {i}: expected a JSON object", row=i)
        yield i, obj


def ingest_records(source, fmt: str | None = None) -> list[InteractionRecord]:
    """Read and validate records from a path or an open text stream.

    ``fmt`` is ``"csv"`` or ``"jsonl"``; when omitted it is taken from the file
    suffix. Unknown columns are ignored. The first malformed row aborts with
    an error naming that row.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if fmt is None:
            fmt = "jsonl" if path.suffix in (".jsonl", ".json", ".ndjson") else "csv"
        with open(path, newline="", encoding="utf-8") as fh:
            try:
                return ingest_records(fh, fmt)
            except RecordError as exc:
                exc.path = path
                raise
    if fmt is None:
        fmt = "csv"
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown record format {fmt!r}")
    rows = _iter_csv(source) if fmt == "csv" else _iter_jsonl(source)
    return [parse_row(row, i) for i, row in rows]


def write_records(records: Iterable[InteractionRecord], dest, fmt: str = "csv") -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_records(records, fh, fmt)
        return
    if fmt == "csv":
        writer = csv.DictWriter(dest, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_row())
    elif fmt == "jsonl":
        for rec in records:
            row = rec.to_row()
            row["value"] = str(rec.value)
            dest.write(json.dumps(row, sort_keys=False) + "\n")
    else:
        raise ValueError(f"unknown record format {fmt!r}")


def records_from_text(text: str, fmt: str = "csv") -> list[InteractionRecord]:
    return ingest_records(io.StringIO(text), fmt)
