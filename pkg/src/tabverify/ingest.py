"""Parsing and serialization: canonical dataset JSON, CSV and XML table
readers, the HTML header oracle, and prediction files.

The canonical format is a single JSON document::

    {
      "split_name": "train",                  # optional
      "tables": {
        "<table_id>": {
          "n_rows": 3, "n_cols": 2,
          "cells": [{"r": 0, "c": 0, "rs": 1, "cs": 1, "text": "..."}, ...],
          "caption": "...",                   # optional / null
          "legend": "..."                     # optional / null
        }
      },
      "statements": [
        {"id": "...", "table_id": "...", "text": "...",
         "verdict": "entailed" | "refuted" | "unknown",
         "evidence": [[[r, c], ...], ...]}    # list of variants
      ]
    }

Evidence coordinates are 0-indexed (row, col) over the raw
(pre-expansion) grid. All files are UTF-8 with LF line endings.
The XML and CSV readers are compatibility shims for per-table files.
"""

from __future__ import annotations

import csv
import io
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import Iterable

from .table_model import (
    CellLabelGrid,
    Dataset,
    RawTable,
    SpannedCell,
    StatementRecord,
    TabVerifyError,
    TableValidationError,
    Verdict,
    validate_raw_table,
)


class ParseError(TabVerifyError):
    """Malformed input file (bad JSON/CSV/XML/HTML markup)."""


class SchemaError(TabVerifyError):
    """Structurally valid file that does not match the expected schema."""


class DatasetError(TabVerifyError):
    """Dataset-level inconsistency, e.g. a dangling table reference."""


@dataclass(frozen=True)
class HeaderOracle:
    """Ground-truth header row count for one table, typically from HTML."""

    table_id: str
    header_row_count: int

    def __post_init__(self) -> None:
        if self.header_row_count < 0:
            raise TableValidationError(
                f"oracle for {self.table_id!r}: negative header row count"
            )


# ---------------------------------------------------------------------------
# Canonical JSON
# ---------------------------------------------------------------------------

def _require(obj: dict, field_name: str, context: str):
    if field_name not in obj:
        raise SchemaError(f"{context}: missing field {field_name!r}")
    return obj[field_name]


def _table_from_json(table_id: str, obj: dict) -> RawTable:
    ctx = f"table {table_id!r}"
    if not isinstance(obj, dict):
        raise SchemaError(f"{ctx}: expected an object")
    n_rows = _require(obj, "n_rows", ctx)
    n_cols = _require(obj, "n_cols", ctx)
    cells = []
    for i, cell_obj in enumerate(_require(obj, "cells", ctx)):
        cctx = f"{ctx} cell {i}"
        cells.append(
            (
                _require(cell_obj, "r", cctx),
                _require(cell_obj, "c", cctx),
                SpannedCell(
                    text=str(_require(cell_obj, "text", cctx)),
                    row_span=int(cell_obj.get("rs", 1)),
                    col_span=int(cell_obj.get("cs", 1)),
                ),
            )
        )
    return RawTable(
        table_id=table_id,
        n_rows=int(n_rows),
        n_cols=int(n_cols),
        cells=tuple(cells),
        caption=obj.get("caption"),
        legend=obj.get("legend"),
    )


def _statement_from_json(obj: dict, index: int) -> StatementRecord:
    ctx = f"statement {index}"
    if not isinstance(obj, dict):
        raise SchemaError(f"{ctx}: expected an object")
    verdict_str = _require(obj, "verdict", ctx)
    try:
        verdict = Verdict(verdict_str)
    except ValueError:
        raise SchemaError(
            f"{ctx}: verdict must be one of entailed/refuted/unknown, "
            f"got {verdict_str!r}"
        ) from None
    variants = tuple(
        frozenset((int(r), int(c)) for r, c in variant)
        for variant in obj.get("evidence", [])
    )
    return StatementRecord(
        statement_id=str(_require(obj, "id", ctx)),
        table_id=str(_require(obj, "table_id", ctx)),
        text=str(_require(obj, "text", ctx)),
        verdict=verdict,
        evidence_variants=variants,
    )


def load_dataset_json(path: str | Path) -> Dataset:
    """Load and fully validate a canonical-format dataset.

    Raises ParseError (with line/column) on bad JSON, SchemaError naming
    the missing field, and DatasetError for dangling references or
    invalid tables.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    tables_obj = _require(doc, "tables", str(path))
    statements_obj = _require(doc, "statements", str(path))
    tables = {
        tid: _table_from_json(tid, tobj) for tid, tobj in tables_obj.items()
    }
    statements = [
        _statement_from_json(sobj, i) for i, sobj in enumerate(statements_obj)
    ]
    ds = Dataset(
        tables=tables,
        statements=statements,
        split_name=str(doc.get("split_name", "")),
    )
    for st in ds.statements:
        if st.table_id not in ds.tables:
            raise DatasetError(
                f"statement {st.statement_id!r} references unknown table "
                f"{st.table_id!r}"
            )
    violations = ds.validate()
    if violations:
        raise DatasetError(
            f"{path}: invalid dataset: " + "; ".join(violations[:10])
        )
    return ds


def dataset_to_json_obj(ds: Dataset) -> dict:
    tables = {}
    for tid in sorted(ds.tables):
        t = ds.tables[tid]
        tables[tid] = {
            "n_rows": t.n_rows,
            "n_cols": t.n_cols,
            "cells": [
                {"r": r, "c": c, "rs": cell.row_span, "cs": cell.col_span,
                 "text": cell.text}
                for (r, c, cell) in t.cells
            ],
            "caption": t.caption,
            "legend": t.legend,
        }
    statements = [
        {
            "id": st.statement_id,
            "table_id": st.table_id,
            "text": st.text,
            "verdict": st.verdict.value,
            "evidence": [sorted(variant) for variant in st.evidence_variants],
        }
        for st in ds.statements
    ]
    obj: dict = {"tables": tables, "statements": statements}
    if ds.split_name:
        obj["split_name"] = ds.split_name
    return obj


def save_dataset_json(ds: Dataset, path: str | Path) -> None:
    _write_json(dataset_to_json_obj(ds), path)


def _write_json(obj, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def _find_unbalanced_quote_row(text: str) -> int | None:
    """Return the 1-based row on which an unterminated quote opens, if any."""
    in_quotes = False
    open_row = 0
    row = 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if in_quotes:
            if ch == '"':
                if i + 1 < n and text[i + 1] == '"':
                    i += 2
                    continue
                in_quotes = False
            elif ch == "\n":
                row += 1
        else:
            if ch == '"':
                in_quotes = True
                open_row = row
            elif ch == "\n":
                row += 1
        i += 1
    return open_row if in_quotes else None


def parse_csv_table(data: bytes | str, table_id: str) -> RawTable:
    """Parse an RFC-4180-style CSV file into a table of 1x1 cells.

    Ragged rows are padded with empty cells to the widest row.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    bad_row = _find_unbalanced_quote_row(text)
    if bad_row is not None:
        raise ParseError(
            f"table {table_id!r}: unbalanced quote opening on row {bad_row}"
        )
    try:
        rows = list(csv.reader(io.StringIO(text), strict=True))
    except csv.Error as exc:
        raise ParseError(f"table {table_id!r}: malformed CSV: {exc}") from None
    if not rows:
        raise ParseError(f"table {table_id!r}: no rows")
    width = max(len(row) for row in rows)
    if width == 0:
        raise ParseError(f"table {table_id!r}: no columns")
    cells = []
    for r, row in enumerate(rows):
        padded = row + [""] * (width - len(row))
        for c, text_value in enumerate(padded):
            cells.append((r, c, SpannedCell(text=text_value)))
    return RawTable(
        table_id=table_id, n_rows=len(rows), n_cols=width, cells=tuple(cells)
    )


# ---------------------------------------------------------------------------
# XML tables
# ---------------------------------------------------------------------------

def parse_xml_table(data: bytes | str) -> RawTable:
    """Parse the minimal XML table format.

    Expected markup: a ``<table id="...">`` element with optional
    ``<caption>``/``<legend>`` children and ``<row>`` children holding
    ``<cell>`` elements; cells may carry integer ``row-span``/``col-span``
    attributes. Cells are laid out left to right, sliding past positions
    occupied by spans from earlier rows.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc}") from None
    if root.tag != "table":
        raise ParseError(f"expected <table> root element, got <{root.tag}>")
    table_id = root.get("id", "")
    caption = None
    legend = None
    row_elems = []
    for child in root:
        if child.tag == "caption":
            caption = (child.text or "").strip()
        elif child.tag == "legend":
            legend = (child.text or "").strip()
        elif child.tag == "row":
            row_elems.append(child)
        else:
            raise ParseError(f"unexpected element <{child.tag}> inside <table>")
    if not row_elems:
        raise ParseError(f"table {table_id!r}: no rows")

    n_rows = len(row_elems)
    occupied: dict[tuple[int, int], tuple[int, int]] = {}  # pos -> anchor
    cells: list[tuple[int, int, SpannedCell]] = []
    for r, row_elem in enumerate(row_elems):
        cursor = 0
        for cell_elem in row_elem:
            if cell_elem.tag != "cell":
                raise ParseError(
                    f"unexpected element <{cell_elem.tag}> inside <row>"
                )
            try:
                row_span = int(cell_elem.get("row-span", "1"))
                col_span = int(cell_elem.get("col-span", "1"))
            except ValueError:
                raise ParseError(
                    f"table {table_id!r}: non-integer span attribute on a cell "
                    f"in row {r}"
                ) from None
            if row_span < 1 or col_span < 1:
                raise ParseError(
                    f"table {table_id!r}: span attributes must be >= 1 "
                    f"(row {r})"
                )
            if r + row_span > n_rows:
                raise TableValidationError(
                    f"table {table_id!r}: cell at row {r} spans {row_span} rows "
                    f"past the last row"
                )
            while (r, cursor) in occupied:
                cursor += 1
            text = "".join(cell_elem.itertext())
            for rr in range(r, r + row_span):
                for cc in range(cursor, cursor + col_span):
                    if (rr, cc) in occupied:
                        other = occupied[(rr, cc)]
                        raise TableValidationError(
                            f"table {table_id!r}: overlapping spans: cell at "
                            f"({r}, {cursor}) collides with cell at "
                            f"({other[0]}, {other[1]}) on position ({rr}, {cc})"
                        )
                    occupied[(rr, cc)] = (r, cursor)
            cells.append(
                (r, cursor, SpannedCell(text=text, row_span=row_span,
                                        col_span=col_span))
            )
            cursor += col_span

    n_cols = 1 + max(c for (_, c) in occupied)
    table = RawTable(
        table_id=table_id,
        n_rows=n_rows,
        n_cols=n_cols,
        cells=tuple(cells),
        caption=caption,
        legend=legend,
    )
    violations = validate_raw_table(table)
    if violations:
        raise TableValidationError(
            f"table {table_id!r}: does not tile the grid: "
            + "; ".join(violations[:5])
        )
    return table


# ---------------------------------------------------------------------------
# HTML header oracle
# ---------------------------------------------------------------------------

class _HeadRowCounter(HTMLParser):
    def __init__(self) -> None:
        super().__init__()
        self.thead_seen = 0
        self.in_thead = False
        self.rows = 0

    def handle_starttag(self, tag, attrs):
        if tag == "thead":
            if self.in_thead:
                raise ParseError("nested <thead> elements")
            self.thead_seen += 1
            if self.thead_seen > 1:
                raise ParseError("more than one <thead> element")
            self.in_thead = True
        elif tag == "tr" and self.in_thead:
            self.rows += 1

    def handle_endtag(self, tag):
        if tag == "thead":
            self.in_thead = False


def extract_header_oracle(data: bytes | str, table_id: str) -> HeaderOracle:
    """Count ``<tr>`` rows inside a table's ``<thead>``; 0 when absent.

    The count is taken over the raw markup rows, before any span
    expansion. Insensitive to attribute order and inter-tag whitespace.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    counter = _HeadRowCounter()
    counter.feed(data)
    counter.close()
    return HeaderOracle(table_id=table_id, header_row_count=counter.rows)


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------

def write_predictions(records: Iterable[StatementRecord], path: str | Path) -> None:
    """Write verdict predictions, sorted by statement id, as a JSON array."""
    arr = sorted(
        (
            {
                "id": st.statement_id,
                "table_id": st.table_id,
                "text": st.text,
                "verdict": st.verdict.value,
                "evidence": [sorted(v) for v in st.evidence_variants],
            }
            for st in records
        ),
        key=lambda o: o["id"],
    )
    _write_json(arr, path)


def read_predictions(path: str | Path) -> list[StatementRecord]:
    with open(path, encoding="utf-8") as fh:
        arr = json.load(fh)
    return [_statement_from_json(obj, i) for i, obj in enumerate(arr)]


def write_evidence_predictions(
    grids: Iterable[CellLabelGrid | tuple[str, Iterable[tuple[int, int]]]],
    path: str | Path,
) -> None:
    """Write per-statement relevant-cell sets, sorted by statement id.

    Accepts label grids (their relevant coordinates are extracted) or
    ``(statement_id, coordinates)`` pairs.
    """
    entries = []
    for item in grids:
        if isinstance(item, CellLabelGrid):
            sid, coords = item.statement_id, item.relevant_coords()
        else:
            sid, coords = item[0], set(tuple(c) for c in item[1])
        entries.append({"id": sid, "cells": sorted([list(c) for c in coords])})
    entries.sort(key=lambda o: o["id"])
    _write_json(entries, path)


def read_evidence_predictions(path: str | Path) -> dict[str, set[tuple[int, int]]]:
    with open(path, encoding="utf-8") as fh:
        arr = json.load(fh)
    return {
        obj["id"]: {(int(r), int(c)) for r, c in obj["cells"]} for obj in arr
    }
