"""Deterministic table transformations: span expansion, header-row
prediction, header standardization, and evidence label propagation.

Header-row prediction applies two rules to the expanded table:

1. Count consecutive rows from the top in which the left-most column is
   either empty or repeats the (trimmed) top-left cell text. This covers
   the common layouts where the corner block above the row names is
   blank, a single spanned value, or a value followed by blanks.
2. While any two adjacent columns hold identical text in every counted
   row, count one more row. Multi-column group headers only become
   distinguishable once their more specific sub-headers are included.

The estimate is clamped to ``n_rows - 1`` so at least one body row
always survives. Equality checks trim ASCII whitespace; joined header
text is kept verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ingest import HeaderOracle
from .table_model import (
    CellLabel,
    CellLabelGrid,
    RawTable,
    SingleCellTable,
    TableValidationError,
    is_empty_cell,
    validate_raw_table,
)


def expand_spans(t: RawTable) -> SingleCellTable:
    """Copy every spanned cell's text into each grid position it covers.

    ``span_origin`` records, per position, the index of the producing
    entry in ``t.cells``. ``header_rows`` starts at 0; header prediction
    sets it later.
    """
    violations = validate_raw_table(t)
    if violations:
        raise TableValidationError(
            f"table {t.table_id!r}: cannot expand invalid table: "
            + violations[0]
        )
    grid = [["" for _ in range(t.n_cols)] for _ in range(t.n_rows)]
    origin = [[-1 for _ in range(t.n_cols)] for _ in range(t.n_rows)]
    for idx, (r, c, cell) in enumerate(t.cells):
        for rr in range(r, r + cell.row_span):
            for cc in range(c, c + cell.col_span):
                grid[rr][cc] = cell.text
                origin[rr][cc] = idx
    return SingleCellTable(
        table_id=t.table_id,
        grid=tuple(tuple(row) for row in grid),
        span_origin=tuple(tuple(row) for row in origin),
        header_rows=0,
    )


def predict_header_rows(t: SingleCellTable) -> int:
    """Predict the number of header rows of an expanded table.

    Always returns a value in ``[1, n_rows - 1]``. Single-row tables are
    rejected: no body row could remain.
    """
    if t.n_rows < 2:
        raise TableValidationError(
            f"table {t.table_id!r}: cannot predict headers for a "
            f"single-row table"
        )
    limit = t.n_rows - 1
    corner = t.grid[0][0].strip()

    h = 1
    while h < limit:
        cell = t.grid[h][0].strip()
        if cell == "" or cell == corner:
            h += 1
        else:
            break

    def adjacent_duplicate(rows: int) -> bool:
        for c in range(t.n_cols - 1):
            if all(
                t.grid[r][c].strip() == t.grid[r][c + 1].strip()
                for r in range(rows)
            ):
                return True
        return False

    while h < limit and adjacent_duplicate(h):
        h += 1
    return h


def standardize_header(t: SingleCellTable, h: int) -> SingleCellTable:
    """Merge the top ``h`` rows into a single header row.

    Each merged cell joins its column's non-empty header texts with
    newlines. A vertical span contributes its text once; equal texts
    from distinct spans are kept (coinciding but separate headers).
    Merged header cells get synthetic span origins ``-(col + 1)``; body
    rows are untouched.
    """
    if not 1 <= h <= t.n_rows - 1:
        raise TableValidationError(
            f"table {t.table_id!r}: header row count {h} out of range "
            f"[1, {t.n_rows - 1}]"
        )
    merged: list[str] = []
    for c in range(t.n_cols):
        parts = []
        for r in range(h):
            if is_empty_cell(t.grid[r][c]):
                continue
            if r > 0 and t.span_origin[r][c] == t.span_origin[r - 1][c]:
                continue
            parts.append(t.grid[r][c])
        merged.append("\n".join(parts))
    grid = (tuple(merged),) + t.grid[h:]
    origin = (tuple(-(c + 1) for c in range(t.n_cols)),) + t.span_origin[h:]
    return SingleCellTable(
        table_id=t.table_id, grid=grid, span_origin=origin, header_rows=1
    )


def standardize_table(raw: RawTable) -> tuple[SingleCellTable, int]:
    """Expand, predict header rows, and standardize in one step.

    Returns the standardized table and the predicted original header
    row count ``h``.
    """
    expanded = expand_spans(raw)
    h = predict_header_rows(expanded)
    return standardize_header(expanded, h), h


def propagate_evidence_labels(
    raw_labels: dict[int, CellLabel],
    t: SingleCellTable,
    statement_id: str = "",
) -> CellLabelGrid:
    """Duplicate per-span relevance labels onto every covered position.

    ``raw_labels`` is keyed by span index (missing spans default to
    irrelevant). Header positions are always excluded, dropping any
    label whose span lies inside the header.
    """
    max_origin = max(
        (o for row in t.span_origin for o in row if o >= 0), default=-1
    )
    for span_idx in raw_labels:
        if span_idx < 0 or span_idx > max_origin:
            raise TableValidationError(
                f"table {t.table_id!r}: label for unknown span index {span_idx}"
            )
    labels = []
    for r in range(t.n_rows):
        row = []
        for c in range(t.n_cols):
            if r < t.header_rows:
                row.append(CellLabel.EXCLUDED)
            else:
                row.append(
                    raw_labels.get(t.span_origin[r][c], CellLabel.IRRELEVANT)
                )
        labels.append(tuple(row))
    return CellLabelGrid(statement_id=statement_id, labels=tuple(labels))


# ---------------------------------------------------------------------------
# Header-oracle agreement harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeaderAgreement:
    """Agreement between predicted header row counts and oracle counts."""

    corpus: str
    n_tables: int
    exact_match: int
    within_one: int

    @property
    def exact_match_pct(self) -> float:
        return 100.0 * self.exact_match / self.n_tables if self.n_tables else 0.0

    @property
    def within_one_pct(self) -> float:
        return 100.0 * self.within_one / self.n_tables if self.n_tables else 0.0


def header_agreement(
    tables: dict[str, RawTable],
    oracles: list[HeaderOracle],
    corpus: str = "",
) -> HeaderAgreement:
    """Score predicted header rows against oracle counts for one corpus."""
    n = exact = close = 0
    for oracle in oracles:
        table = tables.get(oracle.table_id)
        if table is None:
            raise TableValidationError(
                f"oracle references unknown table {oracle.table_id!r}"
            )
        predicted = predict_header_rows(expand_spans(table))
        n += 1
        error = abs(predicted - oracle.header_row_count)
        if error == 0:
            exact += 1
        if error <= 1:
            close += 1
    return HeaderAgreement(
        corpus=corpus, n_tables=n, exact_match=exact, within_one=close
    )


def format_header_report(rows: list[HeaderAgreement]) -> str:
    """Render agreement rows as a TSV table (counts with percentages)."""
    lines = ["corpus\tn_tables\texact_match\twithin_one"]
    for a in rows:
        lines.append(
            f"{a.corpus}\t{a.n_tables}"
            f"\t{a.exact_match}({a.exact_match_pct:.2f}%)"
            f"\t{a.within_one}({a.within_one_pct:.2f}%)"
        )
    return "\n".join(lines) + "\n"
