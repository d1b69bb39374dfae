"""Core domain types shared by the whole pipeline.

All types are immutable after construction and safe to share across
workers. Cell text is stored verbatim (surrounding whitespace included);
emptiness is always decided on the ASCII-trimmed text, and only the
header rules and the tokenizer ever trim.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class TabVerifyError(Exception):
    """Base class for all errors raised by this package."""


class TableValidationError(TabVerifyError):
    """A table violates a structural invariant (tiling, bounds, shape)."""


class Verdict(str, enum.Enum):
    ENTAILED = "entailed"
    REFUTED = "refuted"
    UNKNOWN = "unknown"

    def __str__(self) -> str:  # keep file/CLI output free of "Verdict." noise
        return self.value


# Fixed label order used for tie-breaking and for confusion-matrix axes.
VERDICT_ORDER = (Verdict.ENTAILED, Verdict.REFUTED, Verdict.UNKNOWN)


class CellLabel(str, enum.Enum):
    RELEVANT = "relevant"
    IRRELEVANT = "irrelevant"
    EXCLUDED = "excluded"

    def __str__(self) -> str:
        return self.value


def is_empty_cell(text: str) -> bool:
    """A cell is empty when its text is empty after trimming ASCII whitespace."""
    return text.strip() == ""


@dataclass(frozen=True)
class SpannedCell:
    """One table cell occupying ``row_span`` x ``col_span`` grid positions."""

    text: str
    row_span: int = 1
    col_span: int = 1

    def __post_init__(self) -> None:
        if self.row_span < 1 or self.col_span < 1:
            raise TableValidationError(
                f"cell spans must be >= 1, got {self.row_span}x{self.col_span}"
            )


@dataclass(frozen=True)
class RawTable:
    """A rectangular grid of spanned cells, as ingested.

    ``cells`` holds ``(anchor_row, anchor_col, cell)`` triples. A valid
    table tiles the ``n_rows`` x ``n_cols`` grid exactly; use
    :func:`validate_raw_table` to check (violations are data, not
    exceptions).
    """

    table_id: str
    n_rows: int
    n_cols: int
    cells: tuple[tuple[int, int, SpannedCell], ...]
    caption: str | None = None
    legend: str | None = None

    def __post_init__(self) -> None:
        if self.n_rows < 1 or self.n_cols < 1:
            raise TableValidationError(
                f"table {self.table_id!r}: grid must be at least 1x1, "
                f"got {self.n_rows}x{self.n_cols}"
            )
        object.__setattr__(self, "cells", tuple(self.cells))


@dataclass(frozen=True)
class SingleCellTable:
    """A table whose cells are all atomic, with provenance back to spans.

    ``span_origin[r][c]`` is the index into the source table's ``cells``
    of the span that produced position ``(r, c)``. Header cells created
    by standardization carry synthetic negative origins (one per column).
    ``header_rows`` counts header rows from the top (0 until prediction,
    1 after standardization).
    """

    table_id: str
    grid: tuple[tuple[str, ...], ...]
    span_origin: tuple[tuple[int, ...], ...]
    header_rows: int = 0

    def __post_init__(self) -> None:
        if not self.grid or not self.grid[0]:
            raise TableValidationError(f"table {self.table_id!r}: empty grid")
        widths = {len(row) for row in self.grid}
        if len(widths) != 1:
            raise TableValidationError(
                f"table {self.table_id!r}: ragged grid widths {sorted(widths)}"
            )
        if len(self.span_origin) != len(self.grid) or any(
            len(a) != len(b) for a, b in zip(self.span_origin, self.grid)
        ):
            raise TableValidationError(
                f"table {self.table_id!r}: span_origin shape differs from grid"
            )
        if not 0 <= self.header_rows < len(self.grid):
            raise TableValidationError(
                f"table {self.table_id!r}: header_rows={self.header_rows} leaves "
                f"no body rows in a {len(self.grid)}-row grid"
            )
        origin_text: dict[int, str] = {}
        for r, row in enumerate(self.grid):
            for c, text in enumerate(row):
                origin = self.span_origin[r][c]
                if origin in origin_text and origin_text[origin] != text:
                    raise TableValidationError(
                        f"table {self.table_id!r}: span origin {origin} holds "
                        f"different texts at different positions"
                    )
                origin_text[origin] = text

    @property
    def n_rows(self) -> int:
        return len(self.grid)

    @property
    def n_cols(self) -> int:
        return len(self.grid[0])

    def body_rows(self) -> range:
        return range(self.header_rows, self.n_rows)


@dataclass(frozen=True)
class StatementRecord:
    """A statement to verify against a table.

    ``evidence_variants`` holds zero or more alternative minimal sets of
    relevant cell coordinates, 0-indexed ``(row, col)`` over the raw
    (pre-expansion) grid. Unknown statements never carry evidence.
    """

    statement_id: str
    table_id: str
    text: str
    verdict: Verdict
    evidence_variants: tuple[frozenset[tuple[int, int]], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "evidence_variants",
            tuple(frozenset(v) for v in self.evidence_variants),
        )
        if self.verdict is Verdict.UNKNOWN and self.evidence_variants:
            raise TableValidationError(
                f"statement {self.statement_id!r}: unknown statements must not "
                f"carry evidence"
            )


@dataclass(frozen=True)
class CellLabelGrid:
    """Per-cell relevance labels for one statement over one table grid."""

    statement_id: str
    labels: tuple[tuple[CellLabel, ...], ...]

    def __post_init__(self) -> None:
        if not self.labels or not self.labels[0]:
            raise TableValidationError(
                f"statement {self.statement_id!r}: empty label grid"
            )
        widths = {len(row) for row in self.labels}
        if len(widths) != 1:
            raise TableValidationError(
                f"statement {self.statement_id!r}: ragged label grid"
            )

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def n_cols(self) -> int:
        return len(self.labels[0])

    def relevant_coords(self) -> set[tuple[int, int]]:
        return {
            (r, c)
            for r, row in enumerate(self.labels)
            for c, lab in enumerate(row)
            if lab is CellLabel.RELEVANT
        }


def validate_cell_label_grid(grid: CellLabelGrid, header_rows: int) -> list[str]:
    """Check Excluded placement: all header positions and nothing else."""
    violations = []
    for r, row in enumerate(grid.labels):
        for c, lab in enumerate(row):
            if r < header_rows and lab is not CellLabel.EXCLUDED:
                violations.append(
                    f"header position ({r}, {c}) labeled {lab} instead of excluded"
                )
            elif r >= header_rows and lab is CellLabel.EXCLUDED:
                violations.append(f"body position ({r}, {c}) labeled excluded")
    return violations


def validate_raw_table(t: RawTable) -> list[str]:
    """Check the tiling invariant; the table is valid iff this returns [].

    Every violation is reported with coordinates: spans out of bounds,
    grid positions covered more than once, and uncovered positions.
    """
    violations: list[str] = []
    covered: dict[tuple[int, int], int] = {}
    for idx, (r, c, cell) in enumerate(t.cells):
        if r < 0 or c < 0 or r + cell.row_span > t.n_rows or c + cell.col_span > t.n_cols:
            violations.append(
                f"cell {idx} at ({r}, {c}) spans {cell.row_span}x{cell.col_span} "
                f"outside the {t.n_rows}x{t.n_cols} grid"
            )
            continue
        for rr in range(r, r + cell.row_span):
            for cc in range(c, c + cell.col_span):
                if (rr, cc) in covered:
                    violations.append(
                        f"position ({rr}, {cc}) covered by cells "
                        f"{covered[(rr, cc)]} and {idx}"
                    )
                else:
                    covered[(rr, cc)] = idx
    for rr in range(t.n_rows):
        for cc in range(t.n_cols):
            if (rr, cc) not in covered:
                violations.append(f"position ({rr}, {cc}) not covered by any cell")
    return violations


@dataclass
class Dataset:
    """A split of the corpus: tables keyed by id plus their statements."""

    tables: dict[str, RawTable] = field(default_factory=dict)
    statements: list[StatementRecord] = field(default_factory=list)
    split_name: str = ""

    def validate(self) -> list[str]:
        """Table tiling, statement references, and evidence bounds."""
        violations: list[str] = []
        for tid, table in self.tables.items():
            for v in validate_raw_table(table):
                violations.append(f"table {tid!r}: {v}")
        for st in self.statements:
            table = self.tables.get(st.table_id)
            if table is None:
                violations.append(
                    f"statement {st.statement_id!r} references missing table "
                    f"{st.table_id!r}"
                )
                continue
            for variant in st.evidence_variants:
                for (r, c) in variant:
                    if not (0 <= r < table.n_rows and 0 <= c < table.n_cols):
                        violations.append(
                            f"statement {st.statement_id!r}: evidence cell "
                            f"({r}, {c}) outside table {st.table_id!r} "
                            f"({table.n_rows}x{table.n_cols})"
                        )
        return violations
