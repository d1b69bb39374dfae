"""Map body-cell predictions on the standardized grid back onto the
original spanned table.

Header cells are reconstructed from the body prediction (the model never
predicts header cells): a column with any relevant body cell gets its
header marked relevant, over all original header rows of that column.
A spanned cell is relevant iff any single cell it covers is relevant.
"""

from __future__ import annotations

from .table_model import (
    CellLabel,
    CellLabelGrid,
    RawTable,
    SingleCellTable,
    TableValidationError,
)


def propagate_header_relevance(
    pred: CellLabelGrid, t: SingleCellTable
) -> CellLabelGrid:
    """Fill the standardized header row from the body columns.

    The header cell of column ``j`` becomes relevant iff any body cell
    in column ``j`` is relevant; all other header cells become
    irrelevant. Body rows pass through unchanged.
    """
    if t.header_rows != 1:
        raise TableValidationError(
            f"table {t.table_id!r}: expected a standardized table"
        )
    if pred.n_rows != t.n_rows or pred.n_cols != t.n_cols:
        raise TableValidationError(
            f"statement {pred.statement_id!r}: label grid is "
            f"{pred.n_rows}x{pred.n_cols} but table {t.table_id!r} is "
            f"{t.n_rows}x{t.n_cols}"
        )
    header = tuple(
        CellLabel.RELEVANT
        if any(pred.labels[r][c] is CellLabel.RELEVANT
               for r in range(1, pred.n_rows))
        else CellLabel.IRRELEVANT
        for c in range(pred.n_cols)
    )
    return CellLabelGrid(
        statement_id=pred.statement_id, labels=(header,) + pred.labels[1:]
    )


def merge_to_spans(
    pred: CellLabelGrid, t: SingleCellTable, raw: RawTable
) -> list[CellLabel]:
    """Per-spanned-cell labels over ``raw.cells``, any-rule aggregation.

    ``t`` must be the standardized form of ``raw``; the original header
    row count is recovered from the shape difference. A relevant
    standardized header cell marks every original header row of its
    column; body relevance reaches spans through ``span_origin``.
    """
    if t.n_cols != raw.n_cols or t.n_rows > raw.n_rows:
        raise TableValidationError(
            f"table {raw.table_id!r}: standardized {t.n_rows}x{t.n_cols} grid "
            f"cannot come from raw {raw.n_rows}x{raw.n_cols} grid"
        )
    if pred.n_rows != t.n_rows or pred.n_cols != t.n_cols:
        raise TableValidationError(
            f"statement {pred.statement_id!r}: label grid shape differs from "
            f"the standardized table"
        )
    n_spans = len(raw.cells)
    max_origin = max(
        (o for row in t.span_origin for o in row if o >= 0), default=-1
    )
    if max_origin >= n_spans:
        raise TableValidationError(
            f"table {raw.table_id!r}: span origin {max_origin} out of range "
            f"for {n_spans} spanned cells"
        )
    h = raw.n_rows - t.n_rows + 1

    # Index raw positions to their covering span for header reconstruction.
    position_span: dict[tuple[int, int], int] = {}
    for idx, (r, c, cell) in enumerate(raw.cells):
        for rr in range(r, r + cell.row_span):
            for cc in range(c, c + cell.col_span):
                position_span[(rr, cc)] = idx

    relevant = [False] * n_spans
    for r in range(1, pred.n_rows):
        for c in range(pred.n_cols):
            if pred.labels[r][c] is CellLabel.RELEVANT:
                origin = t.span_origin[r][c]
                if origin < 0:
                    raise TableValidationError(
                        f"table {raw.table_id!r}: body position ({r}, {c}) has "
                        f"no span provenance"
                    )
                relevant[origin] = True
    for c in range(pred.n_cols):
        if pred.labels[0][c] is CellLabel.RELEVANT:
            for hr in range(h):
                span = position_span.get((hr, c))
                if span is None:
                    raise TableValidationError(
                        f"table {raw.table_id!r}: header position ({hr}, {c}) "
                        f"not covered by any span"
                    )
                relevant[span] = True
    return [
        CellLabel.RELEVANT if flag else CellLabel.IRRELEVANT
        for flag in relevant
    ]


def relevant_anchor_coords(
    span_labels: list[CellLabel], raw: RawTable
) -> set[tuple[int, int]]:
    """Anchor coordinates of the relevant spanned cells."""
    return {
        (r, c)
        for (r, c, _), label in zip(raw.cells, span_labels)
        if label is CellLabel.RELEVANT
    }


def prediction_to_raw_coords(
    pred: CellLabelGrid, t: SingleCellTable, raw: RawTable
) -> set[tuple[int, int]]:
    """Full post-processing: header propagation, span merge, anchors."""
    filled = propagate_header_relevance(pred, t)
    return relevant_anchor_coords(merge_to_spans(filled, t, raw), raw)
