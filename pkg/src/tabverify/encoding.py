"""Tokenization and model-input assembly.

Input sequences follow the ``[CLS] <statement> [SEP] <flattened table>``
layout: the standardized table is appended row-major, header row first.
Each token carries five structural indices: segment (0 before the
table, 1 inside), column (1-based inside the table), row (0 for the
header row and everything before the table, 1-based body rows), an
in-cell position that restarts at 0 whenever a new cell starts, and a
flat cell index (-1 outside the table).

The tokenizer is a corpus-built greedy longest-match subword scheme:
text is lowercased, split on whitespace with punctuation kept as
single-character tokens, and each word is matched against the
vocabulary with ``##``-prefixed continuation pieces; a word that cannot
be covered becomes a single ``[UNK]``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .table_model import SingleCellTable, TabVerifyError, Verdict, is_empty_cell


class EncodingError(TabVerifyError):
    """The example cannot be encoded (oversize or unstandardized table)."""


PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
CONTINUATION = "##"

_VOCAB_FILE_HEADER = (
    "# tabverify vocab v1: the token on line i (0-based, not counting this "
    "header) has id i + 4; ids 0-3 are reserved for [PAD] [UNK] [CLS] [SEP]"
)


def basic_split(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation becomes 1-char tokens."""
    out: list[str] = []
    word: list[str] = []
    for ch in text.lower():
        if ch.isspace():
            if word:
                out.append("".join(word))
                word = []
        elif ch.isalnum():
            word.append(ch)
        else:
            if word:
                out.append("".join(word))
                word = []
            out.append(ch)
    if word:
        out.append("".join(word))
    return out


class Vocab:
    """Token table with fixed reserved ids and ``##`` continuation pieces."""

    def __init__(self, tokens: list[str]):
        self.id_to_token: list[str] = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {}
        for i, tok in enumerate(self.id_to_token):
            if tok in self.token_to_id:
                raise ValueError(f"duplicate vocab token {tok!r}")
            self.token_to_id[tok] = i

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order (id = position + 4)."""
        return self.id_to_token[len(RESERVED_TOKENS):]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_VOCAB_FILE_HEADER + "\n")
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or not lines[0].startswith("# tabverify vocab v1"):
            raise EncodingError(f"{path}: not a tabverify vocab file")
        tokens = [line for line in lines[1:] if line != ""]
        return cls(tokens)


def build_vocab(corpus: list[str], max_size: int) -> Vocab:
    """Frequency-ranked whole tokens plus character fallback pieces.

    Whole tokens come first (ties broken lexicographically), then the
    fallback pieces (each seen character as a plain and a continuation
    piece), deduplicated and truncated to ``max_size`` total entries.
    Deterministic given the corpus order.
    """
    if max_size < 4:
        raise ValueError(f"max_size must be at least 4, got {max_size}")
    counts: Counter[str] = Counter()
    chars: set[str] = set()
    for text in corpus:
        for word in basic_split(text):
            counts[word] += 1
            chars.update(word)
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    fallback = sorted(chars) + [CONTINUATION + c for c in sorted(chars)]
    tokens: list[str] = []
    seen: set[str] = set(RESERVED_TOKENS)
    for tok in ranked + fallback:
        if tok in seen:
            continue
        seen.add(tok)
        tokens.append(tok)
        if len(tokens) + len(RESERVED_TOKENS) >= max_size:
            break
    return Vocab(tokens)


def _word_pieces(word: str, vocab: Vocab) -> list[str] | None:
    if word in vocab:
        return [word]
    pieces: list[str] = []
    start = 0
    n = len(word)
    while start < n:
        end = n
        found = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = CONTINUATION + sub
            if sub in vocab:
                found = sub
                break
            end -= 1
        if found is None:
            return None
        pieces.append(found)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Total and deterministic; uncoverable words become one ``[UNK]``."""
    ids: list[int] = []
    for word in basic_split(text):
        pieces = _word_pieces(word, vocab)
        if pieces is None:
            ids.append(UNK_ID)
        else:
            ids.extend(vocab.token_to_id[p] for p in pieces)
    return ids


def template_statement(text: str, verdict: Verdict) -> str:
    """Rewrite a statement as a cell-seeking question carrying its verdict."""
    if verdict is Verdict.ENTAILED:
        return f'Which cells entail "{text}"?'
    if verdict is Verdict.REFUTED:
        return f'Which cells refute "{text}"?'
    raise ValueError("statement templating requires an entailed or refuted verdict")


@dataclass
class EncodedExample:
    """One model input: token ids plus per-token structural indices.

    All index lists share one length (``attention_len``).
    ``full_length`` is the length the sequence would have had without
    row truncation; ``truncated_rows`` counts dropped body rows.
    ``n_rows``/``n_cols`` describe the standardized grid, truncation
    included (``n_rows - truncated_rows`` rows made it in).
    """

    token_ids: list[int]
    segment_ids: list[int]
    column_ids: list[int]
    row_ids: list[int]
    pos_in_cell: list[int]
    cell_index: list[int]
    attention_len: int
    truncated_rows: int
    full_length: int
    n_rows: int
    n_cols: int

    @property
    def kept_rows(self) -> int:
        return self.n_rows - self.truncated_rows

    def kept_cell_indices(self) -> list[int]:
        """Flat indices of all cells in the non-truncated rows."""
        return list(range(self.kept_rows * self.n_cols))

    def to_debug_dict(self) -> dict:
        return {
            "token_ids": self.token_ids,
            "segment_ids": self.segment_ids,
            "column_ids": self.column_ids,
            "row_ids": self.row_ids,
            "pos_in_cell": self.pos_in_cell,
            "cell_index": self.cell_index,
            "attention_len": self.attention_len,
            "truncated_rows": self.truncated_rows,
            "full_length": self.full_length,
        }


def encode_example(
    statement: str,
    table: SingleCellTable,
    vocab: Vocab,
    max_len: int = 512,
) -> EncodedExample:
    """Assemble ``[CLS] <statement> [SEP] <flattened table>`` features.

    The table must be standardized (one header row). Empty cells
    contribute one ``[UNK]`` token so every cell stays addressable. When
    the sequence would exceed ``max_len``, whole body rows are dropped
    from the bottom; the header row is always kept, and a statement plus
    header that alone overflow raise an oversize error.
    """
    if table.header_rows != 1:
        raise EncodingError(
            f"table {table.table_id!r}: encoding requires a standardized "
            f"table (header_rows=1, got {table.header_rows})"
        )
    n_rows, n_cols = table.n_rows, table.n_cols
    statement_ids = tokenize(statement, vocab)

    token_ids = [CLS_ID] + statement_ids + [SEP_ID]
    overhead = len(token_ids)
    segment_ids = [0] * overhead
    column_ids = [0] * overhead
    row_ids = [0] * overhead
    pos_in_cell = list(range(overhead))
    cell_index = [-1] * overhead

    cell_tokens: list[list[list[int]]] = []
    for r in range(n_rows):
        row_cells = []
        for c in range(n_cols):
            ids = tokenize(table.grid[r][c], vocab)
            row_cells.append(ids if ids else [UNK_ID])
        cell_tokens.append(row_cells)
    row_lengths = [sum(len(ids) for ids in row) for row in cell_tokens]
    full_length = overhead + sum(row_lengths)

    if overhead + row_lengths[0] > max_len:
        raise EncodingError(
            f"table {table.table_id!r}: statement and header row alone take "
            f"{overhead + row_lengths[0]} tokens, over the {max_len} limit"
        )
    keep = 1
    running = overhead + row_lengths[0]
    for r in range(1, n_rows):
        if running + row_lengths[r] > max_len:
            break
        running += row_lengths[r]
        keep += 1
    truncated_rows = n_rows - keep

    for r in range(keep):
        for c in range(n_cols):
            ids = cell_tokens[r][c]
            token_ids.extend(ids)
            segment_ids.extend([1] * len(ids))
            column_ids.extend([c + 1] * len(ids))
            row_ids.extend([r] * len(ids))
            pos_in_cell.extend(range(len(ids)))
            cell_index.extend([r * n_cols + c] * len(ids))

    return EncodedExample(
        token_ids=token_ids,
        segment_ids=segment_ids,
        column_ids=column_ids,
        row_ids=row_ids,
        pos_in_cell=pos_in_cell,
        cell_index=cell_index,
        attention_len=len(token_ids),
        truncated_rows=truncated_rows,
        full_length=full_length,
        n_rows=n_rows,
        n_cols=n_cols,
    )
