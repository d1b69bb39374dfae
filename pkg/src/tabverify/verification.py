"""Task heads, weighted losses, the two-phase training schedule,
checkpoint selection, and inference drivers.

Verdict classification reads the first ([CLS]) hidden state through a
linear layer with softmax; class weights counter label imbalance
(weight = biggest class size / class size). Evidence finding maps every
token's hidden state to a logit, averages logits per cell, and applies
a sigmoid, trained with a weighted binary cross-entropy where relevant
cells carry weight ``w_p``.

Verdict training runs two phases: the head alone with the encoder
frozen, then the full model at a lower learning rate. Evidence training
runs a single full-model phase. The validation selection metric is
evaluated every ``checkpoint_every`` steps (and once at the end) and
the best-scoring parameters are returned.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import neural_core as nc
from .autodiff import Tensor
from .encoding import EncodedExample, Vocab, build_vocab, encode_example, template_statement
from .metrics import evidence_f1, evidence_f1_corpus, f1_micro_2way, f1_micro_3way
from .neural_core import (
    AdamState,
    Checkpoint,
    CheckpointError,
    EncoderConfig,
    EncodedBatch,
    GradCheckReport,
    INIT_STD,
    Parameters,
    TrainingError,
    collate,
    forward_batch,
    init_parameters,
    optimizer_step,
)
from .postprocess import prediction_to_raw_coords
from .preprocess import standardize_table
from .table_model import (
    VERDICT_ORDER,
    CellLabel,
    CellLabelGrid,
    Dataset,
    RawTable,
    SingleCellTable,
    StatementRecord,
    TabVerifyError,
    TableValidationError,
    Verdict,
)

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-12
HEAD_VERDICT_W = "head.verdict.w"
HEAD_VERDICT_B = "head.verdict.b"
HEAD_CELLS_W = "head.cells.w"
HEAD_CELLS_B = "head.cells.b"
HEAD_NAMES = (HEAD_VERDICT_W, HEAD_VERDICT_B, HEAD_CELLS_W, HEAD_CELLS_B)

_VERDICT_INDEX = {v: i for i, v in enumerate(VERDICT_ORDER)}


class RoutingError(TabVerifyError):
    """A statement cannot be dispatched to a per-verdict model."""


class ClampCounter:
    """Counts log-domain clamps applied inside the loss functions."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            self.count += int(n)
            logger.warning("clamped %d zero probabilities in loss", n)

    def reset(self) -> None:
        self.count = 0


clamp_counter = ClampCounter()


# ---------------------------------------------------------------------------
# Class weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassWeights:
    weights: dict[Verdict, float]

    def __post_init__(self) -> None:
        if not self.weights:
            raise ValueError("class weights cannot be empty")
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError(f"class weights must be positive: {self.weights}")
        if abs(min(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError(
                f"the smallest class weight must be exactly 1: {self.weights}"
            )

    def __getitem__(self, verdict: Verdict) -> float:
        return self.weights[verdict]

    @classmethod
    def unit(cls, labels: Iterable[Verdict] = VERDICT_ORDER) -> "ClassWeights":
        return cls({v: 1.0 for v in labels})


def compute_class_weights(counts: Mapping[Verdict, int]) -> ClassWeights:
    """weight_k = size of the biggest class / size of class k."""
    if not counts:
        raise ValueError("no class counts given")
    for verdict, count in counts.items():
        if count <= 0:
            raise ValueError(f"class {verdict} has non-positive count {count}")
    biggest = max(counts.values())
    return ClassWeights({v: biggest / c for v, c in counts.items()})


# ---------------------------------------------------------------------------
# Train configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 3
    phase1_lr: float = 1e-3
    phase2_epochs: int = 10
    phase2_lr: float = 1e-4
    batch_size: int = 8
    checkpoint_every: int | None = None    # default 100 (verdict) / 50 (evidence)
    w_p: float = 10.0
    selection_metric: str | None = None    # default per task
    seed: int = 0
    max_steps: int | None = None           # optional global step budget
    weight_decay: float = 0.01
    max_len: int = 512
    vocab_max_size: int = 12288

    def __post_init__(self) -> None:
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.phase2_lr > self.phase1_lr:
            raise ValueError(
                f"phase2_lr ({self.phase2_lr}) must not exceed phase1_lr "
                f"({self.phase1_lr})"
            )
        if self.batch_size < 1 or self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.w_p <= 0:
            raise ValueError("w_p must be positive")


def _resolve_every(cfg: TrainConfig, task: str) -> int:
    if cfg.checkpoint_every is not None:
        return cfg.checkpoint_every
    return 100 if task == "verdict" else 50


def _resolve_metric(cfg: TrainConfig, task: str) -> str:
    if cfg.selection_metric is not None:
        return cfg.selection_metric
    return "f1_micro_3way" if task == "verdict" else "evidence_f1"


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------

def attach_heads(params: Parameters, rng: np.random.Generator) -> None:
    """Register the verdict and cell-selection heads on the encoder."""
    d = params.config.d_model
    params.register(HEAD_VERDICT_W, rng.normal(0.0, INIT_STD, size=(d, 3)))
    params.register(HEAD_VERDICT_B, np.zeros(3))
    params.register(HEAD_CELLS_W, rng.normal(0.0, INIT_STD, size=(d, 1)))
    params.register(HEAD_CELLS_B, np.zeros(1))


def init_model(cfg: EncoderConfig, seed: int | None = None) -> Parameters:
    """Encoder plus both heads, initialized from one seeded stream."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = init_parameters(cfg, rng=rng)
    attach_heads(params, rng)
    return params


def model_from_checkpoint(ck: Checkpoint) -> tuple[Parameters, Vocab]:
    params = init_model(ck.config, seed=ck.config.seed)
    params.load_arrays(ck.arrays)
    if ck.vocab_tokens is None:
        raise CheckpointError("checkpoint carries no vocabulary")
    return params, Vocab(ck.vocab_tokens)


# ---------------------------------------------------------------------------
# Heads (forward)
# ---------------------------------------------------------------------------

def _verdict_probs_from_hidden(params: Parameters, h: Tensor) -> Tensor:
    cls = ad.select_index(h, 1, 0)                       # (B, d)
    logits = ad.matmul(cls, params[HEAD_VERDICT_W]) + params[HEAD_VERDICT_B]
    return ad.softmax(logits)                            # (B, 3)


def verdict_forward(params: Parameters, example: EncodedExample) -> np.ndarray:
    """Probability triple (entailed, refuted, unknown); sums to 1."""
    batch = collate([example])
    probs = _verdict_probs_from_hidden(params, forward_batch(params, batch))
    return probs.data[0].copy()


def _body_cells(ex: EncodedExample) -> list[int]:
    return [ci for ci in ex.kept_cell_indices() if ci >= ex.n_cols]


def _cell_average_matrix(
    batch: EncodedBatch,
) -> tuple[np.ndarray, np.ndarray, list[list[tuple[int, int]]]]:
    """Constant token-to-cell averaging tensor for a batch.

    Returns (A, valid, coords): ``A[i, j]`` averages example i's tokens
    of its j-th body cell; ``coords[i][j]`` is that cell's (row, col) on
    the standardized grid. Rows of ``A`` beyond example i's cell count
    are zero and flagged invalid.
    """
    b, t = batch.cell_index.shape
    per_example = [_body_cells(ex) for ex in batch.examples]
    c_max = max((len(cells) for cells in per_example), default=0)
    c_max = max(c_max, 1)
    a = np.zeros((b, c_max, t))
    valid = np.zeros((b, c_max), dtype=bool)
    coords: list[list[tuple[int, int]]] = []
    for i, cells in enumerate(per_example):
        ex = batch.examples[i]
        row_coords = []
        for j, ci in enumerate(cells):
            positions = np.nonzero(batch.cell_index[i] == ci)[0]
            a[i, j, positions] = 1.0 / len(positions)
            valid[i, j] = True
            row_coords.append((ci // ex.n_cols, ci % ex.n_cols))
        coords.append(row_coords)
    return a, valid, coords


def _cell_probs_from_hidden(
    params: Parameters, h: Tensor, averaging: np.ndarray
) -> Tensor:
    b, t = averaging.shape[0], averaging.shape[2]
    token_logits = ad.matmul(h, params[HEAD_CELLS_W]) + params[HEAD_CELLS_B]
    cell_logits = ad.matmul(Tensor(averaging), token_logits)   # (B, C, 1)
    return ad.sigmoid(ad.reshape(cell_logits, (b, averaging.shape[1])))


def cell_select_forward(
    params: Parameters, example: EncodedExample
) -> dict[tuple[int, int], float]:
    """Selection probability per non-truncated body cell, keyed by the
    standardized-grid coordinate."""
    batch = collate([example])
    averaging, valid, coords = _cell_average_matrix(batch)
    probs = _cell_probs_from_hidden(params, forward_batch(params, batch),
                                    averaging)
    out: dict[tuple[int, int], float] = {}
    for j, coord in enumerate(coords[0]):
        out[coord] = float(probs.data[0, j])
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def weighted_ce_loss(
    probs: Tensor | np.ndarray | Sequence[Sequence[float]],
    gold: Sequence[Verdict],
    weights: ClassWeights,
) -> Tensor:
    """Sum over the batch of ``-w_gold * log(p_gold)``.

    Zero gold probabilities are clamped at 1e-12 and counted on
    ``clamp_counter``. Returns a scalar tensor (pass live probabilities
    to obtain gradients; ``float()`` extracts the value).
    """
    probs_t = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs))
    data = probs_t.data
    if data.ndim == 1:
        probs_t = ad.reshape(probs_t, (1, data.shape[0]))
        data = probs_t.data
    n, k = data.shape
    if len(gold) != n:
        raise ValueError(f"{len(gold)} gold labels for {n} probability rows")
    gold_idx = np.array([_VERDICT_INDEX[g] for g in gold])
    picked = np.zeros((n, k))
    picked[np.arange(n), gold_idx] = [weights[g] for g in gold]
    clamp_counter.add(int((data[np.arange(n), gold_idx] < CLAMP_EPS).sum()))
    log_probs = ad.log(ad.clamp_min(probs_t, CLAMP_EPS))
    return ad.tsum(log_probs * picked) * -1.0


def _bce_from_tensor(
    probs: Tensor, targets: np.ndarray, valid: np.ndarray, w_p: float
) -> Tensor:
    """-sum over valid cells of [w_p*y*log(p) + (1-y)*log(1-p)]."""
    pos_w = w_p * targets * valid
    neg_w = (1.0 - targets) * valid
    p = probs.data
    clamp_counter.add(int(((p < CLAMP_EPS) & (targets == 1) & valid).sum()))
    clamp_counter.add(int(((1.0 - p < CLAMP_EPS) & (targets == 0) & valid).sum()))
    log_p = ad.log(ad.clamp_min(probs, CLAMP_EPS))
    log_1mp = ad.log(ad.clamp_min(1.0 - probs, CLAMP_EPS))
    return ad.tsum(log_p * pos_w + log_1mp * neg_w) * -1.0


def weighted_bce_loss(
    cell_probs: Mapping[tuple[int, int], float],
    grid: CellLabelGrid,
    w_p: float,
) -> Tensor:
    """Weighted binary cross-entropy over one statement's labeled cells.

    The grid must keep excluded labels exactly on its header row (the
    standardized row 0); excluded cells contribute no terms. Cells
    absent from ``cell_probs`` (truncated rows) are skipped.
    """
    for c in range(grid.n_cols):
        if grid.labels[0][c] is not CellLabel.EXCLUDED:
            raise TableValidationError(
                f"statement {grid.statement_id!r}: header cell (0, {c}) must "
                f"be excluded, got {grid.labels[0][c]}"
            )
    for r in range(1, grid.n_rows):
        for c in range(grid.n_cols):
            if grid.labels[r][c] is CellLabel.EXCLUDED:
                raise TableValidationError(
                    f"statement {grid.statement_id!r}: body cell ({r}, {c}) "
                    f"must not be excluded"
                )
    coords = sorted(cell_probs)
    targets = np.array(
        [1.0 if grid.labels[r][c] is CellLabel.RELEVANT else 0.0
         for (r, c) in coords]
    )
    probs = Tensor(np.array([float(cell_probs[c]) for c in coords]))
    return _bce_from_tensor(probs, targets, np.ones_like(targets, dtype=bool),
                            w_p)


# ---------------------------------------------------------------------------
# Example preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedExample:
    record: StatementRecord
    encoded: EncodedExample
    cell_targets: np.ndarray | None = None   # aligned with _body_cells order


@dataclass
class PreparedData:
    examples: list[PreparedExample]
    skipped: list[tuple[str, str]] = field(default_factory=list)


def _standardize_all(
    datasets: Sequence[Dataset],
) -> dict[str, tuple[SingleCellTable, RawTable]]:
    cache: dict[str, tuple[SingleCellTable, RawTable]] = {}
    for ds in datasets:
        for tid, raw in ds.tables.items():
            if tid not in cache:
                std, _ = standardize_table(raw)
                cache[tid] = (std, raw)
    return cache


def _variant_to_grid(
    record: StatementRecord,
    std: SingleCellTable,
    raw: RawTable,
) -> CellLabelGrid:
    """Training label grid from the first evidence variant.

    Variant coordinates sit on the raw grid; they are pushed through the
    span structure so spanned evidence marks every covered position, and
    header coordinates drop out as excluded.
    """
    from .preprocess import expand_spans, propagate_evidence_labels

    expanded = expand_spans(raw)
    labels: dict[int, CellLabel] = {}
    if record.evidence_variants:
        for (r, c) in sorted(record.evidence_variants[0]):
            labels[expanded.span_origin[r][c]] = CellLabel.RELEVANT
    return propagate_evidence_labels(labels, std, record.statement_id)


def prepare_examples(
    dataset: Dataset,
    vocab: Vocab,
    task: str,
    tables: dict[str, tuple[SingleCellTable, RawTable]],
    max_len: int = 512,
    template_statements: bool = False,
    verdict_filter: Verdict | None = None,
) -> PreparedData:
    """Standardize, template, encode, and label a dataset for one task."""
    from .encoding import EncodingError

    out = PreparedData(examples=[])
    for record in dataset.statements:
        if task == "evidence":
            if record.verdict is Verdict.UNKNOWN:
                out.skipped.append((record.statement_id, "unknown verdict"))
                continue
            if not record.evidence_variants:
                out.skipped.append((record.statement_id, "no evidence variants"))
                continue
        if verdict_filter is not None and record.verdict is not verdict_filter:
            out.skipped.append((record.statement_id, "filtered verdict"))
            continue
        std, raw = tables[record.table_id]
        text = record.text
        if template_statements:
            text = template_statement(text, record.verdict)
        try:
            encoded = encode_example(text, std, vocab, max_len=max_len)
        except EncodingError as exc:
            out.skipped.append((record.statement_id, str(exc)))
            continue
        targets = None
        if task == "evidence":
            grid = _variant_to_grid(record, std, raw)
            targets = np.array(
                [
                    1.0 if grid.labels[ci // encoded.n_cols][ci % encoded.n_cols]
                    is CellLabel.RELEVANT else 0.0
                    for ci in _body_cells(encoded)
                ]
            )
        out.examples.append(PreparedExample(record=record, encoded=encoded,
                                            cell_targets=targets))
    return out


def _corpus_texts(
    dataset: Dataset,
    tables: dict[str, tuple[SingleCellTable, RawTable]],
    template_statements: bool,
) -> list[str]:
    texts = []
    for record in dataset.statements:
        if template_statements and record.verdict is not Verdict.UNKNOWN:
            texts.append(template_statement(record.text, record.verdict))
        else:
            texts.append(record.text)
    for tid in sorted(dataset.tables):
        std, _ = tables[tid]
        for row in std.grid:
            texts.extend(row)
    return texts


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_step: int
    best_metric: float


def _predict_verdicts_from_cls(
    params: Parameters, cls_features: np.ndarray
) -> list[Verdict]:
    logits = cls_features @ params[HEAD_VERDICT_W].data + params[HEAD_VERDICT_B].data
    return [VERDICT_ORDER[i] for i in logits.argmax(axis=1)]


def _cls_features(
    params: Parameters, examples: list[PreparedExample], batch_size: int = 32
) -> np.ndarray:
    chunks = []
    for start in range(0, len(examples), batch_size):
        batch = collate([p.encoded for p in examples[start:start + batch_size]])
        h = forward_batch(params, batch)
        chunks.append(h.data[:, 0, :].copy())
    return np.concatenate(chunks) if chunks else np.zeros(
        (0, params.config.d_model)
    )


def _verdict_metric(metric_name: str, gold: list[Verdict],
                    pred: list[Verdict]) -> float:
    if metric_name == "f1_micro_3way":
        return f1_micro_3way(gold, pred).micro
    if metric_name == "f1_micro_2way":
        return f1_micro_2way(gold, pred)
    raise ValueError(f"unknown selection metric {metric_name!r}")


def _eval_verdict(
    params: Parameters,
    val: PreparedData,
    metric_name: str,
    cls_cache: np.ndarray | None = None,
    batch_size: int = 32,
) -> float:
    if not val.examples:
        return 0.0
    if cls_cache is None:
        cls_cache = _cls_features(params, val.examples, batch_size)
    pred = _predict_verdicts_from_cls(params, cls_cache)
    gold = [p.record.verdict for p in val.examples]
    return _verdict_metric(metric_name, gold, pred)


def _eval_evidence(
    params: Parameters,
    val: PreparedData,
    tables: dict[str, tuple[SingleCellTable, RawTable]],
    threshold: float,
    batch_size: int = 32,
) -> float:
    if not val.examples:
        return 0.0
    scores = []
    for start in range(0, len(val.examples), batch_size):
        chunk = val.examples[start:start + batch_size]
        batch = collate([p.encoded for p in chunk])
        averaging, _, coords = _cell_average_matrix(batch)
        probs = _cell_probs_from_hidden(
            params, forward_batch(params, batch), averaging
        )
        for i, prepared in enumerate(chunk):
            std, raw = tables[prepared.record.table_id]
            grid = _grid_from_probs(
                probs.data[i], coords[i], prepared.encoded, threshold,
                prepared.record.statement_id,
            )
            predicted = prediction_to_raw_coords(grid, std, raw)
            scores.append(
                evidence_f1(predicted, prepared.record.evidence_variants)
            )
    return evidence_f1_corpus(scores)


def _grid_from_probs(
    probs_row: np.ndarray,
    coords: list[tuple[int, int]],
    encoded: EncodedExample,
    threshold: float,
    statement_id: str,
) -> CellLabelGrid:
    labels = [
        [CellLabel.EXCLUDED if r == 0 else CellLabel.IRRELEVANT
         for _ in range(encoded.n_cols)]
        for r in range(encoded.n_rows)
    ]
    for j, (r, c) in enumerate(coords):
        if probs_row[j] > threshold:
            labels[r][c] = CellLabel.RELEVANT
    return CellLabelGrid(
        statement_id=statement_id,
        labels=tuple(tuple(row) for row in labels),
    )


def train(
    task: str,
    train_ds: Dataset,
    val_ds: Dataset,
    train_cfg: TrainConfig,
    encoder_cfg: EncoderConfig | None = None,
    init_from: Checkpoint | None = None,
    template_statements: bool = False,
    verdict_filter: Verdict | None = None,
    threshold: float = 0.5,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Fit a model for one task and return the best validation checkpoint.

    ``init_from`` chains fine-tuning from an earlier checkpoint: its
    vocabulary and architecture are reused, and a conflicting
    ``encoder_cfg`` is a config-mismatch error. Fresh runs build the
    vocabulary from the training corpus.
    """
    if task not in ("verdict", "evidence"):
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(train_cfg.seed)
    every = _resolve_every(train_cfg, task)
    metric_name = _resolve_metric(train_cfg, task)
    tables = _standardize_all([train_ds, val_ds])

    if init_from is not None:
        if encoder_cfg is not None and not encoder_cfg.same_architecture(
            init_from.config
        ):
            raise CheckpointError(
                "config mismatch: checkpoint architecture "
                f"{init_from.config} differs from requested {encoder_cfg}"
            )
        enc_cfg = init_from.config
        if init_from.vocab_tokens is None:
            raise CheckpointError("checkpoint carries no vocabulary")
        vocab = Vocab(init_from.vocab_tokens)
        params = init_model(enc_cfg, seed=train_cfg.seed)
        params.load_arrays(init_from.arrays)
    else:
        vocab = build_vocab(
            _corpus_texts(train_ds, tables, template_statements),
            train_cfg.vocab_max_size,
        )
        if encoder_cfg is None:
            enc_cfg = EncoderConfig(vocab_size=len(vocab), seed=train_cfg.seed)
        else:
            enc_cfg = replace(encoder_cfg, vocab_size=len(vocab))
        params = init_model(enc_cfg, seed=train_cfg.seed)

    prepared_train = prepare_examples(
        train_ds, vocab, task, tables, train_cfg.max_len,
        template_statements, verdict_filter,
    )
    prepared_val = prepare_examples(
        val_ds, vocab, task, tables, train_cfg.max_len,
        template_statements, verdict_filter,
    )
    if not prepared_train.examples:
        raise TrainingError("no trainable examples after preparation")

    weights = ClassWeights.unit()
    if task == "verdict":
        counts: dict[Verdict, int] = {}
        for p in prepared_train.examples:
            counts[p.record.verdict] = counts.get(p.record.verdict, 0) + 1
        weights = compute_class_weights(counts)

    opt = AdamState.fresh(params)
    step = 0
    last_loss = math.nan
    log: list[dict] = []
    best_metric = -math.inf
    best_step = -1
    best_arrays: dict[str, np.ndarray] | None = None
    best_opt: AdamState | None = None
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def snapshot_checkpoint(arrays, opt_snapshot, at_step) -> Checkpoint:
        return Checkpoint(
            config=enc_cfg,
            arrays=arrays,
            step=at_step,
            opt_state=opt_snapshot,
            vocab_tokens=vocab.tokens,
            meta={
                "task": task,
                "selection_metric": metric_name,
                "template_statements": template_statements,
                "threshold": threshold,
                "max_len": train_cfg.max_len,
                "verdict_filter": verdict_filter.value if verdict_filter else None,
            },
        )

    def evaluate(phase: str, cls_cache: np.ndarray | None = None) -> None:
        nonlocal best_metric, best_step, best_arrays, best_opt
        if task == "verdict":
            metric = _eval_verdict(params, prepared_val, metric_name, cls_cache)
        else:
            metric = _eval_evidence(params, prepared_val, tables, threshold)
        entry = {"step": step, "metric": metric,
                 "loss": None if math.isnan(last_loss) else last_loss,
                 "phase": phase}
        log.append(entry)
        if metric > best_metric:
            best_metric = metric
            best_step = step
            best_arrays = params.arrays()
            best_opt = AdamState(
                m={k: v.copy() for k, v in opt.m.items()},
                v={k: v.copy() for k, v in opt.v.items()},
                t=opt.t,
            )
            if out_path is not None:
                nc.save_checkpoint(
                    snapshot_checkpoint(best_arrays, best_opt, step),
                    out_path / f"{step}.ckpt",
                )

    def budget_left() -> bool:
        return train_cfg.max_steps is None or step < train_cfg.max_steps

    def check_finite(loss_value: float) -> None:
        if not math.isfinite(loss_value):
            raise TrainingError(f"non-finite loss at step {step + 1}")

    # Phase 1 (verdict only): head alone, encoder frozen. Encoder outputs
    # are constant while frozen, so [CLS] features are computed once.
    if task == "verdict" and train_cfg.phase1_epochs > 0:
        train_cls = _cls_features(params, prepared_train.examples)
        val_cls = _cls_features(params, prepared_val.examples)
        gold = [p.record.verdict for p in prepared_train.examples]
        n = len(prepared_train.examples)
        head_names = [HEAD_VERDICT_W, HEAD_VERDICT_B]
        for _ in range(train_cfg.phase1_epochs):
            if not budget_left():
                break
            order = rng.permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                if not budget_left():
                    break
                idx = order[start:start + train_cfg.batch_size]
                cls = Tensor(train_cls[idx])
                logits = ad.matmul(cls, params[HEAD_VERDICT_W]) + params[HEAD_VERDICT_B]
                loss = weighted_ce_loss(ad.softmax(logits),
                                        [gold[i] for i in idx], weights)
                last_loss = float(loss)
                check_finite(last_loss)
                params.zero_grads()
                ad.backward(loss)
                optimizer_step(params, params.grads(), opt,
                               lr=train_cfg.phase1_lr,
                               weight_decay=train_cfg.weight_decay,
                               names=head_names)
                step += 1
                if step % every == 0:
                    evaluate("phase1", cls_cache=val_cls)

    # Phase 2 (verdict) / single phase (evidence): the full model.
    epochs = train_cfg.phase2_epochs
    n = len(prepared_train.examples)
    for _ in range(epochs):
        if not budget_left():
            break
        order = rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            if not budget_left():
                break
            chunk = [prepared_train.examples[i]
                     for i in order[start:start + train_cfg.batch_size]]
            batch = collate([p.encoded for p in chunk])
            h = forward_batch(params, batch)
            if task == "verdict":
                probs = _verdict_probs_from_hidden(params, h)
                loss = weighted_ce_loss(probs, [p.record.verdict for p in chunk],
                                        weights)
            else:
                averaging, valid, _ = _cell_average_matrix(batch)
                probs = _cell_probs_from_hidden(params, h, averaging)
                targets = np.zeros(valid.shape)
                for i, p in enumerate(chunk):
                    targets[i, :len(p.cell_targets)] = p.cell_targets
                loss = _bce_from_tensor(probs, targets, valid, train_cfg.w_p)
            last_loss = float(loss)
            check_finite(last_loss)
            params.zero_grads()
            ad.backward(loss)
            optimizer_step(params, params.grads(), opt,
                           lr=train_cfg.phase2_lr,
                           weight_decay=train_cfg.weight_decay)
            step += 1
            if step % every == 0:
                evaluate("phase2")

    if not log or log[-1]["step"] != step:
        evaluate("final")

    assert best_arrays is not None
    result = TrainResult(
        checkpoint=snapshot_checkpoint(best_arrays, best_opt, best_step),
        log=log,
        best_step=best_step,
        best_metric=best_metric,
    )
    if out_path is not None:
        with open(out_path / "train_log.jsonl", "w", encoding="utf-8",
                  newline="\n") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        manifest = {
            "best_step": best_step,
            "best_metric": best_metric,
            "best_checkpoint": f"{best_step}.ckpt",
            "evaluations": len(log),
            "task": task,
            "selection_metric": metric_name,
        }
        with open(out_path / "manifest.json", "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return result


def train_separate(
    train_ds: Dataset,
    val_ds: Dataset,
    train_cfg: TrainConfig,
    encoder_cfg: EncoderConfig | None = None,
    init_from: Checkpoint | None = None,
    template_statements: bool = False,
    threshold: float = 0.5,
    out_dir: str | Path | None = None,
) -> tuple[TrainResult, TrainResult]:
    """Two evidence models, one per verdict class."""
    results = []
    for verdict in (Verdict.ENTAILED, Verdict.REFUTED):
        sub_dir = None
        if out_dir is not None:
            sub_dir = Path(out_dir) / verdict.value
        results.append(
            train(
                "evidence", train_ds, val_ds, train_cfg,
                encoder_cfg=encoder_cfg, init_from=init_from,
                template_statements=template_statements,
                verdict_filter=verdict, threshold=threshold, out_dir=sub_dir,
            )
        )
    return results[0], results[1]


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _prepare_for_prediction(
    checkpoint: Checkpoint,
    dataset: Dataset,
    task: str,
    max_len: int | None,
) -> tuple[Parameters, PreparedData, dict[str, tuple[SingleCellTable, RawTable]]]:
    params, vocab = model_from_checkpoint(checkpoint)
    meta = checkpoint.meta or {}
    tables = _standardize_all([dataset])
    prepared = prepare_examples(
        dataset, vocab,
        task="verdict",  # never drop statements at prediction time
        tables=tables,
        max_len=max_len or int(meta.get("max_len", 512)),
        template_statements=(task == "evidence"
                             and bool(meta.get("template_statements"))),
    )
    return params, prepared, tables


def predict_verdict(
    checkpoint: Checkpoint,
    dataset: Dataset,
    max_len: int | None = None,
    batch_size: int = 32,
) -> tuple[list[StatementRecord], list[tuple[str, str]]]:
    """Deterministic verdict predictions for every statement.

    Statements that fail to encode (oversize) fall back to unknown and
    are reported in the error list rather than aborting the run. Ties
    break in entailed < refuted < unknown order.
    """
    params, prepared, _ = _prepare_for_prediction(
        checkpoint, dataset, "verdict", max_len
    )
    predictions: dict[str, Verdict] = {}
    for start in range(0, len(prepared.examples), batch_size):
        chunk = prepared.examples[start:start + batch_size]
        batch = collate([p.encoded for p in chunk])
        probs = _verdict_probs_from_hidden(params, forward_batch(params, batch))
        for i, p in enumerate(chunk):
            predictions[p.record.statement_id] = VERDICT_ORDER[
                int(probs.data[i].argmax())
            ]
    records = []
    for st in dataset.statements:
        verdict = predictions.get(st.statement_id, Verdict.UNKNOWN)
        records.append(
            StatementRecord(
                statement_id=st.statement_id,
                table_id=st.table_id,
                text=st.text,
                verdict=verdict,
                evidence_variants=(),
            )
        )
    return records, prepared.skipped


def predict_cells(
    checkpoint: Checkpoint,
    dataset: Dataset,
    threshold: float = 0.5,
    max_len: int | None = None,
    batch_size: int = 32,
) -> tuple[dict[str, CellLabelGrid], list[tuple[str, str]]]:
    """Per-statement relevance grids on the standardized tables.

    A cell is relevant iff its probability strictly exceeds the
    threshold. Header cells stay excluded (post-processing reconstructs
    them); truncated rows stay irrelevant.
    """
    params, prepared, _ = _prepare_for_prediction(
        checkpoint, dataset, "evidence", max_len
    )
    grids: dict[str, CellLabelGrid] = {}
    for start in range(0, len(prepared.examples), batch_size):
        chunk = prepared.examples[start:start + batch_size]
        batch = collate([p.encoded for p in chunk])
        averaging, _, coords = _cell_average_matrix(batch)
        probs = _cell_probs_from_hidden(
            params, forward_batch(params, batch), averaging
        )
        for i, p in enumerate(chunk):
            grids[p.record.statement_id] = _grid_from_probs(
                probs.data[i], coords[i], p.encoded, threshold,
                p.record.statement_id,
            )
    return grids, prepared.skipped


def route_separate(
    checkpoint_entailed: Checkpoint,
    checkpoint_refuted: Checkpoint,
    dataset: Dataset,
    threshold: float = 0.5,
    max_len: int | None = None,
) -> tuple[dict[str, CellLabelGrid], list[tuple[str, str]]]:
    """Dispatch each statement to the model matching its given verdict."""
    for st in dataset.statements:
        if st.verdict is Verdict.UNKNOWN:
            raise RoutingError(
                f"statement {st.statement_id!r} has verdict unknown; separate "
                f"routing needs entailed or refuted"
            )
    merged: dict[str, CellLabelGrid] = {}
    errors: list[tuple[str, str]] = []
    for verdict, checkpoint in (
        (Verdict.ENTAILED, checkpoint_entailed),
        (Verdict.REFUTED, checkpoint_refuted),
    ):
        subset = Dataset(
            tables=dataset.tables,
            statements=[st for st in dataset.statements
                        if st.verdict is verdict],
            split_name=dataset.split_name,
        )
        if not subset.statements:
            continue
        grids, errs = predict_cells(checkpoint, subset, threshold, max_len)
        merged.update(grids)
        errors.extend(errs)
    return merged, errors


# ---------------------------------------------------------------------------
# Gradient check with both heads
# ---------------------------------------------------------------------------

def grad_check_with_heads(
    cfg: EncoderConfig | None = None,
    tolerance: float = 1e-4,
    samples_per_tensor: int = 10,
) -> GradCheckReport:
    """Finite-difference check over every parameter group of a tiny model
    with the verdict and cell heads attached and both losses active."""
    if cfg is None:
        cfg = EncoderConfig(
            vocab_size=24, d_model=8, n_layers=2, n_heads=2, ffn_dim=16,
            max_position=8, max_columns=4, max_rows=4, seed=3,
        )
    params = init_model(cfg, seed=cfg.seed)
    batch = nc._default_check_batch(cfg)
    averaging, valid, _ = _cell_average_matrix(batch)
    targets = np.zeros(valid.shape)
    targets[:, 0] = 1.0
    gold = [Verdict.ENTAILED, Verdict.UNKNOWN]
    weights = ClassWeights(
        {Verdict.ENTAILED: 1.5, Verdict.REFUTED: 1.0, Verdict.UNKNOWN: 2.0}
    )

    def loss_fn(p: Parameters) -> Tensor:
        h = forward_batch(p, batch)
        ce = weighted_ce_loss(_verdict_probs_from_hidden(p, h), gold, weights)
        bce = _bce_from_tensor(
            _cell_probs_from_hidden(p, h, averaging), targets, valid, 10.0
        )
        return ce + bce

    return nc.grad_check(cfg, tolerance, loss_fn=loss_fn, params=params,
                         samples_per_tensor=samples_per_tensor)
