"""A compact trainable transformer encoder for encoded table statements.

Each token is embedded as the sum of five learned tables (token id,
segment, column, row, in-cell position), run through pre-norm
self-attention blocks with residual connections, and normalized once at
the end, so a zero-layer stack returns the normalized embedding sum.
Training is full-precision (float64) and deterministic for a fixed seed.

The optimizer is adaptive-moment with decoupled weight decay
(beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected, decay applied
multiplicatively as ``p *= 1 - lr*wd``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .encoding import EncodedExample
from .table_model import TabVerifyError

LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
INIT_STD = 0.02


class TrainingError(TabVerifyError):
    """Numerical failure during training (non-finite loss or gradient)."""


class CheckpointError(TabVerifyError):
    """Unreadable checkpoint or config mismatch on load."""


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    max_position: int = 64
    max_columns: int = 64
    max_rows: int = 128
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        dims = (self.vocab_size, self.d_model, self.n_heads, self.ffn_dim,
                self.max_position, self.max_columns, self.max_rows)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all encoder dimensions must be positive: {self}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1): {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)

    def same_architecture(self, other: "EncoderConfig") -> bool:
        a, b = self.to_dict(), other.to_dict()
        a.pop("seed"), b.pop("seed")
        a.pop("dropout_rate"), b.pop("dropout_rate")
        return a == b


class Parameters:
    """Named parameter tensors in a fixed registration order."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._items: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._items:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(data, dtype=ad.DTYPE), requires_grad=True,
                   name=name)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def zero_grads(self) -> None:
        for t in self._items.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {name: t.grad for name, t in self._items.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._items.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._items.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            incoming = np.asarray(arrays[name], dtype=ad.DTYPE)
            if incoming.shape != t.data.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {incoming.shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = incoming.copy()


def _layer_names(i: int) -> dict[str, str]:
    p = f"layer{i}"
    return {k: f"{p}.{k}" for k in (
        "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
        "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.gain", "ln2.bias",
        "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    )}


def init_parameters(cfg: EncoderConfig, seed: int | None = None,
                    rng: np.random.Generator | None = None) -> Parameters:
    """Deterministic initialization: weights N(0, 0.02), biases 0, LN gain 1."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d = cfg.d_model
    params = Parameters(cfg)

    def weight(name: str, shape):
        params.register(name, rng.normal(0.0, INIT_STD, size=shape))

    def bias(name: str, size):
        params.register(name, np.zeros(size))

    weight("embed.token", (cfg.vocab_size, d))
    weight("embed.segment", (2, d))
    weight("embed.column", (cfg.max_columns + 1, d))
    weight("embed.row", (cfg.max_rows + 1, d))
    weight("embed.pos", (cfg.max_position, d))
    for i in range(cfg.n_layers):
        n = _layer_names(i)
        params.register(n["ln1.gain"], np.ones(d))
        bias(n["ln1.bias"], d)
        for w in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            weight(n[w], (d, d))
        for b in ("attn.bq", "attn.bk", "attn.bv", "attn.bo"):
            bias(n[b], d)
        params.register(n["ln2.gain"], np.ones(d))
        bias(n["ln2.bias"], d)
        weight(n["ffn.w1"], (d, cfg.ffn_dim))
        bias(n["ffn.b1"], cfg.ffn_dim)
        weight(n["ffn.w2"], (cfg.ffn_dim, d))
        bias(n["ffn.b2"], d)
    params.register("final_ln.gain", np.ones(d))
    bias("final_ln.bias", d)
    return params


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class EncodedBatch:
    """Padded index arrays for a batch of encoded examples."""

    token_ids: np.ndarray      # (B, T) int64
    segment_ids: np.ndarray
    column_ids: np.ndarray
    row_ids: np.ndarray
    pos_in_cell: np.ndarray
    cell_index: np.ndarray     # (B, T), -1 outside table / padding
    mask: np.ndarray           # (B, T) bool, True on real tokens
    examples: list[EncodedExample]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def collate(examples: list[EncodedExample]) -> EncodedBatch:
    b = len(examples)
    t = max(ex.attention_len for ex in examples)
    fields = {
        name: np.zeros((b, t), dtype=np.int64)
        for name in ("token_ids", "segment_ids", "column_ids", "row_ids",
                     "pos_in_cell")
    }
    cell_index = np.full((b, t), -1, dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i, ex in enumerate(examples):
        n = ex.attention_len
        for name, arr in fields.items():
            arr[i, :n] = getattr(ex, name)
        cell_index[i, :n] = ex.cell_index
        mask[i, :n] = True
    return EncodedBatch(cell_index=cell_index, mask=mask, examples=examples,
                        **fields)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _check_indices(name: str, arr: np.ndarray, size: int) -> None:
    lo, hi = int(arr.min()), int(arr.max())
    if lo < 0 or hi >= size:
        raise TabVerifyError(
            f"{name} index out of range: values span [{lo}, {hi}] but the "
            f"{name} embedding table has {size} entries"
        )


def forward_batch(params: Parameters, batch: EncodedBatch,
                  train_rng: np.random.Generator | None = None) -> Tensor:
    """Per-token hidden states, shape (B, T, d_model).

    Padded positions are masked out of attention (zero weight) but still
    produce hidden vectors; consumers must ignore them via the mask.
    Dropout applies only when the config rate is positive and a
    generator is supplied.
    """
    cfg = params.config
    _check_indices("token", batch.token_ids, cfg.vocab_size)
    _check_indices("segment", batch.segment_ids, 2)
    _check_indices("column", batch.column_ids, cfg.max_columns + 1)
    _check_indices("row", batch.row_ids, cfg.max_rows + 1)
    _check_indices("pos_in_cell", batch.pos_in_cell, cfg.max_position)

    rate = cfg.dropout_rate
    if rate > 0.0 and train_rng is None:
        rate = 0.0  # inference: dropout disabled

    x = ad.embedding(params["embed.token"], batch.token_ids)
    x = x + ad.embedding(params["embed.segment"], batch.segment_ids)
    x = x + ad.embedding(params["embed.column"], batch.column_ids)
    x = x + ad.embedding(params["embed.row"], batch.row_ids)
    x = x + ad.embedding(params["embed.pos"], batch.pos_in_cell)

    b, t = batch.token_ids.shape
    heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    key_mask = batch.mask[:, None, None, :]  # (B, 1, 1, T)

    for i in range(cfg.n_layers):
        n = _layer_names(i)
        # Self-attention sublayer (pre-norm, residual).
        h = ad.layer_norm(x, params[n["ln1.gain"]], params[n["ln1.bias"]], LN_EPS)

        def split_heads(m: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(m, (b, t, heads, dh)), (0, 2, 1, 3))

        q = split_heads(ad.matmul(h, params[n["attn.wq"]]) + params[n["attn.bq"]])
        k = split_heads(ad.matmul(h, params[n["attn.wk"]]) + params[n["attn.bk"]])
        v = split_heads(ad.matmul(h, params[n["attn.wv"]]) + params[n["attn.bv"]])
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        probs = ad.masked_softmax(scores, key_mask)
        if rate > 0.0:
            probs = ad.dropout(probs, rate, train_rng)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)),
                         (b, t, cfg.d_model))
        attn_out = ad.matmul(ctx, params[n["attn.wo"]]) + params[n["attn.bo"]]
        if rate > 0.0:
            attn_out = ad.dropout(attn_out, rate, train_rng)
        x = x + attn_out

        # Feed-forward sublayer.
        h = ad.layer_norm(x, params[n["ln2.gain"]], params[n["ln2.bias"]], LN_EPS)
        h = ad.gelu(ad.matmul(h, params[n["ffn.w1"]]) + params[n["ffn.b1"]])
        h = ad.matmul(h, params[n["ffn.w2"]]) + params[n["ffn.b2"]]
        if rate > 0.0:
            h = ad.dropout(h, rate, train_rng)
        x = x + h

    return ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"],
                         LN_EPS)


def encoder_forward(params: Parameters, example: EncodedExample) -> Tensor:
    """Hidden states for one example, shape (length, d_model)."""
    h = forward_batch(params, collate([example]))
    return ad.select_index(h, 0, 0)


def attention_probs(params: Parameters, batch: EncodedBatch) -> list[np.ndarray]:
    """Attention distributions per layer, for diagnostics and tests."""
    cfg = params.config
    out: list[np.ndarray] = []
    x = ad.embedding(params["embed.token"], batch.token_ids)
    x = x + ad.embedding(params["embed.segment"], batch.segment_ids)
    x = x + ad.embedding(params["embed.column"], batch.column_ids)
    x = x + ad.embedding(params["embed.row"], batch.row_ids)
    x = x + ad.embedding(params["embed.pos"], batch.pos_in_cell)
    b, t = batch.token_ids.shape
    heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    key_mask = batch.mask[:, None, None, :]
    for i in range(cfg.n_layers):
        n = _layer_names(i)
        h = ad.layer_norm(x, params[n["ln1.gain"]], params[n["ln1.bias"]], LN_EPS)

        def split_heads(m: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(m, (b, t, heads, dh)), (0, 2, 1, 3))

        q = split_heads(ad.matmul(h, params[n["attn.wq"]]) + params[n["attn.bq"]])
        k = split_heads(ad.matmul(h, params[n["attn.wk"]]) + params[n["attn.bk"]])
        v = split_heads(ad.matmul(h, params[n["attn.wv"]]) + params[n["attn.bv"]])
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        probs = ad.masked_softmax(scores, key_mask)
        out.append(probs.data.copy())
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)),
                         (b, t, cfg.d_model))
        x = x + ad.matmul(ctx, params[n["attn.wo"]]) + params[n["attn.bo"]]
        h = ad.layer_norm(x, params[n["ln2.gain"]], params[n["ln2.bias"]], LN_EPS)
        h = ad.gelu(ad.matmul(h, params[n["ffn.w1"]]) + params[n["ffn.b1"]])
        x = x + ad.matmul(h, params[n["ffn.w2"]]) + params[n["ffn.b2"]]
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, params: Parameters) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
            t=0,
        )


def optimizer_step(
    params: Parameters,
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    names: list[str] | None = None,
) -> None:
    """One adaptive-moment update in place; ``names`` limits which
    parameters move (the rest stay frozen, their moments untouched)."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name in (names if names is not None else params.names()):
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    per_group: dict[str, float]
    epsilon: float = 1e-4

    @property
    def max_relative_error(self) -> float:
        return max(self.per_group.values()) if self.per_group else 0.0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def format(self) -> str:
        lines = [f"{'group':<24} max_rel_error"]
        for name, err in self.per_group.items():
            lines.append(f"{name:<24} {err:.3e}")
        lines.append(
            f"overall {self.max_relative_error:.3e} "
            f"({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g})"
        )
        return "\n".join(lines)


def _relative_error(a: float, n: float) -> float:
    # Below magnitude 1e-3 the comparison is effectively absolute; central
    # differences at eps=1e-4 cannot resolve relative error on tiny grads.
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def _default_check_batch(cfg: EncoderConfig) -> EncodedBatch:
    rng = np.random.default_rng(7)
    examples = []
    for length in (9, 7):
        n_table = length - 4
        statement = list(rng.integers(4, cfg.vocab_size, size=2))
        token_ids = [2] + statement + [3] + list(
            rng.integers(4, cfg.vocab_size, size=n_table)
        )
        segment = [0] * 4 + [1] * n_table
        column = [0] * 4 + [(i % 2) + 1 for i in range(n_table)]
        row = [0] * 4 + [(i // 2) % 2 for i in range(n_table)]
        cell = [-1] * 4 + [i // 1 for i in range(n_table)]
        pos = list(range(4)) + [0] * n_table
        examples.append(EncodedExample(
            token_ids=token_ids, segment_ids=segment, column_ids=column,
            row_ids=row, pos_in_cell=pos, cell_index=cell,
            attention_len=length, truncated_rows=0, full_length=length,
            n_rows=2, n_cols=2,
        ))
    return collate(examples)


def grad_check(
    cfg: EncoderConfig,
    tolerance: float = 1e-4,
    loss_fn=None,
    params: Parameters | None = None,
    samples_per_tensor: int = 12,
    epsilon: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Every parameter group is probed on a deterministic sample of
    entries, with relative error |a - n| / max(|a|, |n|, 1e-3). Only
    tiny deterministic models are accepted (d_model <= 16, dropout 0).
    """
    if cfg.d_model > 16:
        raise ValueError("grad_check requires a tiny model (d_model <= 16)")
    if cfg.dropout_rate > 0.0:
        raise ValueError("grad_check requires dropout_rate == 0 (deterministic)")
    if params is None:
        params = init_parameters(cfg)
    if loss_fn is None:
        batch = _default_check_batch(cfg)

        def loss_fn(p: Parameters) -> Tensor:
            h = forward_batch(p, batch)
            return ad.tsum(h * h)

    params.zero_grads()
    loss = loss_fn(params)
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else
                       np.zeros_like(t.data))
                for name, t in params.items()}

    per_group: dict[str, float] = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        size = flat.size
        if size <= samples_per_tensor:
            idx = np.arange(size)
        else:
            idx = np.unique(np.linspace(0, size - 1, samples_per_tensor,
                                        dtype=int))
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            original = flat[i]
            flat[i] = original + epsilon
            plus = float(loss_fn(params).data)
            flat[i] = original - epsilon
            minus = float(loss_fn(params).data)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            worst = max(worst, _relative_error(float(a_flat[i]), numeric))
        per_group[name] = worst
    return GradCheckReport(tolerance=tolerance, per_group=per_group,
                           epsilon=epsilon)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TABVERIFY-CKPT-1\n"


@dataclass
class Checkpoint:
    config: EncoderConfig
    arrays: dict[str, np.ndarray]
    step: int = 0
    opt_state: AdamState | None = None
    vocab_tokens: list[str] | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Write a checkpoint file: a JSON header plus raw float64 buffers.

    The byte stream is fully determined by the checkpoint contents, so
    identical training runs produce identical files.
    """
    names = list(ck.arrays)
    header = {
        "config": ck.config.to_dict(),
        "step": ck.step,
        "tensors": [{"name": n, "shape": list(ck.arrays[n].shape)}
                    for n in names],
        "opt": None,
        "vocab": ck.vocab_tokens,
        "meta": ck.meta,
    }
    if ck.opt_state is not None:
        header["opt"] = {"t": ck.opt_state.t, "names": list(ck.opt_state.m)}
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    header_bytes = json.dumps(header, sort_keys=True,
                              ensure_ascii=False).encode("utf-8")
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for n in names:
        buf.write(np.ascontiguousarray(ck.arrays[n], dtype="<f8").tobytes())
    if ck.opt_state is not None:
        for n in header["opt"]["names"]:
            buf.write(np.ascontiguousarray(ck.opt_state.m[n],
                                           dtype="<f8").tobytes())
        for n in header["opt"]["names"]:
            buf.write(np.ascontiguousarray(ck.opt_state.v[n],
                                           dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(_CKPT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    offset += header_len
    cfg = EncoderConfig.from_dict(header["config"])
    arrays: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        arrays[spec["name"]] = arr.reshape(shape).astype(ad.DTYPE)
    opt_state = None
    if header.get("opt"):
        opt_names = header["opt"]["names"]
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for target in (m, v):
            for n in opt_names:
                shape = arrays[n].shape
                count = arrays[n].size
                arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
                offset += count * 8
                target[n] = arr.reshape(shape).astype(ad.DTYPE)
        opt_state = AdamState(m=m, v=v, t=int(header["opt"]["t"]))
    return Checkpoint(
        config=cfg,
        arrays=arrays,
        step=int(header["step"]),
        opt_state=opt_state,
        vocab_tokens=header.get("vocab"),
        meta=header.get("meta", {}),
    )
