"""Small pre-norm transformer encoder turning an observation window into a
fixed-width state vector.

Padding rows never influence valid positions: their key columns receive a
large negative additive bias before the attention softmax, and pooling
averages over valid rows only. With n_layers=0 the encoder degenerates to
the pooled input embedding.

For minibatch training, ``encode_batch`` stacks B windows into one
(B*W)-row matrix and masks attention block-diagonally, so the tape length
does not grow with B. Each output row depends only on its own window's
rows, exactly as in the one-window path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, UsageError
from .preproc import ObservationWindow
from .rng import Rng

_MASK_BIAS = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    window: int = 8
    n_features: int = 1
    dropout: float = 0.0

    def __post_init__(self):
        problems = []
        if min(self.d_model, self.n_heads, self.d_ff, self.window, self.n_features) < 1:
            problems.append("d_model, n_heads, d_ff, window, n_features must be >= 1")
        if self.n_layers < 0:
            problems.append("n_layers must be >= 0")
        if self.d_model % self.n_heads != 0:
            problems.append(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout={self.dropout} outside [0,1)")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class EncoderParams:
    embed_w: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    final_gain: Tensor = None
    final_bias: Tensor = None

    def named(self, prefix: str = "enc") -> dict[str, Tensor]:
        out = {f"{prefix}.embed_w": self.embed_w}
        for i, lp in enumerate(self.layers):
            for fname in (
                "wq", "wk", "wv", "wo",
                "ln1_gain", "ln1_bias",
                "w1", "b1", "w2", "b2",
                "ln2_gain", "ln2_bias",
            ):
                out[f"{prefix}.layer{i}.{fname}"] = getattr(lp, fname)
        out[f"{prefix}.final_gain"] = self.final_gain
        out[f"{prefix}.final_bias"] = self.final_bias
        return out


def _uniform_matrix(rng: Rng, rows: int, cols: int) -> Tensor:
    bound = 1.0 / math.sqrt(rows)  # fan-in is the input width
    data = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            data[i, j] = rng.uniform(-bound, bound)
    return Tensor(data, requires_grad=True)


def init_encoder_params(cfg: EncoderConfig, rng: Rng) -> EncoderParams:
    d = cfg.d_model
    params = EncoderParams(embed_w=_uniform_matrix(rng.split("embed"), cfg.n_features, d))
    for i in range(cfg.n_layers):
        r = rng.split("layer", i)
        params.layers.append(
            LayerParams(
                wq=_uniform_matrix(r.split("wq"), d, d),
                wk=_uniform_matrix(r.split("wk"), d, d),
                wv=_uniform_matrix(r.split("wv"), d, d),
                wo=_uniform_matrix(r.split("wo"), d, d),
                ln1_gain=Tensor(np.ones(d), requires_grad=True),
                ln1_bias=Tensor(np.zeros(d), requires_grad=True),
                w1=_uniform_matrix(r.split("w1"), d, cfg.d_ff),
                b1=Tensor(np.zeros(cfg.d_ff), requires_grad=True),
                w2=_uniform_matrix(r.split("w2"), cfg.d_ff, d),
                b2=Tensor(np.zeros(d), requires_grad=True),
                ln2_gain=Tensor(np.ones(d), requires_grad=True),
                ln2_bias=Tensor(np.zeros(d), requires_grad=True),
            )
        )
    params.final_gain = Tensor(np.ones(d), requires_grad=True)
    params.final_bias = Tensor(np.zeros(d), requires_grad=True)
    return params


def positional_table(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position encoding: sin on even columns, cos on odd."""
    table = np.zeros((length, d_model))
    pos = np.arange(length)[:, None].astype(np.float64)
    idx = np.arange(0, d_model, 2).astype(np.float64)
    angle = pos / np.power(10000.0, idx / d_model)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def _embed_core(x: Tensor, params: EncoderParams, pe: np.ndarray | None) -> Tensor:
    out = ad.matmul(x, params.embed_w)
    if pe is not None:
        out = ad.add(out, Tensor(pe))
    return out


def embed_rows(x: Tensor, params: EncoderParams, positions: bool = True) -> Tensor:
    """Linear projection of feature rows plus sinusoidal position offsets."""
    pe = positional_table(x.shape[0], params.embed_w.shape[1]) if positions else None
    return _embed_core(x, params, pe)


def embed(window: ObservationWindow, params: EncoderParams, positions: bool = True) -> Tensor:
    if window.width != params.embed_w.shape[0]:
        raise ShapeError(
            f"embed: window width {window.width} vs embedding rows "
            f"{params.embed_w.shape[0]}"
        )
    return embed_rows(Tensor(window.rows), params, positions=positions)


def _window_mask_bias(n_rows: int, n_valid: int) -> np.ndarray:
    if n_valid < 1:
        raise UsageError("attention: no valid positions in window")
    bias = np.zeros((n_rows, n_rows))
    bias[:, n_valid:] = _MASK_BIAS
    return bias


def _block_mask_bias(window: int, valid_counts: list[int]) -> np.ndarray:
    """Block-diagonal mask for B stacked windows: rows may only attend to
    valid positions of their own window."""
    n = window * len(valid_counts)
    bias = np.full((n, n), _MASK_BIAS)
    for b, nv in enumerate(valid_counts):
        if nv < 1:
            raise UsageError("attention: no valid positions in window")
        r0 = b * window
        bias[r0 : r0 + window, r0 : r0 + nv] = 0.0
    return bias


def _attention_core(q: Tensor, k: Tensor, v: Tensor, bias: Tensor) -> Tensor:
    d_k = q.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    weights = ad.softmax(ad.add(scores, bias))
    return ad.matmul(weights, v)


def attention(q: Tensor, k: Tensor, v: Tensor, n_valid: int) -> Tensor:
    """Scaled dot-product attention; key columns past n_valid are masked."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0] or q.shape[0] != k.shape[0]:
        raise ShapeError(
            f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    return _attention_core(q, k, v, Tensor(_window_mask_bias(q.shape[0], n_valid)))


def _mha_core(x: Tensor, lp: LayerParams, bias: Tensor, n_heads: int) -> Tensor:
    d_model = x.shape[1]
    d_k = d_model // n_heads
    q = ad.matmul(x, lp.wq)
    k = ad.matmul(x, lp.wk)
    v = ad.matmul(x, lp.wv)
    heads = []
    for h in range(n_heads):
        j0, j1 = h * d_k, (h + 1) * d_k
        heads.append(
            _attention_core(
                ad.slice_cols(q, j0, j1),
                ad.slice_cols(k, j0, j1),
                ad.slice_cols(v, j0, j1),
                bias,
            )
        )
    merged = heads[0] if n_heads == 1 else ad.concat_cols(heads)
    return ad.matmul(merged, lp.wo)


def multi_head_attention(
    x: Tensor, lp: LayerParams, n_valid: int, n_heads: int
) -> Tensor:
    return _mha_core(x, lp, Tensor(_window_mask_bias(x.shape[0], n_valid)), n_heads)


def _feed_forward(x: Tensor, lp: LayerParams) -> Tensor:
    h = ad.relu(ad.add_row(ad.matmul(x, lp.w1), lp.b1))
    return ad.add_row(ad.matmul(h, lp.w2), lp.b2)


def _dropout(x: Tensor, p: float, rng: Rng | None) -> Tensor:
    """Inverted dropout on a sublayer output.

    Identity when p == 0 or no rng is supplied; rollout and eval passes
    never supply one, so only optimization forwards are ever masked.
    """
    if p == 0.0 or rng is None:
        return x
    n, d = x.shape
    keep = 1.0 / (1.0 - p)
    mask = np.array(
        [[keep if rng.uniform() >= p else 0.0 for _ in range(d)] for _ in range(n)]
    )
    return ad.mul(x, Tensor(mask))


def _encode_core(
    x: Tensor,
    bias: Tensor,
    pe: np.ndarray | None,
    pool: np.ndarray | None,
    params: EncoderParams,
    cfg: EncoderConfig,
    drop_rng: Rng | None = None,
) -> Tensor:
    h = _embed_core(x, params, pe)
    for lp in params.layers:
        normed = ad.layer_norm(h, lp.ln1_gain, lp.ln1_bias)
        h = ad.add(h, _dropout(_mha_core(normed, lp, bias, cfg.n_heads), cfg.dropout, drop_rng))
        normed = ad.layer_norm(h, lp.ln2_gain, lp.ln2_bias)
        h = ad.add(h, _dropout(_feed_forward(normed, lp), cfg.dropout, drop_rng))
    if params.layers:
        h = ad.layer_norm(h, params.final_gain, params.final_bias)
    if pool is None:
        return h
    return ad.matmul(Tensor(pool), h)


def encode_rows(
    x: Tensor,
    n_valid: int,
    params: EncoderParams,
    cfg: EncoderConfig,
    positions: bool = True,
    pool: bool = True,
    dropout_rng: Rng | None = None,
) -> Tensor:
    """Core encoder on one window's raw feature rows.

    pool=False returns the per-row outputs (for equivariance checks);
    otherwise the mean over valid rows, shape 1 x d_model.
    """
    if n_valid < 1:
        raise UsageError("encode: no valid rows to pool")
    pe = positional_table(x.shape[0], cfg.d_model) if positions else None
    pool_mat = None
    if pool:
        pool_mat = np.zeros((1, x.shape[0]))
        pool_mat[0, :n_valid] = 1.0 / n_valid
    bias = Tensor(_window_mask_bias(x.shape[0], n_valid))
    return _encode_core(x, bias, pe, pool_mat, params, cfg, drop_rng=dropout_rng)


def encode(
    window: ObservationWindow,
    params: EncoderParams,
    cfg: EncoderConfig,
    positions: bool = True,
) -> Tensor:
    """Window -> pooled state vector of width d_model."""
    if window.width != cfg.n_features or window.length != cfg.window:
        raise ShapeError(
            f"encode: window {window.length}x{window.width} vs config "
            f"{cfg.window}x{cfg.n_features}"
        )
    pooled = encode_rows(
        Tensor(window.rows), window.n_valid, params, cfg, positions=positions
    )
    return ad.reshape(pooled, (cfg.d_model,))


def encode_batch(
    windows: list[ObservationWindow],
    params: EncoderParams,
    cfg: EncoderConfig,
    positions: bool = True,
    dropout_rng: Rng | None = None,
) -> Tensor:
    """Encode B windows in one pass -> Tensor[B x d_model]."""
    if not windows:
        raise UsageError("encode_batch: no windows")
    for w in windows:
        if w.width != cfg.n_features or w.length != cfg.window:
            raise ShapeError(
                f"encode_batch: window {w.length}x{w.width} vs config "
                f"{cfg.window}x{cfg.n_features}"
            )
    b = len(windows)
    wlen = cfg.window
    stacked = Tensor(np.concatenate([w.rows for w in windows], axis=0))
    valid = [w.n_valid for w in windows]
    bias = Tensor(_block_mask_bias(wlen, valid))
    pe = None
    if positions:
        pe = np.tile(positional_table(wlen, cfg.d_model), (b, 1))
    pool = np.zeros((b, b * wlen))
    for i, nv in enumerate(valid):
        pool[i, i * wlen : i * wlen + nv] = 1.0 / nv
    return _encode_core(stacked, bias, pe, pool, params, cfg, drop_rng=dropout_rng)
