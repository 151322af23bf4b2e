"""Sequence encoders and the unit-norm signature head.

Three interchangeable encoders (LSTM, bidirectional LSTM, Transformer) map a
(packet, feature) sequence to a fixed-width vector; a linear head plus l2
normalization turns that vector into a signature whose dot products are
cosine similarities. All forward passes run batched over (B, P, F) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from csireid import autodiff as ad
from csireid.csi_core import FeatureSequence

ARCHES = ("lstm", "bilstm", "transformer")
POOLINGS = ("mean_time", "last_step")


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "transformer"
    layers_l: int = 1
    hidden_d: int = 128
    heads: int = 4
    ff_dim: int | None = None  # None means 4 * hidden_d
    dropout_pd: float = 0.1
    signature_dim_s: int = 128
    pooling: str = "mean_time"

    def __post_init__(self) -> None:
        if self.arch not in ARCHES:
            raise ValueError(f"arch must be one of {ARCHES}")
        if self.layers_l < 1:
            raise ValueError("layers_l must be >= 1")
        if self.hidden_d < 1 or self.signature_dim_s < 1:
            raise ValueError("hidden_d and signature_dim_s must be >= 1")
        if not 0.0 <= self.dropout_pd < 1.0:
            raise ValueError("dropout_pd must be in [0, 1)")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.arch == "transformer":
            if self.heads < 1 or self.hidden_d % self.heads != 0:
                raise ValueError("hidden_d must be divisible by heads")
            if self.hidden_d % 2 != 0:
                raise ValueError("transformer hidden_d must be even")
        if self.ff_dim is not None and self.ff_dim < 1:
            raise ValueError("ff_dim must be >= 1")

    @property
    def ff_width(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 4 * self.hidden_d

    @property
    def encoder_out_dim(self) -> int:
        return 2 * self.hidden_d if self.arch == "bilstm" else self.hidden_d


@dataclass
class Signature:
    """A unit-l2-norm vector of s reals."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"signature norm {norm} deviates from 1 by > 1e-6")


def positional_encoding(p: int, d: int) -> np.ndarray:
    """Sinusoidal position table: sin on even columns, cos on odd ones."""
    if d % 2 != 0:
        raise ValueError("positional encoding width must be even")
    if p < 1 or d < 2:
        raise ValueError("need p >= 1 and d >= 2")
    pos = np.arange(p, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((p, d))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(params: dict, prefix: str, x: ad.DiffTensor) -> ad.DiffTensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _as_batch(x) -> ad.DiffTensor:
    """Accept FeatureSequence, 2-d, or 3-d input; return a (B, P, F) tensor."""
    if isinstance(x, FeatureSequence):
        return ad.constant(x.data[None, :, :])
    if isinstance(x, ad.DiffTensor):
        if x.values.ndim == 2:
            return ad.reshape(x, (1,) + x.values.shape)
        if x.values.ndim == 3:
            return x
    raise ValueError("input must be a FeatureSequence or a rank-2/3 DiffTensor")


# ---------------------------------------------------------------- attention


def multi_head_attention(
    x,
    weights: dict,
    heads: int,
    dropout_pd: float = 0.0,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over the packet axis.

    ``weights`` holds the fused projections wq/wk/wv/wo with biases; heads
    are blocks of the fused matrices. ``dropout_pd`` is accepted for config
    symmetry but dropout is applied between encoder layers, not inside the
    sub-layer. Residual and layer norm are the caller's responsibility.
    """
    del dropout_pd, mode, rng
    xb = _as_batch(x)
    squeeze = not (isinstance(x, ad.DiffTensor) and x.values.ndim == 3)
    b, p, d = xb.values.shape
    if d % heads != 0:
        raise ValueError(f"model width {d} not divisible by heads {heads}")
    dh = d // heads

    def split_heads(t):
        return ad.transpose(ad.reshape(t, (b, p, heads, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(weights, "wq", xb))
    k = split_heads(_linear(weights, "wk", xb))
    v = split_heads(_linear(weights, "wv", xb))
    scores = ad.mul(
        ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
        ad.constant(np.array(1.0 / np.sqrt(dh))),
    )
    attn = ad.softmax_axis(scores, axis=3)
    mixed = ad.matmul(attn, v)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, p, d))
    out = _linear(weights, "wo", merged)
    if squeeze:
        out = ad.reshape(out, (p, d))
    if return_weights:
        return out, attn.values.copy()
    return out


def attention_params(rng: np.random.Generator, d: int) -> dict:
    params = {}
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{name}.w"] = ad.parameter(_uniform(rng, d, (d, d)), name + ".w")
        params[f"{name}.b"] = ad.parameter(np.zeros(d), name + ".b")
    return params


# -------------------------------------------------------------------- LSTM


def _lstm_cell_params(rng: np.random.Generator, in_dim: int, hidden: int) -> dict:
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget gate opens at init
    return {
        "w_x": ad.parameter(_uniform(rng, in_dim, (in_dim, 4 * hidden)), "w_x"),
        "w_h": ad.parameter(_uniform(rng, hidden, (hidden, 4 * hidden)), "w_h"),
        "b": ad.parameter(bias, "b"),
    }


def _lstm_layer(xb: ad.DiffTensor, cell: dict, hidden: int, reverse: bool):
    """Run one LSTM direction; returns (per-step hidden list, final hidden)."""
    b, p, _ = xb.values.shape
    xw = ad.add(ad.matmul(xb, cell["w_x"]), cell["b"])
    steps = ad.unstack_axis1(xw)
    if reverse:
        steps = steps[::-1]
    h = ad.constant(np.zeros((b, hidden)))
    c = ad.constant(np.zeros((b, hidden)))
    hs = []
    for xt in steps:
        gates = ad.add(xt, ad.matmul(h, cell["w_h"]))
        i = ad.sigmoid(ad.take_slice(gates, (slice(None), slice(0, hidden))))
        f = ad.sigmoid(ad.take_slice(gates, (slice(None), slice(hidden, 2 * hidden))))
        g = ad.tanh(ad.take_slice(gates, (slice(None), slice(2 * hidden, 3 * hidden))))
        o = ad.sigmoid(ad.take_slice(gates, (slice(None), slice(3 * hidden, 4 * hidden))))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        hs.append(h)
    if reverse:
        hs = hs[::-1]
    return hs, h


def _stack_steps(hs: list[ad.DiffTensor]) -> ad.DiffTensor:
    b, d = hs[0].values.shape
    return ad.concat([ad.reshape(h, (b, 1, d)) for h in hs], axis=1)


class LstmEncoder:
    """Stacked unidirectional LSTM; encodes to the final top-layer state."""

    def __init__(self, cfg: EncoderConfig, n_feat: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_feat = n_feat
        self.layers = []
        in_dim = n_feat
        for _ in range(cfg.layers_l):
            self.layers.append(_lstm_cell_params(rng, in_dim, cfg.hidden_d))
            in_dim = cfg.hidden_d

    def named_params(self) -> dict[str, ad.DiffTensor]:
        return {
            f"lstm{i}.{k}": v for i, cell in enumerate(self.layers) for k, v in cell.items()
        }

    def encode(self, x, training: bool = False, rng=None) -> ad.DiffTensor:
        xb = _as_batch(x)
        final = None
        for idx, cell in enumerate(self.layers):
            last_layer = idx == len(self.layers) - 1
            hs, final = _lstm_layer(xb, cell, self.cfg.hidden_d, reverse=False)
            if not last_layer:
                xb = ad.dropout(
                    _stack_steps(hs), 1.0 - self.cfg.dropout_pd, rng, training
                )
        return final


class BiLstmEncoder:
    """Stacked bidirectional LSTM; concatenates the two end-of-pass states."""

    def __init__(self, cfg: EncoderConfig, n_feat: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_feat = n_feat
        self.layers = []
        in_dim = n_feat
        for _ in range(cfg.layers_l):
            self.layers.append(
                {
                    "fwd": _lstm_cell_params(rng, in_dim, cfg.hidden_d),
                    "bwd": _lstm_cell_params(rng, in_dim, cfg.hidden_d),
                }
            )
            in_dim = 2 * cfg.hidden_d

    def named_params(self) -> dict[str, ad.DiffTensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for direction, cell in layer.items():
                for k, v in cell.items():
                    out[f"bilstm{i}.{direction}.{k}"] = v
        return out

    def encode(self, x, training: bool = False, rng=None) -> ad.DiffTensor:
        xb = _as_batch(x)
        h_fwd = h_bwd = None
        for idx, layer in enumerate(self.layers):
            last_layer = idx == len(self.layers) - 1
            hs_f, h_fwd = _lstm_layer(xb, layer["fwd"], self.cfg.hidden_d, reverse=False)
            hs_b, h_bwd = _lstm_layer(xb, layer["bwd"], self.cfg.hidden_d, reverse=True)
            if not last_layer:
                seq = ad.concat([_stack_steps(hs_f), _stack_steps(hs_b)], axis=2)
                xb = ad.dropout(seq, 1.0 - self.cfg.dropout_pd, rng, training)
        return ad.concat([h_fwd, h_bwd], axis=1)


# ------------------------------------------------------------- transformer


def _transformer_block_params(rng: np.random.Generator, d: int, ff: int) -> dict:
    params = attention_params(rng, d)
    params["ff1.w"] = ad.parameter(_uniform(rng, d, (d, ff)), "ff1.w")
    params["ff1.b"] = ad.parameter(np.zeros(ff), "ff1.b")
    params["ff2.w"] = ad.parameter(_uniform(rng, ff, (ff, d)), "ff2.w")
    params["ff2.b"] = ad.parameter(np.zeros(d), "ff2.b")
    params["ln1.g"] = ad.parameter(np.ones(d), "ln1.g")
    params["ln1.b"] = ad.parameter(np.zeros(d), "ln1.b")
    params["ln2.g"] = ad.parameter(np.ones(d), "ln2.g")
    params["ln2.b"] = ad.parameter(np.zeros(d), "ln2.b")
    return params


class TransformerEncoder:
    """Post-norm encoder stack over projected inputs plus position table."""

    def __init__(self, cfg: EncoderConfig, n_feat: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_feat = n_feat
        d = cfg.hidden_d
        self.proj = {
            "in.w": ad.parameter(_uniform(rng, n_feat, (n_feat, d)), "in.w"),
            "in.b": ad.parameter(np.zeros(d), "in.b"),
        }
        self.blocks = [
            _transformer_block_params(rng, d, cfg.ff_width) for _ in range(cfg.layers_l)
        ]

    def named_params(self) -> dict[str, ad.DiffTensor]:
        out = {f"tf.{k}": v for k, v in self.proj.items()}
        for i, block in enumerate(self.blocks):
            for k, v in block.items():
                out[f"tf{i}.{k}"] = v
        return out

    def encode(self, x, training: bool = False, rng=None) -> ad.DiffTensor:
        xb = _as_batch(x)
        _, p, _ = xb.values.shape
        h = ad.add(
            ad.add(ad.matmul(xb, self.proj["in.w"]), self.proj["in.b"]),
            ad.constant(positional_encoding(p, self.cfg.hidden_d)),
        )
        for idx, block in enumerate(self.blocks):
            attn = multi_head_attention(h, block, self.cfg.heads)
            h = ad.layer_norm(ad.add(h, attn), block["ln1.g"], block["ln1.b"])
            ff = _linear(block, "ff2", ad.rectifier(_linear(block, "ff1", h)))
            h = ad.layer_norm(ad.add(h, ff), block["ln2.g"], block["ln2.b"])
            if idx != len(self.blocks) - 1:
                h = ad.dropout(h, 1.0 - self.cfg.dropout_pd, rng, training)
        if self.cfg.pooling == "mean_time":
            return ad.mean_axis(h, axis=1)
        return ad.take_slice(h, (slice(None), p - 1, slice(None)))


# ----------------------------------------------------------------- wrappers


def lstm_encode(x: FeatureSequence, cfg: EncoderConfig, params: LstmEncoder) -> ad.DiffTensor:
    """Single-sequence encode; returns the (hidden_d,) final state."""
    out = params.encode(x)
    return ad.reshape(out, (cfg.hidden_d,))


def bilstm_encode(x: FeatureSequence, cfg: EncoderConfig, params: BiLstmEncoder) -> ad.DiffTensor:
    """Single-sequence encode; returns the (2 * hidden_d,) paired state."""
    out = params.encode(x)
    return ad.reshape(out, (2 * cfg.hidden_d,))


def transformer_encode(
    x: FeatureSequence,
    cfg: EncoderConfig,
    params: TransformerEncoder,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ad.DiffTensor:
    """Single-sequence encode; returns the pooled (hidden_d,) vector."""
    out = params.encode(x, training=mode == "train", rng=rng)
    return ad.reshape(out, (cfg.hidden_d,))


def signature_head(h: ad.DiffTensor, params: dict) -> Signature:
    """Project to s dims, l2-normalize, and wrap as a Signature."""
    tensor = signature_tensor(h, params)
    return Signature(tensor.values.reshape(-1))


def signature_tensor(h: ad.DiffTensor, params: dict) -> ad.DiffTensor:
    """Differentiable (B, s) signatures from (B, enc_dim) encoder output."""
    hb = h if h.values.ndim == 2 else ad.reshape(h, (1, h.values.size))
    pre = ad.add(ad.matmul(hb, params["head.w"]), params["head.b"])
    norms = np.linalg.norm(pre.values, axis=1)
    if np.any(norms < 1e-12):
        raise ad.NumericError("zero-norm vector reached the signature head")
    out = ad.l2_normalize_axis(pre, axis=1)
    if h.values.ndim == 1:
        return ad.reshape(out, (out.values.shape[1],))
    return out


_ENCODERS = {
    "lstm": LstmEncoder,
    "bilstm": BiLstmEncoder,
    "transformer": TransformerEncoder,
}


class SignatureModel:
    """An encoder plus signature head with one flat parameter namespace."""

    def __init__(self, cfg: EncoderConfig, n_feat: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_feat = n_feat
        self.encoder = _ENCODERS[cfg.arch](cfg, n_feat, rng)
        enc_dim = cfg.encoder_out_dim
        self.head = {
            "head.w": ad.parameter(
                _uniform(rng, enc_dim, (enc_dim, cfg.signature_dim_s)), "head.w"
            ),
            "head.b": ad.parameter(np.zeros(cfg.signature_dim_s), "head.b"),
        }

    def named_params(self) -> dict[str, ad.DiffTensor]:
        out = dict(self.encoder.named_params())
        out.update(self.head)
        return out

    @property
    def params(self) -> list[ad.DiffTensor]:
        return list(self.named_params().values())

    def signatures(self, x, training: bool = False, rng=None) -> ad.DiffTensor:
        """(B, s) unit-norm signatures for a (B, P, F) batch."""
        enc = self.encoder.encode(x, training=training, rng=rng)
        return signature_tensor(enc, self.head)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_params()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, tensor in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.values.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tensor.values.shape}")
            tensor.values[...] = arr


def build_model(cfg: EncoderConfig, n_feat: int, seed: int) -> SignatureModel:
    """Deterministically initialized model for the given architecture."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x454E4301]))
    return SignatureModel(cfg, n_feat, rng)
