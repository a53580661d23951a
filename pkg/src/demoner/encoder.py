"""A small pre-LN transformer encoder written directly in NumPy.

The encoder consumes the concatenation of an input sentence and its
demonstration and returns one contextual vector per position. Forward
returns a cache that ``backward`` turns into parameter gradients.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, SEP = "[PAD]", "[UNK]", "[SEP]"
_GELU_C = np.sqrt(2.0 / np.pi)
_LN_EPS = 1e-5


class Vocab:
    """Whole-word vocabulary; ids 0, 1, 2 are PAD, UNK and SEP."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = [PAD, UNK, SEP] + [t for t in dict.fromkeys(tokens) if t not in (PAD, UNK, SEP)]
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, sentences: Iterable, extra: Iterable[str] = ()) -> "Vocab":
        seen: dict[str, None] = {}
        for s in sentences:
            for tok in s.tokens:
                seen.setdefault(tok)
        for tok in extra:
            seen.setdefault(tok)
        return cls(list(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        unk = self.ids[UNK]
        return np.array([self.ids.get(t, unk) for t in tokens], dtype=np.int64)

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 256
    dropout: float = 0.1
    d_ff: int = 0  # 0 means 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 3 or self.max_len < 1 or self.n_layers < 0:
            raise ValueError(f"invalid encoder config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def _param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ff_dim
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,)})
    return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, std: float = 0.02) -> "EncoderParams":
        arrays = {}
        for name, shape in _param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arrays[name] = np.ones(shape)
            elif leaf.startswith("b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, std, size=shape)
        return cls(config, arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def check_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


@dataclass
class HiddenStates:
    states: np.ndarray  # (length, d_model)
    boundary: int  # rows [0, boundary) belong to the input sentence

    @property
    def input_states(self) -> np.ndarray:
        return self.states[: self.boundary]

    @property
    def demo_states(self) -> np.ndarray:
        return self.states[self.boundary :]


def assemble(input_ids: np.ndarray, demo_ids: np.ndarray, max_len: int) -> tuple[np.ndarray, int]:
    """Concatenate input and demonstration ids, truncating the demonstration's tail."""
    n = len(input_ids)
    if n == 0:
        raise ValueError("empty input sentence")
    if n > max_len:
        raise ValueError(f"input of length {n} exceeds max_len {max_len}")
    room = max_len - n
    return np.concatenate([input_ids, demo_ids[:room]]).astype(np.int64), n


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_back(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def embed(ids, boundary: int, params: EncoderParams, train: bool = False, rng: np.random.Generator | None = None):
    """Encode ``[x ; x~]`` with full bidirectional self-attention.

    Returns ``(HiddenStates, cache)``. Dropout is active only when ``train``
    is set and an ``rng`` is supplied; eval mode is deterministic.
    """
    cfg, P = params.config, params.arrays
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[0]
    if n == 0:
        raise ValueError("cannot encode an empty sequence")
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if not 1 <= boundary <= n:
        raise ValueError(f"boundary {boundary} outside [1, {n}]")
    ids = np.where((ids >= 0) & (ids < cfg.vocab_size), ids, 1)
    rate = cfg.dropout if train else 0.0
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    scale = 1.0 / np.sqrt(dh)

    x = P["tok_emb"][ids] + P["pos_emb"][:n]
    x, emb_mask = _dropout(x, rate, rng)
    layers = []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        a, ln1 = _layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        q = (a @ P[p + "wq"] + P[p + "bq"]).reshape(n, h, dh).transpose(1, 0, 2)
        k = (a @ P[p + "wk"] + P[p + "bk"]).reshape(n, h, dh).transpose(1, 0, 2)
        v = (a @ P[p + "wv"] + P[p + "bv"]).reshape(n, h, dh).transpose(1, 0, 2)
        s = q @ k.transpose(0, 2, 1) * scale
        s -= s.max(axis=-1, keepdims=True)
        att = np.exp(s)
        att /= att.sum(axis=-1, keepdims=True)
        o = (att @ v).transpose(1, 0, 2).reshape(n, cfg.d_model)
        y = o @ P[p + "wo"] + P[p + "bo"]
        y, att_mask = _dropout(y, rate, rng)
        x = x + y
        c, ln2 = _layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        u = c @ P[p + "w1"] + P[p + "b1"]
        g, t = _gelu(u)
        f = g @ P[p + "w2"] + P[p + "b2"]
        f, ff_mask = _dropout(f, rate, rng)
        x = x + f
        layers.append((a, ln1, q, k, v, att, o, att_mask, c, ln2, u, g, t, ff_mask))
    out, lnf = _layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    cache = (ids, emb_mask, layers, lnf)
    return HiddenStates(out, boundary), cache


def grad_embed(d_states: np.ndarray, cache, params: EncoderParams) -> dict[str, np.ndarray]:
    """Backpropagate ``d loss / d states`` through the encoder."""
    cfg, P = params.config, params.arrays
    ids, emb_mask, layers, lnf = cache
    n = ids.shape[0]
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    scale = 1.0 / np.sqrt(dh)
    grads = {name: np.zeros_like(arr) for name, arr in P.items()}

    dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_back(d_states, lnf)
    for l in range(cfg.n_layers - 1, -1, -1):
        p = f"layers.{l}."
        a, ln1, q, k, v, att, o, att_mask, c, ln2, u, g, t, ff_mask = layers[l]
        # feed-forward branch
        df = dx if ff_mask is None else dx * ff_mask
        grads[p + "w2"] = g.T @ df
        grads[p + "b2"] = df.sum(axis=0)
        du = _gelu_back(df @ P[p + "w2"].T, u, t)
        grads[p + "w1"] = c.T @ du
        grads[p + "b1"] = du.sum(axis=0)
        dc = du @ P[p + "w1"].T
        dxc, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_back(dc, ln2)
        dx = dx + dxc
        # attention branch
        dy = dx if att_mask is None else dx * att_mask
        grads[p + "wo"] = o.T @ dy
        grads[p + "bo"] = dy.sum(axis=0)
        do = (dy @ P[p + "wo"].T).reshape(n, h, dh).transpose(1, 0, 2)
        datt = do @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dq, dk, dv = (z.transpose(1, 0, 2).reshape(n, cfg.d_model) for z in (dq, dk, dv))
        grads[p + "wq"], grads[p + "bq"] = a.T @ dq, dq.sum(axis=0)
        grads[p + "wk"], grads[p + "bk"] = a.T @ dk, dk.sum(axis=0)
        grads[p + "wv"], grads[p + "bv"] = a.T @ dv, dv.sum(axis=0)
        da = dq @ P[p + "wq"].T + dk @ P[p + "wk"].T + dv @ P[p + "wv"].T
        dxa, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_back(da, ln1)
        dx = dx + dxa
    if emb_mask is not None:
        dx = dx * emb_mask
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:n] = dx
    return grads


def transfer_embedder(source: EncoderParams, target):
    """Copy encoder weights from ``source`` into ``target`` (a model or EncoderParams).

    The target's CRF parameters are left as they were initialized.
    """
    dst = target.encoder if hasattr(target, "encoder") else target
    if dst.config != source.config:
        raise ValueError(f"encoder config mismatch: {source.config} vs {dst.config}")
    dst.arrays = {k: v.copy() for k, v in source.arrays.items()}
    return target
