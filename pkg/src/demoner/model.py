"""Encoder + CRF tagger and its on-disk weight format.

Weight file layout (all integers little-endian)::

    b"DEMONER1\\n"
    <uint64 header length><header: UTF-8 JSON>
    <raw parameter blocks, concatenated>

The JSON header holds ``encoder_config``, ``labels``, ``vocab``,
``constrained`` and ``blocks``: a list of ``{"name", "dtype", "shape",
"offset", "nbytes"}`` with offsets relative to the start of the block
section. Blocks are stored as little-endian float64 in C order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import crf
from .crf import CrfParams, TagSet, allowed_transitions
from .encoder import EncoderConfig, EncoderParams, Vocab, assemble, embed, grad_embed

MAGIC = b"DEMONER1\n"


@dataclass
class NerModel:
    vocab: Vocab
    tagset: TagSet
    encoder: EncoderParams
    crf: CrfParams
    constrained: bool = False

    @classmethod
    def create(
        cls,
        vocab: Vocab,
        labels,
        seed: int,
        constrained: bool = False,
        **encoder_kw,
    ) -> "NerModel":
        rng = np.random.default_rng(seed)
        cfg = EncoderConfig(vocab_size=len(vocab), **encoder_kw)
        tagset = TagSet(tuple(labels))
        enc = EncoderParams.init(cfg, rng)
        head = CrfParams.init(cfg.d_model, len(tagset), rng)
        return cls(vocab, tagset, enc, head, constrained)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def copy(self) -> "NerModel":
        return NerModel(self.vocab, self.tagset, self.encoder.copy(), self.crf.copy(), self.constrained)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"encoder.{k}": v for k, v in self.encoder.arrays.items()}
        params.update(self.crf.arrays())
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name.startswith("encoder."):
            self.encoder.arrays[name[len("encoder.") :]] = value
        else:
            setattr(self.crf, name[len("crf.") :], value)

    def effective_transitions(self) -> np.ndarray:
        if not self.constrained:
            return self.crf.transitions
        penalty = np.where(allowed_transitions(self.tagset), 0.0, crf.MASK_PENALTY)
        return self.crf.transitions + penalty

    def encode_input(self, tokens, demo_tokens=()) -> tuple[np.ndarray, int]:
        return assemble(self.vocab.encode(tokens), self.vocab.encode(demo_tokens), self.config.max_len)

    def emissions(self, ids, boundary, train=False, rng=None):
        hidden, cache = embed(ids, boundary, self.encoder, train=train, rng=rng)
        h = hidden.input_states
        return h @ self.crf.emission_weight + self.crf.emission_bias, hidden, cache

    def loss_and_grads(self, ids, boundary, tag_ids, train=False, rng=None):
        """Negative log-likelihood of one sentence and gradients for every parameter."""
        em, hidden, cache = self.emissions(ids, boundary, train, rng)
        nll, d_em, d_tr = crf.crf_gradients(em, tag_ids, self.effective_transitions())
        h = hidden.input_states
        d_states = np.zeros_like(hidden.states)
        d_states[:boundary] = d_em @ self.crf.emission_weight.T
        grads = {f"encoder.{k}": v for k, v in grad_embed(d_states, cache, self.encoder).items()}
        grads["crf.emission_weight"] = h.T @ d_em
        grads["crf.emission_bias"] = d_em.sum(axis=0)
        grads["crf.transitions"] = d_tr
        return nll, grads

    def predict_ids(self, ids, boundary) -> np.ndarray:
        em, _, _ = self.emissions(ids, boundary)
        return crf.viterbi(em, self.effective_transitions())[0]

    def predict(self, tokens, demo_tokens=()) -> list[str]:
        ids, boundary = self.encode_input(tokens, demo_tokens)
        return self.tagset.decode(self.predict_ids(ids, boundary))


def save_model(model: NerModel, path) -> None:
    params = model.parameters()
    blocks, chunks, offset = [], [], 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blocks.append({"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "encoder_config": model.config.to_dict(),
        "labels": list(model.tagset.labels),
        "vocab": model.vocab.tokens,
        "constrained": model.constrained,
        "blocks": blocks,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for chunk in chunks:
            fh.write(chunk)


def load_model(path) -> NerModel:
    with open(Path(path), "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a demoner weight file")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size).decode("utf-8"))
        body = fh.read()
    vocab = Vocab(header["vocab"])
    cfg = EncoderConfig(**header["encoder_config"])
    tagset = TagSet(tuple(header["labels"]))
    enc = EncoderParams(cfg, {})
    head = CrfParams(np.zeros(0), np.zeros(0), np.zeros(0))
    model = NerModel(vocab, tagset, enc, head, header["constrained"])
    for block in header["blocks"]:
        start = block["offset"]
        arr = np.frombuffer(body[start : start + block["nbytes"]], dtype=block["dtype"])
        model.set_parameter(block["name"], arr.reshape(block["shape"]).astype(np.float64))
    return model
