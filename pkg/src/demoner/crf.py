"""Linear-chain CRF head: path scores, partition function, decoding, gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .corpus import split_tag

# Added to disallowed transitions when hard masking is on. Finite so that
# gradients stay free of NaNs.
MASK_PENALTY = -1.0e4


@dataclass(frozen=True)
class TagSet:
    """BIOES tag inventory: ``O`` first, then B/I/E/S per label in label order."""

    labels: tuple[str, ...]

    @property
    def tags(self) -> tuple[str, ...]:
        return ("O",) + tuple(f"{p}-{lab}" for lab in self.labels for p in "BIES")

    def __len__(self) -> int:
        return 1 + 4 * len(self.labels)

    def encode(self, tags) -> np.ndarray:
        lookup = {t: i for i, t in enumerate(self.tags)}
        return np.array([lookup[t] for t in tags], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        tags = self.tags
        return [tags[int(i)] for i in ids]

    @property
    def start(self) -> int:
        return len(self)

    @property
    def stop(self) -> int:
        return len(self) + 1


def allowed_transitions(tagset: TagSet) -> np.ndarray:
    """Boolean ``(T+2, T+2)`` matrix of BIOES-valid transitions (START/STOP included)."""
    T = len(tagset)
    tags = tagset.tags
    ok = np.zeros((T + 2, T + 2), dtype=bool)

    def opens(tag):  # may start right after an O / closed entity
        return split_tag(tag)[0] in ("O", "B", "S")

    def closed(tag):
        return split_tag(tag)[0] in ("O", "E", "S")

    for j, b in enumerate(tags):
        ok[tagset.start, j] = opens(b)
        ok[j, tagset.stop] = closed(b)
        for i, a in enumerate(tags):
            pa, la = split_tag(a)
            pb, lb = split_tag(b)
            if closed(a):
                ok[i, j] = opens(b)
            else:
                ok[i, j] = pb in ("I", "E") and la == lb
    return ok


@dataclass
class CrfParams:
    emission_weight: np.ndarray  # (d_model, T)
    emission_bias: np.ndarray  # (T,)
    transitions: np.ndarray  # (T + 2, T + 2), START = T, STOP = T + 1

    @classmethod
    def init(cls, d_model: int, num_tags: int, rng: np.random.Generator, std: float = 0.02) -> "CrfParams":
        return cls(
            rng.normal(0.0, std, size=(d_model, num_tags)),
            np.zeros(num_tags),
            rng.normal(0.0, std, size=(num_tags + 2, num_tags + 2)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "crf.emission_weight": self.emission_weight,
            "crf.emission_bias": self.emission_bias,
            "crf.transitions": self.transitions,
        }

    def copy(self) -> "CrfParams":
        return CrfParams(self.emission_weight.copy(), self.emission_bias.copy(), self.transitions.copy())

    @property
    def num_tags(self) -> int:
        return self.emission_bias.shape[0]


def _check(emissions, transitions):
    emissions = np.asarray(emissions, dtype=np.float64)
    transitions = np.asarray(transitions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[0] == 0:
        raise ValueError("emissions must be a non-empty (n, T) matrix")
    T = emissions.shape[1]
    if transitions.shape != (T + 2, T + 2):
        raise ValueError(f"transitions must be {(T + 2, T + 2)}, got {transitions.shape}")
    return emissions, transitions


def path_score(emissions, tags, transitions) -> float:
    emissions, transitions = _check(emissions, transitions)
    tags = np.asarray(tags, dtype=np.int64)
    n, T = emissions.shape
    if tags.shape != (n,):
        raise ValueError(f"expected {n} tags, got {tags.shape[0]}")
    score = transitions[T, tags[0]] + transitions[tags[-1], T + 1]
    score += emissions[np.arange(n), tags].sum()
    score += transitions[tags[:-1], tags[1:]].sum()
    return float(score)


def log_partition(emissions, transitions) -> float:
    emissions, transitions = _check(emissions, transitions)
    return kernels.forward(emissions, transitions)[1]


def log_likelihood(emissions, tags, transitions) -> float:
    """``log p(tags | emissions)`` including START/STOP transitions."""
    return path_score(emissions, tags, transitions) - log_partition(emissions, transitions)


def viterbi(emissions, transitions) -> tuple[np.ndarray, float]:
    """Best path and its score.

    Ties go to the lowest tag index at the latest position where tied
    paths differ.
    """
    emissions, transitions = _check(emissions, transitions)
    return kernels.viterbi(emissions, transitions)


def marginals(emissions, transitions) -> np.ndarray:
    emissions, transitions = _check(emissions, transitions)
    return kernels.expectations(emissions, transitions)[1]


def crf_gradients(emissions, tags, transitions) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative log-likelihood and its gradients w.r.t. emissions and transitions.

    The gradient is expected feature counts under the model minus the
    counts observed on the gold path.
    """
    emissions, transitions = _check(emissions, transitions)
    tags = np.asarray(tags, dtype=np.int64)
    n, T = emissions.shape
    log_z, node, counts = kernels.expectations(emissions, transitions)
    nll = log_z - path_score(emissions, tags, transitions)
    d_em = node.copy()
    d_em[np.arange(n), tags] -= 1.0
    d_tr = counts
    d_tr[T, tags[0]] -= 1.0
    d_tr[tags[-1], T + 1] -= 1.0
    np.subtract.at(d_tr, (tags[:-1], tags[1:]), 1.0)
    return nll, d_em, d_tr
