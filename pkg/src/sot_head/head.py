"""Classification head fusing the class token with pooled word tokens.

Schemes::

    sum       softmax(FC(z0) + FC(pool(Z)))
    concat    softmax(FC([z0, pool(Z)]))
    aggr_all  softmax(FC(pool([z0, Z])))
    late      softmax(FC(z0)) + softmax(FC(pool(Z)))

A ``sum`` head without ``fc_words`` is the class-token-only baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, ContractError
from .pooling import (
    PoolCache,
    PoolGrads,
    PoolKind,
    TokenBatch,
    pool_forward,
    pooled_size,
    pooling_backward,
)

SCHEMES = ("sum", "concat", "aggr_all", "late")
PROB_FLOOR = 1e-15


@dataclass(frozen=True)
class Affine:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __call__(self, x):
        return self.weight @ x + self.bias


@dataclass(frozen=True)
class HeadParams:
    scheme: str
    class_count: int
    fc_class: Affine | None = None
    fc_words: Affine | None = None
    fc_joint: Affine | None = None
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown fusion scheme {self.scheme!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        need = {
            "sum": ("fc_class",),
            "late": ("fc_class", "fc_words"),
            "concat": ("fc_joint",),
            "aggr_all": ("fc_joint",),
        }[self.scheme]
        forbidden = {"fc_class", "fc_words", "fc_joint"} - set(need)
        if self.scheme == "sum":
            forbidden.discard("fc_words")  # absent -> class-token-only baseline
        for name in need:
            if getattr(self, name) is None:
                raise ConfigurationError(f"scheme {self.scheme!r} requires {name}")
        for name in forbidden:
            if getattr(self, name) is not None:
                raise ConfigurationError(f"scheme {self.scheme!r} does not use {name}")
        for name in ("fc_class", "fc_words", "fc_joint"):
            fc = getattr(self, name)
            if fc is not None and fc.weight.shape[0] != self.class_count:
                raise ConfigurationError(f"{name} produces {fc.weight.shape[0]} scores, expected {self.class_count}")

    @property
    def uses_pooling(self) -> bool:
        return self.fc_words is not None or self.fc_joint is not None


def _affine(rng, n_out, n_in, std=0.02):
    return Affine(rng.standard_normal((n_out, n_in)) * std, np.zeros(n_out))


def init_head(
    rng: np.random.Generator,
    scheme: str,
    p: int,
    pooling: PoolKind | None,
    class_count: int,
    dropout_rate: float = 0.0,
) -> HeadParams:
    """Weights ~ N(0, 0.02^2), zero biases. ``pooling=None`` builds the class-token baseline."""
    if pooling is None:
        if scheme != "sum":
            raise ConfigurationError("the class-token-only baseline uses the sum scheme")
        return HeadParams("sum", class_count, fc_class=_affine(rng, class_count, p))
    d = pooled_size(pooling, p)
    if scheme == "sum" or scheme == "late":
        return HeadParams(
            scheme,
            class_count,
            fc_class=_affine(rng, class_count, p),
            fc_words=_affine(rng, class_count, d),
            dropout_rate=dropout_rate,
        )
    width = p + d if scheme == "concat" else d
    return HeadParams(scheme, class_count, fc_joint=_affine(rng, class_count, width), dropout_rate=dropout_rate)


@dataclass(frozen=True)
class HeadOutput:
    scores: np.ndarray
    kind: str  # "probability_vector" or "probability_sum"

    @property
    def probabilities(self) -> np.ndarray:
        """Scores renormalized to sum to one."""
        return self.scores / self.scores.sum() if self.kind == "probability_sum" else self.scores


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


def dropout_mask(rate: float, size: int, seed) -> np.ndarray:
    """Inverted-dropout mask: kept entries are scaled by ``1/(1 - rate)``."""
    if rate == 0.0:
        return np.ones(size)
    keep = np.random.default_rng(seed).random(size) >= rate
    return keep / (1.0 - rate)


@dataclass
class HeadCache:
    head: HeadParams
    tokens: TokenBatch
    pool_cache: PoolCache | None
    pooled: np.ndarray | None  # after dropout
    mask: np.ndarray | None
    probs: tuple  # one or two softmax outputs
    output: HeadOutput


class HeadGrads(NamedTuple):
    head: dict  # {"fc_class": (dW, db), ...} for the active maps
    pooling: PoolGrads | None
    class_token: np.ndarray
    words: np.ndarray


def head_forward_cached(
    tokens: TokenBatch,
    pooling: PoolKind | None,
    head: HeadParams,
    train: bool = False,
    seed=None,
    beta: float = 0.5,
) -> tuple[HeadOutput, HeadCache]:
    if head.uses_pooling and pooling is None:
        raise ConfigurationError(f"scheme {head.scheme!r} needs a pooling function")
    z0 = tokens.class_token
    pooled = pool_cache = mask = None
    if head.uses_pooling:
        source = tokens.all_tokens() if head.scheme == "aggr_all" else tokens.words
        pooled, pool_cache = pool_forward(source, pooling, beta)
        if train and head.dropout_rate > 0.0:
            mask = dropout_mask(head.dropout_rate, pooled.size, seed)
            pooled = pooled * mask
    s = head.scheme
    try:
        if s == "sum":
            logits = head.fc_class(z0)
            if head.fc_words is not None:
                logits = logits + head.fc_words(pooled)
            probs = (softmax(logits),)
        elif s == "concat":
            probs = (softmax(head.fc_joint(np.concatenate([z0, pooled]))),)
        elif s == "aggr_all":
            probs = (softmax(head.fc_joint(pooled)),)
        else:
            probs = (softmax(head.fc_class(z0)), softmax(head.fc_words(pooled)))
    except ValueError as exc:
        raise ConfigurationError(f"head maps do not fit the token/pooling sizes: {exc}") from exc
    if s == "late":
        out = HeadOutput(probs[0] + probs[1], "probability_sum")
    else:
        out = HeadOutput(probs[0], "probability_vector")
    return out, HeadCache(head, tokens, pool_cache, pooled, mask, probs, out)


def head_forward(
    tokens: TokenBatch,
    pooling: PoolKind | None,
    head: HeadParams,
    train: bool = False,
    seed=None,
    beta: float = 0.5,
) -> HeadOutput:
    """Class scores for one sample under the head's fusion scheme.

    Dropout on the pooled vector is active only when ``train`` is set; the
    mask is drawn from ``seed``. ``beta`` is the GCP power.
    """
    return head_forward_cached(tokens, pooling, head, train, seed, beta)[0]


def _target(class_count, label, smoothing):
    t = np.full(class_count, smoothing / class_count)
    t[label] += 1.0 - smoothing
    return t


def cross_entropy(output: HeadOutput, label: int, smoothing: float = 0.0) -> float:
    """``-sum_c t_c log p_c`` with ``t`` the (optionally smoothed) one-hot target.

    Summed late-scheme scores are divided by their total first.
    """
    p = np.maximum(output.probabilities, PROB_FLOOR)
    t = _target(p.size, label, smoothing)
    return float(-np.sum(t * np.log(p)))


def cross_entropy_grad(output: HeadOutput, label: int, smoothing: float = 0.0) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to ``output.scores``."""
    scores = output.scores
    total = scores.sum() if output.kind == "probability_sum" else 1.0
    p = scores / total
    t = _target(p.size, label, smoothing)
    g_p = np.where(p > PROB_FLOOR, -t / np.maximum(p, PROB_FLOOR), 0.0)
    if output.kind == "probability_sum":
        # p = s / sum(s)
        return (g_p - float(np.sum(g_p * p))) / total
    return g_p


def head_backward(
    cache: HeadCache,
    grad_scores: np.ndarray | None = None,
    label: int | None = None,
    smoothing: float = 0.0,
) -> HeadGrads:
    """VJP of :func:`head_forward` given either ``grad_scores`` or a training ``label``."""
    if (grad_scores is None) == (label is None):
        raise ContractError("pass exactly one of grad_scores or label")
    if grad_scores is None:
        grad_scores = cross_entropy_grad(cache.output, label, smoothing)
    g = np.asarray(grad_scores, dtype=np.float64)
    head = cache.head
    if g.shape != (head.class_count,):
        raise ContractError(f"score gradient {g.shape} does not match class count {head.class_count}")
    z0 = cache.tokens.class_token
    p = z0.size
    grads: dict = {}
    g_z0 = np.zeros(p)
    g_pooled = None

    s = head.scheme
    if s == "late":
        g_logits_c = softmax_backward(cache.probs[0], g)
        g_logits_w = softmax_backward(cache.probs[1], g)
    else:
        g_logits_c = g_logits_w = softmax_backward(cache.probs[0], g)

    if s in ("sum", "late"):
        grads["fc_class"] = (np.outer(g_logits_c, z0), g_logits_c)
        g_z0 += head.fc_class.weight.T @ g_logits_c
        if head.fc_words is not None:
            grads["fc_words"] = (np.outer(g_logits_w, cache.pooled), g_logits_w)
            g_pooled = head.fc_words.weight.T @ g_logits_w
    elif s == "concat":
        x = np.concatenate([z0, cache.pooled])
        grads["fc_joint"] = (np.outer(g_logits_c, x), g_logits_c)
        g_x = head.fc_joint.weight.T @ g_logits_c
        g_z0 += g_x[:p]
        g_pooled = g_x[p:]
    else:
        grads["fc_joint"] = (np.outer(g_logits_c, cache.pooled), g_logits_c)
        g_pooled = head.fc_joint.weight.T @ g_logits_c

    g_words = np.zeros_like(cache.tokens.words)
    pool_grads = None
    if g_pooled is not None:
        if cache.mask is not None:
            g_pooled = g_pooled * cache.mask
        pool_grads = pooling_backward(cache.pool_cache, g_pooled)
        if s == "aggr_all":
            g_z0 += pool_grads.z[:, 0]
            g_words += pool_grads.z[:, 1:]
        else:
            g_words += pool_grads.z
    return HeadGrads(grads, pool_grads, g_z0, g_words)
