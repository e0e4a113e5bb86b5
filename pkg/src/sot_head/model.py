"""A desk-scale vision-transformer analog that feeds the classification head.

Samples are ``d_in x q`` feature matrices (one column per token). They are
embedded linearly, a learnable class token is prepended, positional
embeddings are added, and ``depth`` pre-norm blocks (multi-head
self-attention, then a GELU MLP) follow. The class token and the word tokens
of the last block go to :mod:`sot_head.head`.

Parameters live in a flat ``dict[str, ndarray]`` so that the optimizer and
the finite-difference checks can walk them uniformly. Inside the blocks,
tokens are rows: activations have shape ``(batch, q + 1, p)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError
from .head import (
    Affine,
    HeadOutput,
    HeadParams,
    cross_entropy,
    head_backward,
    head_forward_cached,
    init_head,
)
from .normalization import SvpnConfig
from .pooling import GcrpHeadParams, MgcrpParams, TokenBatch, init_mgcrp
from .seeding import STREAM_BATCHES, STREAM_DROPOUT, STREAM_INIT, STREAM_SAMPLES, STREAM_TASK, rng_for

LN_EPS = 1e-5
POOLINGS = ("gap", "gcp", "mgcrp", "none")


@dataclass(frozen=True)
class ToyModelConfig:
    depth: int = 2
    token_dim: int = 32
    msa_heads: int = 4
    mlp_hidden: int = 64
    seq_len: int = 16
    class_count: int = 4
    input_dim: int | None = None  # defaults to token_dim
    scheme: str = "sum"
    pooling: str = "mgcrp"  # "none" is the class-token-only baseline
    mgcrp_heads: int = 2
    mgcrp_m: int = 6
    mgcrp_n: int = 6
    alpha: float = 0.5
    num_singular: int = 1
    iterations: int = 1
    exact_svpn: bool = False
    gcp_beta: float = 0.5
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.token_dim % self.msa_heads:
            raise ConfigurationError(
                f"token_dim {self.token_dim} is not divisible by msa_heads {self.msa_heads}"
            )
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.pooling == "none" and self.scheme != "sum":
            raise ConfigurationError("the class-token-only baseline uses the sum scheme")
        if min(self.seq_len, self.class_count, self.mlp_hidden) < 1 or self.depth < 0:
            raise ConfigurationError("seq_len, class_count and mlp_hidden must be positive; depth non-negative")

    @property
    def d_in(self) -> int:
        return self.input_dim or self.token_dim

    @property
    def svpn(self) -> SvpnConfig:
        return SvpnConfig(self.alpha, self.num_singular, self.iterations, exact=self.exact_svpn)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ToyModelConfig) -> dict[str, np.ndarray]:
    rng = rng_for(cfg.seed, STREAM_INIT)
    p, hid = cfg.token_dim, cfg.mlp_hidden
    std = 0.02
    params = {
        "embed.w": rng.standard_normal((cfg.d_in, p)) / math.sqrt(cfg.d_in),
        "embed.b": np.zeros(p),
        "cls": rng.standard_normal(p) * std,
        "pos": rng.standard_normal((cfg.seq_len + 1, p)) * std,
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        params.update(
            {
                b + "ln1.g": np.ones(p),
                b + "ln1.b": np.zeros(p),
                b + "attn.wqkv": rng.standard_normal((p, 3 * p)) / math.sqrt(p),
                b + "attn.bqkv": np.zeros(3 * p),
                b + "attn.wo": rng.standard_normal((p, p)) * std,
                b + "attn.bo": np.zeros(p),
                b + "ln2.g": np.ones(p),
                b + "ln2.b": np.zeros(p),
                b + "mlp.w1": rng.standard_normal((p, hid)) / math.sqrt(p),
                b + "mlp.b1": np.zeros(hid),
                b + "mlp.w2": rng.standard_normal((hid, p)) * std,
                b + "mlp.b2": np.zeros(p),
            }
        )
    pooling = None
    if cfg.pooling == "mgcrp":
        pooling = init_mgcrp(rng, p, cfg.mgcrp_heads, cfg.mgcrp_m, cfg.mgcrp_n, cfg.svpn)
        for i, hd in enumerate(pooling.heads):
            params[f"pool.{i}.w"] = hd.w
            params[f"pool.{i}.r"] = hd.r
    elif cfg.pooling in ("gap", "gcp"):
        pooling = cfg.pooling
    head = init_head(rng, cfg.scheme, p, pooling, cfg.class_count, cfg.dropout)
    for name in ("fc_class", "fc_words", "fc_joint"):
        fc = getattr(head, name)
        if fc is not None:
            params[f"head.{name}.weight"] = fc.weight
            params[f"head.{name}.bias"] = fc.bias
    return params


def pooling_from(params: dict, cfg: ToyModelConfig):
    if cfg.pooling == "mgcrp":
        heads = tuple(
            GcrpHeadParams(params[f"pool.{i}.w"], params[f"pool.{i}.r"]) for i in range(cfg.mgcrp_heads)
        )
        return MgcrpParams(heads, cfg.svpn)
    if cfg.pooling == "none":
        return None
    return cfg.pooling


def head_from(params: dict, cfg: ToyModelConfig) -> HeadParams:
    maps = {}
    for name in ("fc_class", "fc_words", "fc_joint"):
        if f"head.{name}.weight" in params:
            maps[name] = Affine(params[f"head.{name}.weight"], params[f"head.{name}.bias"])
    return HeadParams(cfg.scheme, cfg.class_count, dropout_rate=cfg.dropout, **maps)


# ---------------------------------------------------------------------------
# layers (tokens as rows, leading batch axis)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    sd = np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) / sd
    return g * xhat + b, (xhat, sd)


def _layer_norm_backward(dy, g, cache):
    xhat, sd = cache
    dxhat = dy * g
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) / sd
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _sum_rows(d):
    return d.reshape(-1, d.shape[-1]).sum(axis=0)


def embed_batch(params: dict, samples: np.ndarray):
    """``(B, d_in, q)`` samples to ``(B, q + 1, p)`` token rows."""
    x = np.swapaxes(samples, 1, 2)
    w = params["embed.w"]
    if x.shape[-1] != w.shape[0] or x.shape[1] + 1 != params["pos"].shape[0]:
        raise ShapeError(
            f"samples of shape {samples.shape[1:]} do not fit embedding "
            f"({w.shape[0]} features, {params['pos'].shape[0] - 1} tokens)"
        )
    words = x @ w + params["embed.b"]
    cls = np.broadcast_to(params["cls"], (x.shape[0], 1, w.shape[1]))
    return np.concatenate([cls, words], axis=1) + params["pos"], x


def embed(params: dict, sample: np.ndarray) -> TokenBatch:
    """Embed one ``d_in x q`` sample; returns the class token and ``p x q`` word tokens."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2:
        raise ShapeError("sample must be a d_in x q matrix")
    tokens, _ = embed_batch(params, sample[None])
    return TokenBatch(tokens[0, 0].copy(), tokens[0, 1:].T.copy())


def _block_forward(params, i, x, n_heads):
    b = f"blocks.{i}."
    bsz, t, p = x.shape
    dh = p // n_heads
    h1, ln1 = _layer_norm(x, params[b + "ln1.g"], params[b + "ln1.b"])
    qkv = h1 @ params[b + "attn.wqkv"] + params[b + "attn.bqkv"]
    qkv = qkv.reshape(bsz, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, T, dh)
    q, k, v = qkv
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(dh)
    att = np.exp(scores - scores.max(axis=-1, keepdims=True))
    att /= att.sum(axis=-1, keepdims=True)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, t, p)
    x1 = x + o @ params[b + "attn.wo"] + params[b + "attn.bo"]
    h2, ln2 = _layer_norm(x1, params[b + "ln2.g"], params[b + "ln2.b"])
    u = h2 @ params[b + "mlp.w1"] + params[b + "mlp.b1"]
    gu, tanh_u = _gelu(u)
    x2 = x1 + gu @ params[b + "mlp.w2"] + params[b + "mlp.b2"]
    cache = (h1, ln1, q, k, v, att, o, h2, ln2, u, gu, tanh_u)
    return x2, cache


def _block_backward(params, i, dx2, cache, n_heads, grads):
    b = f"blocks.{i}."
    h1, ln1, q, k, v, att, o, h2, ln2, u, gu, tanh_u = cache
    bsz, t, p = dx2.shape
    dh = p // n_heads

    grads[b + "mlp.w2"] = gu.reshape(-1, gu.shape[-1]).T @ dx2.reshape(-1, p)
    grads[b + "mlp.b2"] = _sum_rows(dx2)
    dgu = dx2 @ params[b + "mlp.w2"].T
    du = _gelu_backward(dgu, u, tanh_u)
    grads[b + "mlp.w1"] = h2.reshape(-1, p).T @ du.reshape(-1, du.shape[-1])
    grads[b + "mlp.b1"] = _sum_rows(du)
    dh2 = du @ params[b + "mlp.w1"].T
    dx1_ln, grads[b + "ln2.g"], grads[b + "ln2.b"] = _layer_norm_backward(dh2, params[b + "ln2.g"], ln2)
    dx1 = dx2 + dx1_ln

    grads[b + "attn.wo"] = o.reshape(-1, p).T @ dx1.reshape(-1, p)
    grads[b + "attn.bo"] = _sum_rows(dx1)
    do = (dx1 @ params[b + "attn.wo"].T).reshape(bsz, t, n_heads, dh).transpose(0, 2, 1, 3)
    datt = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(att, -1, -2) @ do
    dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, t, 3 * p)
    grads[b + "attn.wqkv"] = h1.reshape(-1, p).T @ dqkv.reshape(-1, 3 * p)
    grads[b + "attn.bqkv"] = _sum_rows(dqkv)
    dh1 = dqkv @ params[b + "attn.wqkv"].T
    dx_ln, grads[b + "ln1.g"], grads[b + "ln1.b"] = _layer_norm_backward(dh1, params[b + "ln1.g"], ln1)
    return dx1 + dx_ln


def transformer_block(params: dict, index: int, tokens: np.ndarray, n_heads: int) -> np.ndarray:
    """Apply block ``index`` to ``(q + 1, p)`` or ``(B, q + 1, p)`` token rows."""
    x = np.asarray(tokens, dtype=np.float64)
    single = x.ndim == 2
    out, _ = _block_forward(params, index, x[None] if single else x, n_heads)
    return out[0] if single else out


def attention_weights(params: dict, index: int, tokens: np.ndarray, n_heads: int) -> np.ndarray:
    """Attention probabilities ``(H, T, T)``, or ``(B, H, T, T)`` for batched tokens."""
    x = np.asarray(tokens, dtype=np.float64)
    single = x.ndim == 2
    _, cache = _block_forward(params, index, x[None] if single else x, n_heads)
    return cache[5][0] if single else cache[5]


# ---------------------------------------------------------------------------
# whole model


def _backbone(params, cfg, samples):
    x, raw = embed_batch(params, samples)
    caches = []
    for i in range(cfg.depth):
        x, c = _block_forward(params, i, x, cfg.msa_heads)
        caches.append(c)
    return x, raw, caches


def _split(x_b):
    return TokenBatch(x_b[0], x_b[1:].T)


def forward_batch(params: dict, cfg: ToyModelConfig, samples: np.ndarray) -> list[HeadOutput]:
    samples = np.asarray(samples, dtype=np.float64)
    x, _, _ = _backbone(params, cfg, samples)
    pooling = pooling_from(params, cfg)
    head = head_from(params, cfg)
    return [head_forward_cached(_split(x[b]), pooling, head, beta=cfg.gcp_beta)[0] for b in range(x.shape[0])]


def model_forward(params: dict, cfg: ToyModelConfig, sample: np.ndarray) -> HeadOutput:
    """Embed, run the blocks, split class/word tokens, and apply the head (eval mode)."""
    sample = np.asarray(sample, dtype=np.float64)
    return forward_batch(params, cfg, sample[None])[0]


def loss_and_grads(
    params: dict,
    cfg: ToyModelConfig,
    samples: np.ndarray,
    labels: np.ndarray,
    smoothing: float = 0.0,
    train: bool = False,
    dropout_seed: tuple = (),
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    samples = np.asarray(samples, dtype=np.float64)
    bsz = samples.shape[0]
    x, raw, caches = _backbone(params, cfg, samples)
    pooling = pooling_from(params, cfg)
    head = head_from(params, cfg)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dx = np.zeros_like(x)
    total = 0.0
    for bi in range(bsz):
        seed = np.random.SeedSequence([cfg.seed, STREAM_DROPOUT, *dropout_seed, bi]) if train else None
        out, hc = head_forward_cached(
            _split(x[bi]), pooling, head, train=train, seed=seed, beta=cfg.gcp_beta
        )
        total += cross_entropy(out, int(labels[bi]), smoothing)
        hg = head_backward(hc, label=int(labels[bi]), smoothing=smoothing)
        for name, (dw, db) in hg.head.items():
            grads[f"head.{name}.weight"] += dw / bsz
            grads[f"head.{name}.bias"] += db / bsz
        if hg.pooling is not None:
            for i, (dw, dr) in enumerate(hg.pooling.heads):
                grads[f"pool.{i}.w"] += dw / bsz
                grads[f"pool.{i}.r"] += dr / bsz
        dx[bi, 0] = hg.class_token / bsz
        dx[bi, 1:] = hg.words.T / bsz
    for i in range(cfg.depth - 1, -1, -1):
        dx = _block_backward(params, i, dx, caches[i], cfg.msa_heads, grads)
    grads["pos"] = dx.sum(axis=0)
    grads["cls"] = dx[:, 0].sum(axis=0)
    dwords = dx[:, 1:]
    grads["embed.w"] = raw.reshape(-1, raw.shape[-1]).T @ dwords.reshape(-1, dwords.shape[-1])
    grads["embed.b"] = _sum_rows(dwords)
    return total / bsz, grads


def batch_loss(params, cfg, samples, labels, smoothing: float = 0.0) -> float:
    outs = forward_batch(params, cfg, samples)
    return float(np.mean([cross_entropy(o, int(y), smoothing) for o, y in zip(outs, labels)]))


def accuracy(params, cfg, samples, labels) -> float:
    outs = forward_batch(params, cfg, samples)
    pred = np.array([int(np.argmax(o.scores)) for o in outs])
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SynthTaskSpec:
    """``mean_task``: classes differ only in token means.
    ``covariance_task``: zero-mean tokens whose classes differ only in the
    correlation between features (per-feature variances are all one).
    """

    kind: str = "covariance_task"
    class_count: int = 4
    token_dim: int = 32
    seq_len: int = 16
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mean_task", "covariance_task"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")


def class_factors(task: SynthTaskSpec) -> np.ndarray:
    """Per-class covariance factors ``A_c`` with unit-norm rows, so ``diag(A_c A_c^T) = 1``."""
    rng = rng_for(task.seed, STREAM_TASK)
    d = task.token_dim
    a = rng.standard_normal((task.class_count, d, d))
    return a / np.linalg.norm(a, axis=2, keepdims=True)


def class_means(task: SynthTaskSpec) -> np.ndarray:
    rng = rng_for(task.seed, STREAM_TASK)
    mu = rng.standard_normal((task.class_count, task.token_dim))
    return mu / np.linalg.norm(mu, axis=1, keepdims=True) * 2.0


def make_synth(task: SynthTaskSpec, count: int, split: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``count`` samples of shape ``(token_dim, seq_len)`` with balanced labels.

    Class structure comes from ``task.seed`` alone; ``split`` selects an
    independent sample stream (0 train, 1 test).
    """
    rng = rng_for(task.seed, STREAM_SAMPLES, split)
    d, q = task.token_dim, task.seq_len
    labels = np.arange(count) % task.class_count
    rng.shuffle(labels)
    eps = rng.standard_normal((count, d, q))
    noise = rng.standard_normal((count, d, q)) * task.noise
    if task.kind == "mean_task":
        x = class_means(task)[labels][:, :, None] + eps * task.noise
        return x, labels
    a = class_factors(task)[labels]
    return a @ eps + noise, labels


# ---------------------------------------------------------------------------
# training


class AdamW:
    """Adam moments with decoupled weight decay (no decay on biases, norms or embeddings)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.03):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    @staticmethod
    def decays(name: str) -> bool:
        return name.endswith((".w", ".weight", ".r", "wqkv", "wo", "w1", "w2"))

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.weight_decay and self.decays(k):
                params[k] *= 1.0 - lr * self.weight_decay
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(step: int, total: int, base: float, final: float, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 1e-3
    final_lr: float = 1e-5
    weight_decay: float = 0.03
    warmup: int = 0
    batch_size: int = 32
    label_smoothing: float = 0.0
    train_size: int = 1024
    test_size: int = 512


@dataclass
class TrainReport:
    config: dict
    task: dict
    optim: dict
    steps: int
    status: str = "ok"
    diagnostic: str = ""
    losses: list = field(default_factory=list)
    initial_train_accuracy: float = float("nan")
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    params: dict | None = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {f"config.{k}": v for k, v in self.config.items()}
        out.update({f"task.{k}": v for k, v in self.task.items()})
        out.update({f"optim.{k}": v for k, v in self.optim.items()})
        out.update(
            steps=self.steps,
            status=self.status,
            diagnostic=self.diagnostic,
            initial_train_accuracy=self.initial_train_accuracy,
            train_accuracy=self.train_accuracy,
            test_accuracy=self.test_accuracy,
            final_loss=self.losses[-1] if self.losses else float("nan"),
        )
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.summary().items())

    def loss_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{_fmt(x)}\n" for i, x in enumerate(self.losses))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(
    cfg: ToyModelConfig,
    task: SynthTaskSpec,
    steps: int,
    optim: OptimSettings = OptimSettings(),
    params: dict | None = None,
) -> TrainReport:
    """Minibatch AdamW with a cosine schedule; deterministic for a given ``cfg.seed``.

    A non-finite loss or a numerical failure in the head stops training and
    yields a report with ``status="diverged"`` and a diagnostic.
    """
    if task.token_dim != cfg.d_in or task.seq_len != cfg.seq_len or task.class_count != cfg.class_count:
        raise ConfigurationError("task shape does not match the model configuration")
    params = init_params(cfg) if params is None else params
    xtr, ytr = make_synth(task, optim.train_size, split=0)
    xte, yte = make_synth(task, optim.test_size, split=1)
    report = TrainReport(cfg.to_dict(), asdict(task), asdict(optim), steps)
    report.initial_train_accuracy = accuracy(params, cfg, xtr, ytr)
    opt = AdamW(params, optim.lr, weight_decay=optim.weight_decay)
    batches = rng_for(cfg.seed, STREAM_BATCHES)
    for step in range(steps):
        idx = batches.choice(optim.train_size, size=optim.batch_size, replace=False)
        try:
            loss, grads = loss_and_grads(
                params, cfg, xtr[idx], ytr[idx], optim.label_smoothing, train=True, dropout_seed=(step,)
            )
        except NumericError as exc:
            report.status, report.diagnostic = "diverged", f"step {step}: {exc}"
            break
        if not math.isfinite(loss):
            report.status, report.diagnostic = "diverged", f"step {step}: loss is {loss}"
            break
        report.losses.append(loss)
        opt.step(params, grads, cosine_lr(step, steps, optim.lr, optim.final_lr, optim.warmup))
    if report.status == "ok":
        report.train_accuracy = accuracy(params, cfg, xtr, ytr)
        report.test_accuracy = accuracy(params, cfg, xte, yte)
    report.params = params
    return report
