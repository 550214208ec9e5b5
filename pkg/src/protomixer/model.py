"""MLP-Mixer over a k x N prototype table with a gradient-reversed domain head.

Data path for one bag ``X`` (k tokens by N channels)::

    for each block:
        Y = X + W2 @ gelu(W1 @ LN(X) + b1) + b2        token mixing (columns)
        Z = Y + gelu(LN(Y) @ W3.T + b3) @ W4.T + b4    channel mixing (rows)
    g = mean over tokens of LN_final(Z)
    class_logits  = W_cls @ g + b_cls
    domain_logits = MLP3(GRL(g))

Both layer norms normalize each token row over its channels. The gradient
reversal layer is the identity going forward and multiplies the gradient by
``-lambda`` going back, so one descent step on the combined gradient trains
the domain head to find the slide while pushing the trunk to hide it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import (
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, matmul,
    softmax_cross_entropy,
)
from .errors import ConfigError, DimensionError, FormatError, StateError

CHECKPOINT_MAGIC = b"PMX1"


@dataclass(frozen=True)
class MixerConfig:
    k: int = 5
    N: int = 1024
    D_S: int = 1024
    D_C: int = 2048
    M: int = 12
    num_classes: int = 3
    num_domains: int = 1
    domain_hidden: int = 512
    dropout_rate: float = 0.0
    final_norm: bool = True

    def __post_init__(self):
        for name in ("k", "N", "D_S", "D_C", "M", "num_classes", "num_domains",
                     "domain_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    def ints(self) -> tuple[int, ...]:
        """Integer fields in checkpoint-header order."""
        return (self.k, self.N, self.D_S, self.D_C, self.M, self.num_classes,
                self.num_domains, self.domain_hidden, int(self.final_norm))

    @classmethod
    def from_ints(cls, values, dropout_rate: float = 0.0) -> "MixerConfig":
        k, N, D_S, D_C, M, C, D, H, fn = values
        return cls(k, N, D_S, D_C, M, C, D, H, dropout_rate, bool(fn))


def block_prefix(m: int) -> str:
    return f"block{m}."


def param_shapes(cfg: MixerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter block in serialization order."""
    shapes = []
    for m in range(cfg.M):
        p = block_prefix(m)
        shapes += [
            (p + "token_norm.gain", (cfg.N,)),
            (p + "token_norm.bias", (cfg.N,)),
            (p + "token.W1", (cfg.D_S, cfg.k)),
            (p + "token.b1", (cfg.D_S,)),
            (p + "token.W2", (cfg.k, cfg.D_S)),
            (p + "token.b2", (cfg.k,)),
            (p + "channel_norm.gain", (cfg.N,)),
            (p + "channel_norm.bias", (cfg.N,)),
            (p + "channel.W3", (cfg.D_C, cfg.N)),
            (p + "channel.b3", (cfg.D_C,)),
            (p + "channel.W4", (cfg.N, cfg.D_C)),
            (p + "channel.b4", (cfg.N,)),
        ]
    if cfg.final_norm:
        shapes += [("final_norm.gain", (cfg.N,)), ("final_norm.bias", (cfg.N,))]
    shapes += [
        ("head.W", (cfg.num_classes, cfg.N)),
        ("head.b", (cfg.num_classes,)),
        ("domain.W1", (cfg.domain_hidden, cfg.N)),
        ("domain.b1", (cfg.domain_hidden,)),
        ("domain.W2", (cfg.domain_hidden, cfg.domain_hidden)),
        ("domain.b2", (cfg.domain_hidden,)),
        ("domain.W3", (cfg.num_domains, cfg.domain_hidden)),
        ("domain.b3", (cfg.num_domains,)),
    ]
    return shapes


def is_domain_param(name: str) -> bool:
    return name.startswith("domain.")


def param_count(cfg: MixerConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def param_count_breakdown(cfg: MixerConfig) -> dict[str, int]:
    """Closed-form counts per component (independent of ``param_shapes``)."""
    k, N, DS, DC, H = cfg.k, cfg.N, cfg.D_S, cfg.D_C, cfg.domain_hidden
    per_block = 2 * N + DS * k + DS + k * DS + k + 2 * N + DC * N + DC + N * DC + N
    return {
        "mixer_blocks": cfg.M * per_block,
        "final_norm": 2 * N if cfg.final_norm else 0,
        "class_head": cfg.num_classes * N + cfg.num_classes,
        "domain_branch": H * N + H + H * H + H + cfg.num_domains * H + cfg.num_domains,
    }


def forward_flops(cfg: MixerConfig) -> dict[str, int]:
    """Multiply-add count of one forward pass, split by k-dependence.

    ``per_token`` scales with k, ``fixed`` does not; the total is
    ``fixed + k * per_token`` so cost is affine in the token count.
    """
    N, DS, DC, H = cfg.N, cfg.D_S, cfg.D_C, cfg.domain_hidden
    per_token_block = DS * N + DS * N + N * DC + DC * N
    per_token = cfg.M * per_token_block + N  # pooling sum
    fixed = cfg.num_classes * N + H * N + H * H + cfg.num_domains * H
    return {"per_token": per_token, "fixed": fixed,
            "total": fixed + cfg.k * per_token}


class MixerParams(dict):
    """Ordered name -> array mapping with a mutation counter.

    The optimizer bumps ``version`` after each in-place update so a backward
    pass can refuse a cache recorded against older weights.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.version = 0

    def copy(self) -> "MixerParams":
        out = MixerParams({k: v.copy() for k, v in self.items()})
        out.version = self.version
        return out

    def zeros_like(self) -> "MixerParams":
        return MixerParams({k: np.zeros_like(v) for k, v in self.items()})


def init_params(cfg: MixerConfig, seed: int) -> MixerParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights from a PCG64 stream.

    Norm gains start at 1, norm biases and MLP biases at 0. Blocks are drawn
    in ``param_shapes`` order so the same seed always yields the same bits.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = MixerParams()
    for name, shape in param_shapes(cfg):
        if name.endswith("norm.gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params(cfg: MixerConfig) -> MixerParams:
    return MixerParams({n: np.zeros(s) for n, s in param_shapes(cfg)})


def check_params(params, cfg: MixerConfig) -> None:
    for name, shape in param_shapes(cfg):
        if name not in params:
            raise DimensionError(f"missing parameter block {name}")
        if params[name].shape != shape:
            raise DimensionError(
                f"{name}: expected shape {shape}, got {params[name].shape}")


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class BlockCache:
    token_ln: object
    U: np.ndarray
    H: np.ndarray
    A: np.ndarray
    token_mask: np.ndarray | None
    channel_ln: object
    V: np.ndarray
    H2: np.ndarray
    A2: np.ndarray
    channel_mask: np.ndarray | None


@dataclass
class ForwardCache:
    mode: str
    version: int
    params: MixerParams
    cfg: MixerConfig
    blocks: list[BlockCache] = field(default_factory=list)
    final_ln: object = None
    g: np.ndarray | None = None
    dom_h1: np.ndarray | None = None
    dom_a1: np.ndarray | None = None
    dom_h2: np.ndarray | None = None
    dom_a2: np.ndarray | None = None


def _dropout_mask(shape, rate, rng):
    if rate <= 0.0:
        return None
    if rng is None:
        raise StateError("train-mode dropout needs a random generator")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def mixer_block_forward(X, params, m: int, cfg: MixerConfig, mode: str = "eval",
                        rng=None):
    """One Mixer block; returns ``(Y, Z, cache)``."""
    p = block_prefix(m)
    if X.shape != (cfg.k, cfg.N):
        raise DimensionError(
            f"block input has shape {X.shape}, config expects ({cfg.k}, {cfg.N})")
    train = mode == "train"
    rate = cfg.dropout_rate if train else 0.0

    U, token_ln = layer_norm_forward(X, params[p + "token_norm.gain"],
                                     params[p + "token_norm.bias"])
    H = matmul(params[p + "token.W1"], U) + params[p + "token.b1"][:, None]
    A = gelu(H)
    T = matmul(params[p + "token.W2"], A) + params[p + "token.b2"][:, None]
    token_mask = _dropout_mask(T.shape, rate, rng)
    if token_mask is not None:
        T = T * token_mask
    Y = X + T

    V, channel_ln = layer_norm_forward(Y, params[p + "channel_norm.gain"],
                                       params[p + "channel_norm.bias"])
    H2 = matmul(V, params[p + "channel.W3"].T) + params[p + "channel.b3"]
    A2 = gelu(H2)
    C = matmul(A2, params[p + "channel.W4"].T) + params[p + "channel.b4"]
    channel_mask = _dropout_mask(C.shape, rate, rng)
    if channel_mask is not None:
        C = C * channel_mask
    Z = Y + C
    return Y, Z, BlockCache(token_ln, U, H, A, token_mask, channel_ln, V, H2,
                            A2, channel_mask)


def mixer_block_backward(dZ, params, m: int, cache: BlockCache, grads) -> np.ndarray:
    p = block_prefix(m)
    dY = dZ.copy()
    dC = dZ if cache.channel_mask is None else dZ * cache.channel_mask
    grads[p + "channel.W4"] = matmul(dC.T, cache.A2)
    grads[p + "channel.b4"] = dC.sum(axis=0)
    dH2 = matmul(dC, params[p + "channel.W4"]) * gelu_grad(cache.H2)
    grads[p + "channel.W3"] = matmul(dH2.T, cache.V)
    grads[p + "channel.b3"] = dH2.sum(axis=0)
    dV = matmul(dH2, params[p + "channel.W3"])
    dY_ln, dg, db = layer_norm_backward(dV, cache.channel_ln)
    grads[p + "channel_norm.gain"] = dg
    grads[p + "channel_norm.bias"] = db
    dY += dY_ln

    dX = dY.copy()
    dT = dY if cache.token_mask is None else dY * cache.token_mask
    grads[p + "token.W2"] = matmul(dT, cache.A.T)
    grads[p + "token.b2"] = dT.sum(axis=1)
    dH = matmul(params[p + "token.W2"].T, dT) * gelu_grad(cache.H)
    grads[p + "token.W1"] = matmul(dH, cache.U.T)
    grads[p + "token.b1"] = dH.sum(axis=1)
    dU = matmul(params[p + "token.W1"].T, dH)
    dX_ln, dg, db = layer_norm_backward(dU, cache.token_ln)
    grads[p + "token_norm.gain"] = dg
    grads[p + "token_norm.bias"] = db
    return dX + dX_ln


def _prototypes(bag) -> np.ndarray:
    return np.asarray(getattr(bag, "prototypes", bag), dtype=np.float64)


def forward(bag, params: MixerParams, cfg: MixerConfig, mode: str = "eval",
            rng=None):
    """Return ``(class_logits, domain_logits, cache)`` for one prototype bag.

    ``bag`` may be a ``PrototypeBag`` or a bare k x N array. ``rng`` is only
    consulted for dropout in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = _prototypes(bag)
    if X.shape != (cfg.k, cfg.N):
        raise DimensionError(
            f"bag has prototype table {X.shape}, model expects "
            f"k={cfg.k} x N={cfg.N}")
    cache = ForwardCache(mode, getattr(params, "version", 0), params, cfg)
    Z = X
    for m in range(cfg.M):
        _, Z, bc = mixer_block_forward(Z, params, m, cfg, mode, rng)
        cache.blocks.append(bc)
    if cfg.final_norm:
        Z, cache.final_ln = layer_norm_forward(Z, params["final_norm.gain"],
                                               params["final_norm.bias"])
    g = Z.mean(axis=0)
    cache.g = g
    class_logits = matmul(params["head.W"], g) + params["head.b"]

    # gradient reversal is the identity going forward
    h1 = matmul(params["domain.W1"], g) + params["domain.b1"]
    a1 = gelu(h1)
    h2 = matmul(params["domain.W2"], a1) + params["domain.b2"]
    a2 = gelu(h2)
    domain_logits = matmul(params["domain.W3"], a2) + params["domain.b3"]
    cache.dom_h1, cache.dom_a1, cache.dom_h2, cache.dom_a2 = h1, a1, h2, a2
    return class_logits, domain_logits, cache


def pooled_representation(bag, params, cfg) -> np.ndarray:
    _, _, cache = forward(bag, params, cfg, "eval")
    return cache.g


def grad_reverse(upstream, lam: float) -> np.ndarray:
    """Backward rule of the gradient reversal layer: ``-lam * upstream``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return -lam * np.asarray(upstream, dtype=np.float64)


def _check_cache(cache: ForwardCache | None):
    if cache is None:
        raise StateError("backward called without a forward cache")
    if cache.mode != "train":
        raise StateError("backward needs a train-mode forward cache")
    if getattr(cache.params, "version", 0) != cache.version:
        raise StateError("forward cache is stale: parameters changed since forward")


def domain_backward(cache: ForwardCache, d_domain_logits, grads) -> np.ndarray:
    """Backprop through the domain MLP; returns the unreversed gradient at g."""
    p = cache.params
    d = np.asarray(d_domain_logits, dtype=np.float64)
    grads["domain.W3"] = np.outer(d, cache.dom_a2)
    grads["domain.b3"] = d.copy()
    dh2 = matmul(p["domain.W3"].T, d) * gelu_grad(cache.dom_h2)
    grads["domain.W2"] = np.outer(dh2, cache.dom_a1)
    grads["domain.b2"] = dh2
    dh1 = matmul(p["domain.W2"].T, dh2) * gelu_grad(cache.dom_h1)
    grads["domain.W1"] = np.outer(dh1, cache.g)
    grads["domain.b1"] = dh1
    return matmul(p["domain.W1"].T, dh1)


def trunk_backward(cache: ForwardCache, d_g, grads) -> None:
    """Backprop a gradient at the pooled vector through norm and blocks."""
    cfg, p = cache.cfg, cache.params
    dZ = np.broadcast_to(d_g / cfg.k, (cfg.k, cfg.N)).copy()
    if cfg.final_norm:
        dZ, dg, db = layer_norm_backward(dZ, cache.final_ln)
        grads["final_norm.gain"] = dg
        grads["final_norm.bias"] = db
    for m in reversed(range(cfg.M)):
        dZ = mixer_block_backward(dZ, p, m, cache.blocks[m], grads)


def backward(cache: ForwardCache, d_class_logits, d_domain_logits,
             lam: float) -> MixerParams:
    """Gradients for every parameter block.

    The domain MLP gets the plain gradient of the domain loss; the trunk and
    class head get the class-loss gradient plus ``-lam`` times the domain-loss
    gradient, so a single descent step realizes the adversarial ascent.
    """
    _check_cache(cache)
    p = cache.params
    grads = MixerParams()
    d_cls = np.asarray(d_class_logits, dtype=np.float64)
    grads["head.W"] = np.outer(d_cls, cache.g)
    grads["head.b"] = d_cls.copy()
    d_g = matmul(p["head.W"].T, d_cls)
    d_g_domain = domain_backward(cache, d_domain_logits, grads)
    d_g = d_g + grad_reverse(d_g_domain, lam)
    trunk_backward(cache, d_g, grads)
    return MixerParams({name: grads[name] for name in p})


@dataclass
class StepResult:
    class_loss: float
    domain_loss: float
    class_logits: np.ndarray
    grads: MixerParams


def loss_and_grads(bag, params, cfg, class_target: int, domain_target: int | None,
                   lam: float, rng=None) -> StepResult:
    """Forward, both cross-entropy losses, and the combined backward pass.

    With ``domain_target=None`` the domain branch receives no gradient at all
    (the plain classifier).
    """
    cls_logits, dom_logits, cache = forward(bag, params, cfg, "train", rng)
    cls_loss, d_cls = softmax_cross_entropy(cls_logits, class_target)
    if domain_target is None:
        dom_loss, d_dom = float("nan"), np.zeros(cfg.num_domains)
    else:
        dom_loss, d_dom = softmax_cross_entropy(dom_logits, domain_target)
    grads = backward(cache, d_cls, d_dom, lam)
    return StepResult(cls_loss, dom_loss, cls_logits, grads)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, cfg: MixerConfig, path) -> None:
    """Header ``PMX1 | n_ints | ints | n_blocks`` then per block rows, cols, data.

    Everything little-endian: uint32 header fields and float64 payloads.
    Vectors are stored as 1 x n blocks.
    """
    check_params(params, cfg)
    ints = cfg.ints()
    shapes = param_shapes(cfg)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(f"<I{len(ints)}I", len(ints), *ints))
        fh.write(struct.pack("<I", len(shapes)))
        for name, shape in shapes:
            a = params[name]
            rows, cols = (1, shape[0]) if len(shape) == 1 else shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, expected: MixerConfig | None = None):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0, path=path)
    off = 4
    try:
        (n_ints,) = struct.unpack_from("<I", raw, off)
        off += 4
        ints = struct.unpack_from(f"<{n_ints}I", raw, off)
        off += 4 * n_ints
        cfg = MixerConfig.from_ints(ints)
        (n_blocks,) = struct.unpack_from("<I", raw, off)
        off += 4
    except (struct.error, ValueError, ConfigError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=off,
                          path=path) from exc
    shapes = param_shapes(cfg)
    if n_blocks != len(shapes):
        raise FormatError(f"expected {len(shapes)} parameter blocks, header says "
                          f"{n_blocks}", offset=off - 4, path=path)
    params = MixerParams()
    for name, shape in shapes:
        try:
            rows, cols = struct.unpack_from("<II", raw, off)
        except struct.error as exc:
            raise FormatError("truncated checkpoint", offset=off, path=path) from exc
        want = (1, shape[0]) if len(shape) == 1 else shape
        if (rows, cols) != tuple(want):
            raise FormatError(f"{name}: stored {rows}x{cols}, expected "
                              f"{want[0]}x{want[1]}", offset=off, path=path)
        off += 8
        nbytes = rows * cols * 8
        if off + nbytes > len(raw):
            raise FormatError("truncated checkpoint", offset=len(raw), path=path)
        params[name] = np.frombuffer(raw, "<f8", rows * cols, off).astype(
            np.float64).reshape(shape)
        off += nbytes
    if off != len(raw):
        raise FormatError("trailing bytes after last block", offset=off, path=path)
    if expected is not None:
        mismatched = [
            f"{n}: checkpoint {a} vs expected {b}"
            for n, a, b in zip(("k", "N", "D_S", "D_C", "M", "num_classes",
                                "num_domains", "domain_hidden", "final_norm"),
                               cfg.ints(), expected.ints()) if a != b]
        if mismatched:
            raise DimensionError("checkpoint/config mismatch: " + "; ".join(mismatched))
    return params, cfg
