"""Pre-norm transformer blocks, the routing (concat-attend-discard) block,
and a small class-token classifier assembled from them.

Parameters live in one ordered ``name -> ndarray`` dict on :class:`Model`;
:class:`BlockParams` is a view holding references into that dict.
"""

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .numerics import RngStream, gelu, layer_norm, masked_logits, row_softmax
from .routing import RoutingParams, default_beta, project, retrieve, routing_matrix

PLACEMENTS = ("First", "Last")
BACKBONE_MODES = ("frozen_random", "pretrain_then_freeze", "jointly_trainable")
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    depth: int = 4
    d: int = 32
    heads: int = 4
    mlp_ratio: float = 2.0
    L: int = 8  # input tokens per sample (the class token is extra)
    input_dim: int = 16
    m: int = 30
    k: int = 3
    placement: str = "First"
    num_classes: int = 20
    beta: Optional[float] = None  # None -> 1/sqrt(d)
    backbone_mode: str = "pretrain_then_freeze"
    route_normalized: bool = False  # route over LN1(Z) instead of Z
    norm_prompts: bool = True  # prompts go through the block's LN1 with the tokens
    pooling: str = "cls"
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.depth < 0 or self.d < 1 or self.L < 1 or self.input_dim < 1:
            raise ValueError("depth/d/L/input_dim out of range")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"heads={self.heads} must divide d={self.d}")
        if not 0 <= self.k <= self.depth:
            raise ValueError(f"k={self.k} must lie in [0, depth={self.depth}]")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.backbone_mode not in BACKBONE_MODES:
            raise ValueError(f"backbone_mode must be one of {BACKBONE_MODES}")
        if self.pooling not in ("cls", "mean"):
            raise ValueError("pooling must be 'cls' or 'mean'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if self.num_classes < 1 or self.mlp_ratio <= 0:
            raise ValueError("num_classes and mlp_ratio must be positive")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def hidden(self):
        return int(round(self.mlp_ratio * self.d))

    @property
    def routing_beta(self):
        return default_beta(self.d) if self.beta is None else float(self.beta)

    def router_blocks(self):
        """0-based indices of blocks that carry a router."""
        if self.k == 0 or self.m == 0:
            return []
        if self.placement == "First":
            return list(range(self.k))
        return list(range(self.depth - self.k, self.depth))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class BlockParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    heads: int
    routing: Optional[RoutingParams] = None
    norm_prompts: bool = True
    route_normalized: bool = False

    @property
    def is_rwf(self):
        return self.routing is not None and self.routing.m >= 1


BLOCK_FIELDS = (
    ("ln1.g", "ln1_g"),
    ("ln1.b", "ln1_b"),
    ("attn.W_q", "W_q"),
    ("attn.W_k", "W_k"),
    ("attn.W_v", "W_v"),
    ("attn.W_o", "W_o"),
    ("attn.b_o", "b_o"),
    ("ln2.g", "ln2_g"),
    ("ln2.b", "ln2_b"),
    ("mlp.W1", "W1"),
    ("mlp.b1", "b1"),
    ("mlp.W2", "W2"),
    ("mlp.b2", "b2"),
)
ROUTE_FIELDS = ("Q", "W_Q", "W_K", "W_V")


class Model:
    """Token embedding + class token + blocks + final norm + linear head."""

    def __init__(self, config: ModelConfig, params, trainable):
        self.config = config
        self.params = params
        self.trainable = set(trainable)

    def block(self, i, use_routing=True):
        p = self.params
        pre = f"blocks.{i}."
        kw = {attr: p[pre + name] for name, attr in BLOCK_FIELDS}
        routing = None
        if use_routing and (pre + "route.Q") in p:
            routing = RoutingParams(
                *(p[pre + "route." + f] for f in ROUTE_FIELDS), beta=self.config.routing_beta
            )
        return BlockParams(
            heads=self.config.heads,
            routing=routing,
            norm_prompts=self.config.norm_prompts,
            route_normalized=self.config.route_normalized,
            **kw,
        )

    def trainable_names(self):
        return [n for n in self.params if n in self.trainable]

    def frozen_names(self):
        return [n for n in self.params if n not in self.trainable]

    def copy(self):
        params = OrderedDict((n, v.copy()) for n, v in self.params.items())
        return Model(ModelConfig.from_dict(self.config.to_dict()), params, self.trainable)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def trainable_set(config: ModelConfig, names):
    if config.backbone_mode == "jointly_trainable":
        return {n for n in names if not n.endswith(("route.W_K", "route.W_V"))}
    return {n for n in names if n.startswith("head.") or n.endswith(("route.Q", "route.W_Q"))}


def build_model(config: ModelConfig, rng: RngStream) -> Model:
    """Deterministic init; each tensor draws from its own keyed child stream,
    so adding routers never perturbs the backbone weights."""
    config.validate()
    dt = np.dtype(config.dtype)
    d, h = config.d, config.hidden
    s = 1.0 / np.sqrt(d)
    p = OrderedDict()

    def draw(key, shape, std):
        return rng.child(*key).normal(shape, std).astype(dt)

    p["embed.W"] = draw((0, 0), (config.input_dim, d), 1.0 / np.sqrt(config.input_dim))
    p["embed.cls"] = draw((0, 1), (1, d), 0.02)
    p["embed.pos"] = draw((0, 2), (config.L + 1, d), 0.02)
    routers = set(config.router_blocks())
    for i in range(config.depth):
        pre = f"blocks.{i}."
        p[pre + "ln1.g"] = np.ones(d, dtype=dt)
        p[pre + "ln1.b"] = np.zeros(d, dtype=dt)
        p[pre + "attn.W_q"] = draw((1, i, 0), (d, d), s)
        p[pre + "attn.W_k"] = draw((1, i, 1), (d, d), s)
        p[pre + "attn.W_v"] = draw((1, i, 2), (d, d), s)
        p[pre + "attn.W_o"] = draw((1, i, 3), (d, d), s)
        p[pre + "attn.b_o"] = np.zeros(d, dtype=dt)
        p[pre + "ln2.g"] = np.ones(d, dtype=dt)
        p[pre + "ln2.b"] = np.zeros(d, dtype=dt)
        p[pre + "mlp.W1"] = draw((1, i, 4), (d, h), s)
        p[pre + "mlp.b1"] = np.zeros(h, dtype=dt)
        p[pre + "mlp.W2"] = draw((1, i, 5), (h, d), 1.0 / np.sqrt(h))
        p[pre + "mlp.b2"] = np.zeros(d, dtype=dt)
        if i in routers:
            p[pre + "route.Q"] = draw((2, i, 0), (config.m, d), 0.02)
            p[pre + "route.W_Q"] = draw((2, i, 1), (d, d), s)
            p[pre + "route.W_K"] = draw((2, i, 2), (d, d), s)
            p[pre + "route.W_V"] = draw((2, i, 3), (d, d), s)
    p["norm.g"] = np.ones(d, dtype=dt)
    p["norm.b"] = np.zeros(d, dtype=dt)
    p["head.W"] = draw((3, 0), (d, config.num_classes), 0.02)
    p["head.b"] = np.zeros(config.num_classes, dtype=dt)
    return Model(config, p, trainable_set(config, p))


def count_params(model: Model):
    total = sum(v.size for v in model.params.values())
    trainable = sum(v.size for n, v in model.params.items() if n in model.trainable)
    return {"total": total, "trainable": trainable, "trainable_fraction": trainable / total}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _split_heads(x, heads):
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def mhsa(R, block: BlockParams, cache=None):
    """Multi-head scaled dot-product self-attention over every row of ``R``,
    followed by the output projection (no residual, no norm)."""
    R = np.asarray(R)
    if R.shape[-1] != block.W_q.shape[0]:
        raise ValueError(f"width {R.shape[-1]} does not match attention weights")
    if R.shape[-2] < 1:
        raise ValueError("attention needs at least one row")
    q = _split_heads(R @ block.W_q, block.heads)
    k = _split_heads(R @ block.W_k, block.heads)
    v = _split_heads(R @ block.W_v, block.heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    att = row_softmax(q @ np.swapaxes(k, -1, -2), scale)
    o = _merge_heads(att @ v)
    if cache is not None:
        cache.update(q=q, k=k, v=v, att=att, o=o, scale=scale)
    return o @ block.W_o + block.b_o


def _block_forward(Z, block: BlockParams, cache=None):
    """Shared body of both block kinds; ``cache`` collects backward state."""
    L = Z.shape[-2]
    if block.is_rwf:
        if block.route_normalized:
            src, ln_r = layer_norm(Z, block.ln1_g, block.ln1_b, LN_EPS, return_cache=True)
        else:
            src, ln_r = Z, None
        K, V, Q_tilde = project(src, block.routing)
        A = routing_matrix(Q_tilde, K, block.routing.beta)
        P = retrieve(A, V)
        m = P.shape[-2]
        R = np.concatenate([np.broadcast_to(P, Z.shape[:-2] + P.shape[-2:]), Z], axis=-2)
    else:
        m = 0
        R = Z
    if m and not block.norm_prompts:
        Hz, ln1 = layer_norm(Z, block.ln1_g, block.ln1_b, LN_EPS, return_cache=True)
        H = np.concatenate([R[..., :m, :], Hz], axis=-2)
    else:
        H, ln1 = layer_norm(R, block.ln1_g, block.ln1_b, LN_EPS, return_cache=True)
    att_cache = {} if cache is not None else None
    R_att = R + mhsa(H, block, att_cache)
    Zt = R_att[..., m:, :]  # prompt rows are discarded here
    assert Zt.shape[-2] == L
    U, ln2 = layer_norm(Zt, block.ln2_g, block.ln2_b, LN_EPS, return_cache=True)
    h1 = U @ block.W1 + block.b1
    a1 = gelu(h1)
    out = Zt + (a1 @ block.W2 + block.b2)
    if cache is not None:
        cache.update(
            Z=Z, m=m, H=H, ln1=ln1, attn=att_cache, U=U, ln2=ln2, h1=h1, a1=a1
        )
        if m:
            cache.update(route_src=src, ln_r=ln_r, K=K, V=V, A=A, Q_tilde=Q_tilde)
    return out


def standard_block_forward(Z, block: BlockParams):
    if block.is_rwf:
        raise ValueError("standard block must not carry routing parameters")
    return _block_forward(np.asarray(Z), block)


def rwf_block_forward(Z, block: BlockParams):
    if block.routing is None:
        raise ValueError("routing block needs RoutingParams")
    return _block_forward(np.asarray(Z), block)


def embed(x, model: Model):
    p = model.params
    E = x @ p["embed.W"]
    cls = np.broadcast_to(p["embed.cls"], E.shape[:-2] + (1, E.shape[-1]))
    return np.concatenate([cls, E], axis=-2) + p["embed.pos"]


def forward(model: Model, x, use_routing=True, caches=None, layer_inputs=None):
    """Unmasked logits for a batch ``x`` of shape (B, L, input_dim)."""
    cfg = model.config
    x = np.asarray(x, dtype=cfg.dtype)
    if x.shape[-2:] != (cfg.L, cfg.input_dim):
        raise ValueError(f"expected inputs (..., {cfg.L}, {cfg.input_dim}), got {x.shape}")
    Z = embed(x, model)
    for i in range(cfg.depth):
        if layer_inputs is not None:
            layer_inputs.append(Z)
        c = {} if caches is not None else None
        Z = _block_forward(Z, model.block(i, use_routing), c)
        if caches is not None:
            caches.append(c)
    pooled = Z[..., 0, :] if cfg.pooling == "cls" else Z.mean(axis=-2)
    p = model.params
    zf, lnf = layer_norm(pooled, p["norm.g"], p["norm.b"], LN_EPS, return_cache=True)
    logits = zf @ p["head.W"] + p["head.b"]
    if caches is not None:
        caches.append({"x": x, "Z": Z, "zf": zf, "lnf": lnf})
    return logits


def model_forward(x, model: Model, class_mask=None):
    """Logits with masked-out classes set to -inf. Works on one sample or a batch."""
    return masked_logits(forward(model, x), class_mask)


def predict(model: Model, x, class_mask=None, batch_size=256):
    """Argmax class ids; ties go to the smallest class id."""
    out = []
    for s in range(0, len(x), batch_size):
        out.append(np.argmax(model_forward(x[s : s + batch_size], model, class_mask), axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
