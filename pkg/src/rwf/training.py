"""Reverse-mode gradients for the fixed architecture, Adam training steps,
and a gradient check against central finite differences."""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .backbone import Model, ModelConfig, build_model, forward
from .numerics import (
    AdamMoments,
    NonFiniteError,
    RngStream,
    adam_step,
    cross_entropy_with_grad,
    finite_diff_grad,
    gelu_grad,
    layer_norm_backward,
)


def _sum_outer(a, b):
    """sum over leading axes of a^T b, for arrays (..., n, p) and (..., n, q)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _mhsa_backward(dout, H, block, c, g, pre):
    g[pre + "attn.b_o"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    g[pre + "attn.W_o"] = _sum_outer(c["o"], dout)
    do = dout @ block.W_o.T
    *lead, n, d = do.shape
    heads = block.heads
    do = np.swapaxes(do.reshape(*lead, n, heads, d // heads), -2, -3)
    att, q, k, v, scale = c["att"], c["q"], c["k"], c["v"], c["scale"]
    datt = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(att, -1, -2) @ do
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q

    def merge(x):
        return np.swapaxes(x, -2, -3).reshape(*lead, n, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    g[pre + "attn.W_q"] = _sum_outer(H, dq)
    g[pre + "attn.W_k"] = _sum_outer(H, dk)
    g[pre + "attn.W_v"] = _sum_outer(H, dv)
    return dq @ block.W_q.T + dk @ block.W_k.T + dv @ block.W_v.T


def _block_backward(dZout, block, c, g, pre):
    """Gradient of one block; fills ``g`` and returns dL/dZ_in."""
    m = c["m"]
    # MLP branch
    dU = dZout
    da1 = dU @ block.W2.T
    g[pre + "mlp.W2"] = _sum_outer(c["a1"], dU)
    g[pre + "mlp.b2"] = dU.reshape(-1, dU.shape[-1]).sum(axis=0)
    dh1 = da1 * gelu_grad(c["h1"])
    g[pre + "mlp.W1"] = _sum_outer(c["U"], dh1)
    g[pre + "mlp.b1"] = dh1.reshape(-1, dh1.shape[-1]).sum(axis=0)
    dZt_norm, g[pre + "ln2.g"], g[pre + "ln2.b"] = layer_norm_backward(dh1 @ block.W1.T, c["ln2"])
    dZt = dZout + dZt_norm
    # discarded prompt rows carry no gradient from above
    dRatt = np.zeros(dZt.shape[:-2] + (m + dZt.shape[-2], dZt.shape[-1]), dtype=dZt.dtype)
    dRatt[..., m:, :] = dZt
    dH = _mhsa_backward(dRatt, c["H"], block, c["attn"], g, pre)
    dR = dRatt.copy()
    if m and not block.norm_prompts:
        dR[..., :m, :] += dH[..., :m, :]
        dz, g[pre + "ln1.g"], g[pre + "ln1.b"] = layer_norm_backward(dH[..., m:, :], c["ln1"])
        dR[..., m:, :] += dz
    else:
        dr, g[pre + "ln1.g"], g[pre + "ln1.b"] = layer_norm_backward(dH, c["ln1"])
        dR += dr
    dZ = dR[..., m:, :].copy()
    if not m:
        return dZ
    # routing path: P = A V, A = softmax(beta Q~ K^T)
    r = block.routing
    dP = dR[..., :m, :]
    A, K, V, Qt, src = c["A"], c["K"], c["V"], c["Q_tilde"], c["route_src"]
    dA = dP @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dP
    dS = r.beta * A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dQt = (dS @ K).reshape(-1, m, Qt.shape[-1]).sum(axis=0)
    dK = np.swapaxes(dS, -1, -2) @ Qt
    g[pre + "route.Q"] = dQt @ r.W_Q.T
    g[pre + "route.W_Q"] = r.Q.T @ dQt
    g[pre + "route.W_K"] = _sum_outer(src, dK)
    g[pre + "route.W_V"] = _sum_outer(src, dV)
    dsrc = dK @ r.W_K.T + dV @ r.W_V.T
    if block.route_normalized:
        dz, lg, lb = layer_norm_backward(dsrc, c["ln_r"])
        g[pre + "ln1.g"] = g[pre + "ln1.g"] + lg
        g[pre + "ln1.b"] = g[pre + "ln1.b"] + lb
        dZ += dz
    else:
        dZ += dsrc
    return dZ


def backward(model: Model, x, y, class_mask=None, use_routing=True):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Returns ``(loss, grads)``; ``grads`` is keyed like ``model.params`` and
    includes frozen tensors (the optimizer decides what to apply).
    """
    if len(y) == 0:
        raise ValueError("empty batch")
    cfg = model.config
    p = model.params
    caches = []
    logits = forward(model, x, use_routing=use_routing, caches=caches)
    loss, dlogits = cross_entropy_with_grad(logits, y, class_mask)
    if not np.isfinite(loss):
        raise NonFiniteError("loss diverged")
    top = caches.pop()
    g = OrderedDict()
    g["head.W"] = top["zf"].T @ dlogits
    g["head.b"] = dlogits.sum(axis=0)
    dzf = dlogits @ p["head.W"].T
    dpooled, g["norm.g"], g["norm.b"] = layer_norm_backward(dzf, top["lnf"])
    Z = top["Z"]
    dZ = np.zeros_like(Z)
    if cfg.pooling == "cls":
        dZ[..., 0, :] = dpooled
    else:
        dZ += dpooled[..., None, :] / Z.shape[-2]
    for i in reversed(range(cfg.depth)):
        dZ = _block_backward(dZ, model.block(i, use_routing), caches[i], g, f"blocks.{i}.")
    x = top["x"]
    E_grad = dZ[..., 1:, :]
    g["embed.W"] = _sum_outer(x, E_grad)
    g["embed.cls"] = dZ[..., 0, :].reshape(-1, dZ.shape[-1]).sum(axis=0, keepdims=True)
    g["embed.pos"] = dZ.reshape(-1, *dZ.shape[-2:]).sum(axis=0)
    grads = OrderedDict()
    for name, val in p.items():
        if name in g:
            grads[name] = g[name].astype(val.dtype, copy=False)
        else:
            # tensors off the active path (e.g. routers bypassed in pretraining)
            grads[name] = np.zeros_like(val)
    for name, val in grads.items():
        if not np.all(np.isfinite(val)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: "OrderedDict[str, AdamMoments]" = field(default_factory=OrderedDict)

    @classmethod
    def for_model(cls, model: Model, names=None, **hyper):
        st = cls(**hyper)
        for n in names if names is not None else model.trainable_names():
            st.moments[n] = AdamMoments.zeros_like(model.params[n])
        return st


def train_step(model: Model, x, y, opt: OptState, class_mask=None, use_routing=True, counter=None):
    """One backward + Adam update on every parameter tracked by ``opt``."""
    loss, grads = backward(model, x, y, class_mask, use_routing=use_routing)
    for name, mom in opt.moments.items():
        adam_step(model.params[name], grads[name], mom, opt.lr, opt.beta1, opt.beta2, opt.eps)
    opt.step += 1
    if counter is not None:
        counter.add(len(y))
    return loss


class SampleCounter:
    """Counts samples that reached a backward call."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def toy_config(**overrides):
    base = dict(
        depth=2, d=8, heads=2, mlp_ratio=2.0, L=6, input_dim=4, m=2, k=1,
        placement="First", num_classes=5, backbone_mode="jointly_trainable",
    )
    base.update(overrides)
    return ModelConfig(**base)


def relative_error(a, f):
    a = np.asarray(a, dtype=np.float64).ravel()
    f = np.asarray(f, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - f) / (np.abs(a) + np.abs(f) + 1e-12)))


def grad_check(config: ModelConfig, rng: RngStream, tol=1e-4, batch=4, eps=1e-5,
               names=None, corrupt=None, perturb_std=0.3):
    """Compare :func:`backward` to central differences on a fixed random batch.

    Weights are perturbed away from their init (gains != 1, biases != 0) so
    every path carries signal. ``corrupt`` optionally maps a parameter name to
    a callable applied to the analytic gradient (fault injection).
    Returns ``{"groups": {name: max_rel_err}, "failed": [...], "passed": bool}``.
    """
    if config.dtype != "float64":
        raise ValueError("gradient checks require float64")
    model = build_model(config, rng.child(0))
    for i, (name, val) in enumerate(model.params.items()):
        if val.ndim == 1 or name.endswith("route.Q"):
            val += rng.child(1, i).normal(val.shape, perturb_std)
    x = rng.child(3).normal((batch, config.L, config.input_dim), 1.0)
    y = rng.child(4).generator.integers(0, config.num_classes, size=batch)
    _, grads = backward(model, x, y)
    names = list(names) if names is not None else model.trainable_names()
    report = {}
    for name in names:
        target = model.params[name]
        shape = target.shape

        def f(flat, target=target, shape=shape):
            saved = target.copy()
            target[...] = flat.reshape(shape)
            try:
                logits = forward(model, x)
                loss, _ = cross_entropy_with_grad(logits, y)
            finally:
                target[...] = saved
            return loss

        fd = finite_diff_grad(f, target.ravel(), eps)
        analytic = grads[name]
        if corrupt and name in corrupt:
            analytic = corrupt[name](analytic)
        report[name] = relative_error(analytic, fd)
    failed = [n for n, e in report.items() if not e < tol]
    return {"groups": report, "failed": failed, "passed": not failed, "tol": tol}
