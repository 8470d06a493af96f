"""Fixed-architecture 3D convolutional feature extractor with manual backprop.

Tensors are channels-last: (batch, r, r, r, channels). Each layer is
conv (stride 1, zero padding) -> batch norm -> leaky ReLU; the last layer
skips the activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

DEFAULT_WIDTHS = (12, 32, 64, 64, 128, 128, 128, 128, 128)

@dataclass(frozen=True)
class NetworkConfig:
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    kernel: int = 3
    slope: float = 0.1
    eps: float = 1e-5
    momentum: float = 0.1
    batch_norm: bool = True
    final_activation: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("need at least one layer")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class NetworkParams:
    """Weights, biases and normalization state, keyed ``"{layer}.{name}"``."""

    TRAINABLE = ("weight", "bias", "gamma", "beta")

    def __init__(self, config: NetworkConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: NetworkConfig = NetworkConfig(), seed=0):
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)
        k = config.kernel
        t = {}
        for i, (cin, cout) in enumerate(zip(config.widths[:-1], config.widths[1:])):
            std = np.sqrt(2.0 / (cin * k ** 3))
            t[f"{i}.weight"] = (rng.standard_normal((cout, cin, k, k, k)) * std).astype(dt)
            t[f"{i}.bias"] = np.zeros(cout, dt)
            t[f"{i}.gamma"] = np.ones(cout, dt)
            t[f"{i}.beta"] = np.zeros(cout, dt)
            t[f"{i}.running_mean"] = np.zeros(cout, dt)
            t[f"{i}.running_var"] = np.ones(cout, dt)
        return cls(config, t)

    def __getitem__(self, key):
        return self.tensors[key]

    def trainable_keys(self):
        return [k for k in self.tensors if k.split(".", 1)[1] in self.TRAINABLE]

    def copy(self):
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        cfg = NetworkConfig(**{**self.config.to_dict(), "dtype": np.dtype(dtype).name})
        return NetworkParams(cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def is_finite(self):
        return all(np.isfinite(v).all() for v in self.tensors.values())


@dataclass
class TapeContext:
    params_id: int
    shapes: tuple
    layers: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# layer primitives


def _offsets(k):
    return [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]


def _flat_layout(dd, hh, ww, k):
    """Flat offsets of each kernel tap in the padded volume and the valid output rows.

    In a zero-padded volume flattened row-major, tap (a, b, c) is a constant
    shift, so every tap reads one contiguous slice. Outputs are computed on an
    extended range and the rows that map to real voxels are picked afterwards.
    """
    p = k // 2
    s1, s2 = (hh + 2 * p) * (ww + 2 * p), ww + 2 * p
    length = (dd - 1) * s1 + (hh - 1) * s2 + ww
    shifts = [a * s1 + b * s2 + c for a, b, c in _offsets(k)]
    i, j, l = np.meshgrid(np.arange(dd), np.arange(hh), np.arange(ww), indexing="ij")
    valid = (i * s1 + j * s2 + l).reshape(-1)
    return shifts, length, valid


def conv3d_forward(x, w, b=None):
    """Same-size 3D cross-correlation. x: (B,D,H,W,Cin), w: (Cout,Cin,k,k,k).

    One matmul per kernel tap on contiguous views of the padded input, so no
    im2col buffer is built.
    """
    bsz, dd, hh, ww, cin = x.shape
    cout, wcin, k = w.shape[:3]
    if wcin != cin:
        raise ValueError(f"conv expects {wcin} input channels, got {cin}")
    p = k // 2
    dt = np.result_type(x, w)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x
    xp = np.ascontiguousarray(xp, dtype=dt).reshape(bsz, -1, cin)
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0), dtype=dt).reshape(-1, cin, cout)
    shifts, length, valid = _flat_layout(dd, hh, ww, k)
    out = np.empty((bsz, dd * hh * ww, cout), dtype=dt)
    acc = np.empty((length, cout), dtype=dt)
    for bi in range(bsz):
        acc[...] = 0
        for t, off in enumerate(shifts):
            acc += xp[bi, off:off + length] @ wk[t]
        out[bi] = acc[valid]
    out = out.reshape(bsz, dd, hh, ww, cout)
    if b is not None:
        out += b
    return out


def conv3d_backward(x, w, grad_out):
    """Returns (grad_x, grad_w, grad_b) for conv3d_forward."""
    bsz, dd, hh, ww, cin = x.shape
    cout, _, k = w.shape[:3]
    p = k // 2
    dt = np.result_type(x, w)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x
    padded_shape = xp.shape
    xp = np.ascontiguousarray(xp, dtype=dt).reshape(bsz, -1, cin)
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1), dtype=dt).reshape(-1, cout, cin)
    shifts, length, valid = _flat_layout(dd, hh, ww, k)
    gxp = np.zeros_like(xp)
    grad_w = np.zeros((len(shifts), cin, cout), dtype=np.float64)
    gy = np.zeros((length, cout), dtype=dt)
    for bi in range(bsz):
        gy[valid] = grad_out[bi].reshape(-1, cout)
        for t, off in enumerate(shifts):
            grad_w[t] += xp[bi, off:off + length].T @ gy
            gxp[bi, off:off + length] += gy @ wk[t]
    gxp = gxp.reshape(padded_shape)
    grad_x = gxp[:, p:p + dd, p:p + hh, p:p + ww] if p else gxp
    grad_b = grad_out.sum(axis=(0, 1, 2, 3), dtype=np.float64).astype(w.dtype)
    grad_w = grad_w.reshape(k, k, k, cin, cout).transpose(4, 3, 0, 1, 2).astype(w.dtype)
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w), grad_b


def batchnorm_forward(x, gamma, beta, eps):
    """Batch statistics over all but the channel axis, accumulated in float64.

    Returns (y, xhat, inv_std, mean, var).
    """
    axes = tuple(range(x.ndim - 1))
    dt = x.dtype
    mean = x.mean(axis=axes, dtype=np.float64)
    xc = x - mean.astype(dt)
    var = np.mean(xc * xc, axis=axes, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.astype(dt)
    return xhat * gamma + beta, xhat, inv_std, mean, var


def batchnorm_backward(grad_out, xhat, inv_std, gamma):
    axes = tuple(range(xhat.ndim - 1))
    dt = xhat.dtype
    n = xhat.size // xhat.shape[-1]
    ggamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64)
    gbeta = grad_out.sum(axis=axes, dtype=np.float64)
    scale = (gamma * inv_std).astype(dt)
    gx = scale * (grad_out - (gbeta / n).astype(dt) - xhat * (ggamma / n).astype(dt))
    return gx, ggamma.astype(dt), gbeta.astype(dt)


def leaky_relu(x, slope):
    return np.where(x > 0, x, x * slope)


def leaky_relu_backward(x, grad_out, slope):
    return np.where(x > 0, grad_out, grad_out * slope)


# ---------------------------------------------------------------------------
# whole network


def _check_input(params, x):
    if x.ndim != 5 or x.shape[-1] != params.config.widths[0]:
        raise ValueError(f"expected (B, r, r, r, {params.config.widths[0]}) input, got {x.shape}")


def forward(params: NetworkParams, x, mode="train", track_running=True, momentum=None):
    """Run the network. Train mode returns (out, tape) and, if ``track_running``,
    updates the running statistics in place; eval mode returns (out, None).

    ``momentum`` overrides the configured running-statistics momentum.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    _check_input(params, x)
    cfg = params.config
    x = np.asarray(x, dtype=cfg.dtype)
    tape = TapeContext(id(params), tuple(v.shape for v in params.tensors.values())) if mode == "train" else None
    h = x
    for i in range(cfg.n_layers):
        w, b = params[f"{i}.weight"], params[f"{i}.bias"]
        rec = {"x": h}
        z = conv3d_forward(h, w, b)
        if cfg.batch_norm:
            gamma, beta = params[f"{i}.gamma"], params[f"{i}.beta"]
            if mode == "train":
                z, xhat, inv_std, mean, var = batchnorm_forward(z, gamma, beta, cfg.eps)
                rec.update(xhat=xhat, inv_std=inv_std)
                if track_running:
                    n = z.size // z.shape[-1]
                    unbiased = var * n / max(n - 1, 1)
                    m = cfg.momentum if momentum is None else momentum
                    rm, rv = params[f"{i}.running_mean"], params[f"{i}.running_var"]
                    rm[...] = (1 - m) * rm + m * mean
                    rv[...] = (1 - m) * rv + m * unbiased
            else:
                scale = gamma / np.sqrt(params[f"{i}.running_var"].astype(np.float64) + cfg.eps)
                shift = beta - params[f"{i}.running_mean"] * scale
                z = z * scale.astype(cfg.dtype) + shift.astype(cfg.dtype)
        last = i == cfg.n_layers - 1
        if not last or cfg.final_activation:
            rec["pre"] = z
            z = leaky_relu(z, cfg.slope)
        if tape is not None:
            tape.layers.append(rec)
        h = z
    return h, tape


def backward(params: NetworkParams, tape: TapeContext, grad_out):
    """Exact reverse pass of a train-mode forward. Returns (grads dict, grad_input)."""
    if tape is None:
        raise ValueError("backward needs the tape of a train-mode forward")
    if tape.params_id != id(params) or tape.shapes != tuple(v.shape for v in params.tensors.values()):
        raise ValueError("tape was produced with different parameters")
    cfg = params.config
    grads = {}
    g = np.asarray(grad_out, dtype=cfg.dtype)
    for i in reversed(range(cfg.n_layers)):
        rec = tape.layers[i]
        if "pre" in rec:
            g = leaky_relu_backward(rec["pre"], g, cfg.slope)
        if cfg.batch_norm:
            g, grads[f"{i}.gamma"], grads[f"{i}.beta"] = batchnorm_backward(
                g, rec["xhat"], rec["inv_std"], params[f"{i}.gamma"])
        g, grads[f"{i}.weight"], grads[f"{i}.bias"] = conv3d_backward(rec["x"], params[f"{i}.weight"], g)
    return grads, g


def sgd_step(params: NetworkParams, grads, lr, weight_decay=0.0):
    """In-place SGD; weight decay applies to conv weights only."""
    for key, g in grads.items():
        p = params.tensors[key]
        if key.endswith(".weight"):
            p -= (lr * (g + weight_decay * p)).astype(p.dtype)
        else:
            p -= (lr * g).astype(p.dtype)


def network_tensors(params: NetworkParams):
    return {f"net.{k}": v for k, v in params.tensors.items()}


def network_from_tensors(config: NetworkConfig, tensors):
    t = {k[4:]: v.copy() for k, v in tensors.items() if k.startswith("net.")}
    return NetworkParams(config, t)
