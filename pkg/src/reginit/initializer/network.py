"""Small convolutional pose regressor with hand-written backpropagation.

Architecture (fixed): four blocks of [3x3 convolution, stride 2, padding 1,
ReLU] with 16/32/64/128 channels, global average pooling, a 128 -> 6 fully
connected layer and tanh. Tensors are NCHW.
"""

from __future__ import annotations

import numpy as np

CONV_WIDTHS = (16, 32, 64, 128)
KERNEL = 3
STRIDE = 2
PADDING = 1
N_OUTPUTS = 6


def param_names() -> list[str]:
    """Layer order used for initialization, gradients and the weight file payload."""
    names = []
    for i in range(len(CONV_WIDTHS)):
        names += [f"conv{i + 1}.weight", f"conv{i + 1}.bias"]
    return names + ["fc.weight", "fc.bias"]


def param_shapes(in_channels: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c = in_channels
    for i, w in enumerate(CONV_WIDTHS):
        shapes[f"conv{i + 1}.weight"] = (w, c, KERNEL, KERNEL)
        shapes[f"conv{i + 1}.bias"] = (w,)
        c = w
    shapes["fc.weight"] = (N_OUTPUTS, c)
    shapes["fc.bias"] = (N_OUTPUTS,)
    return shapes


def init_params(in_channels: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights (He bound for ReLU layers), zero biases."""
    params = {}
    for name, shape in param_shapes(in_channels).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 6.0 if name.startswith("conv") else 3.0
        bound = np.sqrt(gain / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def _out_size(n: int) -> int:
    return (n + 2 * PADDING - KERNEL) // STRIDE + 1


def conv_forward(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = _out_size(h), _out_size(wd)
    xp = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    cols = np.empty((n, c, KERNEL, KERNEL, ho, wo), dtype=x.dtype)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            cols[:, :, di, dj] = xp[:, :, di : di + STRIDE * ho : STRIDE, dj : dj + STRIDE * wo : STRIDE]
    cols = cols.reshape(n, c * KERNEL * KERNEL, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols) + b[None, :, None]
    return out.reshape(n, o, ho, wo), (x.shape, cols)


def conv_backward(dout, w, cache):
    (n, c, h, wd), cols = cache
    o = w.shape[0]
    ho, wo = dout.shape[2], dout.shape[3]
    d = dout.reshape(n, o, ho * wo)
    dw = np.tensordot(d, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, d).reshape(n, c, KERNEL, KERNEL, ho, wo)
    dxp = np.zeros((n, c, h + 2 * PADDING, wd + 2 * PADDING), dtype=dout.dtype)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            dxp[:, :, di : di + STRIDE * ho : STRIDE, dj : dj + STRIDE * wo : STRIDE] += dcols[:, :, di, dj]
    return dxp[:, :, PADDING:-PADDING, PADDING:-PADDING], dw, db


def forward(params, x, keep_cache=False):
    """Network output in (-1, 1)^6 for a batch ``x`` of shape (N, C, H, W)."""
    caches = []
    h = x
    for i in range(len(CONV_WIDTHS)):
        z, cache = conv_forward(h, params[f"conv{i + 1}.weight"], params[f"conv{i + 1}.bias"])
        h = np.maximum(z, 0)
        caches.append((cache, z > 0))
    pooled = h.mean(axis=(2, 3))
    y = np.tanh(pooled @ params["fc.weight"].T + params["fc.bias"])
    if keep_cache:
        return y, (caches, h.shape, pooled, y)
    return y


def backward(params, dy, cache):
    """Gradients of a scalar loss w.r.t. all parameters, given dL/dy."""
    caches, feat_shape, pooled, y = cache
    grads = {}
    dz = dy * (1.0 - y * y)
    grads["fc.weight"] = dz.T @ pooled
    grads["fc.bias"] = dz.sum(axis=0)
    dpooled = dz @ params["fc.weight"]
    n, c, h, w = feat_shape
    dh = np.broadcast_to((dpooled / (h * w))[:, :, None, None], feat_shape)
    for i in reversed(range(len(CONV_WIDTHS))):
        conv_cache, mask = caches[i]
        dzc = dh * mask
        dh, dw, db = conv_backward(dzc, params[f"conv{i + 1}.weight"], conv_cache)
        grads[f"conv{i + 1}.weight"] = dw
        grads[f"conv{i + 1}.bias"] = db
    return grads


def mse_loss(y, target):
    diff = y - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def loss_and_grads(params, x, target):
    y, cache = forward(params, x, keep_cache=True)
    loss, dy = mse_loss(y, target)
    return loss, backward(params, dy.astype(y.dtype), cache)
