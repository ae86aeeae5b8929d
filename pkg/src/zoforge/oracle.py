"""Analytic gradients and finite-difference reference oracles.

These serve tests and first-order baselines only: the training estimators
never read them. `backprop_grad` covers the layer set Dense, Conv2d, ReLU,
AvgPool, MaxPool, Flatten under the softmax cross-entropy loss; batch norm
is deliberately excluded from the analytic path and is covered by
`central_fd_grad` instead.
"""

from __future__ import annotations

import numpy as np

from .engine import (
    AvgPool,
    Batch,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ModelSpec,
    ParamVector,
    ReLU,
    _unpack,
    conv2d_forward,
    param_count,
)
from .errors import ShapeError, UnsupportedLayerError

ANALYTIC_LAYERS = (Dense, Conv2d, ReLU, AvgPool, MaxPool, Flatten)


def _conv2d_backward(layer, x, dout, weight):
    """Gradients of a direct convolution: returns (dx, dweight, dbias)."""
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    n, _, h, w = x.shape
    if p:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros_like(xp)
    dweight = np.zeros_like(weight)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, :, ky : ky + s * ho : s, kx : kx + s * wo : s]
            dweight[:, :, ky, kx] = np.einsum("noyx,niyx->oi", dout, patch, optimize=True)
            dxp[:, :, ky : ky + s * ho : s, kx : kx + s * wo : s] += np.einsum(
                "noyx,oi->niyx", dout, weight[:, :, ky, kx], optimize=True
            )
    dbias = dout.sum(axis=(0, 2, 3))
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return dx, dweight, dbias


def backprop_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """Exact analytic gradient of the mean batch loss, flat and aligned
    with the parameter segment table."""
    d = param_count(spec)
    if params.dim != d:
        raise ShapeError(f"parameter vector has {params.dim} scalars, model needs {d}")
    for layer in spec.layers:
        if isinstance(layer, BatchNorm):
            raise UnsupportedLayerError(
                "batch norm has no analytic path; use central_fd_grad"
            )
        if not isinstance(layer, ANALYTIC_LAYERS):
            raise UnsupportedLayerError(f"no analytic path for {layer!r}")

    x = np.asarray(batch.inputs, dtype=params.data.dtype)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} != model input {spec.input_shape}")
    n = x.shape[0]

    # forward, keeping per-layer inputs
    inputs_per_layer = []
    for idx, layer in enumerate(spec.layers):
        inputs_per_layer.append(x)
        seg = params.segment_for_layer(idx)
        if isinstance(layer, Dense):
            arrays = _unpack(layer, params.segment_view(seg))
            x = x @ arrays[0].T
            if layer.bias:
                x = x + arrays[1]
        elif isinstance(layer, Conv2d):
            arrays = _unpack(layer, params.segment_view(seg))
            bias = arrays[1] if layer.bias else None
            x = conv2d_forward(x, arrays[0], bias, layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(layer, MaxPool):
            sz = layer.size
            nb, c, h, w = x.shape
            x = x.reshape(nb, c, h // sz, sz, w // sz, sz).max(axis=(3, 5))
        elif isinstance(layer, AvgPool):
            sz = layer.size
            nb, c, h, w = x.shape
            x = x.reshape(nb, c, h // sz, sz, w // sz, sz).mean(axis=(3, 5))
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)

    logits = x
    labels = batch.labels
    if np.max(labels) >= logits.shape[1]:
        raise ShapeError("label index exceeds class count")

    # dL/dlogits of mean softmax cross-entropy
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    dout = probs
    dout[np.arange(n), labels] -= 1.0
    dout /= n

    grad = np.zeros(d, dtype=np.float64)
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        x_in = inputs_per_layer[idx]
        seg = params.segment_for_layer(idx)
        if isinstance(layer, Dense):
            arrays = _unpack(layer, params.segment_view(seg))
            dw = dout.T @ x_in
            gseg = grad[seg.offset : seg.offset + seg.length]
            gseg[: dw.size] = dw.ravel()
            if layer.bias:
                gseg[dw.size :] = dout.sum(axis=0)
            dout = dout @ arrays[0]
        elif isinstance(layer, Conv2d):
            arrays = _unpack(layer, params.segment_view(seg))
            dout, dw, db = _conv2d_backward(layer, x_in, dout, arrays[0])
            gseg = grad[seg.offset : seg.offset + seg.length]
            gseg[: dw.size] = dw.ravel()
            if layer.bias:
                gseg[dw.size :] = db
        elif isinstance(layer, ReLU):
            dout = np.where(x_in > 0, dout, 0)
        elif isinstance(layer, MaxPool):
            sz = layer.size
            nb, c, h, w = x_in.shape
            v = x_in.reshape(nb, c, h // sz, sz, w // sz, sz).transpose(0, 1, 2, 4, 3, 5)
            flat = v.reshape(nb, c, h // sz, w // sz, sz * sz)
            winners = flat.argmax(axis=-1)  # first max wins, matching forward
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, winners[..., None], dout[..., None], axis=-1)
            dout = (
                dflat.reshape(nb, c, h // sz, w // sz, sz, sz)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(nb, c, h, w)
            )
        elif isinstance(layer, AvgPool):
            sz = layer.size
            nb, c, h, w = x_in.shape
            dout = np.repeat(np.repeat(dout, sz, axis=2), sz, axis=3) / (sz * sz)
        elif isinstance(layer, Flatten):
            dout = dout.reshape(x_in.shape)
    return grad


def central_fd_grad(f, theta: np.ndarray, mu: float) -> np.ndarray:
    """Second-order-accurate brute-force gradient: one central difference
    per coordinate, 2*d objective evaluations."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    theta = np.asarray(theta)
    grad = np.zeros(theta.shape[0], dtype=np.float64)
    scratch = theta.copy()
    for i in range(theta.shape[0]):
        orig = scratch[i]
        scratch[i] = orig + mu
        fp = f(scratch)
        scratch[i] = orig - mu
        fm = f(scratch)
        scratch[i] = orig
        grad[i] = (fp - fm) / (2.0 * mu)
    return grad


def hessian_grad_product(grad_fn, theta: np.ndarray, mu: float, g: np.ndarray | None = None):
    """Directional difference of gradients: (grad(theta + mu*g) - grad(theta)) / mu.

    The step direction g defaults to the gradient at theta; exact on
    quadratic objectives for any mu."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    theta = np.asarray(theta)
    g0 = np.asarray(grad_fn(theta), dtype=np.float64)
    direction = g0 if g is None else np.asarray(g)
    g1 = np.asarray(grad_fn(theta + mu * direction), dtype=np.float64)
    return (g1 - g0) / mu
