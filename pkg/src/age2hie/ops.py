"""Differentiable operators for 3D convolutional networks.

All operators take NCDHW layouts, run on numpy buffers, and register their
backward rules on the active ComputationRecord.  Convolution and pooling use
stride-trick patch views with tensordot contractions; patch extraction is
chunked over the batch axis to bound peak memory.
"""

from __future__ import annotations

import numpy as np

from age2hie.tensor import ShapeError, Tensor, apply_op

# Patch tensors larger than this many elements are built slab by slab.
_PATCH_ELEM_BUDGET = 1 << 26


def _check_ndim(name: str, t: Tensor, ndim: int) -> None:
    if t.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-d input, got shape {t.shape}")


def _out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"kernel {kernel} with stride {stride}, padding {padding} "
            f"does not fit extent {size}"
        )
    return out


def _patch_view(xp: np.ndarray, kernel: int, stride: int, out_dims: tuple) -> np.ndarray:
    """Strided window view (N, C, Do, Ho, Wo, k, k, k) over a padded volume."""
    n, c = xp.shape[:2]
    do, ho, wo = out_dims
    sn, sc, sd, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, do, ho, wo, kernel, kernel, kernel),
        strides=(sn, sc, sd * stride, sh * stride, sw * stride, sd, sh, sw),
        writeable=False,
    )


def _pad_volume(xd: np.ndarray, padding: int, fill: float = 0.0) -> np.ndarray:
    if padding == 0:
        return xd
    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    return np.pad(xd, pad, constant_values=fill)


def _batch_slabs(n: int, per_sample_elems: int):
    chunk = max(1, _PATCH_ELEM_BUDGET // max(1, per_sample_elems))
    for start in range(0, n, chunk):
        yield start, min(n, start + chunk)


def _conv3d_forward(xd: np.ndarray, wd: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, cin, d, h, w = xd.shape
    cout, _, k, _, _ = wd.shape
    out_dims = tuple(_out_extent(s, k, stride, padding) for s in (d, h, w))
    do, ho, wo = out_dims
    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride, ::stride]
        out = np.tensordot(xs, wd[:, :, 0, 0, 0], axes=([1], [1]))
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))
    xp = _pad_volume(xd, padding)
    out = np.empty((n, cout, do, ho, wo), dtype=xd.dtype)
    per_sample = cin * do * ho * wo * k ** 3
    for a, b in _batch_slabs(n, per_sample):
        patches = _patch_view(xp[a:b], k, stride, out_dims)
        res = np.tensordot(patches, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out[a:b] = np.moveaxis(res, -1, 1)
    return out


def _conv3d_backward(g: np.ndarray, xd: np.ndarray, wd: np.ndarray,
                     stride: int, padding: int):
    n, cin, d, h, w = xd.shape
    cout, _, k, _, _ = wd.shape
    do, ho, wo = g.shape[2:]

    xp = _pad_volume(xd, padding)
    gw = np.zeros_like(wd)
    per_sample = cin * do * ho * wo * k ** 3
    for a, b in _batch_slabs(n, per_sample):
        patches = _patch_view(xp[a:b], k, stride, (do, ho, wo))
        # (N,C,Do,Ho,Wo,k,k,k) x (N,Cout,Do,Ho,Wo) over N and spatial axes
        acc = np.tensordot(patches, g[a:b], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gw += np.moveaxis(acc, -1, 0)

    gp = np.zeros(xp.shape, dtype=xd.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                contrib = np.tensordot(g, wd[:, :, a, b, c], axes=([1], [0]))
                contrib = np.moveaxis(contrib, -1, 1)
                gp[:, :,
                   a:a + stride * do:stride,
                   b:b + stride * ho:stride,
                   c:c + stride * wo:stride] += contrib
    if padding:
        gx = gp[:, :, padding:padding + d, padding:padding + h, padding:padding + w]
        gx = np.ascontiguousarray(gx)
    else:
        gx = gp
    return gx, gw


def conv3d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cubic-kernel 3D cross-correlation, zero padded, no bias.

    x: (N, Cin, D, H, W); weight: (Cout, Cin, k, k, k) -> (N, Cout, Do, Ho, Wo)
    with each output extent (size + 2*padding - k) // stride + 1.
    """
    _check_ndim("conv3d", x, 5)
    _check_ndim("conv3d weight", weight, 5)
    cout, cin, kd, kh, kw = weight.shape
    if not (kd == kh == kw):
        raise ShapeError(f"conv3d: kernel must be cubic, got {(kd, kh, kw)}")
    if cin != x.shape[1]:
        raise ShapeError(
            f"conv3d: weight expects {cin} input channels, volume has {x.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: bad stride {stride} or padding {padding}")

    out = _conv3d_forward(x.data, weight.data, stride, padding)

    def bwd(g):
        gx, gw = _conv3d_backward(g, x.data, weight.data, stride, padding)
        return gx, gw

    return apply_op("conv3d", (x, weight), out, bwd)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over the batch and spatial axes.

    Training mode normalizes by the batch moments (population variance) and
    folds them into the running buffers in place:
    running <- (1 - momentum) * running + momentum * batch.
    Eval mode normalizes by the running buffers.
    """
    _check_ndim("batchnorm3d", x, 5)
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm3d: {name} shape {t.shape}, expected ({c},)")
    axes = (0, 2, 3, 4)
    expand = (slice(None), None, None, None)  # (C,) -> (C,1,1,1) under channel axis

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[expand]) * invstd[expand]
    out = gamma.data[expand] * xhat + beta.data[expand]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[expand]
        if training:
            m = x.data.size // c
            gx = (invstd[expand] / m) * (
                m * dxhat
                - dxhat.sum(axis=axes)[expand]
                - xhat * (dxhat * xhat).sum(axis=axes)[expand]
            )
        else:
            gx = dxhat * invstd[expand]
        return gx.astype(x.dtype, copy=False), dgamma, dbeta

    return apply_op("batchnorm3d", (x, gamma, beta), out, bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0)."""
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return apply_op("relu", (x,), np.where(mask, x.data, 0), bwd)


def maxpool3d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Cubic max pooling; padded cells hold -inf and never win ties.

    Ties inside a window resolve to the lowest flat index (argmax order).
    """
    _check_ndim("maxpool3d", x, 5)
    n, c, d, h, w = x.shape
    out_dims = tuple(_out_extent(s, kernel, stride, padding) for s in (d, h, w))
    do, ho, wo = out_dims

    xp = _pad_volume(x.data, padding, fill=-np.inf)
    patches = _patch_view(xp, kernel, stride, out_dims)
    flat = patches.reshape(n, c, do, ho, wo, kernel ** 3)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gp = np.zeros(xp.shape, dtype=x.dtype)
        a, rem = np.divmod(idx, kernel * kernel)
        b, cc = np.divmod(rem, kernel)
        grid_d = np.arange(do)[:, None, None] * stride
        grid_h = np.arange(ho)[None, :, None] * stride
        grid_w = np.arange(wo)[None, None, :] * stride
        di = grid_d + a
        hi = grid_h + b
        wi = grid_w + cc
        ni = np.arange(n)[:, None, None, None, None]
        ci = np.arange(c)[None, :, None, None, None]
        np.add.at(gp, (ni, ci, di, hi, wi), g)
        if padding:
            return (np.ascontiguousarray(
                gp[:, :, padding:padding + d, padding:padding + h, padding:padding + w]),)
        return (gp,)

    return apply_op("maxpool3d", (x,), out, bwd)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the three spatial axes: (N, C, D, H, W) -> (N, C)."""
    _check_ndim("global_avgpool", x, 5)
    n, c, d, h, w = x.shape
    vol = d * h * w

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None, None] / vol, x.shape).astype(
            x.dtype, copy=False),)

    return apply_op("global_avgpool", (x,), x.data.mean(axis=(2, 3, 4)), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, F) @ (O, F).T + (O,) -> (N, O)."""
    _check_ndim("linear", x, 2)
    o, f = weight.shape
    if x.shape[1] != f:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight features {f}")
    if bias.shape != (o,):
        raise ShapeError(f"linear: bias shape {bias.shape}, expected ({o},)")

    def bwd(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return apply_op("linear", (x, weight, bias), x.data @ weight.data.T + bias.data, bwd)


def mae_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error; subgradient at zero residual is zero.

    pred: (N,) or (N, 1); target: (N,) plain array.
    """
    squeeze = pred.ndim == 2 and pred.shape[1] == 1
    if not squeeze and pred.ndim != 1:
        raise ShapeError(f"mae_loss: pred shape {pred.shape}, expected (N,) or (N, 1)")
    p = pred.data.reshape(-1)
    t = np.asarray(target, dtype=pred.dtype).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"mae_loss: {p.shape[0]} predictions vs {t.shape[0]} targets")
    diff = p - t
    n = p.shape[0]

    def bwd(g):
        gp = (np.sign(diff) * (g / n)).astype(pred.dtype, copy=False)
        return (gp.reshape(pred.shape),)

    return apply_op("mae_loss", (pred,), np.abs(diff).mean(), bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of softmax(logits) against integer class labels.

    Stabilized by per-row max subtraction; gradient is (softmax - onehot) / N.
    """
    _check_ndim("softmax_cross_entropy", logits, 2)
    y = np.asarray(labels)
    n, c = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {y.shape}, expected ({n},)")
    if y.min() < 0 or y.max() >= c:
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), y]).mean()

    def bwd(g):
        probs = np.exp(z - lse[:, None])
        probs[np.arange(n), y] -= 1.0
        return ((probs * (g / n)).astype(logits.dtype, copy=False),)

    return apply_op("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), bwd)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row softmax on a plain array (inference helper, no recording)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
