"""Activation maps and integrated-gradients saliency."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import UsageError
from .tensor import DiffArray


@dataclass
class ScaleMap:
    scale: int
    values: np.ndarray


@dataclass
class SaliencyMap:
    values: np.ndarray
    class_index: int
    steps: int


def _arr(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(np.asarray(x, dtype=np.float64))


def compute_cam(features, head_weights, class_index) -> DiffArray:
    """Class activation map: feature maps weighted by one class's head weights.

    ``features`` is ``[C, h, w]`` or ``[N, C, h, w]``; ``head_weights`` is
    ``[n_classes, C]`` (a 1x1 conv kernel is accepted too). ``class_index``
    may be an int or, for batches, one index per sample.
    """
    f = _arr(features)
    w = _arr(head_weights)
    if w.ndim == 4:
        w = w.reshape(w.shape[0], w.shape[1])
    idx = np.asarray(class_index)
    if idx.ndim == 0:
        wi = w[int(idx)].reshape(-1, 1, 1)
    else:
        wi = w[idx].reshape(len(idx), -1, 1, 1)
    return (f * wi).sum(axis=-3)


def compute_caam(features) -> DiffArray:
    """Class-agnostic activation map: plain sum over feature channels."""
    return _arr(features).sum(axis=-3)


def minmax_normalize(x) -> DiffArray:
    """Rescale each trailing 2-D map to [0, 1]; constant maps become zeros."""
    x = _arr(x)
    return T.minmax_normalize(x, naxes=min(2, x.ndim))


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop gradients flowing into ``params``."""
    saved = [(p, p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag, grad in saved:
            p.requires_grad = flag
            p.grad = grad


def integrated_gradients_fn(score: Callable[[DiffArray], DiffArray], x: np.ndarray,
                            baseline: np.ndarray | None = None, steps: int = 256,
                            chunk: int = 64) -> np.ndarray:
    """Right-Riemann integrated gradients of a batched scalar function.

    ``score`` maps a stack of inputs ``[M, *x.shape]`` to ``[M]`` scores, each
    depending only on its own input. Returns an array shaped like ``x``.
    """
    if steps < 1:
        raise UsageError(f"integrated gradients needs steps >= 1, got {steps}")
    x = np.asarray(x)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    if base.shape != x.shape:
        raise UsageError(f"baseline shape {base.shape} differs from input shape {x.shape}")
    delta = x - base
    total = np.zeros_like(x)
    alphas = np.arange(1, steps + 1, dtype=x.dtype) / steps
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk].reshape((-1,) + (1,) * x.ndim)
        pts = DiffArray(base[None] + a * delta[None], requires_grad=True)
        T.backward(score(pts).sum())
        total += pts.grad.sum(axis=0)
    return delta * total / steps


def integrated_gradients(net, image, baseline=None, class_index: int = 0, steps: int = 256,
                         multiscale: bool = True, chunk: int = 32) -> SaliencyMap:
    """Saliency of ``image`` ([H, W]) for one class via integrated gradients.

    The explained score is the summed pre-softmax multiscale class score.
    The baseline defaults to an all-zero image.
    """
    img = np.asarray(image, dtype=net.dtype)
    if img.ndim == 3:
        img = img[0]

    def score(pts: DiffArray) -> DiffArray:
        bundle = net.encoder_forward(pts.reshape(pts.shape[0], 1, *img.shape))
        return net.class_logits(bundle, multiscale)[:, class_index]

    with frozen(net.parameters()):
        values = integrated_gradients_fn(score, img, baseline, steps, chunk)
    return SaliencyMap(values=values, class_index=int(class_index), steps=steps)


def integrated_gradients_batch(net, images: np.ndarray, class_indices, steps: int,
                               multiscale: bool = True, chunk: int = 64) -> np.ndarray:
    """Integrated gradients for a batch ``[N, H, W]`` with per-sample classes.

    Samples never interact inside the network, so all path points of all
    images can share one backward pass.
    """
    if steps < 1:
        raise UsageError(f"integrated gradients needs steps >= 1, got {steps}")
    images = np.asarray(images, dtype=net.dtype)
    n, h, w = images.shape
    cls = np.repeat(np.asarray(class_indices), steps)
    alphas = np.tile(np.arange(1, steps + 1, dtype=images.dtype) / steps, n)
    path = (alphas[:, None, None] * np.repeat(images, steps, axis=0))
    grads = np.empty_like(path)
    with frozen(net.parameters()):
        for start in range(0, len(path), chunk):
            sl = slice(start, start + chunk)
            pts = DiffArray(path[sl].reshape(-1, 1, h, w), requires_grad=True)
            logits = net.class_logits(net.encoder_forward(pts), multiscale)
            T.backward(logits[np.arange(len(cls[sl])), cls[sl]].sum())
            grads[sl] = pts.grad.reshape(-1, h, w)
    return images * grads.reshape(n, steps, h, w).mean(axis=1)


def refined_caam(bundle, out_h: int, out_w: int, scales=(3, 4, 5)) -> np.ndarray:
    """Fuse per-scale class-agnostic maps into one ``[N, out_h, out_w]`` map.

    Each scale's map is upsampled, min-max normalized, and the results are
    averaged.
    """
    maps = []
    with T.no_grad():
        for s in scales:
            caam = compute_caam(bundle.features[s].detach())
            up = T.upsample_bilinear(caam, out_h, out_w)
            maps.append(minmax_normalize(up).values)
    return np.mean(maps, axis=0)


def saliency_to_map(sal) -> np.ndarray:
    """Keep positive evidence only, then min-max normalize per map."""
    values = sal.values if isinstance(sal, SaliencyMap) else np.asarray(sal)
    clamped = np.maximum(values, 0.0)
    return minmax_normalize(DiffArray(clamped)).values
