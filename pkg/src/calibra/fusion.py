"""Calibrated pseudo-labels: Norm, Sharpen and the sharpen combination module."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, UsageError

logger = logging.getLogger(__name__)


@dataclass
class PseudoLabelMap:
    """Per-pixel (foreground, background) distribution.

    ``probs`` has shape ``[..., H, W, 2]``. ``weights`` are the effective
    source weights after optional renormalization, ``raw_weights`` the ones
    supplied.
    """

    probs: np.ndarray
    raw_weights: tuple
    weights: tuple
    temperature: float
    sharpened: bool = True

    @property
    def foreground(self) -> np.ndarray:
        return self.probs[..., 0]


def norm3(c, s, p, axes=None) -> float | np.ndarray:
    """Joint Euclidean norm of three maps, summed over ``axes`` (all by default)."""
    c, s, p = (np.asarray(m, dtype=np.float64) for m in (c, s, p))
    if not c.shape == s.shape == p.shape:
        raise UsageError(f"norm3 shape mismatch: {c.shape}, {s.shape}, {p.shape}")
    total = np.sqrt((c * c + s * s + p * p).sum(axis=axes))
    if np.any(total == 0):
        raise DegenerateInputError("norm3: all three maps are identically zero")
    return float(total) if np.ndim(total) == 0 else total


def sharpen(dist, T: float, axis: int = -1) -> np.ndarray:
    """Temperature sharpening ``a_i^(1/T) / sum_j a_j^(1/T)``, computed in log space."""
    if T <= 0:
        raise UsageError(f"temperature must be positive, got {T}")
    a = np.asarray(dist, dtype=np.float64)
    if T == 1.0:
        return a / a.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        z = np.log(a) / T
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _two_class_softmax(m: np.ndarray, scale) -> np.ndarray:
    logits = np.stack([m, 1.0 - m], axis=-1) / scale
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def effective_weights(lam: float, mu: float, nu: float, renormalize: bool = True) -> tuple:
    w = np.array([lam, mu, nu], dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise UsageError(f"fusion weights must be nonnegative with positive sum, got {tuple(w)}")
    if renormalize:
        w = w / w.sum()
    return tuple(float(v) for v in w)


def combine(c, s, p, lam: float = 0.3, mu: float = 0.4, nu: float = 0.4, T: float = 0.5,
            renormalize_weights: bool = True, sharpen_enabled: bool = True,
            norm_scope: str = "image") -> PseudoLabelMap:
    """Fuse CAAM (``c``), saliency (``s``) and decoder (``p``) maps into a pseudo-label.

    Maps are ``[H, W]`` or ``[N, H, W]`` with values in [0, 1]. Each map m is
    expanded per pixel to the pair (m, 1 - m), divided by the joint norm of
    the three maps, soft-maxed over the pair, combined with the source
    weights and sharpened with temperature ``T``.

    ``norm_scope="image"`` takes the norm over all pixels of an image;
    ``"pixel"`` takes it per pixel over the three expanded pairs.
    """
    c, s, p = (np.asarray(m, dtype=np.float64) for m in (c, s, p))
    if not c.shape == s.shape == p.shape:
        raise UsageError(f"combine shape mismatch: {c.shape}, {s.shape}, {p.shape}")
    if T <= 0:
        raise UsageError(f"temperature must be positive, got {T}")
    raw = (float(lam), float(mu), float(nu))
    weights = effective_weights(lam, mu, nu, renormalize_weights)
    if norm_scope == "image":
        axes = (-2, -1)
        sq = (c * c + s * s + p * p).sum(axis=axes, keepdims=True)
    elif norm_scope == "pixel":
        sq = c * c + (1 - c) ** 2 + s * s + (1 - s) ** 2 + p * p + (1 - p) ** 2
    else:
        raise UsageError(f"norm_scope must be 'image' or 'pixel', got {norm_scope!r}")
    norm = np.sqrt(sq)
    dead = norm == 0
    if np.any(dead):
        logger.warning("combine: all-zero map triple, substituting a uniform pseudo-label")
    scale = np.where(dead, 1.0, norm)[..., None]
    mix = sum(wt * _two_class_softmax(m, scale) for wt, m in zip(weights, (c, s, p)))
    mix = mix / mix.sum(axis=-1, keepdims=True)
    out = sharpen(mix, T) if sharpen_enabled else mix
    if np.any(dead):
        out = np.where(np.broadcast_to(dead[..., None], out.shape), 0.5, out)
    return PseudoLabelMap(probs=out, raw_weights=raw, weights=weights, temperature=T,
                          sharpened=sharpen_enabled)


def threshold_pseudo_label(pred, threshold: float = 0.5) -> np.ndarray:
    """Hard confidence-threshold pseudo-label from a decoder map (reference only)."""
    return (np.asarray(pred) >= threshold).astype(np.float64)
