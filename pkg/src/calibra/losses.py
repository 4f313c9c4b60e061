"""Training objectives."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import UsageError
from .explain import compute_caam, compute_cam
from .tensor import DiffArray

PROB_FLOOR = 1e-12
BCE_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: tuple = (5.0, 5.0, 5.0)
    beta: float = 1.0
    gamma: float = 5.0
    eta: float = 5.0
    # None: per-batch clamp(N_fg / N_bg, 0.01, 1.0)
    w: float | None = None
    T: float = 0.5
    lam: float = 0.3
    mu: float = 0.4
    nu: float = 0.4

    def __post_init__(self):
        vals = list(self.alpha) + [self.beta, self.gamma, self.eta, self.T, self.lam, self.mu, self.nu]
        if self.w is not None:
            vals.append(self.w)
        if any(v < 0 for v in vals):
            raise UsageError("loss weights must be nonnegative")


@dataclass
class CamLossTerms:
    total: DiffArray
    ce: DiffArray
    cam: DiffArray
    per_scale: dict = field(default_factory=dict)


def _arr(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(np.asarray(x, dtype=np.float64))


def cross_entropy(pred, target) -> DiffArray:
    """Mean of -log p[target]; ``pred`` is ``[3]`` or ``[N, 3]`` on the simplex."""
    pred = _arr(pred)
    tgt = np.asarray(target)
    if pred.ndim == 1:
        picked = pred[int(tgt)]
    else:
        tgt = np.broadcast_to(tgt, (pred.shape[0],))
        picked = pred[np.arange(pred.shape[0]), tgt]
    return (T.log(T.clip(picked, PROB_FLOOR, 1.0)) * -1.0).mean()


def cam_distance(caam, cam) -> DiffArray:
    """Mean absolute difference of the min-max normalized maps (batch-averaged)."""
    caam, cam = _arr(caam), _arr(cam)
    if caam.shape != cam.shape:
        raise UsageError(f"cam_distance shape mismatch: {caam.shape} vs {cam.shape}")
    nd = min(2, caam.ndim)
    diff = T.minmax_normalize(caam, nd) - T.minmax_normalize(cam, nd)
    return T.abs_(diff).mean()


def multiscale_cam_loss(bundle, target_class, weights: LossWeights, ablate_cam: bool = False,
                        ablate_multiscale: bool = False) -> CamLossTerms:
    """Cross-entropy plus alpha-weighted CAAM-to-CAM distances over Conv3/4/5.

    ``bundle.probs`` must already be computed. With ``ablate_multiscale`` only
    the Conv5 distance is kept; with ``ablate_cam`` only cross-entropy remains.
    """
    ce = cross_entropy(bundle.probs, target_class)
    zero = DiffArray(np.zeros((), dtype=ce.dtype))
    per_scale = {}
    cam_term = zero
    if not ablate_cam:
        scales = (5,) if ablate_multiscale else (3, 4, 5)
        alphas = dict(zip((3, 4, 5), weights.alpha))
        for s in scales:
            f = bundle.features[s]
            cam = compute_cam(f, bundle.head_weights[s], np.atleast_1d(target_class) if f.ndim == 4
                              else target_class)
            dist = cam_distance(compute_caam(f), cam)
            per_scale[s] = dist
            cam_term = cam_term + dist * alphas[s]
    return CamLossTerms(total=cam_term + ce, ce=ce, cam=cam_term, per_scale=per_scale)


def imbalance_weight(target: np.ndarray) -> float:
    """clamp(N_fg / N_bg, 0.01, 1.0) for a (possibly soft) target batch."""
    t = np.asarray(target, dtype=np.float64)
    fg = t.sum()
    bg = t.size - fg
    if bg <= 0:
        return 1.0
    return float(np.clip(fg / bg, 0.01, 1.0))


def _weighted_bce(pred: DiffArray, target: np.ndarray, w: float) -> DiffArray:
    f = T.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(target, dtype=pred.dtype)
    pos = T.log(f) * y
    neg = T.log(1.0 - f) * ((1.0 - y) * w)
    return ((pos + neg) * -1.0).mean()


def weighted_bce_supervised(pred, target, w: float | None = None) -> DiffArray:
    """Pixel-mean weighted BCE against a binary mask."""
    pred = _arr(pred)
    if pred.shape != np.shape(target):
        raise UsageError(f"prediction {pred.shape} and mask {np.shape(target)} differ")
    if w is None:
        w = imbalance_weight(target)
    if w <= 0:
        raise UsageError("BCE weight must be positive")
    return _weighted_bce(pred, target, w)


def consistency_loss(pred_on_augmented, pseudo, w: float | None = None) -> DiffArray:
    """Weighted BCE of the augmented-view prediction against a soft pseudo-label.

    ``pseudo`` is a :class:`~calibra.fusion.PseudoLabelMap` or its foreground
    channel; it is treated as a constant.
    """
    pred = _arr(pred_on_augmented)
    target = pseudo.foreground if hasattr(pseudo, "foreground") else np.asarray(pseudo)
    if pred.shape != target.shape:
        raise UsageError(f"prediction {pred.shape} and pseudo-label {target.shape} differ")
    if w is None:
        w = imbalance_weight(target)
    return _weighted_bce(pred, target, w)


def total_objective(components: dict, weights: LossWeights, phase: str):
    """beta*CAM_loss + gamma*L_s (+ eta*L_u once ``phase == "full"``)."""
    if phase not in ("warmup", "full"):
        raise UsageError(f"phase must be 'warmup' or 'full', got {phase!r}")
    total = components["cam_loss"] * weights.beta + components["l_s"] * weights.gamma
    if phase == "full":
        total = total + components["l_u"] * weights.eta
    return total
