"""Phased semi-supervised training with Adam and step learning-rate decay."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import explain, fusion, losses, serialization
from . import tensor as T
from .errors import ConfigurationError, NumericalError, UsageError
from .metrics import EvalReport, evaluate
from .model import NetConfig, Network
from .synthdata import SplitManifest, augment_strong, box_blur3

logger = logging.getLogger(__name__)

ABLATIONS = ("cam-loss", "saliency", "sharpen", "multiscale")
LESION_CLASS = 2
LOSS_COLUMNS = ("epoch", "l_ce", "cam", "l_s", "l_u", "total")


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    lr_decay: float = 0.1
    lr_step: int = 20
    cam_start: int = 20
    consistency_start: int = 40
    batch_size: int = 16
    unlabelled_batch_size: int = 16
    ig_steps: int = 8
    alpha3: float = 5.0
    alpha4: float = 5.0
    alpha5: float = 5.0
    beta: float = 1.0
    gamma: float = 5.0
    eta: float = 5.0
    bce_w: float = 0.0  # 0 selects the per-batch foreground/background ratio
    temperature: float = 0.5
    lam: float = 0.3
    mu: float = 0.4
    nu: float = 0.4
    renormalize_weights: bool = True
    norm_scope: str = "image"
    saliency_blur: int = 0  # passes of a 3x3 box blur over IG before normalization
    gate_explanations: bool = False  # zero CAAM/saliency unless the explained class is COVID
    ablate_cam_loss: bool = False
    ablate_saliency: bool = False
    ablate_sharpen: bool = False
    ablate_multiscale: bool = False
    weak_labels: bool = False
    supervised_only: bool = False
    threshold: float = 0.5
    widths: str = "32,64,128,256,256"
    dtype: str = "float32"
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile: tiny widths, 30 epochs, gates at epochs 4 and 15."""
        base = dict(epochs=30, cam_start=4, consistency_start=15, lr=1e-3, lr_step=20,
                    batch_size=8, unlabelled_batch_size=4, ig_steps=4, widths="8,16,32,64,64",
                    bce_w=1.0, norm_scope="pixel", saliency_blur=2, gate_explanations=True)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.cam_start < 0 or self.consistency_start < 0:
            raise ConfigurationError("start epochs must be >= 0")
        if self.batch_size < 1 or self.unlabelled_batch_size < 1 or self.ig_steps < 1:
            raise ConfigurationError("batch sizes and ig_steps must be >= 1")
        if self.temperature <= 0 or self.lr <= 0:
            raise ConfigurationError("temperature and lr must be positive")
        if self.saliency_blur < 0:
            raise ConfigurationError("saliency_blur must be >= 0")
        if self.norm_scope not in ("image", "pixel"):
            raise ConfigurationError(f"norm_scope must be image or pixel, got {self.norm_scope!r}")
        self.width_tuple()
        return self

    def width_tuple(self) -> tuple:
        try:
            w = tuple(int(v) for v in str(self.widths).split(","))
        except ValueError:
            raise ConfigurationError(f"bad widths {self.widths!r}") from None
        if len(w) != 5 or min(w) < 1:
            raise ConfigurationError(f"widths needs five positive ints, got {self.widths!r}")
        return w

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(alpha=(self.alpha3, self.alpha4, self.alpha5), beta=self.beta,
                                  gamma=self.gamma, eta=self.eta, w=self.bce_w or None,
                                  T=self.temperature, lam=self.lam, mu=self.mu, nu=self.nu)

    def net_config(self) -> NetConfig:
        return NetConfig(widths=self.width_tuple(), dtype=self.dtype, seed=self.seed)

    def apply_ablation(self, name: str) -> None:
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
        setattr(self, "ablate_" + name.replace("-", "_"), True)

    # key=value text -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def update_from_text(self, text: str, source: str = "<config>") -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
            setattr(self, key, _parse_value(getattr(self, key), val, f"{source}:{lineno}"))
        return self

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        return cls().update_from_text(text, source)


def _parse_value(current, val: str, where: str):
    try:
        if isinstance(current, bool):
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(val)
        if isinstance(current, float):
            return float(val)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {val!r} as {type(current).__name__}") from None
    return val


def lr_at(epoch: int, base: float = 1e-4, decay: float = 0.1, step: int = 20) -> float:
    """Step schedule: ``base * decay ** floor(epoch / step)``."""
    if epoch < 0:
        raise UsageError("epoch must be >= 0")
    return base * decay ** (epoch // step)


# ----------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.5,
              beta2: float = 0.9, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``params`` (name -> ndarray)."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise UsageError(f"{name}: gradient shape {g.shape} differs from parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)


# -------------------------------------------------------------- run state


@dataclass
class RunState:
    config: TrainConfig
    net: Network
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    history: list = field(default_factory=list)

    def rng_for(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, epoch])

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.net.state_arrays().items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        meta = {"epoch": self.epoch, "adam_t": self.adam.t, "config": self.config.to_text(),
                "net": self.net.config.to_meta(), "history": self.history}
        serialization.save(path, "run", arrays, meta)

    @classmethod
    def load(cls, path) -> "RunState":
        arrays, meta = serialization.load(path, kind="run")
        cfg = TrainConfig.from_text(meta["config"], source=str(path))
        net = Network(NetConfig.from_meta(meta["net"]))
        net.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        adam = AdamState(m={k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                         v={k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
                         t=int(meta["adam_t"]))
        return cls(config=cfg, net=net, adam=adam, epoch=int(meta["epoch"]), history=meta["history"])


# ------------------------------------------------------------------ data


@dataclass
class _Arrays:
    ids: list
    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray


def _stack(ids, samples, dtype) -> _Arrays:
    if not ids:
        return _Arrays([], np.zeros((0, 1, 1, 1), dtype), np.zeros(0, int), np.zeros((0, 1, 1)))
    return _Arrays(list(ids),
                   np.stack([samples[i].image for i in ids]).astype(dtype)[:, None],
                   np.array([samples[i].label for i in ids]),
                   np.stack([samples[i].mask for i in ids]).astype(dtype))


def check_dataset(manifest: SplitManifest, samples: dict) -> None:
    parts = manifest.partitions()
    seen: set = set()
    for name in ("labelled_train", "unlabelled_train", "test_classification"):
        overlap = seen & set(parts[name])
        if overlap:
            raise ConfigurationError(f"partition {name} overlaps another: {sorted(overlap)[:3]}")
        seen |= set(parts[name])
    missing = [i for i in seen if i not in samples]
    if missing:
        raise ConfigurationError(f"{len(missing)} manifest ids have no sample, e.g. {missing[0]}")
    if not manifest.labelled_train:
        raise ConfigurationError("labelled training partition is empty")
    if not set(manifest.test_segmentation) <= set(manifest.test_classification):
        raise ConfigurationError("segmentation test ids must be part of the classification test set")


# ------------------------------------------------------------- training


def fusion_inputs(net: Network, images: np.ndarray, cfg: TrainConfig, classes=None, bundle=None,
                  steps: int | None = None) -> dict:
    """CAAM_l, saliency and decoder maps ``[N, H, W]`` exactly as fusion consumes them.

    ``classes`` defaults to the predicted class; ``steps`` to ``cfg.ig_steps``.
    """
    n, _, h, w = images.shape
    with T.no_grad():
        if bundle is None:
            bundle = net.forward(images, multiscale=not cfg.ablate_multiscale)
        p = bundle.decoder.values.astype(np.float64)
        if classes is None:
            classes = bundle.probs.values.argmax(axis=1)
        scales = (5,) if cfg.ablate_multiscale else (3, 4, 5)
        c = explain.refined_caam(bundle, h, w, scales)
    if cfg.ablate_saliency:
        s = np.zeros_like(p)
    else:
        ig = explain.integrated_gradients_batch(net, images[:, 0], classes, steps or cfg.ig_steps,
                                                multiscale=not cfg.ablate_multiscale)
        ig = np.maximum(ig.astype(np.float64), 0.0)
        for _ in range(cfg.saliency_blur):
            ig = np.stack([box_blur3(m) for m in ig])
        s = explain.saliency_to_map(ig)
    if cfg.gate_explanations:
        keep = (np.asarray(classes) == LESION_CLASS)[:, None, None]
        c, s = c * keep, s * keep
    return {"caaml": c, "saliency": s, "decoder": p, "classes": np.asarray(classes)}


def fuse(c, s, p, cfg: TrainConfig) -> fusion.PseudoLabelMap:
    mu = 0.0 if cfg.ablate_saliency else cfg.mu
    return fusion.combine(c, s, p, cfg.lam, mu, cfg.nu, cfg.temperature,
                          renormalize_weights=cfg.renormalize_weights,
                          sharpen_enabled=not cfg.ablate_sharpen, norm_scope=cfg.norm_scope)


def pseudo_labels(net: Network, images: np.ndarray, cfg: TrainConfig, classes=None,
                  bundle=None) -> tuple[fusion.PseudoLabelMap, dict]:
    """Calibrated pseudo-labels for clean images ``[N, 1, H, W]``.

    Returns the label map and the source maps. Nothing here is recorded for
    differentiation.
    """
    src = fusion_inputs(net, images, cfg, classes, bundle)
    return fuse(src["caaml"], src["saliency"], src["decoder"], cfg), src


def _scalar(x) -> float:
    return float(x.values) if isinstance(x, T.DiffArray) else float(x)


def train_epoch(state: RunState, manifest: SplitManifest, lab: _Arrays, unl: _Arrays) -> dict:
    cfg = state.config
    net = state.net
    epoch = state.epoch
    rng = state.rng_for(epoch)
    weights = cfg.loss_weights()
    multiscale = not cfg.ablate_multiscale
    cam_on = epoch >= cfg.cam_start and not cfg.ablate_cam_loss
    consistency_on = (epoch >= cfg.consistency_start and not cfg.supervised_only and len(unl.ids) > 0)
    weak_on = cfg.weak_labels and len(unl.ids) > 0
    use_unl = consistency_on or weak_on
    lr = lr_at(epoch, cfg.lr, cfg.lr_decay, cfg.lr_step)
    order = rng.permutation(len(lab.ids))
    n_steps = math.ceil(len(order) / cfg.batch_size)
    unl_order = rng.permutation(len(unl.ids)) if use_unl else np.zeros(0, int)
    params = net.params
    sums = dict.fromkeys(LOSS_COLUMNS[1:], 0.0)
    for step in range(n_steps):
        idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        bundle = net.forward(lab.images[idx], multiscale=multiscale)
        cam_terms = losses.multiscale_cam_loss(bundle, lab.labels[idx], weights,
                                               ablate_cam=not cam_on, ablate_multiscale=not multiscale)
        l_s = losses.weighted_bce_supervised(bundle.decoder, lab.masks[idx], weights.w)
        ce, cam, cam_loss = cam_terms.ce, cam_terms.cam, cam_terms.total
        l_u = T.DiffArray(np.zeros((), dtype=net.dtype))
        batch_ids = [lab.ids[i] for i in idx]
        if use_unl:
            start = (step * cfg.unlabelled_batch_size) % len(unl_order)
            uidx = np.take(unl_order, range(start, start + cfg.unlabelled_batch_size), mode="wrap")
            uimg = unl.images[uidx]
            batch_ids += [unl.ids[i] for i in uidx]
            clean = None
            if weak_on:
                clean = net.forward(uimg, multiscale=multiscale, decode=consistency_on)
                weak = losses.multiscale_cam_loss(clean, unl.labels[uidx], weights,
                                                  ablate_cam=not cam_on, ablate_multiscale=not multiscale)
                ce = (ce + weak.ce) * 0.5
                cam = (cam + weak.cam) * 0.5
                cam_loss = (cam_loss + weak.total) * 0.5
            if consistency_on:
                classes = unl.labels[uidx] if cfg.weak_labels else None
                label, _ = pseudo_labels(net, uimg, cfg, classes=classes, bundle=clean)
                seeds = rng.integers(0, 2**63 - 1, size=len(uidx))
                aug = np.stack([augment_strong(im[0], seed=int(sd)) for im, sd in zip(uimg, seeds)])
                aug_bundle = net.forward(aug[:, None].astype(net.dtype), multiscale=multiscale)
                l_u = losses.consistency_loss(aug_bundle.decoder, label.foreground.astype(net.dtype),
                                              weights.w)
        components = {"cam_loss": cam_loss, "l_s": l_s, "l_u": l_u}
        total = losses.total_objective(components, weights, "full" if consistency_on else "warmup")
        if not np.isfinite(total.values):
            raise NumericalError(f"non-finite loss at epoch {epoch} step {step}; batch ids: {batch_ids}")
        net.zero_grad()
        T.backward(total)
        grads = {k: p.grad for k, p in params.items()}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in {k} at epoch {epoch} step {step}; "
                                     f"batch ids: {batch_ids}")
        adam_step({k: p.values for k, p in params.items()}, grads, state.adam, lr,
                  cfg.beta1, cfg.beta2, cfg.adam_eps)
        sums["l_ce"] += _scalar(ce)
        sums["cam"] += _scalar(cam)
        sums["l_s"] += _scalar(l_s)
        sums["l_u"] += _scalar(l_u)
        sums["total"] += _scalar(total)
    row = {"epoch": epoch}
    row.update({k: v / n_steps for k, v in sums.items()})
    state.history.append(row)
    state.epoch += 1
    return row


def format_loss_row(row: dict) -> str:
    return ",".join([str(row["epoch"])] + [f"{row[k]:.17g}" for k in LOSS_COLUMNS[1:]])


def predict(net: Network, images: np.ndarray, multiscale: bool = True, batch: int = 32):
    """Class probabilities ``[N, 3]`` and decoder maps ``[N, H, W]``."""
    probs, maps = [], []
    with T.no_grad():
        for start in range(0, len(images), batch):
            b = net.forward(images[start:start + batch], multiscale=multiscale)
            probs.append(b.probs.values)
            maps.append(b.decoder.values)
    return np.concatenate(probs).astype(np.float64), np.concatenate(maps).astype(np.float64)


def evaluate_network(net: Network, manifest: SplitManifest, samples: dict, cfg: TrainConfig) -> EvalReport:
    test = _stack(manifest.test_classification, samples, net.dtype)
    probs, maps = predict(net, test.images, multiscale=not cfg.ablate_multiscale)
    seg_ids = set(manifest.test_segmentation)
    sel = [i for i, sid in enumerate(test.ids) if sid in seg_ids]
    return evaluate(probs, test.labels, [maps[i] for i in sel], [test.masks[i] for i in sel],
                    cfg.threshold, cfg.to_text())


def init_state(cfg: TrainConfig) -> RunState:
    cfg.validate()
    return RunState(config=cfg, net=Network(cfg.net_config()))


def train(manifest: SplitManifest, samples: dict, cfg: TrainConfig, run_dir=None,
          state: RunState | None = None, until: int | None = None, checkpoint_every: int = 0) -> tuple[RunState, EvalReport | None]:
    """Train from scratch (or resume ``state``) up to epoch ``until`` (default: all).

    When ``run_dir`` is given it receives config.txt, losses.csv, checkpoints
    and, on completion, metrics.json.
    """
    cfg.validate()
    check_dataset(manifest, samples)
    if state is None:
        state = init_state(cfg)
    cfg = state.config
    end = cfg.epochs if until is None else min(until, cfg.epochs)
    lab = _stack(manifest.labelled_train, samples, state.net.dtype)
    unl = _stack(manifest.unlabelled_train, samples, state.net.dtype)
    if not cfg.weak_labels:
        unl.labels = np.full(len(unl.ids), -1)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.txt"), "w") as f:
            f.write(cfg.to_text())
    while state.epoch < end:
        row = train_epoch(state, manifest, lab, unl)
        logger.info("epoch %d: %s", row["epoch"], {k: round(v, 5) for k, v in row.items() if k != "epoch"})
        if run_dir is not None:
            write_losses(os.path.join(run_dir, "losses.csv"), state.history)
            if checkpoint_every and state.epoch % checkpoint_every == 0:
                state.save(os.path.join(run_dir, f"ckpt_{state.epoch:04d}.bin"))
    report = None
    if state.epoch >= cfg.epochs:
        report = evaluate_network(state.net, manifest, samples, cfg)
        if run_dir is not None:
            state.save(os.path.join(run_dir, "ckpt_final.bin"))
            with open(os.path.join(run_dir, "metrics.json"), "w") as f:
                f.write(report.to_json())
    return state, report


def write_losses(path, history: list) -> None:
    with open(path, "w") as f:
        f.write(",".join(LOSS_COLUMNS) + "\n")
        for row in history:
            f.write(format_loss_row(row) + "\n")
