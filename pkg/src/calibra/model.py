"""VGG-style encoder with multiscale class heads and a U-shaped decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serialization
from . import tensor as T
from .errors import ConfigurationError, FormatError
from .tensor import DiffArray

N_CLASSES = 3
CLASS_NAMES = ("NP", "CAP", "COVID")
HEAD_SCALES = (3, 4, 5)
BLOCK_DEPTHS = (2, 2, 3, 3, 3)
FULL_WIDTHS = (32, 64, 128, 256, 256)
TINY_WIDTHS = (8, 16, 32, 64, 64)


@dataclass
class NetConfig:
    widths: tuple = FULL_WIDTHS
    depths: tuple = BLOCK_DEPTHS
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    dtype: str = "float64"
    seed: int = 0

    @classmethod
    def tiny(cls, **kw) -> "NetConfig":
        return cls(widths=TINY_WIDTHS, **kw)

    def to_meta(self) -> dict:
        return {"widths": list(self.widths), "depths": list(self.depths),
                "leaky_slope": self.leaky_slope, "norm_eps": self.norm_eps,
                "dtype": self.dtype, "seed": self.seed}

    @classmethod
    def from_meta(cls, meta: dict) -> "NetConfig":
        return cls(widths=tuple(meta["widths"]), depths=tuple(meta["depths"]),
                   leaky_slope=meta["leaky_slope"], norm_eps=meta["norm_eps"],
                   dtype=meta["dtype"], seed=meta["seed"])


@dataclass
class ActivationBundle:
    """Everything one forward pass exposes.

    ``features``, ``score_maps`` and ``score_vectors`` are keyed by block
    index (3, 4, 5). Arrays carry a leading batch axis.
    """

    image: DiffArray
    features: dict = field(default_factory=dict)
    skips: list = field(default_factory=list)
    head_weights: dict = field(default_factory=dict)
    score_maps: dict = field(default_factory=dict)
    score_vectors: dict = field(default_factory=dict)
    logits: DiffArray | None = None
    probs: DiffArray | None = None
    decoder: DiffArray | None = None

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[-2], self.image.shape[-1]


class Network:
    """Encoder Conv1..Conv5, 1x1 class heads on Conv3/4/5, skip decoder.

    Parameters live in ``self.params`` (insertion-ordered name -> DiffArray).
    """

    def __init__(self, config: NetConfig | None = None):
        self.config = config or NetConfig()
        cfg = self.config
        if len(cfg.widths) != 5 or len(cfg.depths) != 5:
            raise ConfigurationError("need five blocks of widths and depths")
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, DiffArray] = {}
        c_in = 1
        for b, (width, depth) in enumerate(zip(cfg.widths, cfg.depths), start=1):
            for layer in range(depth):
                self._conv(rng, f"enc{b}.{layer}", c_in, width, 3)
                c_in = width
        for s in HEAD_SCALES:
            self._conv(rng, f"head{s}", cfg.widths[s - 1], N_CLASSES, 1)
        # decoder: stage s upsamples, concatenates the pooled Conv_s output, convolves
        c_in = cfg.widths[4]
        for s in (4, 3, 2, 1):
            self._conv(rng, f"dec{s}", c_in + cfg.widths[s - 1], cfg.widths[s - 1], 3)
            c_in = cfg.widths[s - 1]
        self._conv(rng, "dec0", c_in + 1, cfg.widths[0], 3)
        self._conv(rng, "seg", cfg.widths[0], 1, 1)

    def _conv(self, rng, name: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        gain = np.sqrt(2.0 / (1.0 + self.config.leaky_slope**2))
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(c_out, c_in, k, k))
        self.params[f"{name}.w"] = DiffArray(w.astype(self.dtype), requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = DiffArray(np.zeros(c_out, dtype=self.dtype), requires_grad=True,
                                             name=f"{name}.b")

    def parameters(self) -> list[DiffArray]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def head_weights(self, scale: int) -> np.ndarray:
        """Class-by-channel weights of the 1x1 head at ``scale``: ``[3, C]``."""
        return self.params[f"head{scale}.w"].values[:, :, 0, 0]

    def _layer(self, x: DiffArray, name: str) -> DiffArray:
        p = self.params
        y = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], padding=1)
        return T.leaky_relu(T.instance_norm(y, self.config.norm_eps), self.config.leaky_slope)

    # ------------------------------------------------------------- forward

    def encoder_forward(self, image) -> ActivationBundle:
        """Run Conv1..Conv5 and the class heads.

        ``image`` is ``[H, W]``, ``[1, H, W]`` or ``[N, 1, H, W]``; H and W
        must be divisible by 32.
        """
        x = image if isinstance(image, DiffArray) else DiffArray(np.asarray(image, dtype=self.dtype))
        if x.ndim == 2:
            x = x.reshape(1, 1, *x.shape)
        elif x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ConfigurationError(f"expected a single-channel image, got shape {x.shape}")
        h, w = x.shape[2:]
        if h % 32 or w % 32 or h == 0 or w == 0:
            raise ConfigurationError(f"image size {h}x{w} must be divisible by 32")
        bundle = ActivationBundle(image=x)
        out = x
        for b, depth in enumerate(self.config.depths, start=1):
            for layer in range(depth):
                out = self._layer(out, f"enc{b}.{layer}")
            out = T.max_pool2d(out, 2)
            if b <= 4:
                bundle.skips.append(out)
            if b in HEAD_SCALES:
                bundle.features[b] = out
        for s in HEAD_SCALES:
            smap = T.conv2d(bundle.features[s], self.params[f"head{s}.w"], self.params[f"head{s}.b"])
            bundle.head_weights[s] = self.params[f"head{s}.w"]
            bundle.score_maps[s] = smap
            bundle.score_vectors[s] = T.global_max_pool(smap)
        return bundle

    def class_logits(self, bundle: ActivationBundle, multiscale: bool = True) -> DiffArray:
        """Summed pre-softmax score vectors; Conv5 alone when ``multiscale`` is off."""
        if not multiscale:
            return bundle.score_vectors[5]
        v = bundle.score_vectors
        return v[3] + v[4] + v[5]

    def classify(self, bundle: ActivationBundle, multiscale: bool = True) -> DiffArray:
        bundle.logits = self.class_logits(bundle, multiscale)
        bundle.probs = T.softmax(bundle.logits, axis=-1)
        return bundle.probs

    def decode(self, bundle: ActivationBundle) -> DiffArray:
        """Per-pixel foreground probability ``[N, H, W]`` at input resolution."""
        p = self.params
        out = bundle.features[5]
        for s in (4, 3, 2, 1):
            skip = bundle.skips[s - 1]
            up = T.upsample_bilinear(out, skip.shape[2], skip.shape[3])
            out = self._layer(T.concat([up, skip], axis=1), f"dec{s}")
        h, w = bundle.size
        up = T.upsample_bilinear(out, h, w)
        out = self._layer(T.concat([up, bundle.image], axis=1), "dec0")
        logit = T.conv2d(out, p["seg.w"], p["seg.b"])
        prob = T.sigmoid(logit)
        bundle.decoder = prob.reshape(prob.shape[0], h, w)
        return bundle.decoder

    def forward(self, image, multiscale: bool = True, decode: bool = True) -> ActivationBundle:
        bundle = self.encoder_forward(image)
        self.classify(bundle, multiscale)
        if decode:
            self.decode(bundle)
        return bundle

    # ------------------------------------------------------ serialization

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise FormatError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise FormatError(f"{name}: shape {arrays[name].shape}, expected {p.shape}")
        for name, p in self.params.items():
            p.values = arrays[name].astype(self.dtype, copy=True)
            p.zero_grad()

    def save(self, path) -> None:
        serialization.save(path, "model", self.state_arrays(), {"net": self.config.to_meta()})

    @classmethod
    def load(cls, path) -> "Network":
        arrays, meta = serialization.load(path, kind="model")
        net = cls(NetConfig.from_meta(meta["net"]))
        net.load_state_arrays(arrays)
        return net
