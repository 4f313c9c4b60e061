"""Command-line entry point: ``calibra gen|train|eval|explain``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or format
error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import explain as X
from . import tensor as T
from . import trainer
from .errors import ConfigurationError, FormatError, NumericalError, UsageError
from .model import CLASS_NAMES, HEAD_SCALES
from .pgm import read_pgm, to_gray8, write_pgm
from .synthdata import CLASSES, build_splits, materialize, read_dataset, write_dataset

logger = logging.getLogger("calibra")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_config(directory: str, cfg_text: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.txt"), "w") as f:
        f.write(cfg_text)


# -------------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    if args.size <= 0 or args.size % 32:
        raise ConfigurationError(f"--size {args.size} must be a positive multiple of 32")
    if args.per_class < 2:
        raise UsageError("--per-class must be at least 2 (one train and one test sample)")
    n_test = max(1, args.per_class // 4)
    n_train = args.per_class - n_test
    man = build_splits([n_train] * 3, args.labelled_fraction, args.seed,
                       test_counts=[n_test] * 3, size=args.size)
    samples = materialize(man)
    write_dataset(args.out, man, samples)
    _write_config(args.out, f"seed={args.seed}\nper_class={args.per_class}\nsize={args.size}\n"
                            f"labelled_fraction={args.labelled_fraction!r}\n")
    parts = man.partitions()
    print(f"wrote {len(samples)} samples to {args.out}")
    for name in ("labelled_train", "unlabelled_train", "test_classification", "test_segmentation"):
        counts = [sum(1 for i in parts[name] if man.labels[i] == c) for c in range(3)]
        print(f"  {name:20s} " + "  ".join(f"{CLASSES[c]}={n}" for c, n in enumerate(counts)))
    return EXIT_OK


# ------------------------------------------------------------------ train


def resolve_config(args) -> trainer.TrainConfig:
    """Profile defaults, then ``--config`` file, then flags."""
    cfg = trainer.TrainConfig.desk() if args.desk else trainer.TrainConfig()
    if args.config:
        with open(args.config) as f:
            cfg.update_from_text(f.read(), source=args.config)
    for name in args.ablate or ():
        cfg.apply_ablation(name)
    if args.weak_labels:
        cfg.weak_labels = True
    if args.supervised_only:
        cfg.supervised_only = True
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest, samples = read_dataset(args.data)
    if args.weak_labels:
        logger.info("weak labels: %d unlabelled samples carry class labels", len(manifest.unlabelled_train))
    _, report = trainer.train(manifest, samples, cfg, run_dir=args.out,
                              checkpoint_every=args.checkpoint_every)
    print(f"run written to {args.out}: accuracy={report.accuracy:.4f} dice={report.dice}")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def load_run(run_dir: str) -> trainer.RunState:
    path = os.path.join(run_dir, "ckpt_final.bin")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return trainer.RunState.load(path)


def cmd_eval(args) -> int:
    state = load_run(args.run)
    manifest, samples = read_dataset(args.data)
    report = trainer.evaluate_network(state.net, manifest, samples, state.config)
    out_dir = os.path.dirname(os.path.abspath(args.report))
    _write_config(out_dir, state.config.to_text())
    with open(args.report, "w") as f:
        f.write(report.to_json())
    print(report.to_json(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- explain


def _load_image(path: str) -> np.ndarray:
    raw = read_pgm(path)
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / scale


def explain_maps(state: trainer.RunState, image: np.ndarray, steps: int) -> tuple[dict, int]:
    """8-bit export maps plus the explained class.

    ``pseudo`` is fused from the quantized source maps, so re-fusing the
    exported files reproduces it exactly.
    """
    cfg, net = state.config, state.net
    h, w = image.shape
    x = image.astype(net.dtype)[None, None]
    multiscale = not cfg.ablate_multiscale
    with T.no_grad():
        bundle = net.forward(x, multiscale=multiscale)
        out = {}
        for k, name in enumerate(CLASS_NAMES):
            cam = X.compute_cam(bundle.features[5], bundle.head_weights[5], [k])
            out[f"cam_{name}"] = X.minmax_normalize(T.upsample_bilinear(cam, h, w)).values[0]
        for s in HEAD_SCALES:
            caam = X.compute_caam(bundle.features[s])
            out[f"caam_{s}"] = X.minmax_normalize(T.upsample_bilinear(caam, h, w)).values[0]
    src = trainer.fusion_inputs(net, x, cfg, bundle=bundle, steps=steps)
    out["caaml"] = src["caaml"][0]
    out["saliency"] = src["saliency"][0]
    out["decoder"] = src["decoder"][0]
    maps = {k: to_gray8(v) for k, v in out.items()}
    maps["pseudo"] = refuse(maps["caaml"], maps["saliency"], maps["decoder"], cfg)
    return maps, int(src["classes"][0])


def refuse(caaml8, saliency8, decoder8, cfg: trainer.TrainConfig) -> np.ndarray:
    """Pseudo-label foreground from 8-bit source maps."""
    c, s, p = (np.asarray(m, dtype=np.float64) / 255.0 for m in (caaml8, saliency8, decoder8))
    return to_gray8(trainer.fuse(c, s, p, cfg).foreground)


def cmd_explain(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    state = load_run(args.run)
    image = _load_image(args.input)
    maps, cls = explain_maps(state, image, args.steps)
    os.makedirs(args.out, exist_ok=True)
    for name, arr in maps.items():
        write_pgm(os.path.join(args.out, f"{name}.pgm"), arr)
    _write_config(args.out, state.config.to_text() + f"explain_input={args.input}\n"
                            f"explain_steps={args.steps}\nexplained_class={CLASS_NAMES[cls]}\n")
    print(f"explained class {CLASS_NAMES[cls]}; wrote {len(maps)} maps to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="calibra", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--per-class", type=int, default=400,
                   help="samples per class; a quarter (at least one) goes to the test split")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--labelled-fraction", type=float, default=0.1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--ablate", action="append", metavar="NAME",
                   help="one of: " + ", ".join(trainer.ABLATIONS) + " (repeatable)")
    t.add_argument("--weak-labels", action="store_true")
    t.add_argument("--supervised-only", action="store_true")
    t.add_argument("--desk", action="store_true", help="tiny network, short schedule")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="export explanation maps for one image")
    x.add_argument("--run", required=True)
    x.add_argument("--input", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--steps", type=int, default=256)
    x.set_defaults(func=cmd_explain)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"calibra: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"calibra: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"calibra: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
