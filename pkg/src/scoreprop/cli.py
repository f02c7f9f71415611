"""Command-line entry point.

Exit codes: 0 success, 2 I/O or file-format error, 3 shape/config error,
4 validation failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import store
from .engine import AVGPOOL_MODES, propagate
from .errors import ConfigError, FormatError, ShapeError
from .graph import ModelGraph, build_paper_model, forward, forward_with_tape, param_count
from .oracle import Report, check_conservation, check_gradient, relative_error
from .rf import CONVENTIONS, SplatConfig, compute_rf_table, spatial_entries, state_total_map
from .tensor import softmax
from .visualize import RenderSpec, map_stats, overlay, parse_threshold, render

EXIT_OK, EXIT_IO, EXIT_SHAPE, EXIT_VALIDATION = 0, 2, 3, 4


def _load_input(model: ModelGraph, path, preprocess: bool) -> np.ndarray:
    x = store.load_image(path)
    if preprocess:
        x = store.preprocess_trim_resize(x, model.input_shape[1])
    if tuple(x.shape) != model.input_shape:
        raise ShapeError(f"image shape {tuple(x.shape)} does not match model input {model.input_shape}"
                         + ("" if preprocess else " (try --preprocess)"))
    return x


def _parse_classes(sel: str, n: int) -> list[int]:
    if sel == "all":
        return list(range(n))
    try:
        classes = [int(v) for v in sel.split(",")]
    except ValueError:
        raise ConfigError(f"class selector must be 'all' or indices, got {sel!r}") from None
    for c in classes:
        if not 0 <= c < n:
            raise ConfigError(f"class {c} outside 0..{n - 1}")
    return classes


def cmd_infer(args) -> int:
    model = store.load_model(args.model)
    x = _load_input(model, args.image, args.preprocess)
    logits = forward(model, x).astype(np.float64)
    probs = softmax(logits)
    doc = {
        "predicted": int(np.argmax(logits)),
        "logits": [float(v) for v in logits],
        "probabilities": [float(v) for v in probs],
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_explain(args) -> int:
    model = store.load_model(args.model)
    x = _load_input(model, args.image, args.preprocess)
    tape = forward_with_tape(model, x)
    classes = _parse_classes(args.class_, tape.logits.size)
    cfg = SplatConfig(sigma_div=args.sigma_div, convention=args.convention)
    spec = RenderSpec(colormap="signed", threshold=args.threshold)
    table = compute_rf_table(model, cfg.convention)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    failed = False
    # one class at a time keeps 640x640 memory bounded
    for c in classes:
        state = propagate(model, tape, c, args.avgpool_mode, keep_tensors=False)
        store.save_scoremap(state.input_scores, out / f"input_c{c}.smap")
        for l, (smap, kmap) in enumerate(zip(state.layer_maps, state.constant_maps)):
            store.save_scoremap(smap, out / f"scores_c{c}_layer{l}.smap")
            store.save_scoremap(kmap, out / f"sk_c{c}_layer{l}.smap")
        total = state_total_map(state, table, cfg)
        store.save_scoremap(total, out / f"total_c{c}.smap")
        (out / f"total_c{c}.ppm").write_bytes(render(total, spec))
        (out / f"total_c{c}.pgm").write_bytes(render(total, RenderSpec("grayscale", args.threshold)))
        (out / f"stats_c{c}.txt").write_text(map_stats(total).to_text())
        if state.feature_scores is not None:
            np.savetxt(out / f"features_c{c}.txt", state.feature_scores, fmt="%.9e")
        e_engine = relative_error(state.total, state.logit)
        e_mapped = relative_error(total.sum(), state.logit)
        ok = max(e_engine, e_mapped) <= args.tol
        failed |= not ok
        lines.append(f"class {c} logit {state.logit:.9g} engine_total {state.total:.9g} "
                     f"mapped_total {total.sum():.9g} rel_err {max(e_engine, e_mapped):.3e} "
                     f"{'PASS' if ok else 'FAIL'}")
    text = "".join(line + "\n" for line in lines)
    (out / "conservation.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_rf(args) -> int:
    model = build_paper_model(seed=0) if args.preset == "paper" else store.load_model(args.model)
    table = compute_rf_table(model, args.convention)
    sys.stdout.write("layer kind rf jump\n")
    for e in spatial_entries(table):
        sys.stdout.write(f"{e.layer} {e.kind} {e.rf[0]} {e.jump[0]}\n")
    return EXIT_OK


def cmd_validate(args) -> int:
    report = Report()
    cfg = SplatConfig(sigma_div=args.sigma_div)
    engine_tol = 1e-4 if args.tol is None else args.tol
    other_tol = 1e-3 if args.tol is None else args.tol
    cases = []
    base_model = store.load_model(args.model) if args.model else None
    if args.image:
        if base_model is None:
            raise ConfigError("--image requires --model")
        cases.append(("image", base_model, _load_input(base_model, args.image, args.preprocess)))
    for s in range(args.seeds):
        model = base_model if base_model is not None else store.make_toy_model(s)
        cases.append((f"seed{s}", model, store.random_image(model.input_shape, s)))
    for label, model, x in cases:
        report.extend(check_conservation(model, x, None, args.avgpool_mode, cfg,
                                         engine_tol, other_tol, label))
        if args.fd_samples:
            c = int(np.argmax(forward(model, x)))
            report.extend(check_gradient(model, x, c, args.fd_samples, other_tol, label=label))
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _channels(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",")]
    except ValueError:
        raise ConfigError(f"channels must be comma-separated integers, got {s!r}") from None


def cmd_make_toy(args) -> int:
    model = store.make_toy_model(args.seed, args.blocks, _channels(args.channels), args.size,
                                 dropout=args.dropout)
    store.save_model(model, args.out)
    sys.stdout.write(f"{args.out}: {len(model)} layers, {param_count(model)} trainable parameters\n")
    return EXIT_OK


def cmd_make_paper(args) -> int:
    model = build_paper_model(seed=args.seed)
    store.save_model(model, args.out)
    sys.stdout.write(f"{args.out}: {len(model)} layers, {param_count(model)} trainable parameters\n")
    return EXIT_OK


def cmd_make_image(args) -> int:
    x = store.random_image((args.channels, args.size, args.size), args.seed)
    store.save_image(x, args.out)
    return EXIT_OK


def cmd_render(args) -> int:
    parse_threshold(args.threshold)
    m = store.load_scoremap(args.scores).astype(np.float64).sum(axis=0)
    spec = RenderSpec(args.colormap, args.threshold, args.alpha)
    if args.overlay:
        data = overlay(store.load_image(args.overlay), m, spec)
    else:
        data = render(m, spec)
    Path(args.out).write_bytes(data)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoreprop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def model_image(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--image", required=True)
        sp.add_argument("--preprocess", action="store_true",
                        help="trim background and resize to the model input size")

    sp = sub.add_parser("infer", help="logits and class probabilities")
    model_image(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("explain", help="per-class score maps")
    model_image(sp)
    sp.add_argument("--class", dest="class_", default="all")
    sp.add_argument("--avgpool-mode", choices=AVGPOOL_MODES, default="paper-equal")
    sp.add_argument("--sigma-div", type=float, default=2.0)
    sp.add_argument("--convention", choices=CONVENTIONS, default="paper")
    sp.add_argument("--threshold", default="none")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("rf", help="receptive-field table")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--preset", choices=["paper"])
    sp.add_argument("--convention", choices=CONVENTIONS, default="paper")
    sp.set_defaults(func=cmd_rf)

    sp = sub.add_parser("validate", help="conservation and gradient oracle checks")
    sp.add_argument("--model")
    sp.add_argument("--image")
    sp.add_argument("--preprocess", action="store_true")
    sp.add_argument("--tol", type=float, default=None)
    sp.add_argument("--seeds", type=int, default=1)
    sp.add_argument("--fd-samples", type=int, default=100)
    sp.add_argument("--avgpool-mode", choices=AVGPOOL_MODES, default="paper-equal")
    sp.add_argument("--sigma-div", type=float, default=2.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("make-toy", help="seeded miniature model")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--blocks", type=int, default=2)
    sp.add_argument("--channels", default="4,8")
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--dropout", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_toy)

    sp = sub.add_parser("make-paper", help="paper architecture with seeded random weights")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_paper)

    sp = sub.add_parser("make-image", help="seeded random PPM/PGM test image")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--channels", type=int, choices=[1, 3], default=3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_image)

    sp = sub.add_parser("render", help="render a score map file")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--threshold", default="none")
    sp.add_argument("--colormap", choices=["grayscale", "signed"], default="signed")
    sp.add_argument("--overlay")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
