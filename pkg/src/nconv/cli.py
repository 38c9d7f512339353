"""Command line driver: ``nconv {train,eval,infer,gradcheck,synth,summary}``.

Exit codes: 0 success, 1 configuration/usage error, 2 data error,
3 numerical failure (non-finite loss, gradient check above threshold).
"""

import argparse
import json
import logging
import os
import sys
from importlib import resources

import jsonschema
import numpy as np

from nconv.data import (
    DepthFormatError,
    evaluate,
    gen_synthetic,
    load_dataset,
    load_depth_png,
    save_conf_png,
    save_depth_png,
    write_dataset,
)
from nconv.layer import random_layer
from nconv.network import (
    VARIANTS,
    ModelSpec,
    build_model,
    count_params,
    layer_manifest,
    load_model,
    model_forward,
)
from nconv.training import NumericalAbort, TrainConfig, gradcheck, stack_samples, train

log = logging.getLogger("nconv")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_VERSION = 1


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def load_schema(name):
    return json.loads(resources.files("nconv.schemas").joinpath(name).read_text())


def _with_defaults(schema, obj):
    out = {}
    for key, sub in schema["properties"].items():
        if key in obj:
            out[key] = obj[key]
        else:
            out[key] = sub.get("default")
        if isinstance(out[key], dict) and "properties" in sub:
            out[key] = _with_defaults(sub, out[key])
    return out


def load_config(path):
    """Parse and validate a config file; returns a dict with defaults filled in."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(
            EXIT_CONFIG, f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"
        ) from exc
    schema = load_schema("config.schema.json")
    try:
        jsonschema.validate(raw, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(EXIT_CONFIG, f"{path}: config error at {where}: {exc.message}") from exc
    return _with_defaults(schema, raw)


def _check_dims(model, samples, what):
    m = model.input_multiple
    for s in samples:
        h, w = s.sparse_depth.shape[-2:]
        if h % m or w % m:
            raise CliError(EXIT_DATA, f"{what}: {model.variant} needs dims divisible by {m}, got {h}x{w}")


def cmd_train(args):
    cfg = load_config(args.config)
    if cfg["synthetic"] is not None:
        syn = cfg["synthetic"]
        samples = gen_synthetic(syn["seed"], syn["n"], syn["size"], syn["density"], syn["gt_coverage"])
    elif cfg["data_dir"] is not None:
        try:
            samples = load_dataset(cfg["data_dir"], cfg["split"])
        except (OSError, DepthFormatError) as exc:
            raise CliError(EXIT_DATA, f"cannot load dataset: {exc}") from exc
    else:
        raise CliError(EXIT_CONFIG, f"{args.config}: set either 'data_dir' or 'synthetic'")

    model = build_model(ModelSpec(cfg["variant"], cfg["epsilon"], cfg["seed"]))
    _check_dims(model, samples, "training data")
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"], cfg["output_dir"])
    try:
        history = train(model, samples, tcfg)
    except NumericalAbort as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from exc
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    if cfg["figures"]:
        from nconv.plotting import plot_history
        plot_history(history, os.path.join(cfg["output_dir"], "history.png"))
    last = history[-1]
    print(f"trained {cfg['variant']} for {len(history)} epochs: "
          f"data loss {last['mean_data_loss']:.4f}, mean confidence {last['mean_output_conf']:.4f}")
    print(f"outputs in {cfg['output_dir']}")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot load checkpoint {path}: {exc}") from exc


def predict(model, samples):
    preds, confs = [], []
    for s in samples:
        z, c, _ = model_forward(model, s.sparse_depth, s.input_conf)
        preds.append(z)
        confs.append(c)
    return np.concatenate(preds), np.concatenate(confs)


def cmd_eval(args):
    model = _load_checkpoint(args.checkpoint)
    try:
        samples = load_dataset(args.data, args.split)
    except (OSError, DepthFormatError) as exc:
        raise CliError(EXIT_DATA, f"cannot load dataset: {exc}") from exc
    _check_dims(model, samples, args.data)
    pred, conf = predict(model, samples)
    _, c_in, gt, valid = stack_samples(samples)
    try:
        metrics = evaluate(pred, gt, valid)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    report = {"version": REPORT_VERSION, **metrics.to_dict(), "params": count_params(model)}
    jsonschema.validate(report, load_schema("report.schema.json"))
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.figures:
        from nconv.plotting import plot_completion, plot_error_map
        os.makedirs(args.figures, exist_ok=True)
        s = samples[0]
        plot_completion(s.sparse_depth, s.input_conf, pred[:1], conf[:1],
                        os.path.join(args.figures, "completion_00000.png"), gt=s.gt_depth * s.gt_valid)
        plot_error_map(pred[:1], s.gt_depth, s.gt_valid, os.path.join(args.figures, "error_00000.png"))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_infer(args):
    model = _load_checkpoint(args.checkpoint)
    try:
        depth, conf = load_depth_png(args.input)
    except (OSError, DepthFormatError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    m = model.input_multiple
    if depth.shape[2] % m or depth.shape[3] % m:
        raise CliError(EXIT_DATA, f"{args.input}: {model.variant} needs dims divisible by {m}")
    z, c, _ = model_forward(model, depth, conf)
    # epsilon terms can push values a hair outside the file formats' ranges
    save_depth_png(np.maximum(z, 0.0), args.out_depth)
    save_conf_png(np.clip(c, 0.0, 1.0), args.out_conf)
    print(f"wrote {args.out_depth} and {args.out_conf}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.layer:
        target = random_layer(args.channels, args.channels, args.kernel, args.seed)
        label = f"nconv layer {args.channels}->{args.channels} {args.kernel}x{args.kernel}"
    else:
        target = build_model(ModelSpec(args.variant, seed=args.seed))
        label = args.variant
    res = gradcheck(target, size=args.size, seed=args.seed)
    status = "ok" if res.max_rel_error <= args.threshold else "FAILED"
    print(f"{label}: worst relative error {res.max_rel_error:.3e} at {res.location} "
          f"({res.n_probed} entries probed) {status}")
    return EXIT_OK if status == "ok" else EXIT_NUMERIC


def cmd_synth(args):
    splits = {"train": (args.seed, args.n_train), "test": (args.seed + 1, args.n_test)}
    try:
        for split, (seed, n) in splits.items():
            if n > 0:
                write_dataset(gen_synthetic(seed, n, args.size, args.density, args.gt_coverage),
                              args.out, split)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write dataset: {exc}") from exc
    print(f"wrote {args.n_train} train / {args.n_test} test samples to {args.out}")
    return EXIT_OK


def cmd_summary(args):
    model = _load_checkpoint(args.checkpoint) if args.checkpoint else build_model(args.variant)
    print(f"variant {model.variant}")
    print(f"{'layer':<8}{'kind':<7}{'in':>4}{'out':>5}{'kernel':>8}{'params':>8}{'uses':>6}")
    for row in layer_manifest(model):
        k = "x".join(str(v) for v in row["kernel"])
        print(f"{row['name']:<8}{row['kind']:<7}{row['in_ch']:>4}{row['out_ch']:>5}{k:>8}"
              f"{row['params']:>8}{row['uses']:>6}")
    print(f"total parameters: {count_params(model)}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nconv", description="Normalized convolution networks for sparse depth completion."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="path to the JSON config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.ncm)")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--split", default="test", help="split under the dataset root (default: test)")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--figures", default=None, metavar="DIR",
                   help="also render completion/error figures for the first sample into DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="complete one sparse depth PNG")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.ncm)")
    p.add_argument("--in", dest="input", required=True, help="sparse 16-bit depth PNG")
    p.add_argument("--out-depth", required=True, help="dense 16-bit depth PNG to write")
    p.add_argument("--out-conf", required=True, help="8-bit confidence PNG to write")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--variant", choices=VARIANTS, default="HMS", help="model variant (default: HMS)")
    p.add_argument("--layer", action="store_true", help="check a single nconv layer instead of a model")
    p.add_argument("--channels", type=int, default=4, help="layer probe channels (default: 4)")
    p.add_argument("--kernel", type=int, default=5, help="layer probe kernel size (default: 5)")
    p.add_argument("--size", type=int, default=8, help="probe image size (default: 8)")
    p.add_argument("--seed", type=int, default=0, help="probe seed (default: 0)")
    p.add_argument("--threshold", type=float, default=1e-4,
                   help="maximum allowed relative error (default: 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset directory")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--seed", type=int, default=0, help="train split seed; test uses seed+1")
    p.add_argument("--n-train", type=int, default=200, help="training samples (default: 200)")
    p.add_argument("--n-test", type=int, default=50, help="test samples (default: 50)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (default: 64)")
    p.add_argument("--density", type=float, default=0.05, help="measured fraction (default: 0.05)")
    p.add_argument("--gt-coverage", type=float, default=0.3,
                   help="fraction of pixels with ground truth (default: 0.3)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("summary", help="print the layer manifest and parameter count")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--variant", choices=VARIANTS, default="HMS", help="variant (default: HMS)")
    group.add_argument("--checkpoint", help="summarize a checkpoint instead")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"nconv {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
