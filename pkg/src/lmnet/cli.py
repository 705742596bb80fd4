"""Command-line entry point.

Subcommands wire the library together: prepare (dataset pipeline), train,
eval, predict, params (parameter census), gradcheck (finite-difference
verification). Every run echoes its fully resolved configuration before
doing work, so a run is reproducible from its log alone.

Flags may come from a `--config` file of key=value lines (same canonical
format that checkpoints embed); explicit flags win over the file.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
data), 2 runtime failure (aborted training, broken checkpoint, failed
gradient check).

Heavy imports happen inside the subcommand handlers: `LMNET_THREADS` must
be exported to the BLAS layer before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

from .errors import ConfigError, DataError, LmnetError

_UNSET = object()


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; this tool reserves 2 for runtime
    # failures, so usage problems are remapped to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


@dataclass
class Opt:
    name: str            # underscore form; the flag is --with-dashes
    kind: str            # str | int | float | size | ints | flag
    default: object = None
    required: bool = False
    help: str = ""


def _parse_size(text: str):
    parts = [p for p in str(text).split(",") if p]
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"size must be an integer or 'h,w', got {text!r}") from None
    if len(dims) == 1:
        return (dims[0], dims[0])
    if len(dims) == 2:
        return tuple(dims)
    raise ConfigError(f"size must be an integer or 'h,w', got {text!r}")


def _parse_ints(text: str):
    try:
        return tuple(int(p) for p in str(text).split(",") if p)
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _coerce(opt: Opt, raw):
    if raw is _UNSET or raw is None:
        return raw
    if isinstance(raw, str):
        try:
            if opt.kind == "int":
                return int(raw)
            if opt.kind == "float":
                return float(raw)
        except ValueError:
            raise ConfigError(f"{opt.name} must be a {opt.kind}, got {raw!r}") from None
        if opt.kind == "flag":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes"):
                return True
            if lowered in ("0", "false", "no"):
                return False
            raise ConfigError(f"{opt.name} must be a boolean, got {raw!r}")
        if opt.kind == "size":
            return _parse_size(raw)
        if opt.kind == "ints":
            return _parse_ints(raw)
    return raw


def _read_config_file(path) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path} does not exist")
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value")
            k, _, v = line.partition("=")
            pairs[k.strip()] = v.strip()
    return pairs


def _resolve(opts: list, args: argparse.Namespace) -> dict:
    """Merge precedence: explicit flag > config file > built-in default."""
    filed = {}
    if getattr(args, "config", None):
        filed = _read_config_file(args.config)
        known = {o.name for o in opts}
        stray = set(filed) - known
        if stray:
            raise ConfigError(
                f"config file keys not valid here: {', '.join(sorted(stray))}"
            )
    resolved = {}
    for opt in opts:
        value = getattr(args, opt.name)
        if value is _UNSET:
            value = filed.get(opt.name, _UNSET)
        if value is _UNSET:
            value = opt.default
        value = _coerce(opt, value)
        if opt.required and value is None:
            raise ConfigError(f"--{opt.name.replace('_', '-')} is required")
        resolved[opt.name] = value
    return resolved


def _echo(command: str, resolved: dict) -> None:
    print(f"resolved config ({command}):")
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = int(value)
        print(f"  {key}={value}")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# Subcommand handlers. Each returns an exit code (None means 0).

def _cmd_prepare(o):
    from .data import prepare_dataset

    summary = prepare_dataset(
        o["input_dir"], o["output_dir"], tile=o["tile_size"],
        target=o["target_size"], min_fg=o["min_fg"], max_fg=o["max_fg"],
        overwrite=o["overwrite"],
    )
    for split in ("train", "val", "test"):
        row = summary[split]
        print(f"{split}: kept {row['kept']}, rejected {row['rejected']}")
    print(f"index written to {os.path.join(o['output_dir'], 'index.tsv')}")


def _graph_config(o, input_size):
    from .model import GraphConfig

    kwargs = dict(
        input_size=input_size,
        channel_sequence=o["channels"],
        loss=o["loss"],
        seed=o["seed"],
    )
    if o.get("dilations"):
        kwargs["dilation_rates"] = o["dilations"]
    return GraphConfig(**kwargs)


def _cmd_train(o):
    from .data import load_index, load_pair
    from .model import parse_variant
    from .train import TrainConfig, train

    variant = parse_variant(o["variant"])
    index = load_index(o["index"])
    train_recs = index.split_records("train")
    if not train_recs:
        raise ConfigError(f"train split is empty in {index.root}")
    input_size = o["input_size"]
    if input_size is None:
        input_size = load_pair(index, train_recs[0]).size
        print(f"input size {input_size[0]}x{input_size[1]} detected from "
              f"{train_recs[0].image}")
    cfg = TrainConfig(
        variant=variant,
        graph=_graph_config(o, input_size),
        index_path=o["index"],
        out_dir=o["out"],
        epochs=o["epochs"],
        batch_size=o["batch"],
        micro_batch=o["micro_batch"],
        lr=o["lr"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        adam_eps=o["adam_eps"],
        seed=o["seed"],
        threshold=o["threshold"],
        log_every=o["log_every"],
        resume=o["resume"],
        quiet=o["quiet"],
    )
    _, history = train(cfg)
    print(f"training complete: {len(history.steps)} optimizer steps, "
          f"checkpoints and history in {o['out']}")


def _cmd_eval(o):
    from .checkpoint import load_any
    from .data import load_index, load_pair
    from .metrics import render_kv, render_table
    from .train import evaluate

    graph = load_any(o["ckpt"])
    index = load_index(o["index"])
    records = index.split_records(o["split"])
    if not records:
        raise ConfigError(f"split {o['split']!r} is empty in {index.root}")
    data_size = load_pair(index, records[0]).size
    if data_size != graph.config.input_size:
        raise DataError(
            f"checkpoint expects {graph.config.input_size[0]}x"
            f"{graph.config.input_size[1]} input but {records[0].image} is "
            f"{data_size[0]}x{data_size[1]}; re-prepare the data or pick a "
            "matching checkpoint"
        )
    rep = evaluate(graph, index, o["split"], o["threshold"], o["micro_batch"])
    label = graph.variant.value.capitalize()
    print(render_table([(label, rep)]), end="")
    print()
    print(render_kv(rep), end="")


def _cmd_predict(o):
    import numpy as np

    from . import imgio
    from .checkpoint import load_any
    from .model import replace_input_size

    graph = load_any(o["ckpt"])
    image = imgio.read_rgb(o["image"])
    h, w = image.shape[1:]
    h8, w8 = h - h % 8, w - w % 8
    if h8 == 0 or w8 == 0:
        raise DataError(f"{o['image']}: {h}x{w} is too small, need at least 8x8")
    if (h8, w8) != (h, w):
        top, left = (h - h8) // 2, (w - w8) // 2
        image = image[:, top:top + h8, left:left + w8]
        print(f"input {h}x{w} center-cropped to {h8}x{w8} "
              "(spatial dims must be divisible by 8)")
    if (h8, w8) != graph.config.input_size:
        graph = replace_input_size(graph, (h8, w8))
    pred, _ = graph.forward(image[None].astype(graph.dtype), "eval")
    prob = pred[0, 0]
    mask = (prob >= o["threshold"]).astype(np.float32)
    prob_path = f"{o['out']}_prob.png"
    mask_path = f"{o['out']}_mask.png"
    imgio.write_gray(prob_path, prob)
    imgio.write_gray(mask_path, mask)
    print(f"probability map: {prob_path}")
    print(f"binary mask:     {mask_path}")


def _cmd_params(o):
    from .model import build_model, closed_form_param_count, parse_variant

    variant = parse_variant(o["variant"])
    config = _graph_config({**o, "loss": "bce", "seed": 0}, o["input_size"])
    graph = build_model(variant, config)
    rows = graph.layer_param_counts()
    name_w = max(5, *(len(spec.name) for spec, _ in rows))
    print(f"{'layer':<{name_w}}  {'shape':<22} {'dilation':>8}  {'params':>10}")
    for spec, n in rows:
        shape = f"{spec.in_channels}->{spec.out_channels} {spec.kernel}x{spec.kernel}"
        print(f"{spec.name:<{name_w}}  {shape:<22} {spec.dilation:>8}  {n:>10}")
    walk = graph.param_count()
    closed = closed_form_param_count(variant, config)
    print(f"{'total (graph walk)':<{name_w + 24}} {'':>8}  {walk:>10}")
    print(f"{'total (closed form)':<{name_w + 24}} {'':>8}  {closed:>10}")
    if walk != closed:
        print("error: the two counters disagree", file=sys.stderr)
        return 2
    return 0


def _cmd_gradcheck(o):
    from .gradcheck import check_graph_gradients
    from .model import parse_variant

    variant = parse_variant(o["variant"])
    tolerance = 1e-5
    errors = check_graph_gradients(variant, step=o["eps"])
    name_w = max(len(n) for n in errors)
    worst = 0.0
    failed = False
    for name in sorted(errors):
        err = errors[name]
        worst = max(worst, err)
        ok = err < tolerance
        failed = failed or not ok
        print(f"{name:<{name_w}}  {err:12.3e}  {'pass' if ok else 'FAIL'}")
    print(f"worst {worst:.3e} against tolerance {tolerance:g}")
    return 2 if failed else 0


_CHANNELS_DEFAULT = (5, 13, 89, 233)

_COMMANDS = {
    "prepare": ([
        Opt("input_dir", "str", required=True, help="raw scene layout root"),
        Opt("output_dir", "str", required=True, help="prepared dataset root"),
        Opt("tile_size", "int", 500, help="square tile side"),
        Opt("target_size", "size", (192, 192), help="training size, int or h,w"),
        Opt("min_fg", "float", 0.01, help="lowest kept mask foreground fraction"),
        Opt("max_fg", "float", 0.90, help="highest kept mask foreground fraction"),
        Opt("overwrite", "flag", False, help="replace existing output"),
    ], _cmd_prepare, "tile, filter, resize and index raw scenes"),
    "train": ([
        Opt("index", "str", required=True, help="path to index.tsv"),
        Opt("out", "str", required=True, help="run directory for checkpoints"),
        Opt("variant", "str", required=True, help="plain|dilation|residual|proposed"),
        Opt("epochs", "int", 10),
        Opt("batch", "int", 200, help="samples per optimizer step"),
        Opt("micro_batch", "int", 10, help="samples per forward/backward pass"),
        Opt("lr", "float", 0.005),
        Opt("beta1", "float", 0.9),
        Opt("beta2", "float", 0.999),
        Opt("adam_eps", "float", 1e-8,
            help="Adam epsilon; ~1e-2 tames the scale-free first steps"),
        Opt("seed", "int", 0),
        Opt("threshold", "float", 0.5, help="validation metrics threshold"),
        Opt("channels", "ints", _CHANNELS_DEFAULT, help="encoder channel widths"),
        Opt("dilations", "ints", None, help="pyramid dilation rates"),
        Opt("input_size", "size", None, help="detected from data when omitted"),
        Opt("loss", "str", "bce", help="bce|mse"),
        Opt("log_every", "int", 1),
        Opt("resume", "flag", False, help="continue from last.ckpt in --out"),
        Opt("quiet", "flag", False),
    ], _cmd_train, "run the training regime"),
    "eval": ([
        Opt("ckpt", "str", required=True),
        Opt("index", "str", required=True),
        Opt("split", "str", "test", help="train|val|test"),
        Opt("threshold", "float", 0.5),
        Opt("micro_batch", "int", 10),
    ], _cmd_eval, "score a checkpoint on one split"),
    "predict": ([
        Opt("ckpt", "str", required=True),
        Opt("image", "str", required=True),
        Opt("out", "str", required=True, help="output path prefix"),
        Opt("threshold", "float", 0.5),
    ], _cmd_predict, "write probability map and mask for one image"),
    "params": ([
        Opt("variant", "str", required=True),
        Opt("channels", "ints", _CHANNELS_DEFAULT),
        Opt("input_size", "size", (192, 192)),
        Opt("dilations", "ints", None),
    ], _cmd_params, "per-layer parameter census"),
    "gradcheck": ([
        Opt("variant", "str", required=True),
        Opt("eps", "float", 1e-5, help="finite-difference step"),
    ], _cmd_gradcheck, "verify analytic gradients by finite differences"),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="lmnet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (opts, _, blurb) in _COMMANDS.items():
        p = sub.add_parser(name, help=blurb, description=blurb)
        p.add_argument("--config", default=None,
                       help="key=value file supplying flag defaults")
        for opt in opts:
            flag = "--" + opt.name.replace("_", "-")
            if opt.kind == "flag":
                p.add_argument(flag, dest=opt.name, nargs="?", const="true",
                               default=_UNSET, metavar="BOOL")
            else:
                p.add_argument(flag, dest=opt.name, default=_UNSET)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("LMNET_THREADS")
    if not cap:
        return
    try:
        n = int(cap)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"LMNET_THREADS must be a positive integer, got {cap!r}") from None
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = _build_parser().parse_args(argv)
        opts, handler, _ = _COMMANDS[args.command]
        resolved = _resolve(opts, args)
        _echo(args.command, resolved)
        return int(handler(resolved) or 0)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LmnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
