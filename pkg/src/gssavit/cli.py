"""Command-line interface: ``gssavit {synth,train,render,eval,baseline,gradcheck}``.

Exit codes: 0 success, 2 usage or validation error, 3 I/O or file-format
error, 4 numerical divergence, 5 failed gradient verification.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines
(``#`` starts a comment).  Keys are the long option names with dashes or
underscores; explicit flags override file values and unknown keys are errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import _accel
from .errors import DivergenceError, FormatError, GridMismatchError, GssaError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_VERIFY = 5

REQUIRED = {
    "synth": ["out"],
    "train": ["data", "ckpt"],
    "render": ["ckpt", "input", "out"],
    "eval": ["pred", "ref", "out"],
    "baseline": ["input", "target_grid", "out"],
    "gradcheck": [],
}


class UsageError(GssaError, ValueError):
    """Invalid command-line or config-file input."""


def grid_shape(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 2 or w < 2:
        raise argparse.ArgumentTypeError(f"grid needs at least 2x2, got {text!r}")
    return (h, w)


def ratio_list(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ratios, got {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"ratios must be positive, got {text!r}")
    return vals


def positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key = value defaults")
    p.add_argument("--threads", type=int, default=0, help="worker threads for compiled kernels (1 = deterministic path)")


def build_parser():
    parser = argparse.ArgumentParser(prog="gssavit", description="Gaussian-splatting field downscaling and forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["synth"] = sub.add_parser("synth", help="write a synthetic GSF field stack")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=grid_shape, default=(65, 128))
    p.add_argument("--vars", type=int, default=3)
    p.add_argument("--times", type=int, default=100)
    p.add_argument("--modes", type=int, default=6)
    p.add_argument("--out")

    p = subs["train"] = sub.add_parser("train", help="train a model on a GSF file")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--mode", choices=("downscale", "forecast"), default="downscale")
    p.add_argument("--anchor", type=grid_shape, default=(33, 64))
    p.add_argument("--ratios", type=ratio_list, default=(2.0, 4.0))
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt")
    p.add_argument("--finetune-rollout", type=int, default=0, metavar="R",
                   help="after training, fine-tune on R-step unrolled rollouts")
    p.add_argument("--finetune-iters", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-final", type=float, default=1e-6)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--precision", choices=("single", "double"), default="double")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--window", type=grid_shape, default=None, help="attention window HxW (default: fitted to the anchor)")
    p.add_argument("--head-mode", choices=("two-heads", "one-head"), default="two-heads")
    p.add_argument("--layout", choices=("grid", "pool2", "upsample2"), default="grid")
    p.add_argument("--fixed-gaussian-params", action="store_true")
    p.add_argument("--learnable-positions", action="store_true")

    p = subs["render"] = sub.add_parser("render", help="render a checkpoint's prediction at any ratio")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--input")
    p.add_argument("--time", type=int, default=0)
    p.add_argument("--ratio", type=positive_float, default=1.0)
    p.add_argument("--cutoff", type=positive_float, default=3.0, help="Mahalanobis culling radius")
    p.add_argument("--out")

    p = subs["eval"] = sub.add_parser("eval", help="LRMSE / Pearson / mean-bias report")
    _common(p)
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--out")

    p = subs["baseline"] = sub.add_parser("baseline", help="interpolate a GSF file onto another grid")
    _common(p)
    p.add_argument("--method", choices=("bilinear", "bicubic"), default="bilinear")
    p.add_argument("--input")
    p.add_argument("--target-grid", type=grid_shape)
    p.add_argument("--out")

    p = subs["gradcheck"] = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(p)
    p.add_argument("--full", action="store_true", help="add renderer, end-to-end and unrolled-rollout suites")
    return parser, subs


# config files ------------------------------------------------------------

def read_config_file(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(sub: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    defaults = {}
    for k, v in values.items():
        a = actions[k]
        if a.nargs == 0:  # store_true flags
            if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {k!r} expects a boolean, got {v!r}")
            defaults[k] = v.lower() in ("true", "1", "yes")
        else:
            if a.choices is not None and v not in a.choices:
                raise UsageError(f"config key {k!r}: {v!r} not in {list(a.choices)}")
            try:
                defaults[k] = a.type(v) if a.type else v
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {k!r}: {exc}") from None
    sub.set_defaults(**defaults)


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        _apply_config(subs[args.command], values)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        subs[args.command].print_usage(sys.stderr)
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return args


# commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import SyntheticConfig, synth_fields, write_gsf
    from .grid import build_grid

    if args.vars < 1 or args.times < 1 or args.modes < 1:
        raise UsageError("--vars, --times and --modes must be positive")
    grid = build_grid(*args.grid)
    data = synth_fields(SyntheticConfig(seed=args.seed, n_modes=args.modes), grid, args.vars, args.times)
    write_gsf(args.out, data, grid, [f"var{i}" for i in range(args.vars)])
    print(f"wrote {args.out}: {args.times} times x {args.vars} vars on {grid.n_lat}x{grid.n_lon}")
    return EXIT_OK


def fit_window(shape: tuple, target: tuple = (4, 8)) -> tuple:
    """Largest window no bigger than ``target`` that tiles ``shape`` exactly."""
    return tuple(max(d for d in range(1, min(t, n) + 1) if n % d == 0) for n, t in zip(shape, target))


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import read_gsf
    from .grid import build_grid
    from .model import ModelConfig
    from .train import FieldDataset, TrainConfig, finetune_rollout, train

    gsf = read_gsf(args.data)
    anchor = build_grid(*args.anchor)
    token_shape = (anchor.n_lat, anchor.n_lon // 2) if args.layout == "pool2" else anchor.shape
    window = args.window or fit_window(token_shape)
    mcfg = ModelConfig(n_vars=gsf.n_vars, anchor=anchor.shape, embed_dim=args.embed_dim, layers=args.layers,
                       heads=args.heads, window=window, head_mode=args.head_mode, layout=args.layout,
                       fixed_gaussian_params=args.fixed_gaussian_params,
                       learnable_positions=args.learnable_positions)
    tcfg = TrainConfig(mode=args.mode, iters=args.iters, lr_init=args.lr, lr_final=args.lr_final,
                       weight_decay=args.weight_decay, batch=args.batch, ratio_set=args.ratios, seed=args.seed,
                       precision=args.precision, checkpoint_every=args.checkpoint_every)
    ds = FieldDataset(gsf.data, gsf.grid, anchor, gsf.names)
    horizon = 1 if args.mode == "forecast" else 0
    if len(ds.times("train", max(horizon, args.finetune_rollout))) == 0:
        from .errors import DatasetTooShortError

        raise DatasetTooShortError(f"{args.data}: too few training times for mode {args.mode}")
    log = f"{args.ckpt}.log"
    res = train(ds, mcfg, tcfg, log_path=log, ckpt_path=args.ckpt)
    print(f"trained {args.iters} steps; final loss {res.losses[-1]:.6g}; checkpoint {args.ckpt}; log {log}")
    if args.finetune_rollout:
        ft = TrainConfig(**{**tcfg.to_dict(), "iters": args.finetune_iters, "rollout_steps": args.finetune_rollout})
        res = finetune_rollout(load_checkpoint(args.ckpt), ds, ft, log_path=f"{args.ckpt}.finetune.log")
        save_checkpoint(res.checkpoint, args.ckpt)
        print(f"fine-tuned {args.finetune_iters} steps on {args.finetune_rollout}-step rollouts; "
              f"final loss {res.losses[-1]:.6g}")
    return EXIT_OK


def cmd_render(args) -> int:
    from . import autodiff as ad
    from .checkpoint import load_checkpoint
    from .data import denormalize, normalize, read_gsf, write_gsf
    from .grid import refined_grid
    from .render import RenderConfig
    from .train import load_model, render_sample

    model, params, stats = load_model(load_checkpoint(args.ckpt))
    gsf = read_gsf(args.input)
    anchor = model.cfg.anchor_grid
    if gsf.grid != anchor or gsf.n_vars != model.cfg.n_vars:
        raise GridMismatchError(f"input {gsf.n_vars} vars on {gsf.grid.n_lat}x{gsf.grid.n_lon} does not match "
                                f"checkpoint anchor {anchor.n_lat}x{anchor.n_lon} with {model.cfg.n_vars} vars")
    if not 0 <= args.time < gsf.n_time:
        raise UsageError(f"--time {args.time} outside [0, {gsf.n_time})")
    target = refined_grid(anchor, args.ratio)
    print(f"target grid: {target.n_lat}x{target.n_lon} (ratio {args.ratio:g})")
    x = gsf.data[args.time].astype(np.float64)
    if stats is not None:
        x = normalize(x, stats, clamp=True)
    dtype = next(iter(params.values())).dtype
    dec = model.forward(x[None].astype(dtype), [args.ratio], {k: ad.Tensor(v) for k, v in params.items()})
    out = render_sample(dec, 0, target, RenderConfig(args.cutoff)).data.astype(np.float64)
    if stats is not None:
        out = denormalize(out, stats)
    write_gsf(args.out, out[None], target, gsf.names)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import read_gsf
    from .metrics import evaluate

    pred, ref = read_gsf(args.pred), read_gsf(args.ref)
    if pred.grid != ref.grid or pred.n_vars != ref.n_vars or pred.n_time != ref.n_time:
        raise GridMismatchError(f"pred {pred.data.shape} and ref {ref.data.shape} are not aligned")
    preds = [pred.field(t) for t in range(pred.n_time)]
    refs = [ref.field(t) for t in range(ref.n_time)]
    report = evaluate(preds, refs, names=ref.names)
    text = report.to_text()
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .data import read_gsf, write_gsf
    from .grid import bicubic_interp, bilinear_interp, build_grid

    gsf = read_gsf(args.input)
    dst = build_grid(*args.target_grid)
    interp = bilinear_interp if args.method == "bilinear" else bicubic_interp
    out = np.stack([interp(gsf.field(t), dst).values for t in range(gsf.n_time)])
    write_gsf(args.out, out, dst, gsf.names)
    print(f"wrote {args.out}: {args.method} onto {dst.n_lat}x{dst.n_lon}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_suites

    failed = []
    for suite, reports in run_suites(full=args.full):
        worst = max(reports, key=lambda r: r.max_rel_err / r.tol)
        state = "ok" if all(r.passed for r in reports) else "FAIL"
        print(f"{suite:<12} max rel err {max(r.max_rel_err for r in reports):.3e} (tol {worst.tol:.0e}) {state}")
        failed += [(suite, r) for r in reports if not r.passed]
    for suite, r in failed:
        print(f"gradcheck failed: {suite}/{r.name}: rel err {r.max_rel_err:.3e} at input {r.worst_input} "
              f"coordinate {r.worst_index} (analytic {r.analytic:.6e}, numeric {r.numeric:.6e})", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "baseline": cmd_baseline, "gradcheck": cmd_gradcheck}


def main(argv: Optional[list] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse reports its own usage errors
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.threads:
        _accel.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GssaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
