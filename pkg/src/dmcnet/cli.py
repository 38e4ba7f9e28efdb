"""Command-line entry point: ``dmcnet <subcommand> [options]``.

Every subcommand takes ``--seed``, ``--config`` and ``--out``. A config is a
JSON object whose keys are option names (``patch_size``, ``overlap`` ...);
values given on the command line win over the file. Relative paths inside a
config resolve against the config file's directory.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed input,
failed checks), 2 internal error.
"""

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigurationError, DataError, DmcError

PATH_KEYS = ("manifest", "checkpoint", "resume", "a", "b", "out")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="JSON file of option defaults")
    p.add_argument("--out", type=Path, default=None, help="output file or directory")


def build_parser():
    parser = _Parser(prog="dmcnet", description="DMC-Net segmentation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a phantom dataset and manifest")
    _common(p)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, nargs="+", default=[48, 48, 32])
    p.add_argument("--spacing", type=float, nargs="+", default=None)
    p.add_argument("--tumor", action="store_true", help="add a class-2 blob inside each organ")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a run config; writes checkpoint and log")
    _common(p)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs")
    p.set_defaults(func=cmd_train, network=None, run=None, preprocess=None)

    p = sub.add_parser("eval", help="sliding-window evaluation of a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--patch-size", type=int, nargs="+", default=None)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--folds", type=int, default=0, help="assign cases to k folds (0: off)")
    p.add_argument("--target-spacing", type=float, nargs="+", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("complexity", help="parameter and FLOP report")
    _common(p)
    p.add_argument("--rank", choices=["2", "3", "all"], default="all")
    p.add_argument("--grid", choices=["ablation"], default=None, help="report the ablation grid")
    p.add_argument("--variant", default="dmc", help="single-network report when no --grid")
    p.add_argument("--geometry", type=int, nargs="+", default=None)
    p.add_argument("--convention", choices=["2mac", "mac-out"], default="2mac")
    p.add_argument("--no-norm", action="store_true", help="leave norm layers out of FLOPs")
    p.set_defaults(func=cmd_complexity, network=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--tiny", action="store_true",
                   help="sample 6 coordinates per tensor for the end-to-end network")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="paired Wilcoxon signed-rank test on two metrics files")
    _common(p)
    p.add_argument("--a", type=Path, default=None, help="metrics JSON of method A")
    p.add_argument("--b", type=Path, default=None, help="metrics JSON of method B")
    p.add_argument("--metric", choices=["dsc", "hd95"], default="dsc")
    p.add_argument("--class-id", type=int, default=1)
    p.set_defaults(func=cmd_stats)
    return parser


def _read_json(path, what):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"{what} not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path}: malformed JSON at offset {err.pos}: {err.msg}") from None


def _explicit_dests(parser, command, argv):
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    dests = set()
    for action in sub.choices[command]._actions:
        for flag in action.option_strings:
            if any(tok == flag or tok.startswith(flag + "=") for tok in argv):
                dests.add(action.dest)
    return dests


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    cfg = _read_json(args.config, "config file")
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{args.config}: config must be a JSON object")
    known = {k for k in vars(args) if k not in ("func", "command", "config")}
    unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
    if unknown:
        raise ConfigurationError(f"{args.config}: unknown config keys {unknown}")
    base = args.config.parent
    explicit = _explicit_dests(parser, args.command, argv)
    for key, value in cfg.items():
        key = key.replace("-", "_")
        if key in explicit:
            continue
        if key in PATH_KEYS and value is not None:
            value = base / value
        setattr(args, key, value)
    return args


def _seed(args):
    return 0 if args.seed is None else int(args.seed)


def _require(args, name):
    if getattr(args, name) is None:
        raise ConfigurationError(f"--{name.replace('_', '-')} is required (flag or config key)")
    return getattr(args, name)


def _emit(args, payload, default_name=None):
    """Write JSON to ``--out`` if given, else print it."""
    text = io.dumps_json(payload)
    if args.out is None:
        sys.stdout.write(text)
        return
    target = args.out
    if default_name and (target.is_dir() or not target.suffix):
        target = target / default_name
    io.atomic_write(target, text)
    print(f"wrote {target}")


# -- subcommands ----------------------------------------------------------------------


def cmd_synth(args):
    from .phantom import synth_phantom

    out = Path(_require(args, "out"))
    size = tuple(args.size)
    spacing = tuple(args.spacing) if args.spacing else (1.0,) * len(size)
    if args.count < 1:
        raise ConfigurationError("--count must be positive")
    cases = []
    for i in range(args.count):
        sample = synth_phantom(_seed(args) + i, size=size, spacing=spacing, with_tumor=args.tumor)
        cid = sample.case_id
        io.write_volume(out / "images" / f"{cid}.json", sample.image, sample.spacing)
        io.write_volume(out / "labels" / f"{cid}.json", sample.label, sample.spacing, dtype="u8")
        cases.append({"case_id": cid, "image": f"images/{cid}.json", "label": f"labels/{cid}.json"})
    io.write_manifest(out / "manifest.json", cases, 3 if args.tumor else 2,
                      provenance=f"synthetic phantoms, seeds {_seed(args)}..{_seed(args) + args.count - 1}")
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def _load_cases(manifest, target_spacing=None):
    from .training import PreprocessConfig, preprocess_case

    doc, samples = io.load_dataset(manifest)
    cfg = PreprocessConfig(target_spacing=tuple(target_spacing) if target_spacing else None)
    return doc, [preprocess_case(s, cfg) for s in samples]


def cmd_train(args):
    from .networks import NetworkSpec, build_network
    from .training import RunConfig, train

    manifest = _require(args, "manifest")
    out = Path(_require(args, "out"))
    net = dict(args.network or {})
    run = dict(args.run or {})
    if args.seed is not None:
        net["seed"] = run["seed"] = args.seed
    pre = dict(args.preprocess or {})
    unknown = set(pre) - {"target_spacing"}
    if unknown:
        raise ConfigurationError(f"unknown preprocess keys {sorted(unknown)}")
    doc, samples = _load_cases(manifest, pre.get("target_spacing"))
    net.setdefault("rank", samples[0].image.ndim)
    net.setdefault("num_classes", doc["num_classes"])
    spec = NetworkSpec.from_dict(net)
    cfg = RunConfig.from_dict(run)
    model = build_network(spec)
    resolved = {"network": spec.to_dict(), "run": cfg.to_dict(), "preprocess": pre,
                "manifest": str(manifest)}
    io.atomic_write(out / "run.json", io.dumps_json(resolved))
    result = train(model, samples, cfg, out_dir=out, resume=args.resume, stop_after=args.stop_after)
    last = result.log[-1] if result.log else {}
    print(f"trained to epoch {last.get('epoch', -1) + 1}: loss {last.get('loss', float('nan')):.6f}"
          f" train_dsc {last.get('train_dsc', float('nan')):.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args):
    from .metrics import evaluate, kfold_split, summary
    from .networks import NetworkSpec, build_network

    ck = io.load_checkpoint(_require(args, "checkpoint"))
    spec = NetworkSpec.from_dict(ck.spec)
    model = build_network(spec)
    io.apply_params(model, ck.params)
    doc, cases = _load_cases(_require(args, "manifest"), args.target_spacing)
    if doc["num_classes"] != spec.num_classes:
        raise DataError(f"manifest has {doc['num_classes']} classes, network predicts {spec.num_classes}")
    patch = args.patch_size or ck.extra.get("run_config", {}).get("patch_size")
    if patch is None:
        raise ConfigurationError("--patch-size is required when the checkpoint carries no run config")
    folds = kfold_split([c.case_id for c in cases], args.folds, _seed(args)) if args.folds else None
    records = evaluate(model, cases, tuple(patch), overlap=args.overlap, folds=folds)
    lines = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)
    report = {
        "checkpoint": str(args.checkpoint),
        "patch_size": list(patch),
        "overlap": args.overlap,
        "cases": len(records),
        "summary": summary(records),
    }
    if args.out is None:
        sys.stdout.write(lines)
        sys.stdout.write(io.dumps_json(report))
        return 0
    io.atomic_write(args.out / "metrics.jsonl", lines)
    io.atomic_write(args.out / "summary.json", io.dumps_json(report))
    print(f"wrote {args.out / 'metrics.jsonl'} and {args.out / 'summary.json'}")
    return 0


def cmd_complexity(args):
    from .complexity import ABLATION_GEOMETRY, complexity_report, format_table, ablation_grid
    from .networks import NetworkSpec

    ranks = (2, 3) if args.rank == "all" else (int(args.rank),)
    include_norm = not args.no_norm
    if args.grid == "ablation":
        grid = ablation_grid(ranks, args.geometry, args.convention, include_norm)
        print(format_table(grid))
        if args.out is not None:
            io.atomic_write(args.out, io.dumps_json(grid))
        return 0
    if len(ranks) != 1 and args.network is None:
        raise ConfigurationError("a single-network report needs --rank 2 or --rank 3")
    net = dict(args.network or {"rank": ranks[0], "variant": args.variant})
    spec = NetworkSpec.from_dict(net)
    geometry = tuple(args.geometry) if args.geometry else ABLATION_GEOMETRY[spec.rank]
    rep = complexity_report(spec, geometry, convention=args.convention, include_norm=include_norm)
    tot = rep.totals
    print(f"{spec.variant} rank {spec.rank} at {'x'.join(map(str, geometry))}: "
          f"{tot['params'] / 1e6:.2f} M params, {tot['flops'] / 1e9:.2f} GFLOPs ({rep.convention_text()})")
    if args.out is not None:
        io.atomic_write(args.out, io.dumps_json(rep.to_dict()))
    return 0


def cmd_gradcheck(args):
    from .checks import run_suite

    results = run_suite(_seed(args), quick=args.tiny)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out is not None:
        rows = [{"name": r.name, "passed": bool(r.passed), "max_rel_err": float(r.error),
                 "tol": r.tol, "checked": int(r.checked), "kinks": int(r.kinks),
                 "normwise": None if r.normwise is None else float(r.normwise)} for r in results]
        io.atomic_write(args.out, io.dumps_json({"seed": _seed(args), "checks": rows}))
    return 1 if failed else 0


def _read_records(path):
    """Records of a ``metrics.jsonl`` file written by ``eval``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"metrics file not found: {path}") from None
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as err:
            raise DataError(f"{path}:{lineno}: malformed record: {err.msg}") from None
    return records


def _metric_values(records, metric, class_id):
    out = {}
    for rec in records:
        value = rec.get(metric, {}).get(str(class_id))
        if value is not None:
            out[rec["case_id"]] = float(value)
    return out


def cmd_stats(args):
    from .metrics import wilcoxon_signed_rank

    a = _metric_values(_read_records(_require(args, "a")), args.metric, args.class_id)
    b = _metric_values(_read_records(_require(args, "b")), args.metric, args.class_id)
    shared = sorted(set(a) & set(b))
    if not shared:
        raise DataError("the two metrics files share no cases with defined values")
    va = np.array([a[c] for c in shared])
    vb = np.array([b[c] for c in shared])
    res = wilcoxon_signed_rank(va, vb)
    payload = {
        "metric": args.metric,
        "class_id": args.class_id,
        "cases": shared,
        "mean_a": float(va.mean()),
        "mean_b": float(vb.mean()),
        "wilcoxon": res.to_dict(),
    }
    _emit(args, payload, "stats.json")
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except (DmcError, FileNotFoundError) as exc:
        print(f"dmcnet: error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        print("dmcnet: internal error", file=sys.stderr)
        return 2


def run_cli(argv):
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
