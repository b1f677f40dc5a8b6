"""Command-line entry point: ``bitta <subcommand> [--config FILE] [flags]``.

Settings resolve as flag > ``BITTA_OUTPUT_DIR`` (output directory only) >
config file > built-in default. The config file is JSON with one object per
subcommand, keyed by option name, e.g. ``{"adapt": {"mode": "priors", "lr":
0.0002}}``. Every run prints its effective configuration to stderr as one
line in that same format, so ``--config`` on the dump reproduces the run.

Pipeline files (``--input``, ``--out``, ``--checkpoint``, ``--target``) given
as bare file names live in the output directory, so the default chain
gen -> shift -> pretrain -> adapt needs no paths beyond ``--source``. Names
with a directory part are used as given. ``adapt`` writes to
``<output dir>/<mode>`` and ``ablate`` to ``<output dir>/ablation``.

Exit status: 0 on success, 2 for usage or configuration errors, 1 for
failures while running.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .adapter import AdapterConfig
from .fileformat import FormatError, read_header
from .harness import MODES, PretrainConfig, RunConfig
from .net import NetworkConfig, load_checkpoint, save_checkpoint
from .priors import PriorConfig
from .synth import DomainShift, StreamParams, generate_stream, read_stream, shift_stream, write_stream

ENV_OUTPUT_DIR = "BITTA_OUTPUT_DIR"
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _floats(text):
    items = text if isinstance(text, list) else str(text).split(",")
    return [float(x) for x in items if str(x).strip()]


def _ints(text):
    items = text if isinstance(text, list) else str(text).split(",")
    return [int(x) for x in items if str(x).strip()]


def _defaults(cls, skip=()):
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in skip}


def _typed(defaults, overrides=None):
    """(name, default, converter) rows; the converter follows the default's type."""
    overrides = overrides or {}
    rows = []
    for name, default in defaults.items():
        if name in overrides:
            conv = overrides[name]
        elif isinstance(default, bool):
            conv = _bool
        elif isinstance(default, int):
            conv = int
        elif isinstance(default, float) or default is None:
            conv = float
        elif isinstance(default, (tuple, list)):
            conv = _floats
        else:
            conv = str
        rows.append((name, list(default) if isinstance(default, tuple) else default, conv))
    return rows


def _bool(text):
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list_of(conv):
    def parse(v):
        return [conv(x) for x in v] if isinstance(v, list) else [conv(v)]
    parse.is_list = True
    return parse


ADAPTER_OPTS = _typed(_defaults(AdapterConfig, skip=("use_pa", "use_rs")))
PRIOR_OPTS = _typed(_defaults(PriorConfig))
# stride 0 means a quarter of the window
RUN_OPTS = [("checkpoint", "model.ckpt", str), ("target", "shifted.bin", str), ("stride", 0, int), ("seed", 0, int)]

OPTIONS = {
    "gen": [("seed", 0, int)] + _typed(_defaults(StreamParams)) + [("out", "stream.bin", str)],
    "shift": [("input", "stream.bin", str), ("seed", 0, int)] + _typed(_defaults(DomainShift))
    + [("out", "shifted.bin", str)],
    "pretrain": [("sources", [], _list_of(str)), ("window", 128, int), ("spatial", 16, int),
                 ("stem_channels", NetworkConfig().stem_channels, int),
                 ("widths", list(NetworkConfig().channels), _ints), ("norm", True, _bool)]
    + _typed(_defaults(PretrainConfig)) + [("out", "model.ckpt", str)],
    "adapt": [("mode", "bi-tta", str)] + RUN_OPTS + ADAPTER_OPTS + PRIOR_OPTS,
    "ablate": [("modes", list(MODES), _list_of(str)), ("workers", 1, int)] + RUN_OPTS + ADAPTER_OPTS + PRIOR_OPTS,
    "eval": [("records", [], _list_of(str))] + RUN_OPTS + [("delta_max", PriorConfig().delta_max, int)],
    "inspect": [("files", [], _list_of(str))],
}
HELP = {
    "gen": "generate a synthetic stream",
    "shift": "apply a domain shift to a stream",
    "pretrain": "supervised source pre-training",
    "adapt": "predict-then-adapt on a target stream",
    "ablate": "run several modes on one checkpoint and stream",
    "eval": "metrics of recorded runs, or of a checkpoint without adaptation",
    "inspect": "print file headers",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bitta", description="Bidirectional test-time adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--output-dir", help=f"output directory (env {ENV_OUTPUT_DIR})")
        for opt, default, conv in opts:
            if name == "inspect" and opt == "files":
                p.add_argument("files", nargs="*", help="stream, checkpoint or state files")
                continue
            flag = "--" + opt.replace("_", "-")
            if getattr(conv, "is_list", False):
                p.add_argument(flag, dest=opt, action="append", help=f"repeatable (default {default})")
            else:
                p.add_argument(flag, dest=opt, help=f"default {default}")
    return parser


def _load_file(path, command):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = set(data) - set(OPTIONS)
    if unknown:
        raise UsageError(f"config {path}: unknown section(s) {sorted(unknown)}")
    section = data.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"config {path}: section {command!r} must be an object")
    return section


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file, environment and flags into one dict."""
    opts = OPTIONS[command]
    names = {o[0] for o in opts} | {"output_dir"}
    file_vals = _load_file(args.config, command)
    bad = set(file_vals) - names
    if bad:
        raise UsageError(f"unknown option(s) in config: {sorted(bad)}")
    eff = {"output_dir": file_vals.get("output_dir", "runs")}
    if os.environ.get(ENV_OUTPUT_DIR):
        eff["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    if args.output_dir is not None:
        eff["output_dir"] = args.output_dir
    for opt, default, conv in opts:
        value = default
        for source, raw in (("config", file_vals.get(opt, _MISSING)), ("flag", getattr(args, opt, None))):
            if raw is _MISSING or (source == "flag" and raw in (None, [])):
                continue
            try:
                value = None if raw is None or raw == "none" else conv(raw)
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {opt}: {raw!r}") from None
        eff[opt] = value
    return eff


_MISSING = object()


def _path(eff, key) -> Path:
    name = str(eff[key])
    return Path(eff["output_dir"]) / name if "/" not in name and os.sep not in name else Path(name)


def _pick(eff, cls):
    return {f.name: eff[f.name] for f in fields(cls) if f.name in eff}


def _run_config(eff, mode, window, spatial, net_config):
    prior = PriorConfig(**_pick(eff, PriorConfig)) if "lambda_s" in eff else PriorConfig(delta_max=eff["delta_max"])
    adapter = AdapterConfig(**_pick(eff, AdapterConfig)) if "lr" in eff else AdapterConfig()
    return RunConfig(mode=mode, target_stream=eff["target"], checkpoint=eff["checkpoint"], output_dir=eff["output_dir"],
                     window=window, spatial=spatial, stride=eff["stride"] or None, seed=eff["seed"],
                     net=net_config, prior=prior, adapter=adapter)


def _print_summary(summary: dict):
    sys.stdout.write(harness.format_summary(summary))


# --- subcommands -----------------------------------------------------------


def cmd_gen(eff):
    params = StreamParams(**_pick(eff, StreamParams))
    params.validate()
    return lambda: _gen(params, eff)


def _gen(params, eff):
    manifest, data = generate_stream(params, eff["seed"])
    path = _path(eff, "out")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_stream(path, manifest, data)
    print(f"wrote {path}: {data.shape[0]} frames x {data.shape[1]} regions x {data.shape[2]} channels, "
          f"HR {manifest.hr_trace.min():.1f}-{manifest.hr_trace.max():.1f} bpm")


def cmd_shift(eff):
    shift = DomainShift(**_pick(eff, DomainShift))

    def run():
        manifest, data = read_stream(_path(eff, "input"))
        if len(shift.gain) != manifest.channels:
            raise ValueError(f"shift has {len(shift.gain)} channel gains, stream has {manifest.channels} channels")
        m2, d2 = shift_stream(manifest, data, shift, eff["seed"])
        path = _path(eff, "out")
        path.parent.mkdir(parents=True, exist_ok=True)
        write_stream(path, m2, d2)
        print(f"wrote {path}")

    return run


def cmd_pretrain(eff):
    if not eff["sources"]:
        raise UsageError("pretrain needs at least one --source")
    pcfg = PretrainConfig(**_pick(eff, PretrainConfig))

    def run():
        streams = [read_stream(p) for p in eff["sources"]]
        widths = tuple(eff["widths"])
        net_config = NetworkConfig(input_shape=(eff["window"], eff["spatial"], streams[0][0].channels),
                                   stem_channels=eff["stem_channels"], channels=widths,
                                   pool=((2, 2),) * len(widths), norm=eff["norm"])
        params, report = harness.pretrain_on(streams, net_config, pcfg, eff["window"], eff["spatial"])
        path = _path(eff, "out")
        path.parent.mkdir(parents=True, exist_ok=True)
        note = json.dumps({"pretrain": _pick(eff, PretrainConfig), "sources": eff["sources"], **report}, sort_keys=True)
        save_checkpoint(path, params, net_config, note)
        print(f"wrote {path}: {report['steps']} steps, MAE {report['first_mae']:.2f} -> {report['last_mae']:.2f}")

    return run


def _load_run(eff, mode):
    params, net_config = load_checkpoint(_path(eff, "checkpoint"))
    manifest, data = read_stream(_path(eff, "target"))
    h, w, _ = net_config.input_shape
    cfg = _run_config(eff, mode, h, w, net_config)
    cfg.checkpoint, cfg.target_stream = str(_path(eff, "checkpoint")), str(_path(eff, "target"))
    return params, net_config, manifest, data, cfg


def cmd_adapt(eff):
    if eff["mode"] not in MODES:
        raise UsageError(f"unknown mode {eff['mode']!r}; expected one of {', '.join(MODES)}")
    _run_config(eff, eff["mode"], 128, 16, NetworkConfig())  # validate before loading anything

    def run():
        params, net_config, manifest, data, cfg = _load_run(eff, eff["mode"])
        timeline, _ = harness.run_tta_on(params, net_config, manifest, data, cfg)
        out = Path(cfg.output_dir) / eff["mode"].replace("+", "_")
        _print_summary(harness.write_outputs(timeline, out, harness.replace(cfg, output_dir=str(out))))

    return run


def cmd_ablate(eff):
    bad = [m for m in eff["modes"] if m not in MODES]
    if bad:
        raise UsageError(f"unknown mode(s) {bad}")
    _run_config(eff, "bi-tta", 128, 16, NetworkConfig())

    def run():
        params, net_config, manifest, data, cfg = _load_run(eff, "bi-tta")
        timelines = harness.ablate_on(params, net_config, manifest, data, cfg, tuple(eff["modes"]), eff["workers"])
        out = Path(cfg.output_dir) / "ablation"
        cfg = harness.replace(cfg, output_dir=str(out))
        for mode, tl in timelines.items():
            harness.write_outputs(tl, out / mode.replace("+", "_"), harness.replace(cfg, mode=mode))
        table = harness.ablation_table(timelines)
        (out / "ablation.csv").write_text(table)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
        harness.plot_curves(timelines, out / "rolling_mae.svg")
        sys.stdout.write(table)

    return run


def cmd_eval(eff):
    def run():
        if eff["records"]:
            for path in eff["records"]:
                tl = harness.MetricsTimeline.from_csv(Path(path).read_text(), mode=str(path))
                if not tl.records:
                    raise ValueError(f"{path}: no records")
                _print_summary({k: v for k, v in tl.summary().items() if not k.startswith("branch_")})
            return
        params, net_config, manifest, data, cfg = _load_run(eff, "no-adapt")
        timeline, _ = harness.run_tta_on(params, net_config, manifest, data, cfg)
        _print_summary({k: v for k, v in timeline.summary().items() if not k.startswith("branch_")})

    return run


def cmd_inspect(eff):
    if not eff["files"]:
        raise UsageError("inspect needs at least one file")

    def run():
        for path in eff["files"]:
            header, _ = read_header(path)
            manifest = header.get("manifest")
            if isinstance(manifest, dict) and isinstance(manifest.get("hr_trace"), list):
                tr = manifest["hr_trace"]
                manifest["hr_trace"] = {"length": len(tr), "min": min(tr, default=None), "max": max(tr, default=None)}
            print(json.dumps({"file": str(path), **header}, sort_keys=True))

    return run


COMMANDS = {
    "gen": cmd_gen, "shift": cmd_shift, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
    "ablate": cmd_ablate, "eval": cmd_eval, "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        eff = resolve(args.command, args)
        try:
            run = COMMANDS[args.command](eff)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    except UsageError as exc:
        print(f"bitta: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps({args.command: eff}, sort_keys=True), file=sys.stderr)
    try:
        run()
    except (FormatError, OSError, ValueError, FloatingPointError) as exc:
        msg = f"{exc.strerror}: {exc.filename}" if isinstance(exc, OSError) and exc.strerror else str(exc)
        print(f"bitta: error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
