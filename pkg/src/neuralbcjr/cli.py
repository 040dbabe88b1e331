"""Command-line entry point: ``neuralbcjr <subcommand> ...``.

Every subcommand writes only into its output directory and echoes the
effective configuration to ``effective_config.json`` there.  Exit codes:
0 success, 2 configuration error, 3 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .analysis import (
    DEFAULT_THRESHOLD,
    active_streams,
    detect_frozen_outputs,
    estimate_memory,
    flip_energy,
    grad_energy,
    profile_to_csv,
    split_inner_streams,
)
from .cnn import CnnEncoder, WeightFileError, load_weights, random_model, save_weights
from .codes import Interleaver, InvalidInputError, MultiStreamEncoder, load_code_spec
from .sim import RepetitionLink, TurboLink, UncodedLink, run_monte_carlo, snr_to_sigma2
from .system import (
    G0_TAPS,
    G1_TAPS,
    Receiver,
    ReceiverConfig,
    SerialCode,
    load_desk_model,
    outer_code,
)
from .trellis import (
    TrellisTooLargeError,
    build_from_cnn,
    build_from_polynomial,
    dump_text,
    save_trellis,
)
from .tune import TrainConfig, TrainingDiverged, finetune_encoder, train_inner_from_scratch
from .turbo import trace_to_csv, turbo_decode

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


# Config schema ---------------------------------------------------------------

_INTERLEAVER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["linear", "random", "identity"]},
        "a": {"type": "integer", "minimum": 1},
        "b": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
    },
    "required": ["kind"],
}
_TAPS = {"type": "array", "minItems": 1, "items": {"type": "integer"}}
_WINDOW = {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "integer"}}
_CODE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["desk", "serial", "uncoded", "repetition"]},
        "weights": {"type": "string"},
        "outer_taps": {"type": "array", "minItems": 1, "items": _TAPS},
        "k": {"type": "integer", "minimum": 2},
        "reps": {"type": "integer", "minimum": 1},
        "interleaver": _INTERLEAVER,
    },
    "required": ["kind"],
}
_RECEIVER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "iterations": {"type": "integer", "minimum": 1},
        "mode": {"enum": ["log-map", "max-log"]},
        "wrap": {"type": "integer", "minimum": 0},
        "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "tailbiting": {"enum": ["wrap", "exact"]},
        "windows": {"type": "array", "items": _WINDOW},
        "memory": {"type": "integer", "minimum": 0},
        "threshold": {"type": "number", "exclusiveMinimum": 0},
    },
}
_TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "minimum": 0},
        "optimizer": {"enum": ["adam", "sgd"]},
        "beta1": {"type": "number"},
        "beta2": {"type": "number"},
        "eps": {"type": "number"},
        "momentum": {"type": "number"},
        "snr_db": {"type": "number"},
        "iterations": {"type": "integer", "minimum": 1},
        "updates": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "refresh_period": {"type": "integer", "minimum": 1},
        "mode": {"enum": ["log-map", "max-log"]},
        "wrap": {"type": "integer", "minimum": 0},
        "divergence_factor": {"type": "number", "exclusiveMinimum": 0},
        "divergence_patience": {"type": "integer", "minimum": 1},
        "groups": {"type": "integer", "minimum": 1},
    },
}
_COMMON = {
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "threads": {"type": "integer", "minimum": 1},
}
SCHEMAS = {
    "simulate": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON,
            "code": _CODE,
            "receiver": _RECEIVER,
            "ebn0_db": {"type": "array", "minItems": 1, "items": {"type": "number"}},
            "min_block_errors": {"type": "integer", "minimum": 1},
            "max_blocks": {"type": "integer", "minimum": 1},
            "batch_size": {"type": "integer", "minimum": 1},
            "spc": {"type": "boolean"},
            "emit_plotdata": {"type": "boolean"},
        },
        "required": ["code", "ebn0_db"],
    },
    "decode": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON,
            "code": _CODE,
            "receiver": _RECEIVER,
            "observations": {"type": "string"},
            "ebn0_db": {"type": "number"},
            "sigma2": {"type": "number", "exclusiveMinimum": 0},
        },
        "required": ["code", "observations"],
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON,
            "code": _CODE,
            "receiver": _RECEIVER,
            "train": _TRAIN,
            "init": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "depths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    "kernel_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    "seed": {"type": "integer", "minimum": 0},
                },
            },
            "validation_blocks": {"type": "integer", "minimum": 0},
        },
        "required": ["code"],
    },
}
DEFAULTS = {
    "simulate": {"seed": 0, "min_block_errors": 100, "max_blocks": 100_000,
                 "batch_size": 1000, "spc": False, "emit_plotdata": False},
    "decode": {"seed": 0},
    "train": {"seed": 0, "validation_blocks": 0},
}


def _set_override(doc, assignment):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


def load_config(path, kind, overrides=()):
    """Read, override and validate a JSON run configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for o in overrides:
        _set_override(doc, o)
    try:
        jsonschema.validate(doc, SCHEMAS[kind])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from exc
    snrs = np.atleast_1d(np.asarray(doc.get("ebn0_db", []), dtype=float))
    if not np.all(np.isfinite(snrs)):
        raise ConfigError(f"{path}: ebn0_db: SNR values must be finite")
    out = copy.deepcopy(DEFAULTS[kind])
    out.update(doc)
    return out


# Helpers -----------------------------------------------------------------------


class OutputDir:
    """Writes confined to one directory."""

    def __init__(self, path):
        self.root = Path(path).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def __call__(self, name):
        p = (self.root / name).resolve()
        if p.parent != self.root:
            raise ConfigError(f"refusing to write {name!r} outside {self.root}")
        return p

    def write_json(self, name, obj):
        self(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _interleaver(spec, k):
    spec = spec or {"kind": "linear"}
    if spec["kind"] == "linear":
        return Interleaver.linear(k, spec.get("a"), spec.get("b", 0))
    if spec["kind"] == "random":
        return Interleaver.random(k, spec.get("seed", 0))
    return Interleaver.identity(k)


def _load_model(path):
    try:
        return load_weights(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"weight file not found: {path}") from exc


def build_code(spec):
    kind = spec["kind"]
    k = spec.get("k", 32 if kind == "desk" else 64)
    if kind == "uncoded":
        return UncodedLink(k)
    if kind == "repetition":
        return RepetitionLink(k, spec.get("reps", 2))
    taps = spec.get("outer_taps", [list(G0_TAPS), list(G1_TAPS)])
    if kind == "desk":
        model = _load_model(spec["weights"]) if "weights" in spec else load_desk_model()
    else:
        if "weights" not in spec:
            raise ConfigError("code.weights is required for kind 'serial'")
        model = _load_model(spec["weights"])
    try:
        return SerialCode(outer_code(taps), _interleaver(spec.get("interleaver"), k), model)
    except ValueError as exc:
        raise ConfigError(f"code: {exc}") from exc


def _receiver_config(spec):
    spec = dict(spec or {})
    if "windows" in spec:
        spec["windows"] = tuple(tuple(w) for w in spec["windows"])
    return ReceiverConfig(**spec)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc


# Subcommands -------------------------------------------------------------------


def _encoders_for_analysis(args):
    """Single-input encoders to analyze, as ``(label, encoder, out_depth)``."""
    if args.weights:
        model = _load_model(args.weights)
        enc = CnnEncoder(model, binarize_output=args.binarize)
        if enc.in_depth == 2 and enc.out_depth == 2:
            return [(f"stream{f}", s, 0) for f, s in enumerate(split_inner_streams(enc))], enc
        if enc.in_depth == 1:
            return [(f"depth{d}", enc, d) for d in range(enc.out_depth)], enc
        raise ConfigError("analysis supports 1-input encoders or 2-in/2-out inner encoders")
    if args.code_spec:
        try:
            enc, _ = load_code_spec(args.code_spec)
        except FileNotFoundError as exc:
            raise ConfigError(f"code spec not found: {args.code_spec}") from exc
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc
        if enc is None:
            raise ConfigError("code spec has no encoder")
        streams = enc.streams if isinstance(enc, MultiStreamEncoder) else (enc,)
        items = [(f"stream{f}", s, 0) for f, s in enumerate(streams)]
        if len(streams) > 1:
            items.append(("joint", enc, None))
        return items, enc
    raise ConfigError("give --weights or --code-spec")


def cmd_analyze(args):
    out = OutputDir(args.output_dir)
    items, base = _encoders_for_analysis(args)
    selected = _int_list(args.streams) if args.streams else None
    summary = {"threshold": args.threshold, "mode": args.mode, "streams": {}}
    if args.weights:
        status = detect_frozen_outputs(base, seed=args.seed)
        summary["output_status"] = status
        summary["active_outputs"] = active_streams(status)
    for i, (label, enc, depth) in enumerate(items):
        if selected is not None and i not in selected:
            continue
        flip = flip_energy(enc, depth, mode=args.mode, count=args.samples, seed=args.seed)
        grad = None
        if hasattr(enc, "input_gradient") and depth is not None:
            grad = grad_energy(enc, depth, seed=args.seed)
        prof = estimate_memory(flip, args.threshold, grad)
        profile_to_csv(prof, out(f"profile_{label}.csv"))
        lo, hi = prof.contributing
        summary["streams"][label] = {
            "window": [lo, hi],
            "memory": prof.memory,
            "states": prof.n_states,
            "memoryless": prof.memoryless,
            "bpsk_like": prof.bpsk_like,
            "support": [int(j) for j, e in zip(prof.offsets, prof.flip_values) if e > args.threshold],
        }
    out.write_json("summary.json", summary)
    out.write_json("effective_config.json", vars(args) | {"func": None})
    for label, s in summary["streams"].items():
        print(f"{label}: window {s['window']} memory {s['memory']} states {s['states']}"
              f"{' (scaled BPSK)' if s['bpsk_like'] else ''}")
    return EXIT_OK


def cmd_build_trellis(args):
    out = OutputDir(args.output_dir)
    items, _ = _encoders_for_analysis(args)
    windows = None
    if args.windows:
        windows = [tuple(_int_list(w)) for w in args.windows.split(";")]
    built = {}
    for i, (label, enc, depth) in enumerate(items):
        if args.code_spec:
            tr = build_from_polynomial(enc, args.max_memory)
        else:
            if depth not in (0, None) and enc.out_depth > 1:
                continue
            if windows is not None:
                win = windows[i]
            else:
                prof = estimate_memory(flip_energy(enc, depth), args.threshold)
                win = prof.contributing
            tr = build_from_cnn(enc, win, seed=args.seed, max_memory=args.max_memory,
                                scale=args.scale)
        save_trellis(tr, out(f"trellis_{label}.npz"))
        out(f"trellis_{label}.txt").write_text(dump_text(tr))
        built[label] = {"memory": tr.memory, "states": tr.n_states, "window": [tr.lo, tr.hi]}
        print(f"{label}: {tr.n_states} states, window [{tr.lo}, {tr.hi}]")
    out.write_json("summary.json", built)
    out.write_json("effective_config.json", vars(args) | {"func": None})
    return EXIT_OK


def _sigma2(cfg, rate):
    if "sigma2" in cfg:
        return float(cfg["sigma2"])
    if "ebn0_db" in cfg:
        return float(snr_to_sigma2(cfg["ebn0_db"], rate))
    raise ConfigError("decode needs sigma2 or ebn0_db")


def cmd_decode(args):
    cfg = load_config(args.config, "decode", args.set)
    out = OutputDir(args.output_dir or cfg.get("output_dir", "."))
    code = build_code(cfg["code"])
    if not isinstance(code, SerialCode):
        raise ConfigError("decode needs a serial or desk code")
    try:
        y = np.load(cfg["observations"], allow_pickle=False)
    except FileNotFoundError as exc:
        raise ConfigError(f"observations not found: {cfg['observations']}") from exc
    receiver = Receiver(code, _receiver_config(cfg.get("receiver")))
    sigma2 = _sigma2(cfg, code.rate)
    llr, trace = turbo_decode(receiver.turbo_config(sigma2), receiver.trellises, y)
    llr2 = np.atleast_2d(llr)
    np.save(out("llr.npy"), llr2)
    np.savetxt(out("decisions.csv"), (llr2 < 0).astype(int), fmt="%d", delimiter=",")
    trace_to_csv(trace, out("trace.csv"))
    out.write_json("effective_config.json", cfg | {"sigma2_used": sigma2,
                                                   "windows": receiver.windows})
    return EXIT_OK


def cmd_simulate(args):
    cfg = load_config(args.config, "simulate", args.set)
    out = OutputDir(args.output_dir or cfg.get("output_dir", "."))
    code = build_code(cfg["code"])
    if isinstance(code, SerialCode):
        link = TurboLink(Receiver(code, _receiver_config(cfg.get("receiver"))),
                         spc=cfg["spc"])
    else:
        if cfg["spc"]:
            raise ConfigError("spc post-processing needs a turbo-decoded code")
        link = code
    threads = args.threads or cfg.get("threads") or os.cpu_count() or 1
    report = run_monte_carlo(
        link, cfg["ebn0_db"], seed=cfg["seed"], min_block_errors=cfg["min_block_errors"],
        max_blocks=cfg["max_blocks"], batch_size=cfg["batch_size"], threads=threads,
    )
    report.config["run_config"] = {k: v for k, v in cfg.items() if k != "output_dir"}
    report.to_csv(out("sim.csv"))
    if cfg["emit_plotdata"] or args.emit_plotdata:
        report.to_plotdata(out("sim.dat"))
    out.write_json("effective_config.json", cfg | {"config_hash": report.config_hash})
    for row in report.rows():
        print(f"{row['variant']:>6} Eb/N0 {row['ebn0_db']:5.2f} dB  BLER {row['bler']:.4e} "
              f"BER {row['ber']:.4e}  blocks {row['blocks']}")
    return EXIT_OK


def _train(args, from_scratch):
    cfg = load_config(args.config, "train", args.set)
    out = OutputDir(args.output_dir or cfg.get("output_dir", "."))
    code = build_code(cfg["code"])
    if not isinstance(code, SerialCode):
        raise ConfigError("training needs a serial or desk code")
    rcfg = _receiver_config(cfg.get("receiver"))
    tcfg = TrainConfig(**cfg.get("train", {}))
    init = cfg.get("init", {})
    if from_scratch:
        depths = tuple(init.get("depths", (2, 16, 2)))
        kernels = tuple(init.get("kernel_sizes", (3, 3)))
        if rcfg.windows is None:
            raise ConfigError("train-inner needs receiver.windows (fixed memory budget)")
        result = train_inner_from_scratch(code, rcfg.windows, tcfg, depths, kernels,
                                          init.get("seed", cfg["seed"]))
    else:
        windows = rcfg.windows or Receiver(code, rcfg).windows
        result = finetune_encoder(code, windows, tcfg)
    save_weights(result.model, out("weights.json"))
    result.history_to_csv(out("history.csv"))
    meta = cfg | {"train_effective": result.config}
    if cfg["validation_blocks"]:
        from .tune import validate

        trained = code.with_model(result.model)
        windows = tuple(tuple(w) for w in result.config["windows"])
        meta["validation"] = validate(trained, windows, tcfg.snr_db, tcfg.iterations,
                                      cfg["validation_blocks"], mode=tcfg.mode,
                                      wrap=tcfg.wrap)
    out.write_json("effective_config.json", meta)
    print(f"final loss {result.history[-1]['loss']:.6f} after {len(result.history)} updates")
    return EXIT_OK


def cmd_finetune(args):
    return _train(args, from_scratch=False)


def cmd_train_inner(args):
    return _train(args, from_scratch=True)


def cmd_gen_weights(args):
    out = OutputDir(args.output_dir)
    depths = _int_list(args.depths)
    kernels = _int_list(args.kernels)
    if len(depths) < 2:
        raise ConfigError("--depths needs at least input and output depth")
    if len(kernels) == 1:
        kernels = kernels * (len(depths) - 1)
    try:
        model = random_model(depths, kernels, args.seed)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    save_weights(model, out(args.name))
    out.write_json("effective_config.json", vars(args) | {"func": None})
    return EXIT_OK


# Parser ------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="neuralbcjr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help="JSON run configuration")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config entry (dotted key, JSON value)")
            sp.add_argument("-o", "--output-dir", default=None)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: available cores)")

    def source(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--weights", help="CNN weight file")
        g.add_argument("--code-spec", help="encoder spec file")
        sp.add_argument("--binarize", action="store_true", help="binarize CNN outputs")
        sp.add_argument("-o", "--output-dir", required=True)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("analyze", help="effective-memory profiles")
    source(sp)
    sp.add_argument("--streams", help="comma-separated stream indices")
    sp.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sp.add_argument("--mode", choices=["exact", "sampled"], default="exact")
    sp.add_argument("--samples", type=int, default=1 << 14)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("build-trellis", help="trellises from encoders")
    source(sp)
    sp.add_argument("--windows", help="per-stream windows, e.g. '-2,1;-1,0'")
    sp.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sp.add_argument("--max-memory", type=int, default=12)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.set_defaults(func=cmd_build_trellis)

    for name, func, helptext in (
        ("decode", cmd_decode, "turbo-decode stored observations"),
        ("simulate", cmd_simulate, "Monte-Carlo BER/BLER sweep"),
        ("finetune", cmd_finetune, "fine-tune an inner encoder"),
        ("train-inner", cmd_train_inner, "train an inner encoder from scratch"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        if name == "simulate":
            sp.add_argument("--emit-plotdata", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("gen-weights", help="random CNN weight file")
    sp.add_argument("--depths", required=True, help="e.g. 2,16,2")
    sp.add_argument("--kernels", required=True, help="e.g. 3,3 or 5")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--name", default="weights.json")
    sp.add_argument("-o", "--output-dir", required=True)
    sp.set_defaults(func=cmd_gen_weights)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, WeightFileError) as exc:
        print(f"neuralbcjr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidInputError, TrellisTooLargeError, TrainingDiverged, ValueError,
            FloatingPointError) as exc:
        print(f"neuralbcjr: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
