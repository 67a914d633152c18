"""Experiment runner CLI.

Subcommands:
  run <config>      execute the configured regimes, write all artifacts
  distill <config>  distillation only: write the buffer file per step
  report <dir>      recompute comparison table and series from run logs
  verify <dir>      checksum audit of a run directory

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 I/O error. Failures leave a machine-readable error.json in the output
directory when possible.
"""

import argparse
import glob
import json
import os
import platform
import sys
from dataclasses import replace

import numpy as np
import torch

from . import __version__
from .config import (
    ExperimentConfig,
    apply_desk_scale,
    build_experiment,
    config_hash,
    load_config,
    to_ini,
)
from .distill import DistilledBuffer, distill
from .errors import ConfigError, DataFormatError, DistillCLError, NumericError, ValidationError
from .reports import compare, plot_data_csv, render_report
from .seeding import derive_seed
from .serialize import (
    deserialize_buffer,
    runlog_from_json,
    runlog_to_json,
    serialize_buffer,
    sha256_file,
    timings_json,
)
from .training import run_incremental

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _write(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _manifest(out_dir, cfg, extra=None):
    files = {}
    for path in sorted(glob.glob(os.path.join(out_dir, "*"))):
        name = os.path.basename(path)
        if name in ("manifest.json", "error.json") or not os.path.isfile(path):
            continue
        files[name] = sha256_file(path)
    doc = {
        "schema": 1,
        "config_sha256": config_hash(cfg),
        "master_seed": cfg.master_seed,
        "versions": {
            "distill_cl": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
        },
        "files": files,
    }
    if extra:
        doc.update(extra)
    _write(os.path.join(out_dir, "manifest.json"), json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _load_config_for(args):
    cfg = load_config(args.config)
    if args.desk_scale:
        cfg = apply_desk_scale(cfg)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output=args.out)
    if getattr(args, "regime", None):
        cfg = replace(cfg, regimes=tuple(args.regime))
    return cfg


def _buffer_from_cache(scenario, cache, cfg_seed, ipc, outer_steps):
    buffer = DistilledBuffer(scenario.image_shape, scenario.class_count)
    for step in scenario.steps:
        key = (step.t, ipc, outer_steps, cfg_seed)
        if key in cache:
            buffer.append_step(step.t, cache[key][0])
    return buffer


def cmd_run(args):
    cfg = _load_config_for(args)
    out_dir = cfg.output
    os.makedirs(out_dir, exist_ok=True)
    try:
        scenario, distill_cfg, opt, real_opt, policy = build_experiment(cfg)
        logs = []
        if args.parallel_regimes and len(cfg.regimes) > 1:
            logs = _run_parallel(cfg, out_dir)
        else:
            cache = {}
            for regime in cfg.regimes:
                log = run_incremental(
                    scenario, distill_cfg, opt, policy, regime,
                    master_seed=cfg.master_seed, real_opt=real_opt, distill_cache=cache,
                )
                logs.append(log)
            buffer = _buffer_from_cache(
                scenario, cache, cfg.master_seed, distill_cfg.ipc, distill_cfg.outer_steps
            )
            if buffer.entries:
                serialize_buffer(buffer, os.path.join(out_dir, "buffer.dcbuf"))
    except DistillCLError as e:
        return _fail(out_dir, e)
    except OSError as e:
        return _fail(out_dir, e)

    _write(os.path.join(out_dir, "config.ini"), to_ini(cfg))
    for log in logs:
        _write(os.path.join(out_dir, f"runlog_{log.regime}.json"), runlog_to_json(log))
    _write(os.path.join(out_dir, "timings.json"), timings_json(logs))
    if any(log.regime == "fixed_largest" for log in logs):
        table = compare(logs)
        _write(os.path.join(out_dir, "table.csv"), render_report(table, format="csv"))
        _write(os.path.join(out_dir, "table.json"), render_report(table, format="json"))
        print(render_report(table, format="text_table"), end="")
    _write(os.path.join(out_dir, "series.csv"), plot_data_csv(logs))
    _manifest(out_dir, cfg)
    print(f"wrote artifacts to {out_dir}")
    return EXIT_OK


def _run_one_regime(payload):
    """Worker for --parallel-regimes; runs in a separate process."""
    from .config import from_ini

    cfg_text, regime, sub_out = payload
    cfg = replace(from_ini(cfg_text), regimes=(regime,), output=sub_out)
    scenario, distill_cfg, opt, real_opt, policy = build_experiment(cfg)
    log = run_incremental(
        scenario, distill_cfg, opt, policy, regime,
        master_seed=cfg.master_seed, real_opt=real_opt,
    )
    os.makedirs(sub_out, exist_ok=True)
    _write(os.path.join(sub_out, f"runlog_{regime}.json"), runlog_to_json(log))
    return runlog_to_json(log)


def _run_parallel(cfg, out_dir):
    from concurrent.futures import ProcessPoolExecutor

    payloads = [
        (to_ini(cfg), regime, os.path.join(out_dir, regime)) for regime in cfg.regimes
    ]
    with ProcessPoolExecutor(max_workers=min(len(payloads), os.cpu_count() or 1)) as pool:
        return [runlog_from_json(text) for text in pool.map(_run_one_regime, payloads)]


def cmd_distill(args):
    cfg = _load_config_for(args)
    out_dir = cfg.output
    os.makedirs(out_dir, exist_ok=True)
    try:
        scenario, distill_cfg, _, _, _ = build_experiment(cfg)
        buffer = DistilledBuffer(scenario.image_shape, scenario.class_count)
        for step in scenario.steps:
            step_cfg = replace(
                distill_cfg, seed=derive_seed(cfg.master_seed, "distill", step.t)
            )
            buffer.append_step(step.t, distill(step.train, step_cfg))
            print(f"step {step.t}: buffer {buffer.image_count} images, {buffer.byte_size} bytes")
        serialize_buffer(buffer, os.path.join(out_dir, "buffer.dcbuf"))
    except DistillCLError as e:
        return _fail(out_dir, e)
    except OSError as e:
        return _fail(out_dir, e)
    _write(os.path.join(out_dir, "config.ini"), to_ini(cfg))
    _manifest(out_dir, cfg)
    print(f"wrote buffer to {os.path.join(out_dir, 'buffer.dcbuf')}")
    return EXIT_OK


def cmd_report(args):
    run_dir = args.dir
    paths = sorted(glob.glob(os.path.join(run_dir, "runlog_*.json")))
    if not paths:
        print(f"no runlog_*.json files under {run_dir}", file=sys.stderr)
        return EXIT_DATA
    try:
        logs = []
        for path in paths:
            with open(path, "r", encoding="utf-8") as f:
                logs.append(runlog_from_json(f.read()))
        table = compare(logs)
    except DistillCLError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    _write(os.path.join(run_dir, "table.csv"), render_report(table, format="csv"))
    _write(os.path.join(run_dir, "table.json"), render_report(table, format="json"))
    _write(os.path.join(run_dir, "series.csv"), plot_data_csv(logs))
    print(render_report(table, format="text_table"), end="")
    return EXIT_OK


def cmd_verify(args):
    run_dir = args.dir
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        print(f"missing manifest.json under {run_dir}", file=sys.stderr)
        return EXIT_DATA
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    failures = []
    for name, recorded in sorted(manifest.get("files", {}).items()):
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            failures.append(f"{name}: missing")
            continue
        actual = sha256_file(path)
        if actual != recorded:
            failures.append(f"{name}: sha256 {actual} != recorded {recorded}")
        elif name.endswith(".dcbuf"):
            try:
                deserialize_buffer(path)  # validates the internal payload checksum
            except DistillCLError as e:
                failures.append(f"{name}: {e}")
        print(f"{'FAIL' if failures and failures[-1].startswith(name) else 'ok  '} {name}")
    if failures:
        for line in failures:
            print(f"verify failed: {line}", file=sys.stderr)
        return EXIT_DATA
    print("all checksums match")
    return EXIT_OK


def _fail(out_dir, exc):
    if isinstance(exc, ConfigError):
        code = EXIT_CONFIG
    elif isinstance(exc, NumericError):
        code = EXIT_NUMERIC
    elif isinstance(exc, (DataFormatError, ValidationError)):
        code = EXIT_DATA
    elif isinstance(exc, OSError):
        code = EXIT_IO
    else:
        code = 1
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError):
        record["fields"] = exc.errors
    try:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "error.json"), json.dumps(record, indent=1) + "\n")
        partial = getattr(exc, "partial_log", None)
        if partial is not None:
            _write(
                os.path.join(out_dir, f"runlog_{partial.regime}.partial.json"),
                runlog_to_json(partial),
            )
    except OSError:
        pass
    print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv=None):
    parser = argparse.ArgumentParser(prog="distill-cl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--seed", type=int, default=None, help="override master seed")
        sp.add_argument("--out", default=None, help="override output directory")
        sp.add_argument(
            "--desk-scale", action="store_true",
            help="apply the documented reduced parameter set",
        )

    sp = sub.add_parser("run", help="execute configured regimes and write artifacts")
    sp.add_argument("config")
    add_common(sp)
    sp.add_argument("--regime", action="append", help="run only this regime (repeatable)")
    sp.add_argument("--parallel-regimes", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("distill", help="run distillation only, write the buffer")
    sp.add_argument("config")
    add_common(sp)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("report", help="recompute tables from run logs")
    sp.add_argument("dir")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("verify", help="checksum audit of a run directory")
    sp.add_argument("dir")
    sp.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        for line in e.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
