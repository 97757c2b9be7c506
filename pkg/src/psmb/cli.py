"""Command-line entry point.

Thread caps (PSMB_THREADS) must land in the environment before numpy loads,
so this module imports only the standard library at the top; every handler
pulls the heavy modules lazily.

Conventions: machine-readable output (CSV rows, PASS/FAIL lines, artifact
paths) goes to stdout; progress and diagnostics go to stderr.  Exit codes:
0 success, 1 validation error (bad flags, bad config, missing files),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, List, Optional

# Flag vocabulary per subcommand; the single source for parser construction
# and for the --help drift test.
SCHEMA: Dict[str, Dict[str, str]] = {
    "gen-data": {
        "--out": "workspace directory; writes dataset.npz there",
        "--seed": "dataset generation seed",
        "--quick": "generate a 60-image dataset instead of 600",
    },
    "pretrain": {
        "--config": "TOML training config; defaults used when omitted",
        "--seed": "training seed; controls every random draw",
        "--out": "workspace directory; needs dataset.npz, writes "
                 "config.toml, metrics.jsonl and final.psmb",
        "--quick": "cap the run at one epoch",
    },
    "probe": {
        "--checkpoint": "checkpoint to evaluate; config.toml and "
                        "dataset.npz are read from its directory",
        "--seed": "probe train/test split seed",
    },
    "ablate": {
        "--config": "TOML training config for every variant",
        "--sweep": "which sweep to run",
        "--seed": "base seed for the sweep",
        "--out": "workspace directory; needs dataset.npz, writes "
                 "ablation_<sweep>.csv",
        "--quick": "cap every variant at one epoch",
    },
    "invariants": {
        "--quick": "reduced trial counts (same checks)",
    },
    "bench": {
        "--lengths": "comma-separated sequence lengths to time",
        "--seed": "input generation seed",
    },
    "dump-transport": {
        "--seed": "view sampling seed",
        "--out": "workspace directory; writes transport.txt there",
    },
    "export": {
        "--checkpoint": "checkpoint whose features to export; config.toml "
                        "and dataset.npz are read from its directory",
        "--out": "workspace directory for embeddings.csv "
                 "(default: the checkpoint's directory)",
    },
}

_SWEEPS = ("views", "positional")


class _Parser(argparse.ArgumentParser):
    """argparse that treats every parse problem as a validation error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="psmb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, flags in SCHEMA.items():
        p = sub.add_parser(name, help=f"{name} subcommand", add_help=True)
        for flag, doc in flags.items():
            if flag == "--quick":
                p.add_argument(flag, action="store_true", help=doc)
            elif flag == "--seed":
                p.add_argument(flag, type=int, default=0, help=doc)
            elif flag == "--sweep":
                p.add_argument(flag, choices=_SWEEPS, default="views", help=doc)
            elif flag == "--lengths":
                p.add_argument(flag, default="2048,4096", help=doc)
            elif flag == "--out":
                p.add_argument(flag, default="out", help=doc)
            else:
                p.add_argument(flag, default=None, help=doc)
    return parser


def _cap_threads() -> None:
    """Apply PSMB_THREADS to every worker pool knob numpy/numba honor."""
    cap = os.environ.get("PSMB_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _require(path, hint: str = ""):
    if not os.path.exists(path):
        extra = f" ({hint})" if hint else ""
        raise FileNotFoundError(f"missing file: {path}{extra}")
    return path


def _load_train_config(path: Optional[str]):
    from .config import TrainConfig, load_config, validate_config
    config = load_config(_require(path)) if path else TrainConfig()
    validate_config(config)
    return config


def _progress_printer(log_every: int):
    def emit(record):
        if record.step % max(log_every, 1) == 0:
            print(f"step {record.step} loss {record.total_loss:.4f}",
                  file=sys.stderr)
    return emit


def _cmd_gen_data(args) -> int:
    from .data import SyntheticDatasetSpec, generate_synthetic_dataset, save_dataset
    spec = SyntheticDatasetSpec(n_images=60 if args.quick else 600,
                                seed=args.seed)
    images, labels = generate_synthetic_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dataset.npz")
    save_dataset(path, images, labels)
    print(path)
    return 0


def _load_workspace_dataset(out_dir: str):
    from .data import load_dataset
    path = _require(os.path.join(out_dir, "dataset.npz"),
                    "run `psmb gen-data` first")
    return load_dataset(path)


def _cmd_pretrain(args) -> int:
    import dataclasses

    from .checkpoint import save_checkpoint
    from .config import config_digest, save_config
    from .train import pretrain, state_tensors

    config = _load_train_config(args.config)
    if args.quick:
        config = dataclasses.replace(
            config, optim=dataclasses.replace(config.optim, epochs=1))
    images, _ = _load_workspace_dataset(args.out)
    os.makedirs(args.out, exist_ok=True)
    save_config(os.path.join(args.out, "config.toml"), config)

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    state = pretrain(images, config, args.seed, metrics_path=metrics_path,
                     progress=_progress_printer(config.run.log_every))
    ckpt_path = os.path.join(args.out, "final.psmb")
    save_checkpoint(ckpt_path, state_tensors(state), step=state.step,
                    config_digest=config_digest(config))
    print(metrics_path)
    print(ckpt_path)
    return 0


def _restore_from(checkpoint_path: str):
    """Rebuild a TrainState from a checkpoint plus its sibling config.toml."""
    from .checkpoint import load_checkpoint
    from .config import config_digest, load_config, validate_config
    from .train import restore_state

    _require(checkpoint_path)
    workspace = os.path.dirname(os.path.abspath(checkpoint_path)) or "."
    config = load_config(_require(os.path.join(workspace, "config.toml"),
                                  "written by `psmb pretrain`"))
    validate_config(config)
    blob = load_checkpoint(checkpoint_path)
    if blob.config_digest != config_digest(config):
        raise ValueError(
            f"checkpoint {checkpoint_path} was trained under a different "
            f"config than {workspace}/config.toml")
    return restore_state(blob.tensors, blob.step, config), workspace


def _cmd_probe(args) -> int:
    from .train import probe_protocol
    if not args.checkpoint:
        raise FileNotFoundError("missing file: --checkpoint is required")
    state, workspace = _restore_from(args.checkpoint)
    images, labels = _load_workspace_dataset(workspace)
    if labels is None:
        raise ValueError(f"{workspace}/dataset.npz has no labels")
    acc = probe_protocol(images, labels, state, split_seed=args.seed)
    print(f"{acc:.6f}")
    return 0


def _cmd_ablate(args) -> int:
    import dataclasses

    from .train import ablation_run, write_ablation_csv

    config = _load_train_config(args.config)
    if args.quick:
        config = dataclasses.replace(
            config, optim=dataclasses.replace(config.optim, epochs=1))
    images, labels = _load_workspace_dataset(args.out)
    if labels is None:
        raise ValueError(f"{args.out}/dataset.npz has no labels")

    rows = ablation_run(images, labels, config, seeds=[args.seed],
                        sweep=args.sweep,
                        progress=lambda msg: print(msg, file=sys.stderr))
    path = os.path.join(args.out, f"ablation_{args.sweep}.csv")
    write_ablation_csv(path, rows)
    print(path)
    return 0


def _cmd_invariants(args) -> int:
    from .invariants import run_suite
    failures = run_suite(quick=args.quick)
    return 0 if failures == 0 else 2


def _cmd_bench(args) -> int:
    from .bench import scan_timings, timings_csv
    try:
        lengths = [int(part) for part in args.lengths.split(",") if part]
    except ValueError:
        raise ValueError(f"--lengths must be comma-separated integers, "
                         f"got {args.lengths!r}")
    rows = scan_timings(lengths, seed=args.seed)
    sys.stdout.write(timings_csv(rows))
    return 0


def _cmd_dump_transport(args) -> int:
    import numpy as np

    from .config import TrainConfig
    from .mpa import build_transport, dump_transport_text
    from .numeric import Stream
    from .views import TokenGrid, geometry_map, sample_views

    config = TrainConfig()
    patch = config.encoder.patch_size
    batch = sample_views(Stream(args.seed, "dump-transport"), config.views)
    grid_g = TokenGrid(config.views.grid("G", patch), patch)
    grid_m = TokenGrid(config.views.grid("M", patch), patch)
    landings = geometry_map(batch.mids[0], batch.globals_[batch.anchor],
                            grid_m, grid_g)
    hg, wg = grid_g.shape
    clamped = np.clip(landings, [-0.5, -0.5], [wg - 0.5, hg - 0.5])
    pi = build_transport(clamped, grid_g.shape)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "transport.txt")
    with open(path, "w") as fh:
        fh.write(dump_transport_text(pi))
    print(path)
    return 0


def _cmd_export(args) -> int:
    from .train import export_embeddings
    if not args.checkpoint:
        raise FileNotFoundError("missing file: --checkpoint is required")
    state, workspace = _restore_from(args.checkpoint)
    images, labels = _load_workspace_dataset(workspace)
    out_dir = args.out if args.out != "out" else workspace
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "embeddings.csv")
    export_embeddings(path, images, labels, state)
    print(path)
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "ablate": _cmd_ablate,
    "invariants": _cmd_invariants,
    "bench": _cmd_bench,
    "dump-transport": _cmd_dump_transport,
    "export": _cmd_export,
}


def main(argv: Optional[List[str]] = None) -> int:
    _cap_threads()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # keep main() embeddable
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        print(f"psmb {args.command}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"psmb {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        import traceback
        traceback.print_exc()
        print(f"psmb {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
