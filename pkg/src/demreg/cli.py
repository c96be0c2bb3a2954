"""Command-line surface for registration, landmarks, metrics, and storage.

Every subcommand is a pure function of its inputs and the --seed flag,
and output files are written to a temporary sibling and renamed into
place, so reruns are byte-identical and readers never observe partial
files.  Domain failures exit 1 with a single ``ErrorName: message``
line on standard error; argparse handles usage errors with exit 2.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from contextlib import suppress
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .dem_io import (
    DemGrid,
    GaussianPeak,
    GaussianPit,
    Plane,
    Ripple,
    SynthSpec,
    atomic_write_text,
    generate_synthetic,
    parse_ascii_grid,
    write_ascii_grid,
)
from .errors import DemRegError
from .fractal_codec import decode, deserialize, encode, serialize
from .landmarks import (
    KnowledgeBase,
    Thresholds,
    detect_landmarks,
    landmark_to_dict,
)
from .metrics import DEFAULT_BINS, cc, kld, mutual_information, robustness_eval
from .register import RegisterConfig, register


def _atomic_write_bytes(path, blob: bytes) -> None:
    """Binary twin of atomic_write_text."""
    target = Path(path)
    parent = target.parent if str(target.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=parent, prefix=target.name + ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, target)
    except BaseException:
        with suppress(OSError):
            os.unlink(tmp)
        raise


def _load_grid(path) -> DemGrid:
    return parse_ascii_grid(Path(path).read_text())


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# --- synthetic scene specs --------------------------------------------------

_FEATURE_KINDS = {
    "peak": GaussianPeak,
    "pit": GaussianPit,
    "plane": Plane,
    "ripple": Ripple,
}


def _feature_from_dict(entry: dict):
    kind = entry.get("kind")
    cls = _FEATURE_KINDS.get(kind)
    if cls is None:
        raise ValueError(
            f"unknown feature kind {kind!r}; "
            f"expected one of {sorted(_FEATURE_KINDS)}")
    kwargs = {k: float(v) for k, v in entry.items() if k != "kind"}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"bad {kind} feature: {exc}") from None


def _spec_from_dict(doc: dict, seed: Optional[int] = None) -> SynthSpec:
    """SynthSpec from its JSON form; seed, when given, wins over the file."""
    fields = dict(doc)
    features = tuple(_feature_from_dict(f)
                     for f in fields.pop("features", []))
    if seed is not None:
        fields["seed"] = seed
    try:
        return SynthSpec(features=features, **fields)
    except TypeError as exc:
        raise ValueError(f"bad scene spec: {exc}") from None


def _translated_scene(spec: SynthSpec, t_row: float, t_col: float) -> SynthSpec:
    """Scene whose surface at p equals the original's at p + t.

    Registering the result against the original should recover exactly
    t as the candidate-to-reference translation.  Peaks and pits whose
    centers leave the grid are dropped; planes fold the shift into the
    base level and ripples into their phase.
    """
    base = spec.base
    kept = []
    for f in spec.features:
        if isinstance(f, (GaussianPeak, GaussianPit)):
            row, col = f.row - t_row, f.col - t_col
            if 0 <= row <= spec.nrows - 1 and 0 <= col <= spec.ncols - 1:
                kept.append(replace(f, row=row, col=col))
        elif isinstance(f, Plane):
            base += f.grad_row * t_row + f.grad_col * t_col
            kept.append(f)
        else:
            shift = 2.0 * math.pi * (f.k_row * t_row + f.k_col * t_col)
            kept.append(replace(f, phase=f.phase + shift))
    return replace(spec, base=base, features=tuple(kept))


# --- subcommands ------------------------------------------------------------

def _cmd_register(args) -> int:
    ref = _load_grid(args.ref)
    cand = _load_grid(args.cand)
    config = None
    kb = None
    if args.kb is not None:
        kb = (KnowledgeBase.load(args.kb) if Path(args.kb).exists()
              else KnowledgeBase())
        config = RegisterConfig(kb=kb)
    result = register(ref, cand, config)
    atomic_write_text(args.output, write_ascii_grid(result.registered))
    if kb is not None:
        kb.save(args.kb)
    if args.report is not None:
        atomic_write_text(args.report, _dump_json(result.as_dict()))
    return 0


def _cmd_landmarks(args) -> int:
    grid = _load_grid(args.dem)
    thresholds = None
    if args.thresholds is not None:
        thresholds = Thresholds.from_dict(
            json.loads(Path(args.thresholds).read_text()))
    found, used = detect_landmarks(grid, thresholds)
    payload = {
        "thresholds": used.as_dict(),
        "count": len(found),
        "landmarks": [landmark_to_dict(lm) for lm in found],
    }
    atomic_write_text(args.output, _dump_json(payload))
    return 0


_METRIC_COLUMNS = ("cc", "mi", "kld", "n_cells", "bins")


def _cmd_metrics(args) -> int:
    a = _load_grid(args.a)
    b = _load_grid(args.b)
    # cc() validates the shapes, so the shared-mask count below only
    # runs once DimsMismatch has had its chance.
    row = {
        "cc": cc(a, b),
        "mi": mutual_information(a, b, bins=args.bins),
        "kld": kld(a, b, bins=args.bins),
        "n_cells": int((a.valid_mask & b.valid_mask).sum()),
        "bins": args.bins,
    }
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=_METRIC_COLUMNS,
                            lineterminator="\n")
    writer.writeheader()
    writer.writerow(row)
    if args.csv is not None:
        atomic_write_text(args.csv, buffer.getvalue())
    else:
        sys.stdout.write(buffer.getvalue())
    return 0


def _cmd_compress(args) -> int:
    grid = _load_grid(args.dem)
    _atomic_write_bytes(args.output, serialize(encode(grid)))
    return 0


def _cmd_decompress(args) -> int:
    code = deserialize(Path(args.input).read_bytes())
    atomic_write_text(args.output, write_ascii_grid(decode(code)))
    return 0


def _cmd_synth(args) -> int:
    doc = json.loads(Path(args.spec).read_text())
    spec = _spec_from_dict(doc, seed=args.seed)
    atomic_write_text(args.output, write_ascii_grid(generate_synthetic(spec)))
    return 0


_EVAL_COLUMNS = ("set_id", "overlap_pct", "cc", "mi", "kld", "low_confidence")


def _eval_row(set_id: str, result) -> dict:
    return {
        "set_id": set_id,
        "overlap_pct": round(result.overlap_fraction * 100.0, 2),
        "cc": result.metrics.cc,
        "mi": result.metrics.mi,
        "kld": result.metrics.kld,
        "low_confidence": int(result.low_confidence),
    }


def _cmd_eval(args) -> int:
    suite = json.loads(Path(args.suite).read_text())
    seed = args.seed if args.seed is not None else int(suite.get("seed", 0))
    spec = _spec_from_dict(suite["scene"], seed=seed)
    ref = generate_synthetic(spec)
    rows = []
    for pct in suite.get("overlaps", (50, 70, 80, 90)):
        t_row = round(spec.nrows * (1.0 - pct / 100.0))
        cand = generate_synthetic(_translated_scene(spec, t_row, 0.0))
        result = register(ref, cand)
        rows.append(_eval_row(f"overlap_{pct}", result))
    half_range = float(suite.get("noise_half_range", 0.0))
    if half_range > 0.0:
        pct = suite.get("noise_overlap_pct", 80)
        t_row = round(spec.nrows * (1.0 - pct / 100.0))
        cand = generate_synthetic(_translated_scene(spec, t_row, 0.0))
        pair = robustness_eval(ref, cand, half_range, seed)
        rows.append(_eval_row("noise_clean", pair["clean"]))
        rows.append(_eval_row("noise_noisy", pair["noisy"]))
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=_EVAL_COLUMNS,
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(args.csv, buffer.getvalue())
    return 0


# --- parser and entry point -------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demreg",
        description="Register, inspect, and compress elevation rasters.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("register",
                       help="align a candidate DEM onto a reference")
    p.add_argument("ref", help="reference DEM (ESRI ASCII)")
    p.add_argument("cand", help="candidate DEM to align")
    p.add_argument("-o", "--output", required=True,
                   help="registered DEM output path")
    p.add_argument("--report", help="write a JSON registration report")
    p.add_argument("--kb",
                   help="knowledge base file; created when missing and "
                        "updated with this pair's landmarks")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("landmarks", help="detect and dump landmarks")
    p.add_argument("dem", help="input DEM (ESRI ASCII)")
    p.add_argument("--thresholds",
                   help="JSON file overriding detection thresholds")
    p.add_argument("-o", "--output", required=True,
                   help="landmark JSON output path")
    p.set_defaults(func=_cmd_landmarks)

    p = sub.add_parser("metrics",
                       help="similarity metrics between two aligned DEMs")
    p.add_argument("a", help="first DEM (ESRI ASCII)")
    p.add_argument("b", help="second DEM, same shape")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS,
                   help="histogram bins for MI and KLD")
    p.add_argument("--csv", help="CSV output path (default: standard output)")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("compress", help="encode a DEM as a fractal file")
    p.add_argument("dem", help="input DEM (ESRI ASCII)")
    p.add_argument("-o", "--output", required=True,
                   help="fractal output path")
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("decompress", help="decode a fractal file to a DEM")
    p.add_argument("input", help="fractal input path")
    p.add_argument("-o", "--output", required=True,
                   help="decoded DEM output path (ESRI ASCII)")
    p.set_defaults(func=_cmd_decompress)

    p = sub.add_parser("synth", help="generate a synthetic DEM from a spec")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--seed", type=int,
                   help="override the spec's jitter seed")
    p.add_argument("-o", "--output", required=True,
                   help="DEM output path (ESRI ASCII)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval",
                       help="run overlap and noise batteries, emit CSV")
    p.add_argument("--suite", required=True, help="suite JSON file")
    p.add_argument("--seed", type=int, help="override the suite's seed")
    p.add_argument("--csv", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DemRegError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
