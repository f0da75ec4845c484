"""Command-line entry points.

Subcommands: simulate, account, codec, mean-estimate, summarize.
Exit codes: 0 success, 2 usage/config error, 3 runtime failure
(divergence, malformed input), 4 privacy-infeasible. Failures print one
machine-parsable line: ``error: <kind>: <detail>``.

The output directory for simulate comes from --out, overridden by the
DPREC_OUT_DIR environment variable when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .accountant import (
    AccountantState,
    OrderGrid,
    PrivacyTarget,
    accumulate,
    calibrate_clip,
    epsilon_report,
    gauss_baseline_epsilon,
)
from .codec import RecConfig, RecMessage, decode, encode, pack_message, unpack_message
from .errors import (
    DprecError,
    InfeasibleError,
    InvalidConfigError,
    OverheadExceedsDeltaError,
)
from .federation import RoundMetrics, mean_estimation, run_experiment
from .params import GroupPartition, ParamVector
from .presets import PRESETS, preset_config
from .rng import TAG_CATEGORICAL, StreamKey, make_stream_id
from .runconfig import RunConfig, build_run, config_as_dict, parse_config

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_PRIVACY = 4

CSV_HEADER = ("round", "accuracy", "eps_central", "eps_local", "uplink_bits", "downlink_bits")


def _fmt(value: float) -> str:
    if value != value or value in (float("inf"), float("-inf")):
        return str(value)
    return repr(float(value))


def write_metrics_csv(path: str, metrics: list[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for m in metrics:
            writer.writerow(
                [
                    m.round,
                    _fmt(m.accuracy),
                    _fmt(m.eps_central),
                    _fmt(m.eps_local),
                    m.uplink_bits,
                    m.downlink_bits,
                ]
            )


def read_metrics_csv(path: str) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise InvalidConfigError(f"{path}: unexpected metrics schema {header}")
        return [dict(zip(CSV_HEADER, map(float, row))) for row in reader]


def cmd_simulate(args: argparse.Namespace) -> int:
    if bool(args.config) == bool(args.preset):
        raise InvalidConfigError("give exactly one of a config path or --preset")
    cfg: RunConfig = preset_config(args.preset) if args.preset else parse_config(args.config)
    out_dir = os.environ.get("DPREC_OUT_DIR", args.out)
    os.makedirs(out_dir, exist_ok=True)
    fed_cfg, spec, shards, test = build_run(cfg)
    metrics = run_experiment(fed_cfg, spec, shards, test)
    csv_path = os.path.join(out_dir, f"{cfg.output.name}.csv")
    write_metrics_csv(csv_path, metrics)
    manifest = {
        "name": cfg.output.name,
        "version": __version__,
        "master_seed": cfg.federation.master_seed,
        "mechanism": cfg.mechanism.kind,
        "config": config_as_dict(cfg),
        "csv": os.path.basename(csv_path),
    }
    manifest_path = os.path.join(out_dir, f"{cfg.output.name}.manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(csv_path)
    return EXIT_OK


def _order_grid(args: argparse.Namespace) -> OrderGrid:
    return OrderGrid(tuple(range(args.lambda_min, args.lambda_max + 1)))


def cmd_account(args: argparse.Namespace) -> int:
    orders = _order_grid(args)
    if args.baseline:
        eps = gauss_baseline_epsilon(
            args.rounds, args.sample_rate, args.noise_mult, args.delta, orders
        )
        print(f"eps={_fmt(eps)}")
        return EXIT_OK
    bits_total = args.rounds * args.per_round * args.groups * args.bits_per_group
    if args.calibrate_epsilon is not None:
        clip = calibrate_clip(
            args.rounds,
            args.per_round,
            args.population,
            args.sigma,
            bits_total,
            PrivacyTarget(args.calibrate_epsilon, args.delta),
            orders,
        )
        print(f"clip={_fmt(clip)}")
        print(f"clip_mult={_fmt(clip / args.sigma)}")
        return EXIT_OK
    clip = args.clip_mult * args.sigma
    steps = args.rounds * args.per_round
    central_state = accumulate(
        AccountantState(orders), clip, args.sigma, 1.0 / args.population, steps
    )
    central = epsilon_report(central_state, args.delta, bits_total)
    # Worst-case local view: one unamplified step per round.
    local_state = accumulate(AccountantState(orders), clip, args.sigma, 1.0, args.rounds)
    local_bits = args.rounds * args.groups * args.bits_per_group
    local = epsilon_report(local_state, args.delta, local_bits)
    print(f"eps_central={_fmt(central.epsilon)}")
    print(f"eps_local={_fmt(local.epsilon)}")
    print(f"overhead={_fmt(central.overhead)}")
    print(f"argmin_lambda={central.best_lambda}")
    return EXIT_OK


def _parse_group_lens(raw: str) -> GroupPartition:
    try:
        sizes = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidConfigError(f"bad --group-lens: {exc}") from exc
    if not sizes:
        raise InvalidConfigError("--group-lens must name at least one group")
    return GroupPartition.from_sizes([(f"g{i}", n) for i, n in enumerate(sizes)])


def _read_vector(path: str) -> np.ndarray:
    try:
        with open(path) as fh:
            values = [float(line) for line in fh if line.strip()]
    except (OSError, ValueError) as exc:
        raise InvalidConfigError(f"cannot read vector file {path}: {exc}") from exc
    return np.array(values, dtype=np.float64)


def _write_vector(path: str, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in values:
            fh.write(repr(float(v)) + "\n")


def cmd_codec(args: argparse.Namespace) -> int:
    partition = _parse_group_lens(args.group_lens)
    cfg = RecConfig(args.sigma, args.clip_mult, args.bits, partition)
    if args.action == "encode":
        vec = _read_vector(args.infile)
        if len(vec) != partition.total_length:
            raise InvalidConfigError(
                f"vector length {len(vec)} != partition total {partition.total_length}"
            )
        private = StreamKey(args.private_seed, make_stream_id(0, TAG_CATEGORICAL))
        msg = encode(ParamVector(vec, partition), cfg, args.seed, private)
        with open(args.outfile, "wb") as fh:
            fh.write(pack_message(msg, cfg.bits))
    else:
        with open(args.infile, "rb") as fh:
            data = fh.read()
        msg = unpack_message(data, args.bits)
        _write_vector(args.outfile, decode(msg, cfg).values)
    return EXIT_OK


def cmd_mean_estimate(args: argparse.Namespace) -> int:
    mse = mean_estimation(
        args.dim,
        args.samples,
        args.bits,
        args.prior,
        sigma=args.sigma,
        spread=args.spread,
        seed=args.seed,
    )
    print(f"mse={_fmt(mse)}")
    return EXIT_OK


def _summary_rows(paths: list[str]) -> list[dict[str, object]]:
    rows = []
    for path in paths:
        metrics = read_metrics_csv(path)
        if not metrics:
            raise InvalidConfigError(f"{path}: no metric rows")
        manifest_path = path[: -len(".csv")] + ".manifest.json" if path.endswith(".csv") else ""
        mechanism = "unknown"
        if manifest_path and os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                mechanism = json.load(fh).get("mechanism", "unknown")
        last = metrics[-1]
        rows.append(
            {
                "run": os.path.basename(path),
                "mechanism": mechanism,
                "epsilon": last["eps_central"],
                "accuracy": last["accuracy"],
                "total_bits": int(last["uplink_bits"] + last["downlink_bits"]),
            }
        )
    baseline = max(row["total_bits"] for row in rows)
    for row in rows:
        row["compression_ratio"] = baseline / row["total_bits"] if row["total_bits"] else 1.0
    return rows


_SUMMARY_COLUMNS = ("run", "mechanism", "epsilon", "accuracy", "total_bits", "compression_ratio")


def cmd_summarize(args: argparse.Namespace) -> int:
    rows = _summary_rows(args.csvs)
    rendered = [
        {
            "run": str(r["run"]),
            "mechanism": str(r["mechanism"]),
            "epsilon": f"{r['epsilon']:.4g}",
            "accuracy": f"{r['accuracy']:.4f}",
            "total_bits": str(r["total_bits"]),
            "compression_ratio": f"{r['compression_ratio']:.4g}",
        }
        for r in rows
    ]
    widths = {
        col: max(len(col), *(len(r[col]) for r in rendered)) for col in _SUMMARY_COLUMNS
    }
    print("  ".join(col.ljust(widths[col]) for col in _SUMMARY_COLUMNS))
    for r in rendered:
        print("  ".join(r[col].ljust(widths[col]) for col in _SUMMARY_COLUMNS))
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_SUMMARY_COLUMNS)
            for r in rows:
                writer.writerow([r[col] for col in _SUMMARY_COLUMNS])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dprec",
        description="Coded, differentially private federated learning simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a configured experiment to CSV + manifest")
    p.add_argument("config", nargs="?", help="path to a run config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named built-in config")
    p.add_argument("--out", default="runs", help="output directory (env DPREC_OUT_DIR overrides)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("account", help="privacy accounting and clip calibration")
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--per-round", type=int, default=1)
    p.add_argument("--population", type=int, default=1)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--clip-mult", type=float, default=0.5)
    p.add_argument("--bits-per-group", type=int, default=7)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--lambda-min", type=int, default=2)
    p.add_argument("--lambda-max", type=int, default=64)
    p.add_argument("--calibrate-epsilon", type=float, default=None,
                   help="solve for the largest clip meeting this epsilon")
    p.add_argument("--baseline", action="store_true",
                   help="uncompressed-baseline accounting (uses --noise-mult/--sample-rate)")
    p.add_argument("--noise-mult", type=float, default=1.0)
    p.add_argument("--sample-rate", type=float, default=1.0)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("codec", help="encode/decode vectors in the wire format")
    p.add_argument("action", choices=("encode", "decode"))
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--clip-mult", type=float, default=1e18,
                   help="clip multiplier applied before encoding")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--group-lens", required=True, help="comma-separated group lengths")
    p.add_argument("--seed", type=int, default=0, help="shared candidate seed")
    p.add_argument("--private-seed", type=int, default=0, help="client-private seed")
    p.set_defaults(func=cmd_codec)

    p = sub.add_parser("mean-estimate", help="one-shot coded mean estimation")
    p.add_argument("--dim", type=int, default=200)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--bits", type=int, default=1)
    p.add_argument("--prior", choices=("zero", "informed"), default="zero")
    p.add_argument("--sigma", type=float, default=0.9)
    p.add_argument("--spread", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mean_estimate)

    p = sub.add_parser("summarize", help="summary table across run CSVs")
    p.add_argument("csvs", nargs="+", help="metric CSV paths")
    p.add_argument("--csv-out", default="", help="also write the table as CSV here")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfigError,) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OverheadExceedsDeltaError, InfeasibleError) as exc:
        print(f"error: privacy-infeasible: {exc}", file=sys.stderr)
        return EXIT_PRIVACY
    except DprecError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
