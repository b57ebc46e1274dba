"""Command-line entry point.

Subcommands::

    nmvariant simulate   --n 2 3 4 --m 25 --b 1:15 --trials 200 --seed 0
    nmvariant fit        --input outcomes.csv
    nmvariant resistance --n 2 --m 25 --k 1 --alpha 0.1 --rate 1 [--fit fits.csv]
    nmvariant scenario   --config system.toml --script scenario.toml --seed 0
    nmvariant tag-inspect --hex <80 hex digits>
    nmvariant tag-make   --id 7 --key <64 hex digits> --address 10.0.0.1 10.0.1.1

Exit status is 0 on success. Runtime failures exit with 1 and usage errors with 2.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from fractions import Fraction
from typing import Optional, Sequence

from . import harness, simulation, tagging, verifier
from .config import ConfigError, as_fraction, load_config
from .fleet import write_event_log
from .sql import SqlError

log = logging.getLogger("nmvariant")

RUNTIME_ERRORS = (ConfigError, simulation.SimulationError, harness.ScriptError,
                  harness.HarnessError, verifier.PolicyError, tagging.TagError, SqlError,
                  OSError, ValueError)


def _expand(text: str, conv) -> list:
    """'3' -> [3]; '1:5' -> [1..5]; '1:5:2' -> [1, 3, 5] (inclusive ranges)."""
    parts = text.split(":")
    if len(parts) == 1:
        return [conv(parts[0])]
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError(f"bad range {text!r}")
    start, stop = conv(parts[0]), conv(parts[1])
    step = conv(parts[2]) if len(parts) == 3 else 1
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError(f"bad range {text!r}")
    out = []
    x = start
    while x <= stop:
        out.append(x)
        x += step
    return out


def int_list(text: str) -> list[int]:
    try:
        return _expand(text, int)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def fraction_list(text: str) -> list[Fraction]:
    try:
        return _expand(text, as_fraction)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


def rational(text: str) -> Fraction:
    try:
        return as_fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _flatten(groups: Sequence[Sequence]) -> list:
    return [x for g in groups for x in g]


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    params = [simulation.SimParams(n, args.m, b, args.trials, args.seed)
              for n in _flatten(args.n) for b in _flatten(args.b)]
    outcomes = []
    for p in params:
        log.info("simulating n=%d m=%d b=%s", p.n, p.m, p.b)
        outcomes.append(simulation.run_experiment(p, args.workers))
    with _output(args.output) as fh:
        simulation.write_outcomes_csv(outcomes, fh)
    return 0


def cmd_fit(args) -> int:
    with open(args.input, newline="") as fh:
        rows = simulation.read_outcome_rows(fh)
    fits = simulation.fit_rows(rows)
    with _output(args.output) as fh:
        simulation.write_fits_csv(fits, fh)
    return 0


def _pick_fit(args) -> simulation.TrendFit:
    if args.fit:
        with open(args.fit, newline="") as fh:
            fits = simulation.read_fits_csv(fh)
        match = [f for f in fits if f.n == args.n and f.m in (None, args.m)]
        if not match:
            raise simulation.SimulationError(f"{args.fit} has no fit for n={args.n}, m={args.m}")
        return match[0]
    fit = simulation.PUBLISHED_FITS.get(args.n)
    if fit is None:
        raise simulation.SimulationError(
            f"no built-in fit for n={args.n} (have n in {sorted(simulation.PUBLISHED_FITS)}); "
            "pass --fit")
    if fit.m != args.m:
        log.warning("built-in fit was made for m=%d, not m=%d", fit.m, args.m)
    return fit


def cmd_resistance(args) -> int:
    query = simulation.ResistanceQuery(args.n, args.m, args.k, args.alpha, args.rate)
    fit = _pick_fit(args)
    seconds = simulation.resistance(query, fit)
    b = "inf" if query.b is None else str(query.b)
    print(f"n={query.n} m={query.m} k={query.k} alpha={query.alpha} b={b} "
          f"rate={query.rate:g}/s")
    print(f"resistance_seconds={seconds:.6g} ({simulation.format_duration(seconds)})")
    print(f"fit: A={fit.amplitude:g} C={fit.rate:g} source={fit.source}")
    return 0


def cmd_scenario(args) -> int:
    config = load_config(args.config)
    script = harness.load_script(args.script, config)
    policy = verifier.load_policy(args.policy) if args.policy else None
    wire = harness.LoopbackWire() if args.loopback else None
    try:
        scen = harness.Scenario(config, script, args.seed, policy, wire=wire)
        metrics = scen.run()
    finally:
        if wire is not None:
            wire.close()
    if args.metrics_csv:
        with _output(args.metrics_csv) as fh:
            harness.write_metrics_csv([metrics], fh)
    if args.events:
        with _output(args.events) as fh:
            write_event_log(scen.fleet.events, fh)
    if args.metrics_csv not in ("-",):
        print(harness.summarize(metrics))
    return 0


def cmd_tag_inspect(args) -> int:
    text = "".join(args.hex.split())
    try:
        block = bytes.fromhex(text)
    except ValueError as exc:
        raise tagging.MalformedOptionError(f"not hex: {exc}") from exc
    tag = tagging.decode_option(block)
    print(f"option_type={block[0]} length={block[1]} pointer={block[2]}")
    print(f"id={tag.id}")
    print(f"mac={tag.mac.hex()}")
    return 0


def cmd_tag_make(args) -> int:
    key = tagging.TagKey.from_hex(args.key)
    tag = tagging.make_tag(args.id, args.address, key)
    print(tagging.encode_option(tag).hex())
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmvariant",
        description="n-variant, m-replica intrusion tolerance toolkit: adversary "
                    "simulation, resistance estimates, request tags and end-to-end scenarios.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging on stderr (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="adversary Monte Carlo; writes quantile CSV")
    p.add_argument("--n", type=int_list, nargs="+", required=True,
                   help="variant counts, e.g. '2 3 4' or '2:4'")
    p.add_argument("--m", type=positive_int, required=True, help="replicas per variant")
    p.add_argument("--b", type=fraction_list, nargs="+", required=True,
                   help="refreshes per adversarial request, e.g. '1:15' or '3/2'")
    p.add_argument("--trials", type=positive_int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=positive_int, default=1, help="worker processes")
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit y = A*exp(C*b) per (n, m) to a simulate CSV")
    p.add_argument("--input", required=True)
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("resistance", help="median time to a fully compromised serving set")
    p.add_argument("--n", type=positive_int, required=True)
    p.add_argument("--m", type=positive_int, required=True)
    p.add_argument("--k", type=rational, required=True, help="replicas refreshed per request")
    p.add_argument("--alpha", type=rational, required=True,
                   help="maximum fraction of adversarial requests")
    p.add_argument("--rate", type=float, default=1.0, help="adversarial requests per second")
    p.add_argument("--fit", help="fit CSV from 'fit' (default: built-in published constants)")
    p.set_defaults(func=cmd_resistance)

    p = sub.add_parser("scenario", help="run an end-to-end harness scenario")
    p.add_argument("--config", required=True, help="system TOML with a [system] table")
    p.add_argument("--script", required=True, help="scenario TOML with [[event]] entries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", help="normalization policy TOML (default: built-in app policy)")
    p.add_argument("--loopback", action="store_true",
                   help="carry every query over a loopback TCP connection")
    p.add_argument("--metrics-csv", help="write metrics CSV here ('-' for stdout only)")
    p.add_argument("--events", help="write the fleet event log CSV here")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("tag-inspect", help="decode a 40-byte tag option block")
    p.add_argument("--hex", required=True)
    p.set_defaults(func=cmd_tag_inspect)

    p = sub.add_parser("tag-make", help="build a tag option block")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--key", required=True, help="64 hex digits")
    p.add_argument("--address", nargs="+", required=True, help="serving set, pool order")
    p.set_defaults(func=cmd_tag_make)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"nmvariant: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
