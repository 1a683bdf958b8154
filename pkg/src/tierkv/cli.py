"""Command line: ``tierkv gen | run | sweep``.

Exit codes: 0 on success, 2 on a configuration error, 3 when an input file
cannot be parsed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import defaults, sim
from .errors import ConfigError, ParseError
from .model import MODEL_PRESETS, Method
from .profiler import Profile, load_profile
from .strategies import AdaptCache, FixedLru, NoCompressionLru, PrefillAlways
from .workload import WorkloadSpec, gen_trace, read_trace, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_PARSE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _get_profile(name: str) -> Profile:
    if name in defaults.PROFILES:
        return defaults.PROFILES[name]()
    return load_profile(name)


def _policy(args) -> object:
    if args.policy == "adaptcache":
        return AdaptCache(args.alpha, args.replan_every)
    if args.policy == "fixed-lru":
        if args.method is None or args.rate is None:
            raise ConfigError("fixed-lru needs --method and --rate")
        return FixedLru(Method.parse(args.method), args.rate)
    if args.policy == "nocomp-lru":
        return NoCompressionLru()
    return PrefillAlways()


def _baselines(profile: Profile) -> list:
    out = [PrefillAlways(), NoCompressionLru()]
    for m in profile.methods():
        out += [FixedLru(m.kind, r) for r in m.available_rates if r < 1.0]
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tierkv", description="Tiered KV-cache placement simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out")

    w = defaults.DESK_WORKLOAD
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic trace")
    g.add_argument("--trace", help="output path (default <out-dir>/trace.csv)")
    g.add_argument("--arrival-rate", type=float, default=w.rate, help="requests per second")
    g.add_argument("--duration", type=float, default=w.duration, help="seconds")
    g.add_argument("--contexts", type=int, default=w.num_contexts)
    g.add_argument("--zipf", type=float, default=w.zipf_s)
    g.add_argument("--min-tokens", type=int, default=w.min_tokens)
    g.add_argument("--max-tokens", type=int, default=w.max_tokens)

    sim_args = _Parser(add_help=False)
    sim_args.add_argument("--trace", required=True)
    sim_args.add_argument("--profile", default="desk", help="preset name (desk, full) or JSON path")
    sim_args.add_argument("--model", default="desk", choices=sorted(MODEL_PRESETS))
    sim_args.add_argument("--replan-every", type=int, default=256)

    r = sub.add_parser("run", parents=[common, sim_args], help="replay a trace under one policy")
    r.add_argument("--policy", default="adaptcache", choices=["adaptcache", "fixed-lru", "nocomp-lru", "prefill"])
    r.add_argument("--method", choices=[m.value for m in Method])
    r.add_argument("--rate", type=float)
    r.add_argument("--alpha", type=float, default=1.0)

    s = sub.add_parser("sweep", parents=[common, sim_args], help="AdaptCache over several alphas")
    s.add_argument("--alpha", type=float, action="append",
                   help="repeatable; default %s" % ",".join(map(str, defaults.SWEEP_ALPHAS)))
    s.add_argument("--with-baselines", action="store_true",
                   help="also run prefill, nocomp-lru and fixed-lru at every offered rate")
    return p


def _gen(args) -> None:
    spec = WorkloadSpec(args.arrival_rate, args.duration, args.contexts, args.zipf,
                        args.min_tokens, args.max_tokens, seed=args.seed)
    path = Path(args.trace) if args.trace else Path(args.out_dir) / "trace.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    events = gen_trace(spec)
    write_trace(events, path)
    print(f"wrote {len(events)} events to {path}")


def _run(args) -> None:
    profile = _get_profile(args.profile)
    trace = read_trace(args.trace)
    rep = sim.run(trace, profile, _policy(args), args.seed, args.model)
    sim.report(rep, args.out_dir)
    sys.stdout.write(sim.summary_csv([rep]))


def _sweep(args) -> None:
    profile = _get_profile(args.profile)
    trace = read_trace(args.trace)
    alphas = args.alpha or list(defaults.SWEEP_ALPHAS)
    points = sim.sweep(trace, profile, alphas, args.seed, args.model, args.replan_every)
    reports = [rep for _, rep in points]
    if args.with_baselines:
        reports += [sim.run(trace, profile, b, args.seed, args.model) for b in _baselines(profile)]
    sim.report(reports, args.out_dir)
    (Path(args.out_dir) / "pareto.csv").write_bytes(sim.pareto_csv(points).encode())
    sys.stdout.write(sim.summary_csv(reports))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        {"gen": _gen, "run": _run, "sweep": _sweep}[args.command](args)
    except ParseError as exc:
        print(f"tierkv: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"tierkv: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
