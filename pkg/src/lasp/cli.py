"""Command-line entry point.

Exit codes: 0 when every checked property passes, 1 when a property fails,
2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import comm_model, suites
from .errors import LaspError
from .fixtures import write_tensor
from .linalg import relative_error
from .oracle import AttnProblem, serial_backward, serial_forward
from .runtime import MODES, CommTrace, multihead_run, split_heads
from .simulate import GRAD_NAMES, make_inputs, simulate

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_MAX_N = 128


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    n: int = 256
    d: int = 64
    heads: int = 4
    batch: int = 1
    world: int | None = None  # defaults to sp_size
    sp_size: int = 4
    lam: float = 0.99
    seed: int = 0
    mode: str = "lockstep"
    out: str | None = None

    @property
    def world_size(self) -> int:
        return self.world if self.world is not None else self.sp_size

    def validate(self) -> "RunConfig":
        for name in ("n", "d", "heads", "batch", "sp_size"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be positive")
        if self.world is not None and self.world < 1:
            raise UsageError("--world must be positive")
        if self.n % self.sp_size:
            raise UsageError(f"partition error: sp size T={self.sp_size} does not divide sequence length N={self.n}")
        if self.world_size % self.sp_size:
            raise UsageError(f"partition error: sp size T={self.sp_size} does not divide world size W={self.world_size}")
        if self.d % self.heads:
            raise UsageError(f"head-split error: {self.heads} heads do not divide d={self.d}")
        if not (0.0 < self.lam <= 1.0):
            raise UsageError(f"--lambda must lie in (0, 1], got {self.lam}")
        if self.mode not in MODES:
            raise UsageError(f"--mode must be one of {', '.join(MODES)}")
        return self


CONFIG_KEYS = {"n": "n", "d": "d", "heads": "heads", "batch": "batch", "world": "world", "sp_size": "sp_size", "sp-size": "sp_size", "lambda": "lam", "lam": "lam", "seed": "seed", "mode": "mode", "out": "out"}


def load_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    values: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in raw.items():
            if key not in CONFIG_KEYS:
                raise UsageError(f"unknown config key {key!r}")
            values[CONFIG_KEYS[key]] = val
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            values[f.name] = val
    try:
        return RunConfig(**values).validate()
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--n", type=int, help="sequence length N")
    p.add_argument("--d", type=int, help="model dimension d")
    p.add_argument("--heads", type=int, help="head count h")
    p.add_argument("--batch", type=int, help="batch count B")
    p.add_argument("--world", type=int, help="world size W (default: T)")
    p.add_argument("--sp-size", dest="sp_size", type=int, help="sequence-parallel size T")
    p.add_argument("--lambda", dest="lam", type=float, help="decay rate in (0, 1]")
    p.add_argument("--seed", type=int, help="64-bit fixture seed")
    p.add_argument("--mode", choices=MODES, help="scheduler")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the text table")
    return p


def _emit(report: dict, text: str, cfg_out: str | None, filename: str, as_json: bool) -> None:
    payload = json.dumps(report, indent=2, sort_keys=False)
    if cfg_out:
        out = Path(cfg_out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(payload + "\n")
    print(payload if as_json else text.rstrip("\n"))


def _property_table(results: list[suites.PropertyResult]) -> str:
    rows = [("property", "max_error", "tolerance", "status")]
    rows += [(r.name, f"{r.max_error:.3e}", f"{r.tolerance:.0e}", "PASS" if r.passed else "FAIL") for r in results]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in rows)


def _property_report(command: str, cfg: RunConfig, results) -> dict:
    return {
        "command": command,
        "config": asdict(cfg) | {"world": cfg.world_size},
        "passed": all(r.passed for r in results),
        "properties": [r.to_dict() for r in results],
    }


def cmd_verify(args) -> int:
    cfg = load_config(args)
    if args.tamper:
        with suites.tampered_kernels():
            results = _verify(cfg)
    else:
        results = _verify(cfg)
    report = _property_report("verify", cfg, results)
    _emit(report, _property_table(results), cfg.out, "verify.json", args.json)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def _verify(cfg: RunConfig):
    return suites.verify_suite(
        n=cfg.n, d=cfg.d, heads=cfg.heads, world=cfg.world_size, sp_size=cfg.sp_size, lam=cfg.lam, seed=cfg.seed, mode=cfg.mode
    )


def cmd_gradcheck(args) -> int:
    cfg = load_config(args)
    if cfg.n > GRADCHECK_MAX_N:
        raise UsageError(f"gradcheck is limited to N <= {GRADCHECK_MAX_N} (got {cfg.n})")
    results = suites.gradcheck_suite(n=cfg.n, d=cfg.d, heads=cfg.heads, sp_size=cfg.sp_size, lam=cfg.lam, seed=cfg.seed, mode=cfg.mode)
    report = _property_report("gradcheck", cfg, results)
    _emit(report, _property_table(results), cfg.out, "gradcheck.json", args.json)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    if cfg.batch < cfg.world_size // cfg.sp_size:
        raise UsageError(f"--batch {cfg.batch} is smaller than the group count {cfg.world_size // cfg.sp_size}")
    inputs = make_inputs(cfg.seed, cfg.batch, cfg.n, cfg.d)
    res = simulate(inputs, cfg.heads, cfg.world_size, cfg.sp_size, cfg.lam, cfg.mode)

    # reference check per (batch, head) against the serial recurrences
    out_err = grad_err = 0.0
    for b in range(cfg.batch):
        parts = [split_heads(m[b], cfg.heads) for m in (res.q, res.k, res.v, inputs.d_out, res.out)]
        grads = [split_heads(res.grads[name][b], cfg.heads) for name in GRAD_NAMES]
        for h in range(cfg.heads):
            p = AttnProblem(parts[0][h], parts[1][h], parts[2][h], cfg.lam)
            out_err = max(out_err, relative_error(parts[4][h], serial_forward(p)[0]))
            ref = serial_backward(p, parts[3][h])
            grad_err = max(grad_err, *(relative_error(grads[i][h], ref[i]) for i in range(3)))

    params = comm_model.CommParams(1, cfg.n, cfg.d, cfg.heads, cfg.sp_size)
    measured = comm_model.measure_trace(res.trace, params, passes=res.plan.round_count)
    summary = {
        "command": "simulate",
        "config": asdict(cfg) | {"world": cfg.world_size},
        "topology": {
            "world_size": res.plan.topology.world_size,
            "sp_size": res.plan.topology.sp_size,
            "group_count": res.plan.topology.group_count,
            "src_ranks": res.plan.topology.src_ranks,
            "chunk_size": res.plan.chunk_size,
        },
        "placement": res.plan.placement_table(),
        "messages": len(res.trace),
        "measured_volume": {k: v for k, v in measured.items() if k != "breakdown"},
        "max_rel_error_output": out_err,
        "max_rel_error_grads": grad_err,
        "passed": out_err <= suites.PARALLEL_TOL and grad_err <= suites.PARALLEL_TOL,
    }
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "O.laspt", res.out)
        for name in GRAD_NAMES:
            write_tensor(out / f"{name}.laspt", res.grads[name])
        if res.plan.topology.group_count > 1:
            for name in GRAD_NAMES:
                write_tensor(out / f"{name}_synced.laspt", res.synced_grads[0][name])
        res.trace.write(out / "trace.jsonl")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        lines = [f"W={cfg.world_size} T={cfg.sp_size} G={res.plan.topology.group_count} C={res.plan.chunk_size} messages={len(res.trace)}"]
        for row in summary["placement"]:
            lines.append(f"  batch {row['batch']} -> group {row['group']} (src {row['src_rank']}): ranks {row['ranks']}")
        lines.append(f"max relative error: output {out_err:.3e}, grads {grad_err:.3e}")
        print("\n".join(lines))
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def cmd_comm_report(args) -> int:
    cfg = load_config(args)
    methods = comm_model.METHODS
    if args.methods:
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        unknown = [m for m in methods if m not in comm_model.METHODS]
        if unknown:
            raise UsageError(f"unknown method(s): {', '.join(unknown)}; expected {', '.join(comm_model.METHODS)}")
    params = comm_model.CommParams(cfg.batch, cfg.n, cfg.d, cfg.heads, cfg.sp_size)
    trace = None
    if args.trace:
        try:
            trace = CommTrace.read(args.trace)
        except OSError as exc:
            raise UsageError(f"cannot read trace {args.trace}: {exc}") from None
    report = comm_model.volume_report(params, trace, passes=args.passes)
    data = report.to_dict()
    data["methods"] = [row for row in data["methods"] if row["method"] in methods]
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comm_report.json").write_text(json.dumps(data, indent=2) + "\n")
        (out / "comm_report.csv").write_text(report.to_csv(methods))
    print(json.dumps(data, indent=2) if args.json else report.to_text(methods).rstrip("\n"))
    if trace is not None and not data["measured"]["matches_expected"]:
        return EXIT_FAIL
    return EXIT_OK


def _int_list(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def cmd_bench(args) -> int:
    cfg = load_config(args)
    sweep = _int_list(args.sweep)
    if not sweep:
        raise UsageError("bench needs a non-empty --sweep of sequence lengths")
    sp_sizes = _int_list(args.sp_sizes) or [1, cfg.sp_size]
    rows = []
    for n in sweep:
        for t in sp_sizes:
            if n % t:
                raise UsageError(f"partition error: sp size T={t} does not divide N={n}")
            rng = np.random.default_rng(cfg.seed)
            q, k, v, do = (rng.uniform(-1, 1, (n, cfg.d)) for _ in range(4))
            best = float("inf")
            for _ in range(args.repeats):
                start = time.perf_counter()
                multihead_run(q, k, v, cfg.heads, t, cfg.lam, d_out=do, mode=cfg.mode)
                best = min(best, time.perf_counter() - start)
            rows.append({"n": n, "sp_size": t, "d": cfg.d, "heads": cfg.heads, "mode": cfg.mode, "seconds": best})
    lines = ["n,sp_size,d,heads,mode,seconds"] + [f"{r['n']},{r['sp_size']},{r['d']},{r['heads']},{r['mode']},{r['seconds']:.6f}" for r in rows]
    csv_text = "\n".join(lines) + "\n"
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(csv_text)
    print(json.dumps(rows, indent=2) if args.json else csv_text.rstrip("\n"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lasp", description="Simulated linear attention sequence parallelism")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    p = sub.add_parser("verify", parents=[common], help="oracle, chunk and parallel equivalence suites")
    p.add_argument("--tamper", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", parents=[common], help="runtime gradients vs finite differences")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("simulate", parents=[common], help="scatter, forward, backward and sync; write tensors and trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("comm-report", parents=[common], help="communication volume table")
    p.add_argument("--trace", help="trace.jsonl from simulate, for the measured LASP row")
    p.add_argument("--passes", type=int, default=1, help="number of simulated rounds contained in the trace")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(comm_model.METHODS))
    p.set_defaults(func=cmd_comm_report)

    p = sub.add_parser("bench", parents=[common], help="CPU wall time of forward+backward over a sweep of N")
    p.add_argument("--sweep", help="comma-separated sequence lengths")
    p.add_argument("--sp-sizes", dest="sp_sizes", help="comma-separated sp sizes (default: 1 and --sp-size)")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lasp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LaspError as exc:
        print(f"lasp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, (ValueError,)) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
