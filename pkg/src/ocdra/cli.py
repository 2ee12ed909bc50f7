"""Command-line front end: ``ocdra gen | run | sweep``.

Exit codes: 0 success, 2 usage / I/O / validation problems, 3 certificate
failure (dual infeasible or primal below gamma * dual beyond tolerance).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .engine import DISC_C, POLICIES, run_online, verify_certificate
from .errors import (BadParams, InfeasibleDual, InvalidStepSize, MalformedInstance, OcdraError,
                     ParseError, RatioShortfall, ValidationError)
from .instances import FAMILIES, generate, load, save
from .quadrature import QuadratureScheme
from .transform import GAMMA

EXIT_OK, EXIT_USAGE, EXIT_CERT = 0, 2, 3
CSV_COLUMNS = ["family", "n", "seed", "policy", "delta", "quad_nodes", "primal", "dual",
               "certified_ratio", "empirical_ratio", "wall_ms", "error"]
# plain greedy only promises half of OPT, so its certificate is checked at 1/2
DEFAULT_GAMMA = {"balanced": GAMMA, "plain_greedy": 0.5}


def _err(msg: str) -> None:
    print(f"ocdra: {msg}", file=sys.stderr)


def _gen_params(args) -> dict:
    return {k: v for k, v in (("n", args.n), ("m", args.m), ("k", args.k)) if v is not None}


def _scheme(args) -> QuadratureScheme:
    try:
        return QuadratureScheme(n_nodes=args.quad_nodes, t_min=args.t_min)
    except ValueError as exc:
        raise BadParams(str(exc)) from None


def cmd_gen(args) -> int:
    try:
        inst = generate(args.family, _gen_params(args), args.seed)
    except BadParams as exc:
        _err(f"bad parameters: {exc}")
        return EXIT_USAGE
    if args.out:
        try:
            save(inst, args.out)
        except OSError as exc:
            _err(f"cannot write {args.out}: {exc}")
            return EXIT_USAGE
        print(f"wrote {args.out}: {args.family}, {inst.n} arrivals, {len(inst.coords)} coords")
    else:
        json.dump(inst.to_json(), sys.stdout, indent=1)
        print()
    return EXIT_OK


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.6f}"


def cmd_run(args) -> int:
    try:
        scheme = _scheme(args)
        inst = load(args.instance)
        _, cert, report = run_online(inst, args.policy, args.delta, scheme, compute_opt=True)
    except (BadParams, ParseError, ValidationError, MalformedInstance, InvalidStepSize) as exc:
        _err(str(exc))
        return EXIT_USAGE
    gamma = DEFAULT_GAMMA[args.policy] if args.gamma is None else args.gamma
    code = EXIT_OK
    try:
        verify_certificate(cert, gamma, DISC_C)
    except (RatioShortfall, InfeasibleDual) as exc:
        _err(f"certificate failed: {exc}")
        code = EXIT_CERT
    if args.out:
        try:
            Path(args.out).write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
        except OSError as exc:
            _err(f"cannot write {args.out}: {exc}")
            return EXIT_USAGE
    print(f"{report.primal:.6f} {report.dual:.6f} {_fmt(report.certified_ratio)} {_fmt(report.empirical_ratio)}")
    return code


def _sweep_row(job: dict) -> dict:
    """One sweep cell; failures come back in the ``error`` column."""
    row = {c: "" for c in CSV_COLUMNS}
    row.update(family=job["family"], n=job["n"], seed=job["seed"], policy=job["policy"],
               delta=job["delta"], quad_nodes=job["quad_nodes"])
    try:
        if job["path"]:
            inst = load(job["path"])
        else:
            inst = generate(job["family"], {"n": job["n"], **job["extra"]}, job["seed"])
        scheme = QuadratureScheme(n_nodes=job["quad_nodes"], t_min=job["t_min"])
        _, cert, rep = run_online(inst, job["policy"], job["delta"], scheme, compute_opt=True)
        row.update(primal=rep.primal, dual=rep.dual, certified_ratio=rep.certified_ratio,
                   empirical_ratio=rep.empirical_ratio, wall_ms=round(rep.wall_ms, 1))
        gamma = DEFAULT_GAMMA[job["policy"]] if job["gamma"] is None else job["gamma"]
        verify_certificate(cert, gamma, DISC_C)
    except (OcdraError, ValueError, OSError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return {k: ("" if v is None else v) for k, v in row.items()}


def _sweep_jobs(args) -> list[dict]:
    base = dict(quad_nodes=args.quad_nodes, t_min=args.t_min, gamma=args.gamma, path=None,
                extra={k: v for k, v in (("m", args.m), ("k", args.k)) if v is not None})
    cells = []
    if args.instance:
        for path in args.instance:
            try:
                inst = load(path, smoke_samples=0)
            except OcdraError as exc:
                raise BadParams(str(exc)) from None
            for policy, delta in itertools.product(args.policy, args.delta):
                cells.append({**base, "family": inst.meta.get("family", Path(path).stem), "n": inst.n,
                              "seed": inst.meta.get("seed", ""), "policy": policy, "delta": delta,
                              "path": str(path)})
    else:
        for family, n, seed, policy, delta in itertools.product(args.family, args.n, args.seed,
                                                                args.policy, args.delta):
            cells.append({**base, "family": family, "n": n, "seed": seed, "policy": policy,
                          "delta": delta})
    key = lambda c: (str(c["family"]), c["n"], str(c["seed"]), c["policy"], -c["delta"],
                     c["quad_nodes"], c["path"] or "")
    return sorted(cells, key=key)


def cmd_sweep(args) -> int:
    grids = [args.policy, args.delta] + ([args.instance] if args.instance else [args.family, args.n, args.seed])
    if any(not g for g in grids):
        _err("empty sweep grid")
        return EXIT_USAGE
    try:
        jobs = _sweep_jobs(args)
    except BadParams as exc:
        _err(str(exc))
        return EXIT_USAGE
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        try:
            Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
        except OSError as exc:
            _err(f"cannot write {args.out}: {exc}")
            return EXIT_USAGE
    else:
        sys.stdout.write(buf.getvalue())
    failed = sum(bool(r["error"]) for r in rows)
    if failed:
        _err(f"{failed} of {len(rows)} runs failed; see the error column")
    return EXIT_CERT if failed == len(rows) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocdra", description="Online allocation with concave "
                                "diminishing-returns valuations: generate, run, certify, sweep.")
    sub = p.add_subparsers(dest="command", required=True)

    def quad(sp):
        sp.add_argument("--quad-nodes", type=int, default=257, help="quadrature nodes, odd >= 33 (default 257)")
        sp.add_argument("--t-min", type=float, default=1e-6, help="quadrature cutoff in (0, 1e-4] (default 1e-6)")
        sp.add_argument("--gamma", type=float, default=None,
                        help="ratio checked by the certificate (default 1-1/e for balanced, 1/2 for plain_greedy)")

    g = sub.add_parser("gen", help="generate an instance file")
    g.add_argument("--family", required=True, choices=FAMILIES)
    g.add_argument("--n", type=int, help="number of arrivals")
    g.add_argument("--m", type=int, help="agents (or ground-set size for polymatroid_assignment)")
    g.add_argument("--k", type=int, help="options per arrival")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--out", help="output path (default: stdout)")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the online algorithm on an instance and certify it")
    r.add_argument("--instance", required=True)
    r.add_argument("--policy", choices=POLICIES, default="balanced", help="default balanced")
    r.add_argument("--delta", type=float, default=1e-3, help="step size, 1/delta integral (default 1e-3)")
    r.add_argument("--out", help="write the run report JSON here")
    r.add_argument("--seed", type=int, default=0, help="accepted for symmetry; runs are deterministic")
    quad(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a grid of instances and write a CSV table")
    s.add_argument("--family", nargs="*", default=["triangular"], choices=FAMILIES)
    s.add_argument("--n", type=int, nargs="*", default=[10])
    s.add_argument("--m", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int, nargs="*", default=[0])
    s.add_argument("--instance", nargs="*", help="instance files (replace the family grid)")
    s.add_argument("--policy", nargs="*", choices=POLICIES, default=["balanced"])
    s.add_argument("--delta", type=float, nargs="*", default=[1e-2])
    s.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    s.add_argument("--out", help="CSV path (default: stdout)")
    quad(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
