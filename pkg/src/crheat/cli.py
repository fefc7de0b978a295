"""Command-line front end: ``crheat <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 failed golden or tolerance check.
A config file of ``key = value`` lines supplies defaults; flags override it.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import math
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2
CSV_COLUMNS = ["t", "estimate", "stderr", "paths", "steps", "bandwidth", "seed", "escapes"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    """Everything that determines an output file; serialised into its header."""

    command: str
    model: str = ""
    n: int = 0
    seed: int = 0
    paths: int = 0
    steps: int = 0
    t_grid: list = field(default_factory=list)
    bandwidth: str = ""
    order: int = 0
    extra: dict = field(default_factory=dict)

    def header(self) -> str:
        lines = [f"# created = {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}"]
        for k, v in asdict(self).items():
            if k == "extra":
                lines += [f"# {kk} = {_fmt(vv)}" for kk, vv in sorted(v.items())]
            else:
                lines.append(f"# {k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_header(path: Path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].partition("=")
            out[k.strip()] = v.strip()
    return out


def read_config(path: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment; dashes in keys become underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from exc


def _model(args):
    from .models import ModelSpec

    return ModelSpec(args.model, args.n)


# ---------------------------------------------------------------------------
# subcommands


def cmd_fs_expand(args, out) -> int:
    from .normal import frame_expansion

    fields = frame_expansion(_model(args), args.order)
    text = "".join(f"X{k + 1}\n{f.to_text()}\n" for k, f in enumerate(fields))
    out.write(text)
    if args.golden:
        golden = _golden_path(args.golden).read_text()
        if _canon(golden) != _canon(text):
            out.write(f"golden mismatch against {args.golden}\n")
            return EXIT_CHECK
        out.write(f"golden match: {args.golden}\n")
    return EXIT_OK


def _canon(text: str) -> list[str]:
    return [" ".join(line.split()) for line in text.strip().splitlines() if line.strip()]


def _golden_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    packaged = resources.files("crheat") / "golden" / p.name
    if packaged.is_file():
        return Path(str(packaged))
    raise UsageError(f"golden file not found: {name}")


def cmd_wiener_moments(args, out) -> int:
    from .wiener import iterated_moments

    idx, mean, var = iterated_moments(args.seed, args.paths, args.steps, args.n, args.norm)
    cfg = RunConfig("wiener-moments", n=args.n, seed=args.seed, paths=args.paths,
                    steps=args.steps, order=args.norm)
    buf = io.StringIO()
    buf.write(cfg.header())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "mean", "variance"])
    for J, m, v in zip(idx, mean, var):
        w.writerow(["(" + " ".join(map(str, J)) + ")", repr(float(m)), repr(float(v))])
    _emit(buf.getvalue(), args.out, out)
    return EXIT_OK


def cmd_c0(args, out) -> int:
    from .heat import gaveau_c0

    try:
        val, err = gaveau_c0(args.n, return_error=True)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out.write(f"c0(n={args.n}) = {val:.15g} +- {max(err, 1e-12):.1e}\n")
    if args.check and args.n == 1:
        ok = abs(val - 1 / 16) <= 1e-10
        out.write(f"check against 1/16: {'PASS' if ok else 'FAIL'}\n")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


def _bandwidth(args):
    h = _floats(args.bandwidth)
    if not h or any(x <= 0 for x in h) or len(h) > 2:
        raise UsageError("bandwidth must be one positive number or a positive pair")
    return h[0] if len(h) == 1 else tuple(h)


def cmd_simulate(args, out) -> int:
    from .heat import estimate_density

    if args.eps_list and args.t_list:
        raise UsageError("give either --eps-list or --t-list, not both")
    grid = [e * e for e in _floats(args.eps_list)] if args.eps_list else _floats(args.t_list or "")
    if not grid:
        raise UsageError("an --eps-list or --t-list is required")
    h = _bandwidth(args)
    try:
        run = estimate_density(_model(args), grid, args.paths, args.steps, args.seed, h,
                               antithetic=args.antithetic, common_paths=args.common_paths,
                               order=args.order)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    hs = "/".join(repr(float(x)) for x in np.atleast_1d(h))
    cfg = RunConfig("simulate", args.model, args.n, args.seed, args.paths, args.steps, grid, hs,
                    args.order, {"antithetic": args.antithetic, "common_paths": args.common_paths})
    buf = io.StringIO()
    buf.write(cfg.header())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in run.points:
        est, se = p.heat_kernel(args.n)
        w.writerow([repr(p.t), repr(est), repr(se), args.paths, args.steps, hs, args.seed, p.escapes])
    _emit(buf.getvalue(), args.out, out)
    if args.out:
        for p in run.points:
            s, e = p.scaled(args.n)
            out.write(f"t={p.t:g}  t^(n+1) p = {s:.6g} +- {e:.2g}  escapes={p.escapes}\n")
    return EXIT_OK


def cmd_fit(args, out) -> int:
    from .heat import fit_expansion
    from .models import ModelSpec

    path = Path(args.input)
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    head = read_header(path)
    with open(path) as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    try:
        model = ModelSpec(head["model"], int(head["n"]))
        t = [float(r["t"]) for r in rows]
        est = [float(r["estimate"]) for r in rows]
        se = [float(r["stderr"]) for r in rows]
        rep = fit_expansion(model, t, est, se, order=args.order)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"cannot fit {path}: {exc}") from exc
    sd = np.sqrt(np.diag(rep.sqrt_cov))
    out.write(f"model {model}, {len(t)} points\n")
    for k, (c, s) in enumerate(zip(rep.sqrt_coef, sd)):
        out.write(f"  t^({k}/2): {c:+.6g} +- {s:.2g}  (z = {c / s:+.2f})\n")
    for a, (c, s) in enumerate(zip(rep.t_coef, np.sqrt(np.diag(rep.t_cov)))):
        out.write(f"  c_{a} = {c:+.6g} +- {s:.2g}\n")
    if args.check:
        ok = rep.odd_consistent_with_zero(3.0)
        out.write(f"odd sqrt(t) coefficients zero at 3 sigma: {'PASS' if ok else 'FAIL'}\n")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


def cmd_c1_sphere(args, out) -> int:
    from .heat import c1_conditional, gaveau_c0
    from .models import ModelSpec

    est = c1_conditional(ModelSpec.sphere(args.n), args.paths, args.h, args.seed, args.steps,
                         functional=args.functional, weights=args.weights)
    out.write(f"E[delta_0(X_1) {args.functional}] = {est.value:.6g} +- {est.stderr:.2g}"
              f"  (h = {args.h}, paths = {est.paths}, weights = {args.weights},"
              f" excluded = {est.excluded})\n")
    if args.check and args.functional == "one":
        c0 = gaveau_c0(args.n)
        ok = abs(est.value - c0) <= 3 * est.stderr
        out.write(f"check against c0 = {c0:.6g} at 3 sigma: {'PASS' if ok else 'FAIL'}\n")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


def cmd_hormander(args, out) -> int:
    from .heat import hormander_inf

    rep = hormander_inf(_model(args), points=args.points)
    out.write(f"grid minimum {rep.minimum:.6g} at eps = {rep.eps_at_min:g}, "
              f"xi = {np.round(rep.argmin, 4).tolist()} over {rep.points} directions\n")
    if args.check:
        ok = 0.99 <= rep.minimum <= 1.01 if args.model == "heisenberg" else rep.minimum > 0
        out.write(f"check: {'PASS' if ok else 'FAIL'}\n")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


def cmd_phi3(args, out) -> int:
    from .heat import phi3_coefficients

    coeffs = phi3_coefficients(_model(args))
    if not any(coeffs.values()):
        out.write("all φ³ coefficients zero\n")
        return EXIT_OK
    for i, row in coeffs.items():
        for J, c in row.items():
            out.write(f"phi3[{i}] B^({','.join(map(str, J))}): {c}\n")
    return EXIT_OK


def _emit(text: str, path, out):
    if path:
        Path(path).write_text(text)
        out.write(f"wrote {path}\n")
    else:
        out.write(text)


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="crheat", description="Diagonal heat-kernel expansions on CR model spaces.")
    p.add_argument("--config", help="file of 'key = value' defaults")
    p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    def model_opts(sp, default_model="sphere"):
        sp.add_argument("--model", choices=["heisenberg", "sphere"], default=default_model)
        sp.add_argument("--n", type=int, default=1)

    sp = sub.add_parser("fs-expand", help="print the truncated Folland-Stein frame")
    model_opts(sp)
    sp.add_argument("--order", type=int, default=3)
    sp.add_argument("--golden", help="compare against a stored golden file")
    sp.set_defaults(func=cmd_fs_expand)

    sp = sub.add_parser("wiener-moments", help="CSV of means/variances of B^J_1")
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--paths", type=int, default=10_000)
    sp.add_argument("--steps", type=int, default=256)
    sp.add_argument("--norm", type=int, default=3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_wiener_moments)

    sp = sub.add_parser("c0", help="Gaveau's constant")
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--check", action="store_true")
    sp.set_defaults(func=cmd_c0)

    sp = sub.add_parser("simulate", help="Monte Carlo diagonal densities")
    model_opts(sp, "heisenberg")
    sp.add_argument("--eps-list")
    sp.add_argument("--t-list")
    sp.add_argument("--paths", type=int, default=100_000)
    sp.add_argument("--steps", type=int, default=2 ** 12)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bandwidth", default="0.4,0.6", help="h, or a pair h1,h2 for extrapolation")
    sp.add_argument("--order", type=int, default=4)
    sp.add_argument("--antithetic", action="store_true")
    sp.add_argument("--common-paths", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit t^(n+1) p(t) in powers of sqrt(t)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--order", type=int, default=2)
    sp.add_argument("--check", action="store_true")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("c1-sphere", help="mollified estimate of c_1 on the sphere")
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--paths", type=int, default=100_000)
    sp.add_argument("--h", type=float, default=0.4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=256)
    sp.add_argument("--functional", choices=["phi", "one", "odd"], default="phi")
    sp.add_argument("--weights", choices=["derived", "closed-form"], default="derived")
    sp.add_argument("--check", action="store_true")
    sp.set_defaults(func=cmd_c1_sphere)

    sp = sub.add_parser("hormander", help="grid minimum of the Hormander form")
    model_opts(sp)
    sp.add_argument("--points", type=int, default=10_000)
    sp.add_argument("--check", action="store_true")
    sp.set_defaults(func=cmd_hormander)

    sp = sub.add_parser("phi3", help="coefficients of phi^3")
    model_opts(sp)
    sp.set_defaults(func=cmd_phi3)
    return p


def _apply_config(parser: _Parser, argv: list[str], config: dict):
    """Install config values as defaults of the chosen subcommand."""
    pre, _ = parser.parse_known_args(argv)
    if not pre.command:
        return
    sub = parser._subparsers._group_actions[0].choices[pre.command]
    known = {a.dest: a for a in sub._actions}
    for key, value in config.items():
        if key in ("threads",):
            continue
        if key not in known or key == "help":
            raise UsageError(f"unknown config key {key!r} for {pre.command}")
        act = known[key]
        if act.const is True:
            value = value.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                value = act.type(value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {value!r}") from exc
        sub.set_defaults(**{key: value})


def run(argv=None, out=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    parser = build_parser()
    try:
        pre, _ = parser.parse_known_args(argv)
        config = read_config(pre.config) if pre.config else {}
        _apply_config(parser, argv, config)
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        threads = args.threads if args.threads is not None else config.get("threads")
        if threads is not None:
            import numba

            threads = int(threads)
            if not 1 <= threads <= numba.config.NUMBA_NUM_THREADS:
                raise UsageError(f"--threads must be in 1..{numba.config.NUMBA_NUM_THREADS}")
            numba.set_num_threads(threads)
        if getattr(args, "n", 1) < 1:
            raise UsageError("--n must be >= 1")
        return args.func(args, out)
    except UsageError as exc:
        sys.stderr.write(f"crheat: error: {exc}\n")
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
