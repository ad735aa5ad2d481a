"""Command-line interface: ``treecutoff <command> [flags]``.

Exit codes: 0 success, 1 failed verification or partial sweep failure,
2 usage error (bad flags or an invalid family).

Outputs go to ``--out`` (default: ``$TREECUTOFF_OUT`` or ``./treecutoff-out``)
and are written atomically.  Each run also writes ``<stem>.manifest.json``
listing the command, configuration, seed, version, timings and output
paths; JSON outputs carry the manifest file name under ``"manifest"``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ChainOperator
from .topology import (PATH, TreeFamilySpec, VertexRef, build_family_tree, canonical_starts,
                       config_to_kwargs, parse_config)

log = logging.getLogger("treecutoff")

OUT_ENV = "TREECUTOFF_OUT"
SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


# -- output plumbing -----------------------------------------------------------------

def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, (Fraction, VertexRef)):
            return str(o)
        raise TypeError(f"not serializable: {type(o).__name__}")
    return json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n"


class Run:
    """Collects outputs and timings; writes the manifest last."""

    def __init__(self, args, stem: str, config: dict):
        self.args = args
        self.out = Path(args.out or os.environ.get(OUT_ENV) or "treecutoff-out")
        self.stem = stem
        self.config = config
        self.files = []
        self.timings = {}
        self.t0 = time.perf_counter()

    @property
    def manifest_name(self) -> str:
        return f"{self.stem}.manifest.json"

    def timed(self, label):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[label] = time.perf_counter() - self.t
        return _T()

    def write(self, suffix: str, text: str) -> Path:
        path = self.out / f"{self.stem}{suffix}"
        atomic_write(path, text)
        self.files.append(str(path))
        return path

    def write_json(self, suffix: str, obj: dict) -> Path:
        obj = {"schema_version": SCHEMA_VERSION, "manifest": self.manifest_name, **obj}
        return self.write(suffix, _json(obj))

    def finish(self) -> Path:
        self.timings["total"] = time.perf_counter() - self.t0
        manifest = {"command": self.args.command, "config": self.config,
                    "seed": getattr(self.args, "seed", None), "version": __version__,
                    "schema_version": SCHEMA_VERSION,
                    "threads": getattr(self.args, "threads", None),
                    "timings": self.timings, "outputs": self.files}
        path = self.out / self.manifest_name
        atomic_write(path, _json(manifest))
        return path


# -- argument handling ------------------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}")


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}")


def _vertex(text: str) -> VertexRef:
    """``path:16`` or ``T0:5`` (heap index)."""
    try:
        region, idx = text.split(":")
        return VertexRef(region, int(idx))
    except ValueError:
        raise argparse.ArgumentTypeError(f"vertex must look like REGION:INDEX, got {text!r}")


def _family_flags(p: argparse.ArgumentParser, k_list: bool = False) -> None:
    g = p.add_argument_group("family")
    if not k_list:
        g.add_argument("--k", type=int, help="family index (>= 1)")
    g.add_argument("--base", type=int, help="level schedule n_j = base**j (default 2**(2**j))")
    g.add_argument("--alpha", type=Fraction, help="N = n_k**alpha (default 3)")
    g.add_argument("--attach-lo", type=int, help="first attached level (default ceil(k/2))")
    g.add_argument("--mode", choices=("perfect", "exact_size"), help="tree rounding mode")
    g.add_argument("--leaf-self-loops", action="store_true", default=None,
                   help="add a self-loop at every tree leaf")
    g.add_argument("--config", type=Path, help="key = value file; flags override it")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, help=f"output directory (env {OUT_ENV})")
    p.add_argument("--laziness", type=float, default=0.5, help="holding probability (default 1/2)")
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="worker threads (outputs do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")


def _spec_from_args(args, k=None) -> TreeFamilySpec:
    kwargs = {}
    if args.config is not None:
        try:
            kwargs.update(config_to_kwargs(parse_config(args.config.read_text())))
        except (OSError, ValueError) as exc:
            raise UsageError(f"--config: {exc}")
    flags = {"k": k if k is not None else getattr(args, "k", None), "base": args.base,
             "alpha": args.alpha, "attach_lo": args.attach_lo, "tree_mode": args.mode,
             "leaf_self_loops": args.leaf_self_loops}
    kwargs.update({key: v for key, v in flags.items() if v is not None})
    if "k" not in kwargs:
        raise UsageError("--k is required (on the command line or in --config)")
    try:
        return TreeFamilySpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid family: {exc}")


def _spec_config(spec: TreeFamilySpec) -> dict:
    return {"k": spec.k, "base": spec.base, "alpha": str(spec.alpha), "attach_lo": spec.lo,
            "tree_mode": spec.tree_mode, "leaf_self_loops": spec.leaf_self_loops}


def _stem(command: str, spec: TreeFamilySpec) -> str:
    base = "c" if spec.base is None else f"b{spec.base}"
    stem = f"{command}_k{spec.k}_{base}"
    if spec.alpha != 3:
        stem += f"_a{str(spec.alpha).replace('/', 'o')}"
    if spec.tree_mode != "perfect":
        stem += "_exact"
    if spec.leaf_self_loops:
        stem += "_loops"
    return stem


def _chain(args, spec):
    if not 0.0 <= args.laziness < 1.0:
        raise UsageError("--laziness must lie in [0, 1)")
    g = build_family_tree(spec)
    return g, ChainOperator(g, args.laziness)


def _resolve(g, v: VertexRef) -> VertexRef:
    try:
        g.encode(v)
    except Exception as exc:
        raise UsageError(f"bad vertex {v}: {exc}")
    return g.canonical(v)


# -- commands -----------------------------------------------------------------------

def cmd_build(args) -> int:
    spec = _spec_from_args(args)
    run = Run(args, _stem("build", spec), _spec_config(spec))
    with run.timed("build"):
        g = build_family_tree(spec)
    summary = g.summary()
    run.write_json(".json", {"summary": summary})
    lines = ["region,root_pos,level,requested_size,size,depth,perfect"]
    for r in g.regions:
        lines.append(f"{r.name},{r.root_pos},{'' if r.level is None else r.level},"
                     f"{r.requested_size},{r.size},{r.depth},{int(r.is_perfect)}")
    run.write("_regions.csv", "\n".join(lines) + "\n")
    run.finish()
    print(_json(summary), end="")
    return 0


def cmd_profile(args) -> int:
    from .mixing import mixing_time, start_profile, worst_case_profile

    spec = _spec_from_args(args)
    g, c = _chain(args, spec)
    run = Run(args, _stem("profile", spec), {**_spec_config(spec), "laziness": args.laziness,
                                              "start": None if args.start is None else str(args.start)})
    with run.timed("profile"):
        if args.start is None:
            prof = worst_case_profile(g, args.laziness)
        else:
            prof = start_profile(c, _resolve(g, args.start))
        if args.t_grid:
            grid = sorted(set(args.t_grid))
        else:
            hi = 2 * mixing_time(prof, 0.01)
            grid = sorted(set(np.linspace(0, hi, args.points).round().astype(np.int64).tolist()))
        d = prof.distance(grid)
    rows = ["t,d"] + [f"{t},{float(v)!r}" for t, v in zip(grid, d)]
    run.write(".csv", "\n".join(rows) + "\n")
    run.write_json(".json", {"start": "worst-case" if args.start is None else str(args.start),
                             "columns": ["t", "d"], "points": len(grid)})
    run.finish()
    return 0


def cmd_tmix(args) -> int:
    from .mixing import tmix_table, worst_case_profile

    spec = _spec_from_args(args)
    g, _ = _chain(args, spec)
    if any(not 0 < e < 1 for e in args.eps):
        raise UsageError("--eps values must lie in (0, 1)")
    run = Run(args, _stem("tmix", spec), {**_spec_config(spec), "laziness": args.laziness,
                                           "eps": args.eps})
    with run.timed("tmix"):
        wc = worst_case_profile(g, args.laziness)
        tm = tmix_table(wc, args.eps)
    N, k = spec.N, spec.k
    out = {"N": N, "k": k, "tmix": {str(e): t for e, t in tm.items()},
           "tmix_over_6Nk": {str(e): t / (6 * N * k) for e, t in tm.items()},
           "worst_start": {str(e): str(wc.argmax(t)) for e, t in tm.items()}}
    run.write_json(".json", out)
    run.finish()
    for e, t in tm.items():
        print(f"{e:g} {t}")
    return 0


def cmd_hitting(args) -> int:
    from .hitting import hitting_second_moment

    spec = _spec_from_args(args)
    g, c = _chain(args, spec)
    start = _resolve(g, args.start or VertexRef(PATH, g.path_length))
    target = _resolve(g, args.target or VertexRef(PATH, 0))
    run = Run(args, _stem("hitting", spec), {**_spec_config(spec), "laziness": args.laziness,
                                              "start": str(start), "target": str(target)})
    with run.timed("solve"):
        m = hitting_second_moment(c, target)
    x = g.encode(start)
    E, V = float(m.mean[x]), float(m.variance[x])
    N, k = spec.N, spec.k
    out = {"start": str(start), "target": str(target), "mean": E, "variance": V,
           "mean_over_6Nk": E / (6 * N * k), "var_over_N2k": V / (N * N * k),
           "var_over_mean2": V / (E * E) if E > 0 else None, "residuals": m.residuals}
    run.write_json(".json", out)
    states = range(g.vertex_count) if args.all_states else \
        sorted({g.encode(VertexRef(PATH, p)) for p in range(g.path_length + 1)}
               | {g.encode(s) for s in canonical_starts(g)})
    run.write(".csv", m.to_csv(states))
    run.finish()
    print(f"mean {E!r}\nvariance {V!r}")
    return 0


def cmd_spectral(args) -> int:
    from .spectral import (complement_poincare_check, poincare_csv, poincare_line_check,
                           poincare_tree_check, relaxation_time)

    spec = _spec_from_args(args)
    g, c = _chain(args, spec)
    run = Run(args, _stem("spectral", spec), {**_spec_config(spec), "laziness": args.laziness,
                                               "method": args.method, "seed": args.seed})
    with run.timed("relaxation"):
        rep = relaxation_time(c, args.method, seed=args.seed, bottleneck_sets=["T0"])
    out = {"report": rep.to_dict(), "t_rel_over_N": rep.t_rel / spec.N,
           "cheeger_consistent": rep.cheeger_consistent()}
    if args.poincare:
        with run.timed("poincare"):
            line = poincare_line_check(args.line_n, args.trials, args.seed)
            tree = poincare_tree_check(args.tree_sizes, args.laziness, args.trials, args.seed)
            comp = complement_poincare_check(g, args.laziness, args.trials, args.seed)
        out["poincare"] = {"line": line, "tree": {k: v for k, v in tree.items() if k != "rows"},
                           "complement": comp}
        run.write("_poincare_tree.csv", poincare_csv(tree["rows"]))
    run.write_json(".json", out)
    run.finish()
    print(f"lambda_2 {rep.lambda_2!r}\nt_rel {rep.t_rel!r}")
    return 0


def cmd_mc(args) -> int:
    from .montecarlo import MCConfig, sample_hitting_time

    spec = _spec_from_args(args)
    g, c = _chain(args, spec)
    start = _resolve(g, args.start or VertexRef(PATH, g.path_length))
    target = _resolve(g, args.target or VertexRef(PATH, 0))
    cfg = MCConfig(args.seed, args.replicates, args.max_steps, threads=args.threads)
    run = Run(args, _stem("mc", spec), {**_spec_config(spec), "laziness": args.laziness,
                                         "start": str(start), "target": str(target),
                                         "replicates": args.replicates,
                                         "max_steps": args.max_steps})
    with run.timed("simulate"):
        st = sample_hitting_time(c, start, target, cfg)
    summary = st.summary()
    summary["decomposition_exact"] = st.check_decomposition()
    summary["L_mean"] = dict(zip(st.regions, st.L.mean(axis=0).tolist()))
    summary["D_mean"] = dict(zip(st.regions, st.D.mean(axis=0).tolist()))
    run.write_json(".json", summary)
    if args.samples:
        run.write("_samples.csv", st.to_csv())
    run.finish()
    print(f"mean {summary['mean']!r} se {summary['se_mean']!r}\n"
          f"var {summary['var']!r} se {summary['se_var']!r}\ntruncations {summary['truncations']}")
    return 0 if summary["truncations"] == 0 else 1


def cmd_couple(args) -> int:
    from .montecarlo import MCConfig, simulate_coupling

    spec = _spec_from_args(args)
    if spec.tree_mode != "perfect":
        raise UsageError("the coupling needs --mode perfect")
    g, c = _chain(args, spec)
    start = _resolve(g, args.start or VertexRef(PATH, g.path_length))
    cfg = MCConfig(args.seed, args.replicates, args.max_steps, threads=args.threads)
    run = Run(args, _stem("couple", spec), {**_spec_config(spec), "laziness": args.laziness,
                                             "start": str(start), "replicates": args.replicates,
                                             "max_steps": args.max_steps})
    with run.timed("simulate"):
        st = simulate_coupling(c, start, cfg)
    N, k = spec.N, spec.k
    grid = args.t_grid or np.linspace(0, 12 * N * k, 49).round().astype(np.int64).tolist()
    p, se = st.survival(grid)
    rows = ["t,p_tau_gt_t,se"] + [f"{t},{float(a)!r},{float(b)!r}" for t, a, b in zip(grid, p, se)]
    run.write("_survival.csv", "\n".join(rows) + "\n")
    run.write_json(".json", {"start": str(start), "truncations": int(st.truncated.sum()),
                             "phases_ordered": st.phases_ordered(), **st.metadata,
                             "tau_mean": float(st.tau[~st.truncated].mean()) if (~st.truncated).any() else None})
    if args.samples:
        run.write("_samples.csv", st.to_csv())
    run.finish()
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suite

    spec = _spec_from_args(args)
    run = Run(args, _stem("verify", spec), {**_spec_config(spec), "seed": args.seed,
                                             "mc_replicates": args.mc_replicates})
    with run.timed("suite"):
        results = run_suite(spec, seed=args.seed, threads=args.threads,
                            mc_replicates=args.mc_replicates)
    ok = all(r["passed"] for r in results if not r.get("skipped"))
    run.write_json(".json", {"passed": ok, "checks": results})
    run.finish()
    for r in results:
        status = "SKIP" if r.get("skipped") else ("PASS" if r["passed"] else "FAIL")
        print(f"{status} {r['name']}")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    from .mixing import cutoff_report

    specs = []
    for k in args.k_list:
        specs.append(_spec_from_args(args, k=k))
    base = "c" if specs[0].base is None else f"b{specs[0].base}"
    run = Run(args, f"sweep_k{'-'.join(map(str, args.k_list))}_{base}",
              {**_spec_config(specs[0]), "k": args.k_list, "eps": args.eps})
    with run.timed("sweep"):
        rep = cutoff_report(specs, args.eps)
    run.write(".csv", rep.to_csv())
    run.write_json(".json", json.loads(rep.to_json()))
    run.finish()
    failed = [r for r in rep.rows if r.error]
    for r in rep.rows:
        print(f"k={r.k} " + ("ERROR " + r.error if r.error else
                             " ".join(f"{e:g}:{t}" for e, t in r.tmix.items())))
    return 1 if failed else 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treecutoff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build", help="construct a family member and print its summary")
    _family_flags(s)
    _common(s)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("profile", help="exact d(t) on a grid")
    _family_flags(s)
    _common(s)
    s.add_argument("--start", type=_vertex, help="start vertex (default: worst canonical start)")
    s.add_argument("--t-grid", type=_int_list)
    s.add_argument("--points", type=_positive_int, default=201)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("tmix", help="exact worst-case mixing times")
    _family_flags(s)
    _common(s)
    s.add_argument("--eps", type=_float_list, default=[0.1, 0.25, 0.9])
    s.set_defaults(func=cmd_tmix)

    s = sub.add_parser("hitting", help="exact hitting-time moments")
    _family_flags(s)
    _common(s)
    s.add_argument("--start", type=_vertex)
    s.add_argument("--target", type=_vertex)
    s.add_argument("--all-states", action="store_true", help="CSV row for every state")
    s.set_defaults(func=cmd_hitting)

    s = sub.add_parser("spectral", help="relaxation time, bottleneck and Poincare constants")
    _family_flags(s)
    _common(s)
    s.add_argument("--method", choices=("auto", "dense", "power", "quotient"), default="auto")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--poincare", action="store_true")
    s.add_argument("--trials", type=_positive_int, default=1000)
    s.add_argument("--line-n", type=_positive_int, default=64)
    s.add_argument("--tree-sizes", type=_int_list, default=[7, 15, 31, 63, 127, 255])
    s.set_defaults(func=cmd_spectral)

    for name, func, helptext in (("mc", cmd_mc, "simulate hitting times"),
                                 ("couple", cmd_couple, "simulate the coupling")):
        s = sub.add_parser(name, help=helptext)
        _family_flags(s)
        _common(s)
        s.add_argument("--seed", type=_seed, required=True)
        s.add_argument("--replicates", type=_positive_int, default=10_000)
        s.add_argument("--max-steps", type=_positive_int, default=10**9)
        s.add_argument("--start", type=_vertex)
        s.add_argument("--samples", action="store_true", help="write per-replicate CSV")
        if name == "mc":
            s.add_argument("--target", type=_vertex)
        else:
            s.add_argument("--t-grid", type=_int_list)
        s.set_defaults(func=func)

    s = sub.add_parser("verify", help="run the property suite")
    _family_flags(s)
    _common(s)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--mc-replicates", type=_positive_int, default=20_000)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="cutoff report across k")
    _family_flags(s, k_list=True)
    _common(s)
    s.add_argument("--k-list", type=_int_list, default=[2, 3])
    s.add_argument("--eps", type=_float_list, default=[0.1, 0.25, 0.5, 0.75, 0.9])
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    return 2  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
