"""Command-line driver.

``markov-sa <subcommand> --config cfg.json --out dir [--seed N] [--jobs N]``

Exit codes: 0 all enabled checks pass, 1 a check failed, 2 invalid
configuration, 3 I/O failure. Every run writes ``manifest.json`` listing the
config, the tool version, wall time, verdicts and every emitted file.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (DEFAULT_DELTAS, AnalysisError, concentration_ensemble, dumps, fit_as_rate,
                       lp_moment_curve, run_ensemble, write_summary_json)
from .chain import ChainError
from .diagnostics import (decompose_noise, verify_drift_inequality, verify_interval_drift,
                          verify_noise_bounds, write_diagnostics_csv)
from .engine import DivergenceError, off_policy_td_map, q_learning_map, run_sa, run_skeleton
from .lyapunov import MoreauConfig, check_smoothness, moreau_value, norm_m, pick_xi
from .mdp import CoverageError, Mdp, MdpError, Policy, induced_triple_chain, random_mdp, solve_q_star
from .rng import member_seed
from .schedule import (LemmaCheckFailure, ScheduleError, StepSizeSchedule, compute_anchors,
                       verify_lemma_lr_bounds)

SUBCOMMANDS = ("run-sa", "run-q", "run-td", "anchors", "moreau-check", "rate-fit",
               "concentration", "lp")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ------------------------------------------------------------------ config


def _get(doc: dict, path: str, kind, default=..., check=None, why: str = ""):
    cur = doc
    for key in path.split("."):
        if not isinstance(cur, dict) or key not in cur:
            if default is ...:
                raise ConfigError(path, "missing required field")
            return default
        cur = cur[key]
    if kind is float and isinstance(cur, int) and not isinstance(cur, bool):
        cur = float(cur)
    if not isinstance(cur, kind) or (kind is not bool and isinstance(cur, bool)):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(path, f"expected {name}, got {type(cur).__name__}")
    if check is not None and not check(cur):
        raise ConfigError(path, why or f"invalid value {cur!r}")
    return cur


@dataclass
class Setup:
    kind: str
    doc: dict
    out: Path
    jobs: int | None
    master_seed: int
    mdp: Mdp | None = None
    mu: Policy | None = None
    pi: Policy | None = None
    schedule: StepSizeSchedule | None = None
    umap: object = None
    kernel: object = None


def _positive(x):
    return x > 0


def _load_policy(spec, mdp: Mdp, path: str, base: Path) -> Policy:
    if spec == "uniform":
        return Policy.uniform(mdp.n_states, mdp.n_actions)
    if isinstance(spec, dict) and "path" in spec:
        p = _get(spec, "path", str)
        try:
            pol = Policy.from_json(base / p)
        except OSError as exc:
            raise ConfigError(f"{path}.path", f"cannot read {p}: {exc.strerror}") from None
        except (MdpError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from None
    elif isinstance(spec, dict) and "greedy_weight" in spec:
        wgt = _get(spec, "greedy_weight", float, check=lambda x: 0 <= x <= 1,
                   why="must lie in [0, 1]")
        q = solve_q_star(mdp)
        A = mdp.n_actions
        probs = np.full((mdp.n_states, A), (1 - wgt) / (A - 1) if A > 1 else 0.0)
        probs[np.arange(mdp.n_states), q.argmax(axis=1)] = wgt if A > 1 else 1.0
        pol = Policy(probs)
    elif isinstance(spec, list):
        try:
            pol = Policy(np.array(spec, dtype=float))
        except (MdpError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from None
    else:
        raise ConfigError(path, 'expected "uniform", {"path": ...}, {"greedy_weight": w} or a matrix')
    if pol.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(path, f"policy shape {pol.probs.shape} does not match the MDP")
    return pol


def _load_mdp(doc: dict, base: Path) -> Mdp:
    spec = _get(doc, "mdp", dict)
    if "path" in spec:
        p = _get(doc, "mdp.path", str)
        try:
            return Mdp.from_json(base / p)
        except OSError as exc:
            raise ConfigError("mdp.path", f"cannot read {p}: {exc.strerror}") from None
        except (MdpError, KeyError, ValueError) as exc:
            raise ConfigError("mdp.path", f"invalid MDP file: {exc}") from None
    if "random" in spec:
        n_s = _get(doc, "mdp.random.n_states", int, check=_positive, why="must be positive")
        n_a = _get(doc, "mdp.random.n_actions", int, check=_positive, why="must be positive")
        gamma = _get(doc, "mdp.random.gamma", float, check=lambda g: 0 <= g < 1, why="must lie in [0, 1)")
        seed = _get(doc, "mdp.random.seed", int)
        return random_mdp(n_s, n_a, gamma, seed)
    if "reward" in spec:
        try:
            return Mdp.from_dict(spec)
        except (MdpError, KeyError, ValueError) as exc:
            raise ConfigError("mdp", str(exc)) from None
    raise ConfigError("mdp", 'expected "path", "random" or an inline MDP')


def _load_schedule(doc: dict) -> StepSizeSchedule:
    family = _get(doc, "schedule.family", str, check=lambda f: f in ("LR1", "LR2"),
                  why='must be "LR1" or "LR2"')
    c_alpha = _get(doc, "schedule.c_alpha", float)
    nu = _get(doc, "schedule.nu", float)
    try:
        return StepSizeSchedule(family, c_alpha, nu)
    except ScheduleError as exc:
        raise ConfigError(f"schedule.{exc.field}", str(exc)) from None


def load_config(kind: str, path: str, out: str | None, seed: int | None, jobs: int | None) -> Setup:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    declared = doc.get("experiment", kind)
    if declared != kind:
        raise ConfigError("experiment", f"config is for {declared!r}, not {kind!r}")
    base = Path(path).resolve().parent
    out_dir = out or _get(doc, "out", str, default=None)
    if out_dir is None:
        raise ConfigError("out", "no output directory (use --out or the out field)")
    if jobs is None:
        jobs = _get(doc, "jobs", int, default=None, check=_positive, why="must be positive")
    elif jobs < 1:
        raise ConfigError("--jobs", "must be positive")
    master = seed if seed is not None else _get(doc, "run.master_seed", int, default=0,
                                                check=lambda s: s >= 0, why="must be nonnegative")
    st = Setup(kind, doc, Path(out_dir), jobs, master)
    if kind in ("run-sa", "run-q", "run-td", "rate-fit", "concentration", "lp"):
        st.mdp = _load_mdp(doc, base)
        st.mu = _load_policy(doc.get("behavior_policy", "uniform"), st.mdp, "behavior_policy", base)
        if _map_kind(st) == "td":
            if "target_policy" not in doc:
                raise ConfigError("target_policy", "missing required field for off-policy TD")
            st.pi = _load_policy(doc["target_policy"], st.mdp, "target_policy", base)
        st.umap, st.kernel = _build_map(st)
    if kind in ("run-sa", "run-q", "run-td", "anchors", "rate-fit", "concentration", "lp"):
        st.schedule = _load_schedule(doc)
    _validate_kind(st)
    return st


def _map_kind(st: Setup) -> str:
    if st.kind == "run-q":
        return "q"
    if st.kind == "run-td":
        return "td"
    return _get(st.doc, "map", str, default="q", check=lambda m: m in ("q", "td"), why='must be "q" or "td"')


def _validate_kind(st: Setup) -> None:
    d = st.doc
    if st.kind in ("run-sa", "run-q", "run-td"):
        if _get(d, "run.log_intervals", bool, default=False):
            _get(d, "run.n_intervals", int, check=lambda n: n >= 1, why="must be positive")
        else:
            _get(d, "run.steps", int, check=_positive, why="must be positive")
        _get(d, "run.n_seeds", int, default=1, check=_positive, why="must be positive")
    if st.kind == "anchors":
        _get(d, "run.n_intervals", int, check=lambda n: n >= 1, why="must be positive")
    if st.kind in ("rate-fit", "concentration", "lp"):
        _get(d, "run.steps", int, check=_positive, why="must be positive")
        _get(d, "run.n_seeds", int, check=_positive, why="must be positive")
    if st.kind == "rate-fit":
        if st.schedule.family != "LR1":
            raise ConfigError("schedule.family", "rate-fit needs an LR1 schedule")
        zeta = _get(d, "analysis.zeta", float, check=_positive, why="must be positive")
        if st.schedule.nu < 1 and not zeta < 1.5 * st.schedule.nu - 1:
            raise ConfigError("analysis.zeta", f"must be below 3/2 nu - 1 = {1.5 * st.schedule.nu - 1:g}")
    if st.kind == "concentration":
        if st.schedule.family != "LR2":
            raise ConfigError("schedule.family", "concentration needs an LR2 schedule")
        if _get(d, "run.n_seeds", int) < 100:
            raise ConfigError("run.n_seeds", "concentration needs at least 100 seeds")
        deltas = _get(d, "analysis.deltas", list, default=list(DEFAULT_DELTAS))
        if not deltas or any(not isinstance(x, (int, float)) or not 0 < x < 1 for x in deltas) \
                or any(a <= b for a, b in zip(deltas, deltas[1:])):
            raise ConfigError("analysis.deltas", "must be a strictly decreasing list in (0, 1)")
    if st.kind == "lp":
        _get(d, "analysis.p", int, check=lambda p: p >= 2, why="must be an integer >= 2")
        if _get(d, "run.n_seeds", int) < 100:
            raise ConfigError("run.n_seeds", "lp needs at least 100 seeds")
    if st.kind == "moreau-check":
        _get(d, "moreau.dim", int, check=_positive, why="must be positive")
        _get(d, "moreau.xi", float, default=1.0, check=_positive, why="must be positive")
        _get(d, "moreau.samples", int, default=1000, check=_positive, why="must be positive")
        kappas = _get(d, "moreau.kappas", list, default=[0.0, 0.5, 0.9])
        if any(not isinstance(k, (int, float)) or not 0 <= k < 1 for k in kappas):
            raise ConfigError("moreau.kappas", "every kappa must lie in [0, 1)")
    ratio = _get(d, "run.checkpoint_ratio", (int, float, type(None)), default=1.1)
    if ratio is not None and not ratio > 1:
        raise ConfigError("run.checkpoint_ratio", "must exceed 1 (or be null for every step)")


# ----------------------------------------------------------------- outputs


class Outputs:
    def __init__(self, out: Path):
        self.out = out
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name


def _build_map(st: Setup):
    chain = induced_triple_chain(st.mdp, st.mu)
    try:
        if _map_kind(st) == "q":
            return q_learning_map(st.mdp, st.mu, chain), chain.kernel
        return off_policy_td_map(st.mdp, st.mu, st.pi, chain), chain.kernel
    except CoverageError as exc:
        raise ConfigError("target_policy", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("behavior_policy", str(exc)) from None


def _checkpoints(st: Setup):
    return _get(st.doc, "run.checkpoint_ratio", (int, float, type(None)), default=1.1)


def _w0(st: Setup, umap):
    w0 = st.doc.get("run", {}).get("w0")
    if w0 is None:
        return np.zeros(umap.dim)
    w0 = np.asarray(w0, dtype=float)
    if w0.shape != (umap.dim,):
        raise ConfigError("run.w0", f"expected a list of {umap.dim} numbers")
    return w0


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _do_run(st: Setup, io: Outputs) -> dict:
    umap, kernel = st.umap, st.kernel
    n_seeds = _get(st.doc, "run.n_seeds", int, default=1)
    w0 = _w0(st, umap)
    verdicts: dict = {}
    with open(io.path("final.csv"), "w") as fh:
        fh.write("seed,index,value,fixed_point\n")
        for i in range(n_seeds):
            seed = member_seed(st.master_seed, i)
            if _get(st.doc, "run.log_intervals", bool, default=False):
                anchors = _anchors(st)
                rec = run_skeleton(umap, kernel, st.schedule, anchors, w0, seed,
                                   checkpoints=_checkpoints(st), store_iterates=False)
                rec.intervals_to_csv(io.path(f"intervals_{i}.csv"), umap.fixed_point)
                verdicts.update(_interval_checks(st, io, umap, kernel, anchors, rec, i))
            else:
                rec = run_sa(umap, kernel, st.schedule, w0, _get(st.doc, "run.steps", int), seed,
                             checkpoints=_checkpoints(st), store_iterates=False)
            rec.to_csv(io.path(f"trajectory_{i}.csv"))
            for j, (v, ws) in enumerate(zip(rec.final, umap.fixed_point)):
                fh.write(f"{seed},{j},{_fmt(v)},{_fmt(ws)}\n")
    return verdicts


def _interval_checks(st, io, umap, kernel, anchors, rec, i) -> dict:
    xi, kp = pick_xi(umap.kappa, umap.dim)
    lyap = MoreauConfig(umap.dim, xi)
    diags = decompose_noise(rec, umap, kernel, anchors, lyap)
    recon = max(d.reconstruction_error for d in diags)
    center = max(d.centering_error for d in diags)
    out = {f"seed{i}.reconstruction": recon <= 1e-10, f"seed{i}.centering": center <= 1e-10}
    gr = verify_interval_drift(diags, umap)
    out[f"seed{i}.interval_drift"] = gr.holds
    fit = drift = None
    if len(diags) >= 100:
        fit = verify_noise_bounds(diags, anchors)
        drift = verify_drift_inequality(diags, anchors, lyap, kp)
        out[f"seed{i}.noise_bounds_stable"] = fit.stable
        out[f"seed{i}.drift_coverage"] = drift.coverage == 1.0
    if fit is not None:
        write_diagnostics_csv(io.path(f"diagnostics_{i}.csv"), diags, fit, drift)
    return out


def _anchors(st: Setup):
    s = st.doc["schedule"]
    n = _get(st.doc, "run.n_intervals", int)
    try:
        return compute_anchors(st.schedule, n, s.get("nu1"), s.get("nu2"))
    except ScheduleError as exc:
        raise ConfigError(f"schedule.{exc.field}", str(exc)) from None


def _do_anchors(st: Setup, io: Outputs) -> dict:
    anchors = _anchors(st)
    anchors.to_csv(io.path("anchors.csv"))
    exact = bool(np.all(anchors.big_t <= anchors.bar_alpha))
    max_m0 = _get(st.doc, "analysis.max_m0", int, default=200, check=lambda m: m >= 0,
                  why="must be nonnegative")
    try:
        chk = verify_lemma_lr_bounds(anchors, st.schedule)
    except LemmaCheckFailure as exc:
        summary = {"bounded": False, "message": str(exc)}
        verdicts = {"T_le_bar_alpha": exact, "alpha_bounded_by_T_squared": False}
    else:
        band = bool(np.all(anchors.ratio()[chk.m0:] <= 2.0))
        summary = {"bounded": chk.bounded, "m0": chk.m0, "c_fit": chk.c_fit,
                   "max_ratio_beyond_m0": float(anchors.ratio()[chk.m0:].max())}
        verdicts = {"T_le_bar_alpha": exact, "alpha_bounded_by_T_squared": chk.bounded,
                    "bar_alpha_le_2T_beyond_m0": band, "m0_within_limit": chk.m0 <= max_m0}
    with open(io.path("lemma.json"), "w") as fh:
        fh.write(dumps(summary) + "\n")
    return verdicts


def _do_moreau(st: Setup, io: Outputs) -> dict:
    d = st.doc
    dim = _get(d, "moreau.dim", int)
    xi = _get(d, "moreau.xi", float, default=1.0)
    samples = _get(d, "moreau.samples", int, default=1000)
    kappas = _get(d, "moreau.kappas", list, default=[0.0, 0.5, 0.9])
    rng = np.random.default_rng(st.master_seed)
    one = MoreauConfig(1, xi)
    closed = max(abs(moreau_value(one, [w]) - w * w / (2 * (1 + xi))) for w in rng.normal(size=100) * 3)
    cfg = MoreauConfig(dim, xi)
    worst = 0.0
    for _ in range(10_000):
        w = rng.normal(size=dim)
        m = norm_m(cfg, w)
        nrm = float(np.abs(w).max())
        worst = max(worst, cfg.l_cm * m - nrm - 1e-9, nrm - cfg.u_cm * m - 1e-9)
    smooth = check_smoothness(cfg, samples=samples, seed=st.master_seed)
    picks = {str(k): pick_xi(float(k), dim) for k in kappas}
    report = {
        "closed_form_max_error": closed,
        "norm_equivalence_max_excess": max(worst, 0.0),
        "smoothness_max_violation": smooth.max_violation,
        "smoothness_max_violation_flipped_orientation": smooth.max_violation_flipped,
        "pick_xi": {k: {"xi": v[0], "kappa_prime": v[1]} for k, v in picks.items()},
    }
    with open(io.path("moreau.json"), "w") as fh:
        fh.write(dumps(report) + "\n")
    return {
        "closed_form": closed <= 1e-8,
        "norm_equivalence": worst <= 0.0,
        "smoothness": smooth.max_violation <= 1e-4,
        "pick_xi": all(v[1] >= (1 - float(k)) / 2 for k, v in picks.items()),
    }


def _do_rate(st: Setup, io: Outputs) -> dict:
    umap, kernel = st.umap, st.kernel
    steps = _get(st.doc, "run.steps", int)
    n = _get(st.doc, "run.n_seeds", int)
    zeta = _get(st.doc, "analysis.zeta", float)
    decades = _get(st.doc, "analysis.decades", int, default=2, check=_positive, why="must be positive")
    min_pass = _get(st.doc, "analysis.min_pass", int, default=n)
    recs = run_ensemble(umap, kernel, st.schedule, steps, n, st.master_seed, _w0(st, umap),
                        _checkpoints(st), st.jobs)
    fits = []
    for i, rec in enumerate(recs):
        if rec is None:
            continue
        f = fit_as_rate(rec, zeta, decades=decades)
        f.to_csv(io.path(f"envelope_{i}.csv"))
        rec.to_csv(io.path(f"trajectory_{i}.csv"))
        fits.append((rec.seed, f))
    write_summary_json(io.path("summary.json"), rate_fits=fits)
    passed = sum(f.verdict for _, f in fits)
    return {"rate_fit_passes": passed >= min_pass, "no_divergent_seeds": len(fits) == n}


def _do_concentration(st: Setup, io: Outputs) -> dict:
    umap, kernel = st.umap, st.kernel
    deltas = _get(st.doc, "analysis.deltas", list, default=list(DEFAULT_DELTAS))
    summ = concentration_ensemble(umap, kernel, st.schedule, _get(st.doc, "run.n_seeds", int),
                                  _get(st.doc, "run.steps", int), st.master_seed, deltas=deltas,
                                  w0=_w0(st, umap), jobs=st.jobs)
    summ.quantiles_to_csv(io.path("quantiles.csv"))
    summ.seeds_to_csv(io.path("seeds.csv"))
    write_summary_json(io.path("summary.json"), concentration=summ)
    return {"no_divergent_seeds": summ.n_divergent == 0, "polylog_quantiles": summ.polylog_ok}


def _do_lp(st: Setup, io: Outputs) -> dict:
    umap, kernel = st.umap, st.kernel
    recs = run_ensemble(umap, kernel, st.schedule, _get(st.doc, "run.steps", int),
                        _get(st.doc, "run.n_seeds", int), st.master_seed, _w0(st, umap),
                        _checkpoints(st), st.jobs)
    if any(r is None for r in recs):
        return {"no_divergent_seeds": False}
    curve = lp_moment_curve(recs, _get(st.doc, "analysis.p", int))
    curve.to_csv(io.path("moments.csv"))
    write_summary_json(io.path("summary.json"), lp=curve)
    return {"final_decade_decreasing": curve.decreasing}


HANDLERS = {
    "run-sa": _do_run, "run-q": _do_run, "run-td": _do_run, "anchors": _do_anchors,
    "moreau-check": _do_moreau, "rate-fit": _do_rate, "concentration": _do_concentration,
    "lp": _do_lp,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="markov-sa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides the config's out field)")
        p.add_argument("--seed", type=int, help="master seed (overrides run.master_seed)")
        p.add_argument("--jobs", type=int, help="worker threads for ensembles")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        st = load_config(args.command, args.config, args.out, args.seed, args.jobs)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        st.out.mkdir(parents=True, exist_ok=True)
        io = Outputs(st.out)
        try:
            verdicts = {k: bool(v) if isinstance(v, np.bool_) else v
                        for k, v in HANDLERS[st.kind](st, io).items()}
        except ConfigError as exc:
            print(f"invalid config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (ChainError, MdpError, AnalysisError, DivergenceError) as exc:
            print(f"check failed: {exc}", file=sys.stderr)
            verdicts = {"error": False, "message": str(exc)}
        manifest = {
            "tool": "markov-sa",
            "version": __version__,
            "command": st.kind,
            "config": _echo(st),
            "wall_time_s": time.perf_counter() - start,
            "verdicts": verdicts,
            "files": sorted(io.files) + ["manifest.json"],
        }
        with open(st.out / "manifest.json", "w") as fh:
            fh.write(dumps(manifest) + "\n")
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    ok = all(v for k, v in verdicts.items() if isinstance(v, bool))
    for k, v in verdicts.items():
        if isinstance(v, bool):
            print(f"{'PASS' if v else 'FAIL'} {k}")
    return EXIT_OK if ok else EXIT_CHECK


def _echo(st: Setup) -> dict:
    doc = copy.deepcopy(st.doc)
    doc.setdefault("run", {})["master_seed"] = st.master_seed
    doc["out"] = os.fspath(st.out)
    if st.jobs is not None:
        doc["jobs"] = st.jobs
    return doc


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
