"""Command-line pipeline: simulate, fit, profile, evaluate, print-config.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 partial failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import multiprocessing
import os
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from .eventgen import DecompositionHypothesis, make_event
from .fitter import FitConfig, fit_best_image, fit_likelihood, neg2_log_likelihood, profile_parameter
from .forward import ForwardModel, generate, param_names, param_vector
from .metrics import csv_tables, image_track_length, score_event, summarize
from .physics import PhysicsConstants
from .records import (
    SchemaError,
    dumps,
    event_to_record,
    header,
    read_records,
    record_to_event,
    write_records,
)
from .rng import derive_seed
from .seeder import STOP_THRESHOLD_PE, peel

log = logging.getLogger("vadecomp")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PARTIAL = 0, 1, 2, 3


@dataclass
class RunConfig:
    seed: int | None = None
    events: int = 100
    scenario: int = 1
    noise: str = "off"              # off | poisson
    algorithm: str = "alg2"         # alg1 | alg2
    template: str = "draws"         # draws | expectation
    n: int = 200
    m_factor: int = 50
    lr_vertex: float = 0.005
    lr_ke: float = 0.05
    lr_dir: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    polish_iters: int = 1000
    max_particles: int = 6
    stop_threshold_pe: float = STOP_THRESHOLD_PE
    noise_allowance: float = -1.0   # sigma of Poisson noise ignored by the seeder; <0 follows --noise
    workers: int = 1
    param: str = "ke0"
    grid_points: int = 21
    grid_span: float = 0.0          # 0 picks a span from the parameter type
    consts: PhysicsConstants = field(default_factory=PhysicsConstants)

    def fit_config(self) -> FitConfig:
        return FitConfig(n=self.n, m_factor=self.m_factor, lr_vertex=self.lr_vertex, lr_ke=self.lr_ke,
                         lr_dir=self.lr_dir, adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
                         adam_eps=self.adam_eps, polish_iters=self.polish_iters, seed=int(self.seed or 0))

    def validate(self):
        if self.seed is None:
            raise UsageError("a seed is required (--seed or seed = ... in the config file)")
        choices = {"scenario": (1, 2), "noise": ("off", "poisson"), "algorithm": ("alg1", "alg2"),
                   "template": ("draws", "expectation")}
        for k, allowed in choices.items():
            if getattr(self, k) not in allowed:
                raise UsageError(f"{k} must be one of {allowed}, got {getattr(self, k)!r}")
        if self.events < 0 or self.workers < 1 or self.grid_points < 3:
            raise UsageError("events >= 0, workers >= 1 and grid_points >= 3 are required")
        try:
            self.fit_config()
        except ValueError as e:
            raise UsageError(str(e)) from None

    def flat(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "consts":
                for c in fields(PhysicsConstants):
                    out[c.name] = getattr(self.consts, c.name)
            else:
                out[f.name] = getattr(self, f.name)
        return out


class UsageError(Exception):
    pass


def _coerce(name, raw, typ):
    try:
        if typ is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None


_TYPES = {"seed": int, "events": int, "scenario": int, "n": int, "m_factor": int, "workers": int,
          "max_particles": int, "grid_points": int, "polish_iters": int}


def load_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from e
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    cfg = RunConfig()
    const_names = {f.name for f in fields(PhysicsConstants)}
    run_names = {f.name: f for f in fields(RunConfig) if f.name != "consts"}
    consts = {}
    for source in (file_values, overrides):
        for k, v in source.items():
            if v is None:
                continue
            if k in const_names:
                consts[k] = _coerce(k, v, float) if isinstance(v, str) else float(v)
            elif k in run_names:
                typ = _TYPES.get(k, type(getattr(cfg, k)) if getattr(cfg, k) is not None else str)
                setattr(cfg, k, _coerce(k, v, typ) if isinstance(v, str) else v)
            else:
                raise UsageError(f"unknown config key {k!r}")
    try:
        cfg.consts = PhysicsConstants(**consts)
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


# ---------------------------------------------------------------- workers

def _pool_map(fn, items, workers):
    """Ordered map; results come back in input order at any worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("spawn" if sys.platform == "darwin" else "fork")
    with ctx.Pool(workers) as pool:
        return pool.map(fn, items, chunksize=1)


def _simulate_one(args):
    i, cfg = args
    ev = make_event(cfg.seed, i, cfg.scenario, cfg.consts, noise=cfg.noise == "poisson")
    return event_to_record(i, ev, cfg.scenario, cfg.noise == "poisson")


def _noise_allowance(cfg):
    if cfg.noise_allowance >= 0:
        return cfg.noise_allowance
    return 2.0 if cfg.noise == "poisson" else 0.0


def seed_event(ev, cfg: RunConfig):
    return peel(ev.target, ev.muon, cfg.consts, max_particles=cfg.max_particles,
                stop_threshold_pe=cfg.stop_threshold_pe, identify=cfg.scenario == 2,
                noise_allowance=_noise_allowance(cfg))


def _fit_one(args):
    rec, cfg = args
    t0 = time.perf_counter()
    ev = record_to_event(rec)
    s = seed_event(ev, cfg)
    hyp = s.hypothesis()
    # per-event noise streams, independent of worker assignment
    fc = dataclasses.replace(cfg.fit_config(), seed=derive_seed(cfg.seed, rec["event_id"], 0xF17))
    if cfg.algorithm == "alg1":
        res = fit_best_image(ev.target, hyp, ev.muon, fc, cfg.consts)
    else:
        res = fit_likelihood(ev.target, hyp, ev.muon, fc, cfg.consts, expectation=cfg.template == "expectation")
    fitted = res.hypothesis.sorted()
    ell = neg2_log_likelihood(ev.target, generate(fitted, ev.muon, cfg.consts, ev.target.grid))
    out = {
        "record": "fit",
        "event_id": rec["event_id"],
        "algorithm": cfg.algorithm,
        "template": cfg.template,
        "seed": {
            "hypothesis": hyp.to_dict(),
            "type_probs": [{t.value: p for t, p in tp.items()} for tp in s.type_probs],
            "residual_pe": s.residual_pe,
            "low_confidence": s.low_confidence,
        },
        "fit": res.to_dict(),
        "hypothesis": fitted.to_dict(),
        "neg2ll": ell,
    }
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: RunConfig, out: str) -> int:
    items = [(i, cfg) for i in range(cfg.events)]
    recs = _pool_map(_simulate_one, items, cfg.workers)
    write_records(out, header("dataset", config=_config_digest(cfg)), recs)
    log.info("wrote %d events to %s", len(recs), out)
    return EXIT_OK


def _config_digest(cfg: RunConfig) -> dict:
    d = cfg.flat()
    d.pop("workers")    # output must not depend on parallelism
    return d


def _load(path, kind):
    rr = read_records(path, kind)
    for e in rr.errors:
        log.warning("%s: skipping malformed record at %s", path, e)
    return rr


def cmd_fit(cfg: RunConfig, data: str, out: str) -> int:
    rr = _load(data, "dataset")
    done = {}
    if os.path.exists(out):
        prev = _load(out, "fits")
        done = {r["event_id"]: r for _, r in prev.records}
    todo = []
    bad = len(rr.errors)
    for n, rec in rr.records:
        if rec["event_id"] in done:
            continue
        try:
            record_to_event(rec)
        except (KeyError, TypeError, ValueError) as e:
            log.warning("%s: line %d: malformed event (%s); skipped", data, n, e)
            bad += 1
            continue
        todo.append((rec, cfg))
    log.info("fitting %d events (%d already done)", len(todo), len(done))
    results = _pool_map(_fit_one, todo, cfg.workers)
    timings = []
    for r, dt in results:
        done[r["event_id"]] = r
        timings.append({"event_id": r["event_id"], "wall_time_s": dt})
    ordered = [done[k] for k in sorted(done)]
    write_records(out, header("fits", config=_config_digest(cfg)), ordered)
    # wall times are not deterministic, so they live beside the results
    with open(out + ".timing.jsonl", "a", encoding="utf-8") as f:
        for t in timings:
            f.write(dumps(t) + "\n")
    if bad:
        log.error("%d malformed records skipped", bad)
        return EXIT_PARTIAL
    return EXIT_OK


def _default_span(param: str, value: float) -> float:
    if param.startswith("ke"):
        return max(0.1 * value, 1.0)
    if param in ("x", "y", "z"):
        return 2.0
    return 10.0


def _profile_one(args):
    rec, fit, cfg = args
    ev = record_to_event(rec)
    hyp = DecompositionHypothesis.from_dict(fit["hypothesis"])
    names = param_names(hyp)
    if cfg.param not in names:
        return {"record": "profile", "event_id": rec["event_id"], "param": cfg.param,
                "error": f"parameter not present (have {names})"}
    x = param_vector(hyp)[names.index(cfg.param)]
    span = cfg.grid_span or _default_span(cfg.param, x)
    grid = x + np.linspace(-span, span, cfg.grid_points)
    if cfg.param.startswith("ke"):
        grid = grid[grid > 0]
    pr = profile_parameter(ev.target, hyp, ev.muon, cfg.param, grid, cfg.consts)
    return {"record": "profile", "event_id": rec["event_id"], **pr.to_dict()}


def cmd_profile(cfg: RunConfig, data: str, fits: str, out: str) -> int:
    rr = _load(data, "dataset")
    ff = _load(fits, "fits")
    fit_by_id = {r["event_id"]: r for _, r in ff.records}
    items, missing = [], []
    for _, rec in rr.records:
        f = fit_by_id.get(rec["event_id"])
        if f is None:
            missing.append({"record": "profile", "event_id": rec["event_id"], "param": cfg.param,
                            "error": "no fit result"})
        else:
            items.append((rec, f, cfg))
    results = _pool_map(_profile_one, items, cfg.workers) + missing
    results.sort(key=lambda r: r["event_id"])
    write_records(out, header("profiles", config=_config_digest(cfg)), results)
    failed = sum("error" in r for r in results) + len(rr.errors) + len(ff.errors)
    return EXIT_PARTIAL if failed else EXIT_OK


def evaluate_records(events: dict, fits: dict, consts) -> list:
    scores = []
    for eid in sorted(set(events) & set(fits)):
        ev = record_to_event(events[eid])
        reco = DecompositionHypothesis.from_dict(fits[eid]["hypothesis"])
        dx = ev.longest_track_mm if ev.longest_track_mm > 0 else _image_length(ev, reco, consts)
        scores.append(score_event(eid, ev.truth, reco, ev.hadron_pe, dx, ev.muon.ke, consts))
    return scores


def _image_length(ev, reco, consts):
    fm = ForwardModel(ev.muon, consts, ev.target.grid)
    res = np.maximum(ev.target.pe - fm.muon_image(reco.vertex), 0.0)
    return image_track_length(res, ev.target.grid, reco.vertex)


def cmd_evaluate(cfg: RunConfig, data: str, fits: str, out: str) -> int:
    rr = _load(data, "dataset")
    ff = _load(fits, "fits")
    events = {r["event_id"]: r for _, r in rr.records}
    fit_by_id = {r["event_id"]: r for _, r in ff.records}
    common = set(events) & set(fit_by_id)
    mismatched = sorted(set(events) ^ set(fit_by_id))
    if not common:
        log.error("no event ids in common between %s and %s", data, fits)
        return EXIT_PARTIAL
    for eid in mismatched:
        log.warning("event %s present in only one input; excluded", eid)
    report = summarize(evaluate_records(events, fit_by_id, cfg.consts))
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "report.json"), "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps({"schema_version": header("report")["schema_version"], **report.to_dict()},
                               sort_keys=True, indent=1) + "\n")
        for name, text in csv_tables(report).items():
            with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as f:
                f.write(text)
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e.strerror}") from e
    total = len(common) + len(mismatched)
    if len(mismatched) > 0.01 * total:
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------- argparse

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, fit=False):
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--scenario", type=int, choices=(1, 2))
    p.add_argument("--noise", choices=("off", "poisson"))
    if fit:
        p.add_argument("--algorithm", choices=("alg1", "alg2"))
        p.add_argument("--template", choices=("draws", "expectation"))
        p.add_argument("--n", type=int)
        p.add_argument("--m-factor", dest="m_factor", type=int)
        p.add_argument("--lr-vertex", dest="lr_vertex", type=float)
        p.add_argument("--lr-ke", dest="lr_ke", type=float)
        p.add_argument("--lr-dir", dest="lr_dir", type=float)
        p.add_argument("--polish-iters", dest="polish_iters", type=int,
                       help="L-BFGS-B finish of expectation-template fits (0 disables)")
        p.add_argument("--max-particles", dest="max_particles", type=int)
        p.add_argument("--stop-threshold-pe", dest="stop_threshold_pe", type=float)


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vadecomp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"vadecomp {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate an event dataset")
    _common(p)
    p.add_argument("--events", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="seed and fit every event of a dataset")
    _common(p, fit=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("profile", help="profile likelihood of one parameter per event")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--fits", required=True)
    p.add_argument("--param", help="parameter name, e.g. ke0, x, theta1")
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--grid-span", dest="grid_span", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="metrics report and CSV tables")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--fits", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("print-config", help="print every setting with its effective value")
    _common(p, fit=True)
    p.add_argument("--events", type=int)
    p.add_argument("--param")
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--grid-span", dest="grid_span", type=float)
    return ap


_NOT_CONFIG = {"command", "config", "out", "data", "fits", "verbose"}


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        file_values = load_config_file(args.config) if args.config else {}
        overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
        cfg = build_config(file_values, overrides)
        if args.command == "print-config":
            for k, v in cfg.flat().items():
                print(f"{k} = {'' if v is None else v}")
            return EXIT_OK
        cfg.validate()
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "fit":
            return cmd_fit(cfg, args.data, args.out)
        if args.command == "profile":
            return cmd_profile(cfg, args.data, args.fits, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.data, args.fits, args.out)
    except UsageError as e:
        print(f"vadecomp: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SchemaError) as e:
        print(f"vadecomp: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
