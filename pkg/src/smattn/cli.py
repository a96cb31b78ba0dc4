"""smattn command line: simulate, ingest, train, evaluate, ablate, intensity-export, bound, gradcheck, replay.

Every command writes its outputs plus manifest.json into --out. The manifest
echoes the fully resolved config, so `smattn replay RUN_DIR/manifest.json`
reruns the command and compares output hashes.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import config as C
from .autodiff import grad_check
from .bound import model_bound_report
from .data import (
    EventSequence, Event, build_sequences, dataset_from_dict, dataset_to_dict, normalize_time,
    parse_events, parse_group_map, split_strong_generalization, write_events,
)
from .errors import ConfigError, DataError, NumericError, SMAttnError
from .model import Batch, ModelConfig, SMAttnModel
from .regularizer import (
    IntegratorConfig, batch_negatives, compensator_terms, draw_fractions, loglik_terms, total_loss,
)
from .simulate import group_map_rows, simulate_drifting_preferences, simulate_hawkes, simulate_poisson
from .train import ablate, evaluate, train

log = logging.getLogger("smattn")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- outputs ---------------------------------------------------------------------

def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, seed, outputs: list[str], wall: float, threads):
    _write_json(out / MANIFEST, {
        "command": command,
        "version": __version__,
        "seed": seed,
        "threads": threads,
        "config": cfg,
        "wall_time": wall,
        "outputs": {name: sha256(out / name) for name in outputs},
    })


# -- datasets --------------------------------------------------------------------

def _simulate_events(cfg: dict, seed: int) -> tuple[list[Event], list[tuple[str, str]] | None]:
    sim = cfg["simulate"]
    kind = sim.get("kind", "drift")
    if kind == "drift":
        sc = C.sim_config(cfg)
        return simulate_drifting_preferences(sc, seed), group_map_rows(sc)
    users = int(sim.get("users", 50))
    horizon = float(sim.get("horizon", 100.0))
    epoch = int(sim.get("epoch", 0))
    width = len(str(users - 1))
    events = []
    for u in range(users):
        rng = np.random.default_rng([seed, u])
        if kind == "poisson":
            t = simulate_poisson(float(sim.get("rate", 0.5)), horizon, rng)
        elif kind == "hawkes":
            t = simulate_hawkes(float(sim.get("mu", 0.5)), float(sim.get("alpha", 0.5)),
                                float(sim.get("beta", 1.0)), horizon, rng)
        else:
            raise ConfigError(f"unknown simulate.kind {kind!r}")
        secs = np.ceil(t * 86400.0).astype(np.int64)
        events.extend(Event(f"u{u:0{width}d}", "i0", int(s) + epoch) for s in secs)
    return events, None


def _ingest(events, groups, cfg: dict, seed: int):
    d = cfg["data"]
    vocab, seqs = build_sequences(events, int(d["min_user_events"]), int(d["min_item_count"]))
    if groups:
        vocab = vocab.with_groups(groups)
    seqs = [normalize_time(s) for s in seqs]
    plan = split_strong_generalization(seqs, tuple(d["split_ratios"]), seed)
    return vocab, seqs, plan


def load_dataset(cfg: dict, seed: int):
    """The dataset named by data.dataset, else data.events, else an in-process simulation."""
    d = cfg["data"]
    if d.get("dataset"):
        path = C.require_path(cfg, "data", "dataset")
        try:
            return dataset_from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}: not a dataset document ({exc})") from exc
    if d.get("events"):
        path = C.require_path(cfg, "data", "events")
        with open(path, newline="") as fh:
            events = parse_events(fh, d.get("format", "csv"))
        groups = None
        if d.get("group_map"):
            with open(C.require_path(cfg, "data", "group_map"), newline="") as fh:
                groups = parse_group_map(fh)
        return _ingest(events, groups, cfg, seed)
    if cfg["simulate"].get("users") or cfg["simulate"].get("regime_bounds"):
        events, rows = _simulate_events(cfg, seed)
        return _ingest(events, dict(rows) if rows else None, cfg, seed)
    raise ConfigError("no data source: set data.dataset, data.events or a [simulate] section")


def _model_cfg(cfg: dict, vocab) -> ModelConfig:
    return C.model_config(cfg, vocab.n, vocab.groups)


def _load_checkpoint(cfg: dict, section: str):
    model, _ = checkpoint.load(C.require_path(cfg, section, "checkpoint"))
    return model


# -- commands ------------------------------------------------------------------------
# each takes (cfg, seed, out) and returns the list of files it wrote under out

def cmd_simulate(cfg, seed, out):
    events, rows = _simulate_events(cfg, seed)
    with open(out / "events.csv", "w", newline="") as fh:
        write_events(events, fh)
    written = ["events.csv"]
    if rows:
        with open(out / "groups.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["item_id", "group_id"])
            w.writerows(rows)
        written.append("groups.csv")
    log.info("simulated %d events", len(events))
    return written


def cmd_ingest(cfg, seed, out):
    vocab, seqs, plan = load_dataset(cfg, seed)
    _write_json(out / "dataset.json", dataset_to_dict(vocab, seqs, plan))
    log.info("%d users, %d items, %d holdouts", len(seqs), vocab.n, len(plan.holdouts))
    return ["dataset.json"]


def cmd_train(cfg, seed, out):
    vocab, seqs, plan = load_dataset(cfg, seed)
    by_user = {s.user_id: s for s in seqs}
    tc = C.train_config(cfg, seed)
    res = train([by_user[u] for u in plan.train], _model_cfg(cfg, vocab), tc, plan.holdouts_for("validation"))
    checkpoint.save(out / "checkpoint.json", res.model, cfg, seed)
    _write_json(out / "trace.json", {"loss": res.loss_trace, "step_loss": res.step_losses,
                                     "validation_hr": res.val_trace, "best_epoch": res.best_epoch})
    return ["checkpoint.json", "trace.json"]


def cmd_evaluate(cfg, seed, out):
    model = _load_checkpoint(cfg, "eval")
    _, _, plan = load_dataset(cfg, seed)
    ev = cfg["eval"]
    rep = evaluate(model, plan.holdouts_for(ev["split"]), int(ev["k"]), int(ev["sampled_negatives"]), seed)
    _write_json(out / "metrics.json", rep.to_dict(with_users=True))
    (out / "metrics.txt").write_text(rep.to_text())
    print(rep.to_text(), end="")
    return ["metrics.json", "metrics.txt"]


def cmd_ablate(cfg, seed, out):
    vocab, seqs, _ = load_dataset(cfg, seed)
    tc = C.train_config(cfg, seed)
    ab = cfg["ablate"]

    def progress(s, arm, rep, res):
        log.info("seed %d %s HR@%d %.4f (best epoch %d, %.1fs)", s, arm, rep.k, rep.hr, res.best_epoch, res.wall_time)

    table = ablate(seqs, _model_cfg(cfg, vocab), tc, [int(s) for s in ab["seeds"]],
                   tuple(cfg["data"]["split_ratios"]), tuple(ab["arms"]), progress)
    _write_json(out / "ablation.json", table.to_dict())
    (out / "ablation.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return ["ablation.json", "ablation.txt"]


def cmd_intensity_export(cfg, seed, out):
    model = _load_checkpoint(cfg, "intensity")
    _, seqs, plan = load_dataset(cfg, seed)
    ic = cfg["intensity"]
    by_user = {s.user_id: s for s in seqs}
    user = ic.get("user") or (plan.test[0] if plan.test else seqs[0].user_id)
    if user not in by_user:
        raise DataError(f"unknown user {user!r}")
    seq = by_user[user]
    start = float(ic.get("start", seq.times[0]))
    stop = float(ic.get("stop", seq.times[-1]))
    grid = np.linspace(start, stop, int(ic["points"]))
    lam = model.intensity_grid(seq, grid, strict=bool(ic["strict"]))
    with open(out / "intensity.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + [f"head_{k}" for k in range(lam.shape[1])])
        for t, row in zip(grid, lam):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return ["intensity.csv"]


def cmd_bound(cfg, seed, out):
    model = _load_checkpoint(cfg, "bound")
    _, seqs, plan = load_dataset(cfg, seed)
    bc = cfg["bound"]
    report = model_bound_report(model, plan.holdouts_for(bc["split"]), len(seqs), float(bc["epsilon"]),
                                float(bc["delta"]), float(bc["lipschitz"]), str(bc["log_base"]))
    _write_json(out / "bound.json", report)
    print(json.dumps({k: report[k] for k in ("rho", "mu", "C", "complexity_term")}))
    return ["bound.json"]


def gradcheck_sequences(users: int, length: int, n_items: int, seed: int) -> list[EventSequence]:
    rng = np.random.default_rng([seed, 7])
    return [EventSequence(f"g{u}", np.cumsum(rng.exponential(1.0, length)), rng.integers(0, n_items, length))
            for u in range(users)]


def run_gradcheck(cfg: dict, seed: int) -> dict:
    """Finite-difference check of the training objective and of the regularizer alone."""
    g = cfg["gradcheck"]
    n_items = int(g.get("n_items", cfg["model"].get("n_items", 20)))
    mcfg = C.model_config(cfg, n_items)
    tc = C.train_config(cfg, seed)
    model = SMAttnModel.initialize(mcfg, seed)
    batch = Batch.from_sequences(gradcheck_sequences(int(g["users"]), int(g["length"]), n_items, seed))
    negs, feasible = batch_negatives(batch, n_items, int(g["negatives"]), np.random.default_rng([seed, 8]))
    results = {}
    for method in g["integrators"]:
        integ = IntegratorConfig(method, tc.integrator.mc_samples, seed)
        fractions = draw_fractions((batch.items.shape[0], batch.items.shape[1] - 1, integ.mc_samples),
                                   np.random.default_rng([seed, 9]))

        def objective(p):
            return total_loss(batch, model.with_params(p), tc.gamma, negs, integ, False, feasible, fractions).total

        def reg(p):
            m = model.with_params(p)
            H = m.encode(batch).H
            ev = m.event_intensities(batch, H)
            ll = loglik_terms(ev, m.head_of[batch.items], batch.valid)
            return (ll - compensator_terms(m, batch, H, ev, integ, fractions)).mean()

        for name, fn in (("objective", objective), ("regularizer", reg)):
            rep = grad_check(fn, model.params, float(g["eps"]))
            results[f"{method}/{name}"] = {"worst_rel_error": rep.worst_rel_error, "worst_param": rep.worst_param,
                                           "per_param": rep.per_param}
    worst_key = max(results, key=lambda k: results[k]["worst_rel_error"])
    worst = results[worst_key]["worst_rel_error"]
    return {"passed": bool(worst < float(g["tol"])), "worst_rel_error": worst, "worst_check": worst_key,
            "tol": float(g["tol"]), "eps": float(g["eps"]), "gamma": tc.gamma, "checks": results}


def cmd_gradcheck(cfg, seed, out):
    report = run_gradcheck(cfg, seed)
    _write_json(out / "gradcheck.json", report)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"gradcheck {status}: worst relative error {report['worst_rel_error']:.3e} "
          f"({report['worst_check']}, tol {report['tol']:g})")
    return ["gradcheck.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "intensity-export": cmd_intensity_export,
    "bound": cmd_bound,
    "gradcheck": cmd_gradcheck,
}

# command-specific flags and the config keys they set
FLAG_KEYS = {
    "evaluate": [("--checkpoint", "eval.checkpoint"), ("--split", "eval.split")],
    "intensity-export": [("--checkpoint", "intensity.checkpoint"), ("--user", "intensity.user")],
    "bound": [("--checkpoint", "bound.checkpoint"), ("--split", "bound.split"),
              ("--epsilon", "bound.epsilon"), ("--delta", "bound.delta")],
    "ingest": [("--events", "data.events"), ("--group-map", "data.group_map")],
}


def execute(command: str, cfg: dict, out: Path, threads: int | None) -> dict:
    seed = C.require_seed(cfg)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    if threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            outputs = COMMANDS[command](cfg, seed, out)
    else:
        outputs = COMMANDS[command](cfg, seed, out)
    write_manifest(out, command, cfg, seed, outputs, time.perf_counter() - started, threads)
    return json.loads((out / MANIFEST).read_text())


def cmd_replay(manifest_path: Path, out: Path | None, threads: int | None) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        command, cfg = manifest["command"], manifest["config"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if command not in COMMANDS:
        raise DataError(f"manifest names unknown command {command!r}")
    out = out or Path(tempfile.mkdtemp(prefix="smattn-replay-"))
    if out.resolve() == Path(manifest_path).resolve().parent:
        raise ConfigError("replay output directory must differ from the original run")
    again = execute(command, cfg, out, threads if threads is not None else manifest.get("threads"))
    mismatched = [k for k, v in manifest["outputs"].items() if again["outputs"].get(k) != v]
    for k in manifest["outputs"]:
        print(f"{'MATCH' if k not in mismatched else 'DIFFER':<7} {k}")
    if mismatched:
        log.error("replay differs in %s", ", ".join(mismatched))
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="smattn", description="Self-modulating attention recommender toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    for name in list(COMMANDS) + ["replay"]:
        sp = sub.add_parser(name)
        if name == "replay":
            sp.add_argument("manifest", help="manifest.json of the run to repeat")
        else:
            sp.add_argument("--config", help="TOML config file")
            sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                            help="override a config value (repeatable)")
            sp.add_argument("--seed", type=int)
            for flag, key in FLAG_KEYS.get(name, []):
                sp.add_argument(flag, dest=key.replace(".", "__"), help=f"sets {key}")
        sp.add_argument("--threads", type=int, help="cap native thread pools")
        sp.add_argument("--out", help="output directory (default runs/<command>)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=LOG_LEVELS.get(os.environ.get("SMATTN_LOG", "warn").lower(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"smattn: error: {exc}", file=sys.stderr)
        return 1
    if args.threads is not None and args.threads < 1:
        print("smattn: error: --threads must be >= 1", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else None
    try:
        if args.command == "replay":
            return cmd_replay(Path(args.manifest), out, args.threads)
        overrides = list(args.set)
        for flag, key in FLAG_KEYS.get(args.command, []):
            v = getattr(args, key.replace(".", "__"))
            if v is not None:
                if (key.split(".")[0], key.split(".")[1]) in C.PATH_KEYS:
                    v = str(Path(v).resolve())
                overrides.append(f"{key}={json.dumps(v)}")
        cfg = C.load_config(args.config, overrides, args.seed)
        execute(args.command, cfg, out or Path("runs") / args.command, args.threads)
    except SMAttnError as exc:
        print(f"smattn: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"smattn: {exc}", file=sys.stderr)
        return 2
    if args.command == "gradcheck":
        report = json.loads(((out or Path("runs") / "gradcheck") / "gradcheck.json").read_text())
        return 0 if report["passed"] else NumericError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
