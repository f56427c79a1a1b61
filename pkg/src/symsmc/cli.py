"""Command-line driver: datasets, training, evaluation, verification.

Subcommands
-----------
``gen-data``   simulate a labelled trajectory dataset (JSONL + metadata)
``train``      fit a room model on a dataset; checkpoint + history CSV
``eval``       score a checkpoint on datasets; metrics CSV
``check``      run a verification suite and report worst-case deviations

Every command is a pure function of (config, seed, input files): re-runs
overwrite their artifacts byte-identically, with wall-clock and host
details quarantined in ``run.log``.  ``--threads`` caps worker pools and
never changes any output byte.

Exit codes: 0 success, 1 validation failure (bad values, failed check
suite, diverged training), 2 IO or config errors (missing files,
unparseable or unknown config keys).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import diffcore, gradients, neural
from .diffcore import Tape, backward, grads_by_name
from .errors import ContractError
from .stochastics import RngKey, split
from .symbolic import validate_clusters
from .enemyroom import model as room, training, world


class ConfigError(Exception):
    """Unreadable, unparseable, or unknown-key run configuration."""


# ---------------------------------------------------------------------------
# run configs


@dataclass(frozen=True)
class GenDataConfig:
    n: int = 10
    t: int = 10
    e: int = 1
    count: int = 1000
    theta: float = world.DEFAULT_THETA


@dataclass(frozen=True)
class TrainConfig:
    n_particles: int = 1000
    batch_size: int = 50
    epochs: int = 100
    lr: float = 1e-3
    n_train: int = 1000
    val_fraction: float = 0.1


@dataclass(frozen=True)
class EvalConfig:
    n_particles: int = 1000
    threshold: float = 0.5
    chunk_size: int = 250


def load_run_config(path, cls):
    """Parse a TOML or JSON file into ``cls``, rejecting unknown keys."""
    if path is None:
        return cls()
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        if p.suffix == ".toml":
            data = tomllib.loads(raw.decode())
        elif p.suffix == ".json":
            data = json.loads(raw.decode())
        else:
            raise ConfigError(f"config {p} must end in .toml or .json")
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must hold a table of keys")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; "
                          f"expected a subset of {sorted(known)}")
    return cls(**data)


def _write_run_log(out_dir: Path, command: str, elapsed: float) -> None:
    lines = [f"command: {command}",
             f"finished: {datetime.now(timezone.utc).isoformat()}",
             f"elapsed_s: {elapsed:.3f}",
             f"host: {platform.node()}",
             f"python: {platform.python_version()}",
             f"numpy: {np.__version__}"]
    (out_dir / "run.log").write_text("\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, GenDataConfig)
    wcfg = world.WorldConfig(n=cfg.n, t=cfg.t, e=cfg.e, theta=cfg.theta)
    out = _out_dir(args)
    t0 = time.time()
    trajs, summary = world.generate_dataset(wcfg, cfg.count, RngKey(args.seed),
                                            workers=args.threads)
    path = out / "dataset.jsonl"
    world.save_dataset(path, trajs, wcfg, args.seed, summary)
    print(f"wrote {path} ({summary['count']} trajectories, "
          f"death rate {summary['death_rate']:.4f}, "
          f"hit rate {summary['hit_rate']:.4f})")
    _write_run_log(out, "gen-data", time.time() - t0)
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, TrainConfig)
    if args.particles is not None:
        cfg = dataclasses.replace(cfg, n_particles=args.particles)
    trajs = world.load_dataset(args.data)
    if not trajs:
        raise ContractError(f"dataset {args.data} is empty")
    out = _out_dir(args)
    t0 = time.time()

    key = RngKey(args.seed)
    first = trajs[0]
    mdl = room.new_model(first.n, first.e, split(key, "model"))
    subset = trajs[:cfg.n_train]
    hyper = training.TrainHyper(n_particles=cfg.n_particles,
                                batch_size=cfg.batch_size,
                                epochs=cfg.epochs, lr=cfg.lr)

    def progress(row):
        bal = "undefined" if row.val_balanced_accuracy is None \
            else f"{row.val_balanced_accuracy:.4f}"
        print(f"epoch {row.epoch}: loss {row.loss:.6f} val_bal {bal} "
              f"mean_ess {row.mean_ess:.1f} theta_hat {row.theta_hat:.4f}",
              flush=True)

    history = training.train(mdl, subset, hyper, split(key, "train"),
                             val_fraction=cfg.val_fraction,
                             on_epoch=progress)
    training.write_history_csv(out / "history.csv", history)
    neural.save_checkpoint(out / "checkpoint.json", mdl.store.values)
    print(f"wrote {out / 'checkpoint.json'} and {out / 'history.csv'}")
    _write_run_log(out, "train", time.time() - t0)
    return 0


# ---------------------------------------------------------------------------
# eval


def _eval_datasets(data_path: Path) -> list:
    """A dataset path gives one entry; a JSON manifest lists several."""
    if data_path.suffix == ".jsonl":
        return [data_path]
    if data_path.suffix == ".json":
        try:
            manifest = json.loads(data_path.read_text())
        except ValueError as exc:
            raise ConfigError(f"cannot parse manifest {data_path}: {exc}")
        if not isinstance(manifest, dict) or "datasets" not in manifest:
            raise ConfigError(f"manifest {data_path} needs a 'datasets' list")
        return [data_path.parent / p for p in manifest["datasets"]]
    raise ConfigError("--data must be a .jsonl dataset or a .json manifest")


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, EvalConfig)
    if args.particles is not None:
        cfg = dataclasses.replace(cfg, n_particles=args.particles)
    values = neural.load_checkpoint(args.checkpoint)
    paths = _eval_datasets(Path(args.data))
    out = _out_dir(args)
    t0 = time.time()

    mdl = None
    rows = []
    for idx, path in enumerate(paths):
        trajs = world.load_dataset(path)
        if not trajs:
            raise ContractError(f"dataset {path} is empty")
        first = trajs[0]
        if any(tr.n != first.n or tr.e != first.e or tr.t != first.t
               for tr in trajs):
            raise ContractError(f"{path} mixes room shapes")
        if mdl is None:
            mdl = room.new_model(first.n, first.e, RngKey(0))
            missing = set(mdl.store.values) - set(values)
            if missing:
                raise ContractError(
                    f"checkpoint lacks parameters {sorted(missing)}")
            mdl.store.values.update(values)
        mdl = room.with_grid(mdl, first.n, first.e)
        report = training.evaluate(mdl, trajs, cfg.n_particles,
                                   split(RngKey(args.seed), ("eval", idx)),
                                   threshold=cfg.threshold,
                                   chunk_size=cfg.chunk_size,
                                   threads=args.threads)
        label = f"n{first.n}-t{first.t}-e{first.e}"
        rows.append((label, path.stem, report))
        bal = "undefined" if report.balanced_accuracy is None \
            else f"{report.balanced_accuracy:.4f}"
        f1 = "undefined" if report.f1 is None else f"{report.f1:.4f}"
        print(f"{label} {path.stem}: balanced_accuracy {bal} f1 {f1} "
              f"mean_ess {report.mean_ess:.1f}", flush=True)

    training.write_metrics_csv(out / "metrics.csv", rows)
    print(f"wrote {out / 'metrics.csv'}")
    _write_run_log(out, "eval", time.time() - t0)
    return 0


# ---------------------------------------------------------------------------
# check suites


def _suite_gradcheck(seed: int) -> list:
    # grad_check re-invokes f for every finite-difference probe, so all
    # constants must be frozen up front, never drawn inside the closure
    rng = np.random.default_rng(seed)
    d = diffcore
    mat = rng.normal(size=(3, 4))
    w1 = rng.normal(size=(8, 4)) * 0.5
    b1 = rng.normal(size=8) * 0.1
    w2 = rng.normal(size=(6, 8)) * 0.5
    b2 = rng.normal(size=6) * 0.1
    w3 = rng.normal(size=6) * 0.5

    def mlp(tape, x):
        h1 = d.relu(d.add(d.matvec(tape.constant(w1), x), tape.constant(b1)))
        h2 = d.relu(d.add(d.matvec(tape.constant(w2), h1), tape.constant(b2)))
        return d.dot(tape.constant(w3), h2)

    cases = [
        ("add/mul", 3, lambda t, x: d.vsum(d.mul(x, d.add(x, t.constant(np.ones(3)))))),
        ("sub/neg", 3, lambda t, x: d.vsum(d.sub(d.neg(x), x))),
        ("exp", 3, lambda t, x: d.vsum(d.exp(x))),
        ("log", 3, lambda t, x: d.vsum(d.log(d.add(d.mul(x, x), t.constant(np.ones(3)))))),
        ("relu", 5, lambda t, x: d.vsum(d.relu(x))),
        ("dot", 4, lambda t, x: d.dot(x, x)),
        ("matvec", 4, lambda t, x: d.vsum(d.matvec(t.constant(mat), x))),
        ("logsumexp", 5, lambda t, x: d.logsumexp(x)),
        ("gather", 4, lambda t, x: d.gather(x, 2)),
        ("concat", 3, lambda t, x: d.logsumexp(d.concat(x, d.mul(x, x)))),
        ("mlp", 4, mlp),
    ]
    worst, n_points = 0.0, 0
    while n_points < 100:
        for label, dim, f in cases:
            point = rng.normal(size=dim)
            if label in ("relu", "mlp"):
                # central differences straddle the relu kink near zero
                point = point + np.where(np.abs(point) < 0.1, 0.2, 0.0)
            worst = max(worst, diffcore.grad_check(f, point))
            n_points += 1
    return [(f"max relative gradient error, {n_points} points", worst, 1e-5)]


def _recursive_pointmass_bias() -> float:
    """Exact expectation of the recursive estimator vs enumeration.

    Two samples from x1 | x0=1 ~ Bernoulli(sigmoid(b + c)), point-mass
    prior on x0, outcome table f.  Summing the estimator's gradient over
    all four batch outcomes weighted by their probabilities must equal
    the directly enumerated gradient of E[f(x1)].
    """
    from itertools import product as iproduct
    d = diffcore
    theta = np.array([0.4, -0.3, 0.8])
    fv = {0: 0.25, 1: 1.5}
    s = 1.0 / (1.0 + np.exp(-(theta[1] + theta[2])))

    def p1(tape, th, x1):
        logit = d.gather(th, 1) + d.gather(th, 2)
        z = d.concat(tape.constant(0.0), logit)
        lp = (logit - d.logsumexp(z)) if x1 \
            else (tape.constant(0.0) - d.logsumexp(z))
        return d.exp(lp)

    tape = Tape()
    th = tape.param("th", theta)
    total = None
    for x1 in (0, 1):
        term = d.scale(p1(tape, th, x1), fv[x1])
        total = term if total is None else total + term
    exact = grads_by_name(tape, backward(total))["th"]

    expected = np.zeros(3)
    for xs1 in iproduct((0, 1), repeat=2):
        prob = np.prod([s if x else 1 - s for x in xs1])
        tape = Tape()
        th = tape.param("th", theta)
        init = [tape.constant(0.0), tape.constant(0.0)]
        step = [[p1(tape, th, xs1[i]) for _ in range(2)] for i in range(2)]
        batch = gradients.RecursiveBatch(np.array([fv[x] for x in xs1]),
                                         init, [step])
        g = grads_by_name(tape, backward(gradients.recursive_rloo(batch)))
        expected += prob * g["th"]
    return float(np.max(np.abs(expected - exact)))


def _suite_logderiv(seed: int) -> list:
    rows = [(f"{s}-state identity deviation",
             gradients.log_derivative_check(split(RngKey(seed), s), n_states=s),
             1e-9)
            for s in (2, 3)]
    rows.append(("recursive estimator point-mass bias",
                 _recursive_pointmass_bias(), 1e-9))
    return rows


def _suite_clusters(seed: int) -> list:
    rows = []
    for e, trials in ((1, 200), (2, 25)):
        mdl = room.new_model(3, e, split(RngKey(seed), ("m", e)))
        report = validate_clusters(mdl.schema, mdl.models, trials,
                                   split(RngKey(seed), ("t", e)),
                                   mdl.context)
        rows.append((f"joint-vs-clusters TV, e={e}, {trials} trials",
                     report.max_tv, 1e-9))
    return rows


def _suite_oracle(seed: int) -> list:
    mdl = room.new_model(3, 1, split(RngKey(seed), "m"))
    traj = world.Trajectory(3, 1, (2, 2), ("up", "left", "down", "right"),
                            (True, True, True, True), True)
    exact_p, marginals, _ = room.exact_death_probability(mdl, traj)
    sv = mdl.schema.state_vars
    i_e0, i_hp = sv.index("e0"), sv.index("hp")
    res = room.predict_death(mdl, traj, 10_000, split(RngKey(seed), "f"),
                             marginal_keys=lambda a: (a["e0"], a["hp"]))
    worst_tv = 0.0
    for mix, exact in zip(res.mixtures, marginals):
        proj: dict = {}
        for sk, p in exact.items():
            k = (sk[i_e0], sk[i_hp])
            proj[k] = proj.get(k, 0.0) + p
        keys = set(mix) | set(proj)
        tv = 0.5 * sum(abs(mix.get(k, 0.0) - proj.get(k, 0.0)) for k in keys)
        worst_tv = max(worst_tv, tv)

    lw = res.belief.log_weights
    fin = np.isfinite(lw)
    w = np.zeros_like(lw)
    w[fin] = np.exp(lw[fin] - lw[fin].max())
    wt = w / w.sum()
    f = np.array([1.0 if h[-1]["hp"] == room.DEAD else 0.0
                  for h in res.belief.histories])
    se = float(np.sqrt(np.sum(wt ** 2 * (f - res.probability) ** 2)))
    z = abs(res.probability - exact_p) / se if se > 0 else np.inf
    print(f"  predict_death {res.probability:.6f} vs exact {exact_p:.6f} "
          f"(se {se:.2e})")
    return [("max per-step filtered-vs-exact TV", worst_tv, 0.02),
            ("death probability |z|", z, 3.0)]


_SUITES = {"gradcheck": _suite_gradcheck, "logderiv": _suite_logderiv,
           "clusters": _suite_clusters, "oracle": _suite_oracle}


def cmd_check(args) -> int:
    rows = _SUITES[args.suite](args.seed)
    ok = True
    print(f"suite {args.suite}:")
    for label, worst, threshold in rows:
        passed = worst < threshold
        ok = ok and passed
        print(f"  {label}: {worst:.3e} (threshold {threshold:.0e}) "
              f"-> {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symsmc",
        description="Filtering, training, and verification for symbolic "
                    "Markov models.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="simulate a labelled dataset")
    gen.add_argument("--config", required=True,
                     help="TOML/JSON with n, t, e, count, theta")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--threads", type=int, default=1)
    gen.set_defaults(fn=cmd_gen_data)

    tr = sub.add_parser("train", help="train on a dataset")
    tr.add_argument("--config", help="TOML/JSON overriding training defaults")
    tr.add_argument("--data", required=True, help="training dataset JSONL")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--particles", type=int, default=None,
                    help="override n_particles")
    tr.add_argument("--threads", type=int, default=1)
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint", help="checkpoint .json/.npz from train")
    ev.add_argument("--config", help="TOML/JSON overriding eval defaults")
    ev.add_argument("--data", required=True,
                    help="dataset JSONL or JSON manifest of datasets")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--particles", type=int, default=None)
    ev.add_argument("--threads", type=int, default=1)
    ev.set_defaults(fn=cmd_eval)

    ck = sub.add_parser("check", help="run a verification suite")
    ck.add_argument("--suite", required=True, choices=sorted(_SUITES))
    ck.add_argument("--seed", type=int, default=0)
    ck.set_defaults(fn=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
