"""Command-line runner: ``boltzgen {train,sample,eval,diagnose,make-testset,plot}``.

Every successful run writes exactly one manifest (JSON). Failures exit
nonzero and print a one-line JSON error object on stderr. Heavy modules are
imported after ``--threads`` has been applied to the BLAS thread variables.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p, manifest=True):
    p.add_argument("--config", help="JSON config with blocks energy/schedule/network/training/sampler")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    if manifest:
        p.add_argument("--manifest", help="manifest path (default derived from the output path)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="boltzgen", description="Diffusion-based neural samplers for Boltzmann densities.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train an energy (EnDEM/BEnDEM) or score (iDEM/TweeDEM) network")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", choices=["endem", "bendem", "idem", "tweedem"])
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--inner-iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--bootstrap-K", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-n", type=int, default=0, help="draw this many samples after training and report metrics")
    p.add_argument("--testset", help="reference CSV for --eval-n metrics")
    p.add_argument("--repeat", type=int, default=1)

    p = sub.add_parser("sample", help="integrate the reverse SDE from a score source")
    _add_common(p)
    p.add_argument("--out", required=True, help="CSV path for samples (physical coordinates)")
    p.add_argument("--score", choices=["mc", "tweedie", "oracle", "network"])
    p.add_argument("--checkpoint", help="network checkpoint (for --score network)")
    p.add_argument("--K", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--repeat", type=int, default=1)

    p = sub.add_parser("eval", help="compare two sample CSVs")
    _add_common(p)
    p.add_argument("--a", required=True, help="sample CSV")
    p.add_argument("--b", required=True, help="reference CSV")
    p.add_argument("--checkpoint", help="energy-network checkpoint for the probability-flow ESS")
    p.add_argument("--ess-steps", type=int, default=200)
    p.add_argument("--out", help="metrics JSON path (default: stdout only)")
    p.add_argument("--plot-dir", help="write SVG panels here")

    p = sub.add_parser("diagnose", help="replicate-based mean/variance of the MC estimators")
    _add_common(p)
    p.add_argument("--estimator", default="all")
    p.add_argument("--grid", default="appendixH", choices=["appendixH", "random"])
    p.add_argument("--times", default="0.5,0.75,0.9,1.0")
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--K", type=int, default=500)
    p.add_argument("--points", type=int, default=20, help="grid points per axis (lattice grid) or total (random)")
    p.add_argument("--out", required=False, default="diagnose.csv")

    p = sub.add_parser("make-testset", help="reference samples: exact (GMM) or MALA (DW4/LJ)")
    _add_common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="SVG figures from samples or a diagnose table")
    _add_common(p)
    p.add_argument("--samples", nargs="*", default=[], help="sample CSVs (first is plotted; others overlaid in histograms)")
    p.add_argument("--diagnose", help="diagnose CSV for the variance-vs-t plot")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--title", default="")
    return ap


# --------------------------------------------------------------------------
# helpers


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None and "BOLTZGEN_SEED" not in os.environ:
        cfg["seed"] = args.seed
    return cfg


def _manifest_path(args, default):
    return args.manifest or default


def _sha(arr) -> str:
    import hashlib

    import numpy as np

    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    import numpy as np

    from .config import RunManifest
    from .energy import energy_from_config
    from .network import net_from_config, save_checkpoint
    from .schedule import schedule_from_config
    from .training import TrainConfig, default_net, train

    cfg = _config(args)
    tr = cfg["training"]
    for flag, key in (("method", "method"), ("outer_iters", "outer_iters"), ("inner_iters", "inner_iters"),
                      ("batch", "batch"), ("K", "K"), ("bootstrap_K", "bootstrap_K"), ("lr", "learning_rate")):
        val = getattr(args, flag)
        if val is not None:
            tr[key] = val
    energy = energy_from_config(cfg["energy"])
    schedule = schedule_from_config(cfg["schedule"])
    os.makedirs(args.out, exist_ok=True)
    for rep in range(args.repeat):
        seed = cfg["seed"] + rep
        out = args.out if args.repeat == 1 else os.path.join(args.out, f"run{rep}")
        os.makedirs(out, exist_ok=True)
        tcfg = TrainConfig(schedule=schedule, seed=seed, checkpoint_dir=out, **tr)
        base = default_net(energy, tcfg.method)
        net_cfg = dict(base.config())
        net_cfg.update(cfg["network"])
        net = net_from_config(net_cfg)
        t0 = time.time()
        net, params, report = train(energy, tcfg, net=net)
        elapsed = time.time() - t0
        ckpt = os.path.join(out, "model.ckpt")
        save_checkpoint(ckpt, net, params, report["steps"], extra={"method": tcfg.method, "config": cfg})
        with open(os.path.join(out, "loss.csv"), "w") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(report["losses"]):
                fh.write(f"{i + 1},{v!r}\n")
        losses = np.array(report["losses"])
        tail = losses[-min(len(losses), 100):] if len(losses) else losses
        metrics = {
            "steps": report["steps"],
            "final_loss_mean100": float(np.nanmean(tail)) if len(tail) else None,
            "loss_sha256": _sha(losses),
            "params_sha256": _sha(params.data),
            "dropped_targets": report["dropped_targets"],
            "aborted_outer": report["aborted_outer"],
            "buffer": report["buffer"],
        }
        if "bootstrap_fraction" in report:
            metrics["bootstrap_fraction"] = report["bootstrap_fraction"]
        artifacts = {"checkpoint": ckpt, "loss": os.path.join(out, "loss.csv")}
        if args.eval_n:
            metrics["eval"], spath = _post_train_eval(args, cfg, energy, schedule, net, params, tcfg, seed, out)
            artifacts["samples"] = spath
        run_cfg = dict(cfg, seed=seed)
        man = RunManifest("train", run_cfg, seeds={"train": seed}, metrics=metrics, artifacts=artifacts,
                          timings={"train_seconds": elapsed})
        man.write(_manifest_path(args, os.path.join(out, "manifest.json")) if args.repeat == 1 else os.path.join(out, "manifest.json"))
    return 0


def _post_train_eval(args, cfg, energy, schedule, net, params, tcfg, seed, out):
    from .sampler import IntegrationConfig, reverse_sde_integrate
    from .testsets import load_csv, make_testset, save_csv
    from .training import trained_sampler_score

    score = trained_sampler_score(net, params, energy, tcfg.method, tcfg.sampler_clip)
    icfg = IntegrationConfig(L=tcfg.L, schedule=schedule, batch=args.eval_n, seed=seed + 10_000,
                             particle_shape=energy.particle_shape, clamp=tcfg.sample_clamp)
    x = energy.to_physical(reverse_sde_integrate(score, icfg, d=energy.dim))
    spath = os.path.join(out, "samples.csv")
    save_csv(spath, x)
    ref = load_csv(args.testset) if args.testset else make_testset(energy, args.eval_n, seed=1234)[0]
    return _metrics_report(energy, x, ref), spath


def _metrics_report(energy, a, b, ess=None):
    import numpy as np

    from . import metrics as M

    n = min(len(a), len(b))
    if len(a) != len(b):
        rng = np.random.default_rng(0)
        a = a[np.sort(rng.choice(len(a), n, replace=False))] if len(a) > n else a
        b = b[np.sort(rng.choice(len(b), n, replace=False))] if len(b) > n else b
    ea = energy.energy(energy.to_frame(a))
    eb = energy.energy(energy.to_frame(b))
    rep = {"n": int(n), "x_w2": M.w2(a, b), "e_w2": M.energy_w2(ea, eb)}
    if energy.particle_shape is None:
        rep["tv"] = M.total_variation(a, b, M.gmm_histogram()) if energy.dim == 2 else None
        rep["mode_coverage"] = M.mode_coverage(a, energy.params.means, float(np.sqrt(energy.params.component_variance)))
    else:
        rep["tv"] = M.total_variation(a, b, M.distance_histogram(energy.particle_shape))
        rep["mode_coverage"] = None
    rep["ess_pfode"] = ess
    return rep


def cmd_sample(args):
    import numpy as np

    from .config import RunManifest
    from .energy import energy_from_config
    from .network import load_checkpoint
    from .sampler import IntegrationConfig, ScoreSource, reverse_sde_integrate
    from .schedule import schedule_from_config
    from .testsets import save_csv

    cfg = _config(args)
    sc = cfg["sampler"]
    for flag, key in (("score", "score"), ("K", "K"), ("steps", "steps"), ("n", "n"), ("clip", "clip")):
        val = getattr(args, flag)
        if val is not None:
            sc[key] = val
    if args.no_clip:
        sc["clip"] = None
    energy = energy_from_config(cfg["energy"])
    schedule = schedule_from_config(cfg["schedule"])
    if sc["score"] == "network":
        if not args.checkpoint:
            raise UsageError("--score network needs --checkpoint")
        net, params, header = load_checkpoint(args.checkpoint)
        kind = "network" if net.mode == "energy" else "network_score"
        source = ScoreSource(kind, energy, clip_norm=sc.get("clip"), net=net, params=params)
    else:
        source = ScoreSource(sc["score"], energy, K=int(sc["K"]), clip_norm=sc.get("clip"))
    for rep in range(args.repeat):
        seed = cfg["seed"] + rep
        out = args.out if args.repeat == 1 else _suffix(args.out, f"_r{rep}")
        icfg = IntegrationConfig(L=int(sc["steps"]), schedule=schedule, batch=int(sc["n"]), seed=seed,
                                 particle_shape=energy.particle_shape, final_noise=bool(sc.get("final_noise", False)),
                                 clamp=sc.get("clamp"))
        t0 = time.time()
        x = energy.to_physical(reverse_sde_integrate(source, icfg, d=energy.dim))
        elapsed = time.time() - t0
        save_csv(out, x)
        run_cfg = dict(cfg, seed=seed)
        man = RunManifest("sample", run_cfg, seeds={"sample": seed},
                          metrics={"n": int(x.shape[0]), "d": int(x.shape[1]), "samples_sha256": _sha(x),
                                   "mean": np.mean(x, 0).tolist()},
                          artifacts={"samples": out, "checkpoint": args.checkpoint}, timings={"sample_seconds": elapsed})
        man.write(args.manifest if (args.manifest and args.repeat == 1) else out + ".json")
    return 0


def _suffix(path, s):
    root, ext = os.path.splitext(path)
    return root + s + ext


def cmd_eval(args):
    import numpy as np

    from . import metrics as M
    from .config import RunManifest
    from .energy import energy_from_config
    from .network import load_checkpoint
    from .schedule import schedule_from_config
    from .testsets import load_csv

    cfg = _config(args)
    energy = energy_from_config(cfg["energy"])
    a, b = load_csv(args.a), load_csv(args.b)
    if a.shape[1] != energy.dim or b.shape[1] != energy.dim:
        raise ValueError(f"sample dimension does not match the {energy.kind} target (d={energy.dim})")
    ess = None
    if args.checkpoint:
        net, params, _ = load_checkpoint(args.checkpoint)
        if net.mode != "energy":
            raise ValueError("probability-flow ESS needs an energy-network checkpoint")
        schedule = schedule_from_config(cfg["schedule"])
        frame = energy.to_frame(a)
        ess = M.ess_pfode(energy.energy, lambda z, t: -net.input_gradient(params, z, np.full(len(z), t)),
                          frame, schedule, L=args.ess_steps)
    report = _metrics_report(energy, a, b, ess)
    artifacts = {"a": args.a, "b": args.b}
    if args.plot_dir:
        artifacts.update(_eval_plots(args.plot_dir, energy, a, b))
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        artifacts["report"] = args.out
    default = (args.out + ".manifest.json") if args.out else "eval_manifest.json"
    RunManifest("eval", cfg, seeds={}, metrics=report, artifacts=artifacts).write(_manifest_path(args, default))
    return 0


def _eval_plots(plot_dir, energy, a, b):
    from . import plotting as P
    from .metrics import pairwise_distances

    os.makedirs(plot_dir, exist_ok=True)
    out = {}
    if energy.particle_shape is None and energy.dim == 2:
        path = os.path.join(plot_dir, "scatter.svg")
        P.write_svg(path, P.scatter_svg(a, energy._phys_energy, title="samples over target density"))
        out["scatter"] = path
    else:
        ps = energy.particle_shape
        if ps is not None:
            path = os.path.join(plot_dir, "distances.svg")
            P.write_svg(path, P.histogram_svg({"samples": pairwise_distances(a, ps), "reference": pairwise_distances(b, ps)},
                                              rng=(0.0, 8.0), title="interparticle distances", xlabel="distance"))
            out["distances"] = path
        path = os.path.join(plot_dir, "energies.svg")
        P.write_svg(path, P.histogram_svg({"samples": energy._phys_energy(a), "reference": energy._phys_energy(b)},
                                          title="energies", xlabel="energy"))
        out["energies"] = path
    return out


VARIANCE_STUDY_ESTIMATORS = ("mc_energy", "mc_score", "tweedie_score")


def diagnose_grid(kind: str, points: int, times, seed: int, energy=None):
    """Grid of (x, t) for the variance study: a regular lattice over [-1.5, 1.5]^2
    (grid name ``appendixH``) or uniform random points."""
    import numpy as np

    if kind == "appendixH":
        g = np.linspace(-1.5, 1.5, points)
        X, Y = np.meshgrid(g, g)
        xs = np.stack([X.ravel(), Y.ravel()], -1)
    else:
        d = energy.dim if energy is not None else 2
        xs = np.random.default_rng(seed).uniform(-1.5, 1.5, size=(points, d))
    return [(x, float(t)) for t in times for x in xs]


def cmd_diagnose(args):
    from . import estimators as est
    from .config import RunManifest
    from .energy import energy_from_config, gmm10_unit
    from .schedule import NoiseSchedule, schedule_from_config

    cfg = _config(args)
    if args.grid == "appendixH":
        energy = gmm10_unit(cfg["energy"].get("seed", 0) if args.config else 0)
        schedule = NoiseSchedule("geometric", 1e-5, 1.0)
    else:
        energy = energy_from_config(cfg["energy"])
        schedule = schedule_from_config(cfg["schedule"])
    names = VARIANCE_STUDY_ESTIMATORS if args.estimator == "all" else tuple(args.estimator.split(","))
    for n in names:
        if n not in est.POINT_ESTIMATORS:
            raise UsageError(f"unknown estimator {n!r}; choose from {sorted(est.POINT_ESTIMATORS)} or 'all'")
    if args.replicates < 2:
        raise UsageError("--replicates must be at least 2")
    times = [float(s) for s in args.times.split(",")]
    grid = [est.NoisedPoint.at(x, t, schedule) for x, t in diagnose_grid(args.grid, args.points, times, cfg["seed"], energy)]
    ecfg = est.EstimatorConfig(K=args.K, rng_seed=cfg["seed"])
    t0 = time.time()
    rows = []
    for name in names:
        rows += est.estimator_statistics(name, energy, grid, args.replicates, ecfg)
    write_diagnose_csv(args.out, rows)
    RunManifest("diagnose", cfg, seeds={"estimators": cfg["seed"]},
                metrics={"rows": len(rows), "estimators": list(names), "K": args.K, "replicates": args.replicates},
                artifacts={"table": args.out}, timings={"seconds": time.time() - t0}).write(
        _manifest_path(args, args.out + ".json"))
    return 0


def _join(v):
    import numpy as np

    return ";".join(repr(float(a)) for a in np.atleast_1d(v))


def write_diagnose_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("x,t,estimator,mean,variance,replicates\n")
        for r in rows:
            fh.write(f"{_join(r.x)},{r.t!r},{r.estimator},{_join(r.mean)},{r.variance!r},{r.replicates}\n")


def read_diagnose_csv(path):
    import numpy as np

    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "x,t,estimator,mean,variance,replicates":
            raise ValueError(f"{path}: not a diagnose table")
        for line in fh:
            x, t, name, mean, var, reps = line.strip().split(",")
            rows.append({"x": np.array([float(v) for v in x.split(";")]), "t": float(t), "estimator": name,
                         "mean": np.array([float(v) for v in mean.split(";")]), "variance": float(var),
                         "replicates": int(reps)})
    return rows


def cmd_make_testset(args):
    from .config import RunManifest
    from .energy import energy_from_config
    from .testsets import make_testset, save_csv

    cfg = _config(args)
    if args.n < 1:
        raise UsageError("--n must be positive")
    energy = energy_from_config(cfg["energy"])
    t0 = time.time()
    x, info = make_testset(energy, args.n, seed=cfg["seed"])
    save_csv(args.out, x)
    RunManifest("make-testset", cfg, seeds={"testset": cfg["seed"]}, metrics={"n": args.n, "sha256": _sha(x), **info},
                artifacts={"testset": args.out}, timings={"seconds": time.time() - t0}).write(
        _manifest_path(args, args.out + ".json"))
    return 0


def cmd_plot(args):
    from . import plotting as P
    from .config import RunManifest
    from .energy import energy_from_config
    from .testsets import load_csv

    cfg = _config(args)
    energy = energy_from_config(cfg["energy"])
    if args.diagnose:
        rows = read_diagnose_csv(args.diagnose)
        if not rows:
            raise ValueError("empty diagnose table")
        svg = _variance_plot(rows, energy=None, title=args.title or "expected estimator variance")
    else:
        if not args.samples:
            raise UsageError("need --samples or --diagnose")
        sets = [load_csv(p) for p in args.samples]
        if any(s.size == 0 for s in sets):
            raise ValueError("empty sample set")
        x = sets[0]
        if x.shape[1] == 2:
            phys = energy._phys_energy if energy.dim == 2 else None
            svg = P.scatter_svg(x, phys, title=args.title)
        else:
            series = {os.path.basename(p): energy._phys_energy(s) for p, s in zip(args.samples, sets)}
            svg = P.histogram_svg(series, title=args.title or "energies", xlabel="energy")
    P.write_svg(args.out, svg)
    RunManifest("plot", cfg, metrics={}, artifacts={"svg": args.out}).write(_manifest_path(args, args.out + ".json"))
    return 0


def _variance_plot(rows, energy=None, title=""):
    """p_t-weighted mean variance per estimator vs t (weights from the 10-mode unit mixture)."""
    import numpy as np

    from . import plotting as P
    from .energy import gmm10_unit
    from .schedule import NoiseSchedule

    e = energy or gmm10_unit(0)
    sched = NoiseSchedule("geometric", 1e-5, 1.0)
    names = sorted({r["estimator"] for r in rows})
    times = sorted({r["t"] for r in rows})
    series = {}
    for name in names:
        vals = []
        for t in times:
            sel = [r for r in rows if r["estimator"] == name and r["t"] == t]
            xs = np.array([r["x"] for r in sel])
            w = np.exp(-e.noised_energy_oracle(xs, sched.sigma(t)))
            vals.append(float(np.sum(w * np.array([r["variance"] for r in sel])) / np.sum(w)))
        series[name] = vals
    return P.line_svg(times, series, title=title, xlabel="t", logy=True)


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "make-testset": cmd_make_testset,
    "plot": cmd_plot,
}


def run_subcommand(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose from " + ", ".join(COMMANDS))
        _set_threads(getattr(args, "threads", None))
        return COMMANDS[args.command](args)
    except UsageError as err:
        _report_error("usage", err)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError, NotImplementedError, FloatingPointError) as err:
        _report_error(type(err).__name__, err)
        return 1


def _report_error(kind, err):
    sys.stderr.write(json.dumps({"error": kind, "message": str(err)}) + "\n")


def main(argv=None) -> int:
    return run_subcommand(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
