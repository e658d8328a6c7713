"""``rfsplat`` command line.

Every subcommand prints one final line ``summary {json}`` and exits 0 on
success; failures print ``error[<category>]: message`` on stderr and exit
with the category's code.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import exceptions as exc

log = logging.getLogger("rfsplat")

EXIT_CODES = {
    "error": 1,
    "config": 2,
    "invalid-input": 3,
    "incomplete-input": 4,
    "missing-input": 4,
    "format": 5,
    "corrupt-header": 6,
    "truncated": 7,
    "version-mismatch": 8,
    "diverged": 9,
    "placement-infeasible": 10,
}


def _summary(**fields):
    print("summary " + json.dumps(fields, sort_keys=True, default=float), flush=True)


def _load_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "count", None) is not None:
        overrides.append(f"n_scenes={args.count}")
    if getattr(args, "tau", None) is not None:
        overrides.append(f"eval.tau={args.tau}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"training.epochs={args.epochs}")
    return cfg.with_overrides(overrides)


def _echo_config(cfg, out_path):
    """Write the resolved configuration next to a stage's output."""
    base = out_path if os.path.isdir(out_path) else os.path.dirname(os.path.abspath(out_path))
    stem = "" if os.path.isdir(out_path) else os.path.basename(out_path) + "."
    os.makedirs(base, exist_ok=True)
    return cfg.save(os.path.join(base, f"{stem}config.json"))


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"input not found: {path}")
    return path


# subcommands -------------------------------------------------------------------

def cmd_gen_scenes(args):
    from .scenes import generate_scene, scene_seed
    from .storage import write_scenes

    cfg = _load_config(args)
    params = cfg.scene.build()
    scenes = [generate_scene(scene_seed(cfg.seed, i), params) for i in range(cfg.n_scenes)]
    write_scenes(args.out, scenes)
    _echo_config(cfg, args.out)
    _summary(command="gen-scenes", scenes=len(scenes), seed=cfg.seed, out=args.out)


def cmd_simulate(args):
    from .pipeline import noisy_wavefront
    from .propagation import apply_codebook_entry, trace_geometry
    from .storage import SimulationRecord, read_scenes, write_simulation

    cfg = _load_config(args)
    scenes = read_scenes(_require(args.scenes))
    cfg = cfg.with_overrides([f"n_scenes={len(scenes)}"])
    plan = cfg.plan()
    codebook = plan.resolved_codebook()
    counts = []

    def records():
        for i, scene in enumerate(scenes):
            geo = trace_geometry(scene, plan.sim, max_reflections=plan.max_reflections)
            traced = [apply_codebook_entry(geo, e) for e in codebook.entries]
            wf = np.stack([noisy_wavefront(t, plan, i, c) for c, t in enumerate(traced)])
            counts.append(len(geo))
            yield SimulationRecord(scene, i, traced, wf)

    header = {"n_rx": plan.sim.n_rx, "n_configs": len(codebook), "rx_shape": list(plan.sim.rx_shape),
              "materials": [m.to_dict() for m in cfg.scene.build().materials], "seed": cfg.seed,
              "noise_variance": plan.sim.resolved_noise_variance(), "n_scenes": len(scenes)}
    n = write_simulation(args.out, header, records())
    _echo_config(cfg, args.out)
    _summary(command="simulate", scenes=n, configs=len(codebook), mean_paths=float(np.mean(counts)) if counts else 0.0,
             out=args.out)


def cmd_extract_features(args):
    from .experiment import header_for
    from .features import assemble_feature_map
    from .storage import DatasetRecord, DatasetWriter, iter_simulation

    cfg = _load_config(args)
    header, records = iter_simulation(_require(args.simulation))
    if "n_scenes" in header:
        cfg = cfg.with_overrides([f"n_scenes={int(header['n_scenes'])}"])
    if args.measured:
        cfg = cfg.with_overrides(["features.measured=true"])
    measured = cfg.features.measured
    wavelength = cfg.simulation.build().wavelength
    out_header = header_for(cfg)
    for key in ("n_rx", "n_configs", "rx_shape"):
        if out_header[key] != header.get(key):
            raise exc.IncompleteInputError(f"simulation {key}={header.get(key)!r} does not match the configuration "
                                           f"({out_header[key]!r})")
    n = 0
    with DatasetWriter(args.out, out_header) as w:
        for rec in records:
            fm = assemble_feature_map(rec.paths, wavelength, list(rec.wavefronts) if measured else None,
                                      scene_id=rec.scene_id, rx_shape=tuple(header["rx_shape"]))
            w.write(DatasetRecord(rec.scene, fm, rec.paths if cfg.features.store_paths else None))
            n += 1
    _echo_config(cfg, args.out)
    _summary(command="extract-features", records=n, measured=bool(measured), out=args.out)


def cmd_build_dataset(args):
    from .experiment import build_dataset_file

    cfg = _load_config(args)
    t0 = time.perf_counter()
    build_dataset_file(cfg, args.out, keep=False)
    _echo_config(cfg, args.out)
    _summary(command="build-dataset", records=cfg.n_scenes, seed=cfg.seed, out=args.out,
             seconds=round(time.perf_counter() - t0, 3))


def _read_records(path):
    from .storage import read_dataset

    header, records = read_dataset(_require(path))
    return header, records


def cmd_train(args):
    from .experiment import train_on_records, write_loss_curve
    from .storage import save_weights

    cfg = _load_config(args)
    _, records = _read_records(args.dataset)
    est = train_on_records(cfg, records, verbose=args.verbose)
    save_weights(args.out, est, extra={"dataset": os.path.basename(args.dataset)})
    curve = write_loss_curve(args.out + ".loss.csv", est.history_)
    _echo_config(cfg, args.out)
    last = est.history_[-1] if est.history_ else {}
    _summary(command="train", epochs=len(est.history_), train_loss=last.get("train_loss"),
             val_loss=last.get("val_loss"), out=args.out, loss_curve=curve)


def cmd_eval(args):
    from .evaluation import constant_baseline_mae
    from .experiment import dataset_splits, evaluate_records
    from .storage import load_weights

    cfg = _load_config(args)
    _, records = _read_records(args.dataset)
    est, _ = load_weights(_require(args.weights))
    tr, va, te = dataset_splits(cfg, len(records))
    idx = {"all": np.arange(len(records)), "train": tr, "val": va, "test": te}[args.split]
    report = evaluate_records(cfg, est, records, idx, tau=cfg.eval.tau)
    if args.split != "train" and len(tr):
        base = constant_baseline_mae([records[i].scene for i in tr], [records[i].scene for i in idx])
        report.extra["constant_baseline_mae"] = " ".join(f"{v:.6f}" for v in base)
    files = report.write(args.out)
    _echo_config(cfg, args.out)
    t = report.totals
    _summary(command="eval", scenes=len(idx), accuracy=report.accuracy, mae=[float(v) for v in report.mae],
             tau=cfg.eval.tau, matched=t["matched"], missed=t["missed"], spurious=t["spurious"],
             report=files["report"])


def cmd_reconstruct(args):
    from .evaluation import export_reconstruction
    from .pipeline import stack_features
    from .storage import load_weights

    cfg = _load_config(args)
    _, records = _read_records(args.dataset)
    est, _ = load_weights(_require(args.weights))
    indices = args.index if args.index else range(len(records))
    os.makedirs(args.out, exist_ok=True)
    written = []
    for i in indices:
        if not 0 <= i < len(records):
            raise exc.InvalidInputError(f"record index {i} out of range (0..{len(records) - 1})")
        det = est.predict_and_filter(stack_features([records[i].features]), cfg.eval.tau)[0]
        sid = records[i].features.scene_id if records[i].features.scene_id is not None else i
        written.append(export_reconstruction(det, os.path.join(args.out, f"scene_{sid:06d}.ply"),
                                             cfg.scene.materials))
    _echo_config(cfg, args.out)
    _summary(command="reconstruct", files=len(written), tau=cfg.eval.tau, out=args.out)


def cmd_grad_check(args):
    from .model import SphereDETR, grad_check
    from .pipeline import SimulationPlan, simulate_scene
    from .scenes import generate_scene

    cfg = _load_config(args)
    if args.dataset:
        _, records = _read_records(args.dataset)
        if not records:
            raise exc.IncompleteInputError("dataset holds no records")
        scene, grid = records[0].scene, records[0].features.grid
    else:
        plan = SimulationPlan(sim=cfg.simulation.build(), n_entries=cfg.codebook.n_entries, max_reflections=1,
                              master_seed=cfg.seed)
        scene = generate_scene(cfg.seed, cfg.scene.build())
        grid = simulate_scene(scene, plan).grid
    est = SphereDETR(hidden_dim=args.hidden, encoder_layers=1, decoder_layers=1, heads=2, ff_dim=2 * args.hidden,
                     n_queries=max(4, scene.n_spheres + 1), n_classes=len(cfg.scene.materials) + 1,
                     seed=cfg.seed, dtype="float64", bounds=tuple(tuple(b) for b in cfg.scene.bounds),
                     radius_range=tuple(cfg.scene.radius_range), grid=tuple(cfg.simulation.rx_shape))
    X = grid[None]
    est.build(X.shape[2], len(cfg.scene.materials) + 1)
    # standardize over receivers so every channel is order one
    Z = (X - X.mean(axis=1, keepdims=True)) / (X.std(axis=1, keepdims=True) + 1e-12)
    worst, loss = grad_check(est, Z, [scene], h=args.step, max_params=args.max_params)
    _summary(command="grad-check", max_rel_error=worst, loss=loss, hidden=args.hidden, passed=bool(worst < 1e-3))
    if worst >= 1e-3:
        raise exc.RFSplatError(f"gradient check failed: max relative error {worst:.3g}")


def cmd_oracle_check(args):
    from .geometry import Sphere, intersection_volume, monte_carlo_intersection

    rng = np.random.default_rng(args.seed)
    worst_sigma, worst_rel = 0.0, 0.0
    for _ in range(args.pairs):
        a = Sphere(tuple(rng.uniform(-1, 1, 3)), float(rng.uniform(0.3, 1.0)))
        b = Sphere(tuple(np.asarray(a.center) + rng.normal(0, 0.6, 3)), float(rng.uniform(0.3, 1.0)))
        exact = intersection_volume(a, b)
        est, se = monte_carlo_intersection(a, b, args.samples, rng)
        dev = abs(est - exact)
        worst_sigma = max(worst_sigma, dev / se if se > 0 else (0.0 if dev == 0 else np.inf))
        if exact > 0:
            worst_rel = max(worst_rel, dev / exact)
    _summary(command="oracle-check", pairs=args.pairs, samples=args.samples, max_deviation_sigma=worst_sigma,
             max_relative_deviation=worst_rel, passed=bool(worst_sigma <= 3.0))
    if worst_sigma > 3.0:
        raise exc.RFSplatError(f"lens volume deviates from Monte Carlo by {worst_sigma:.2f} sigma")


# parser ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="rfsplat", description="RF-based sphere reconstruction workbench")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration field")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed")
        return sp

    sp = common(sub.add_parser("gen-scenes", help="sample ground-truth scenes"))
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", default="scenes.jsonl")
    sp.set_defaults(func=cmd_gen_scenes)

    sp = common(sub.add_parser("simulate", help="trace paths and synthesize received samples"))
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", default="simulation.bin")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("extract-features", help="feature maps from a simulation file"))
    sp.add_argument("--simulation", required=True)
    sp.add_argument("--measured", action="store_true", help="polarization features from noisy samples")
    sp.add_argument("--out", default="dataset.ds")
    sp.set_defaults(func=cmd_extract_features)

    sp = common(sub.add_parser("build-dataset", help="scenes + simulation + features in one streaming pass"))
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", default="dataset.ds")
    sp.set_defaults(func=cmd_build_dataset)

    sp = common(sub.add_parser("train", help="fit the set-prediction model"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", default="model.bin")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate detections against ground truth"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    sp.add_argument("--out", default="eval")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("reconstruct", help="export detections as PLY sphere clouds"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--index", type=int, action="append", help="record index (repeatable; default all)")
    sp.add_argument("--out", default="reconstruction")
    sp.set_defaults(func=cmd_reconstruct)

    sp = common(sub.add_parser("grad-check", help="finite-difference check of model gradients"))
    sp.add_argument("--dataset", help="take the first record instead of simulating one scene")
    sp.add_argument("--hidden", type=int, default=8)
    sp.add_argument("--step", type=float, default=1e-4)
    sp.add_argument("--max-params", type=int, default=None)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("oracle-check", help="lens volume vs Monte Carlo")
    sp.add_argument("--pairs", type=int, default=100)
    sp.add_argument("--samples", type=int, default=1_000_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except exc.RFSplatError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.category, 1)
    except FileNotFoundError as e:
        print(f"error[missing-input]: {e}", file=sys.stderr)
        return EXIT_CODES["missing-input"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
