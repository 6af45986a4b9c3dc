"""Command-line interface: collect | train | retrain | eval | infer | pipeline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import heightmap_io, net as net_mod, policy, trainer
from .config import LabConfig, load_config, save_config
from .sim import Simulator
from .snapshots import SnapshotStore, load_params, save_params


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/out"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="grasplab",
        description="Desk-scale planar grasp-learning laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="run scheduled grasp attempts")
    _common(p)
    p.add_argument("--attempts", type=int, default=1000)
    p.add_argument("--objects", type=int)
    p.add_argument("--snapshot", type=Path, help="initial network snapshot")

    p = sub.add_parser("train", help="fit the network on a collected log")
    _common(p)
    p.add_argument("--snapshot", type=Path, help="warm-start snapshot")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("retrain", help="agreement-weighted retraining pass")
    _common(p)
    p.add_argument("--snapshot", type=Path, required=True)

    p = sub.add_parser("eval", help="n-out-of-m grasp-rate protocol")
    _common(p)
    p.add_argument("--snapshot", type=Path, required=True)
    p.add_argument("--protocol", default="10:20:50",
                   help="n:m:trials, e.g. 10:20:50")
    p.add_argument("--objects", type=int, help="unused; kept for symmetry")

    p = sub.add_parser("infer", help="value map + selected grasp for a scene")
    _common(p)
    p.add_argument("--snapshot", type=Path, required=True)
    p.add_argument("--objects", type=int, default=10)
    p.add_argument("--selector", default="maxN:1",
                   help="random | maxN:<N> | prob | uncertain")

    p = sub.add_parser("pipeline", help="full collect+train run (resumable)")
    _common(p)
    p.add_argument("--attempts", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--resume", action="store_true")
    return ap


def _load_lab(args) -> LabConfig:
    lab = LabConfig()
    if args.config:
        lab = load_config(args.config, lab)
    if getattr(args, "attempts", None):
        lab.pipeline.total_attempts = args.attempts
    if getattr(args, "objects", None):
        lab.pipeline.objects = args.objects
    return lab


def cmd_collect(args) -> int:
    lab = _load_lab(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    params = (load_params(args.snapshot) if args.snapshot
              else net_mod.init_params(args.seed))
    store = SnapshotStore(out / "snapshots")
    snapshot_id = store.save(params)
    alog = ds.AttemptLog(out / "attempts")
    sim = Simulator(lab.sim, lab.grasp, lab.image)
    clock = ds.LogicalClock(f"collect-s{args.seed}")
    collector = trainer.Collector(lab, sim, alog, clock, args.seed)
    successes = 0
    for t in range(lab.pipeline.total_attempts):
        _, outcome = collector.step(t, params, snapshot_id)
        successes += outcome.reward
    alog.close()
    print(f"collected {lab.pipeline.total_attempts} attempts, "
          f"{successes} rewards -> {out / 'attempts'}")
    return 0


def cmd_train(args) -> int:
    lab = _load_lab(args)
    attempts, windows = ds.load_training_arrays([args.out / "attempts"])
    if not attempts:
        print("no attempts found under --out", file=sys.stderr)
        return 2
    params = (load_params(args.snapshot) if args.snapshot
              else net_mod.init_params(args.seed))
    result = trainer.train_network(
        attempts, windows, params, lab, seed=args.seed,
        max_epochs=args.epochs)
    store = SnapshotStore(args.out / "snapshots")
    snapshot_id = store.save(result.params)
    final = result.final
    print(f"trained on {len(attempts)} attempts: test loss {final.loss:.4f} "
          f"acc {final.accuracy:.3f} f1 {final.f1:.3f} -> {snapshot_id}")
    return 0


def cmd_retrain(args) -> int:
    lab = _load_lab(args)
    attempts, windows = ds.load_training_arrays([args.out / "attempts"])
    params = load_params(args.snapshot)
    result = trainer.retrain_weighted(attempts, windows, params, lab,
                                      seed=args.seed)
    store = SnapshotStore(args.out / "snapshots")
    snapshot_id = store.save(result.params)
    final = result.final
    print(f"retrained: test loss {final.loss:.4f} acc {final.accuracy:.3f} "
          f"f1 {final.f1:.3f} -> {snapshot_id}")
    return 0


def cmd_eval(args) -> int:
    lab = _load_lab(args)
    params = load_params(args.snapshot)
    protocol = trainer.EvalProtocol.parse(args.protocol)
    report = trainer.evaluate_grasp_rate(params, lab, protocol,
                                         seed=args.seed)
    print(f"grasp rate {report.grasp_rate * 100:.1f} % "
          f"[{report.wilson_low * 100:.1f}, {report.wilson_high * 100:.1f}] "
          f"over {report.n_samples} trials "
          f"({protocol.n} of {protocol.m}), nominal PPH {report.pph:.0f}")
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "eval.csv", "a") as fh:
        fh.write(f"{protocol.n}:{protocol.m}:{protocol.trials},"
                 f"{report.grasp_rate:.6f},{report.wilson_low:.6f},"
                 f"{report.wilson_high:.6f},{report.pph:.1f}\n")
    return 0


def cmd_infer(args) -> int:
    lab = _load_lab(args)
    params = load_params(args.snapshot)
    sim = Simulator(lab.sim, lab.grasp, lab.image)
    scene = sim.spawn_scene(args.objects, seed=args.seed)
    depth = sim.render_depth(scene)
    vmap = policy.evaluate(depth, params, image_cfg=lab.image,
                           net_cfg=lab.net, scene_id=scene.digest())
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for k in range(vmap.spec.rotations):
        for d in range(vmap.spec.n_openings):
            heightmap_io.write_pgm(out / f"heatmap_r{k:02d}_d{d}.pgm",
                                   vmap.probs[k, :, :, d], lo=0.0, hi=1.0)
    heightmap_io.write_pgm(out / "depth.pgm", depth.data)
    select = policy.parse_selector(args.selector)
    idx = select(vmap, np.random.default_rng(args.seed))
    pose = policy.to_pose(idx, vmap.spec)
    summary = (f"selector {args.selector}\n"
               f"cell rotation={idx.k_rot} i={idx.i} j={idx.j} d={idx.k_d}\n"
               f"pose x={pose.x:.1f} mm y={pose.y:.1f} mm a={pose.a:.4f} rad "
               f"jaw={lab.grasp.jaw_openings_mm[idx.k_d]:.0f} mm\n"
               f"psi {vmap.at(idx):.4f}\n")
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_pipeline(args) -> int:
    lab = _load_lab(args)
    result = trainer.run_pipeline(lab, args.seed, args.out,
                                  resume=args.resume)
    print(f"pipeline finished: {result.attempts} attempts in "
          f"{result.elapsed_s / 60:.1f} min, final snapshot "
          f"{result.snapshot_id} under {result.out_dir}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handler = {
        "collect": cmd_collect,
        "train": cmd_train,
        "retrain": cmd_retrain,
        "eval": cmd_eval,
        "infer": cmd_infer,
        "pipeline": cmd_pipeline,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    raise SystemExit(main())
