"""Command-line entry point: ``ltedsim <verb> --config exp.yaml``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import __version__
from .config import ADA, POLICY_NAMES, ConfigError, ExperimentConfig, load_config, validate
from .dqn import (CurvePoint, QNetworkParams, load_checkpoint, save_checkpoint, train_single_device)
from .federated import FederationConfig, infer_distributed, train_federated
from .policies import make_baseline
from .scene import generate_scene
from .timing import FrameTimeline, run_episode, timelines_to_csv

log = logging.getLogger("ltedsim")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
METRICS = ("A", "H", "W", "R")


class RunError(Exception):
    pass


# -- outputs --------------------------------------------------------------------------

def _summary(timelines: list[FrameTimeline]) -> dict:
    """Totals in CSV row order so they equal the column sums of the exported file."""
    out = {m: 0.0 for m in METRICS}
    for tl in timelines:
        for m in METRICS:
            out[m] += float(getattr(tl, m))
    out["frames"] = len(timelines)
    out["detections"] = sum(1 for tl in timelines if tl.action == 0)
    out["decisions"] = "".join(str(tl.action) for tl in timelines)
    return out


def _write_timelines(out_dir: str, policy: str, by_device: dict[int, list[FrameTimeline]]) -> dict:
    report = {}
    for k in sorted(by_device):
        timelines_to_csv(by_device[k], os.path.join(out_dir, f"timeline_{policy}_{k}.csv"))
        report[str(k)] = _summary(by_device[k])
    report["total"] = {m: sum(report[str(k)][m] for k in sorted(by_device)) for m in METRICS}
    return report


def _write_curve(out_dir: str, device: int, curve: list[CurvePoint]) -> list[dict]:
    rows = [{"episode": p.episode, "average_total_reward": float(p.average_total_reward),
             "epsilon": float(p.epsilon), "eta": float(p.eta)} for p in curve]
    with open(os.path.join(out_dir, f"convergence_{device}.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["episode", "average_total_reward", "epsilon", "eta"],
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({key: repr(v) if isinstance(v, float) else v for key, v in r.items()})
    return rows


def _write_report(out_dir: str, report: dict) -> None:
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_table(policies: dict) -> None:
    print(f"{'policy':<12} {'device':>6} {'A':>10} {'H':>10} {'W':>12} {'R':>12}")
    for name, per_device in policies.items():
        for dev, row in per_device.items():
            print(f"{name:<12} {dev:>6} {row['A']:>10.2f} {row['H']:>10.2f} {row['W']:>12.2f} {row['R']:>12.2f}")


def _split(timelines: list[FrameTimeline]) -> dict[int, list[FrameTimeline]]:
    out: dict[int, list[FrameTimeline]] = {}
    for tl in timelines:
        out.setdefault(tl.device, []).append(tl)
    return out


def _base_report(cfg: ExperimentConfig, mode: str) -> dict:
    return {"scenario": cfg.scenario, "mode": mode, "seed": cfg.seed, "version": __version__,
            "frames": cfg.num_frames,
            "devices": [{"device": d.device_id, "segments": [
                {"start": s.start, "end": s.end, "interval": s.capture_interval, "alpha": s.alpha,
                 "beta": s.beta} for s in d.segments()]} for d in cfg.devices],
            "policies": {}}


# -- verbs -------------------------------------------------------------------------

def compare_baselines(cfg: ExperimentConfig, out_dir: str, policies: list[str]) -> dict:
    """Every requested policy on the seeded trace (episode 0); all devices share the edge."""
    scene = generate_scene(cfg.scene)
    scenes = [scene] * len(cfg.devices)
    report = _base_report(cfg, "compare-baselines")
    for name in policies:
        if name == ADA:
            if not cfg.checkpoint:
                raise RunError("policy lted_ada needs a checkpoint in the config")
            params, _, norms, _ = load_checkpoint(cfg.checkpoint)
            by_device = infer_distributed(params, cfg.devices, cfg.channel, cfg.scene, seed=cfg.seed,
                                          norms=norms, scenes=scenes)
        else:
            pols = {d.device_id: make_baseline(name, seed=cfg.seed, device=d.device_id,
                                               interval=cfg.interval, threshold=cfg.threshold,
                                               p=cfg.track_prob) for d in cfg.devices}
            by_device = _split(run_episode(cfg.devices, cfg.channel, cfg.scene, pols, scenes=scenes,
                                           seed=cfg.seed, episode=0))
        report["policies"][name] = _write_timelines(out_dir, name, by_device)
    return report


def train_single(cfg: ExperimentConfig, out_dir: str, progress: bool) -> dict:
    """Train one network per device, each alone with the edge, then run it greedily."""
    scene = generate_scene(cfg.scene)
    report = _base_report(cfg, "train-single")
    report["training"] = {}
    per_device = {}
    for dev in cfg.devices:
        def prog(p, k=dev.device_id):
            if progress:
                log.info("device %d episode %d reward %.4f epsilon %.4f", k, p.episode,
                         p.average_total_reward, p.epsilon)

        res = train_single_device(dev, cfg.channel, cfg.scene, cfg.trainer, seed=cfg.seed,
                                  scene=scene, progress=prog)
        save_checkpoint(os.path.join(out_dir, f"checkpoint_device{dev.device_id}.json"), res.params,
                        res.agent.adam, cfg.trainer, res.norms)
        report["training"][str(dev.device_id)] = _write_curve(out_dir, dev.device_id, res.curve)
        by_device = infer_distributed(res.params, [dev], cfg.channel, cfg.scene, seed=cfg.seed,
                                      norms=res.norms, scenes=[scene])
        per_device.update(by_device)
    report["policies"][ADA] = _write_timelines(out_dir, ADA, per_device)
    return report


def train_fed(cfg: ExperimentConfig, out_dir: str, progress: bool) -> dict:
    kappa3 = cfg.federation.kappa3 if cfg.federation else FederationConfig.kappa3
    fed = FederationConfig(cfg.devices, kappa3=kappa3, trainer=cfg.trainer, seed=cfg.seed)
    scene = generate_scene(cfg.scene)
    scenes = [scene] * len(cfg.devices)

    def prog(k, p):
        if progress:
            log.info("device %d episode %d reward %.4f epsilon %.4f", k, p.episode,
                     p.average_total_reward, p.epsilon)

    res = train_federated(fed, cfg.channel, cfg.scene, scenes=scenes, progress=prog)
    report = _base_report(cfg, "train-federated")
    report["kappa3"] = fed.kappa3
    report["syncs"] = res.syncs
    report["training"] = {str(k): _write_curve(out_dir, k, res.curves[k]) for k in sorted(res.curves)}
    if res.global_params is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint_global.json"), res.global_params,
                        None, cfg.trainer, res.norms)
        params: QNetworkParams | dict = res.global_params
    else:
        for k, agent in sorted(res.agents.items()):
            save_checkpoint(os.path.join(out_dir, f"checkpoint_device{k}.json"), agent.params,
                            agent.adam, cfg.trainer, res.norms)
        params = res.device_params
    by_device = infer_distributed(params, cfg.devices, cfg.channel, cfg.scene, seed=cfg.seed,
                                  norms=res.norms, scenes=scenes)
    report["policies"][ADA] = _write_timelines(out_dir, ADA, by_device)
    return report


def infer_only(cfg: ExperimentConfig, out_dir: str, checkpoint: str | None) -> dict:
    path = checkpoint or cfg.checkpoint
    if not path:
        raise RunError("infer needs a checkpoint (config field 'checkpoint' or --checkpoint)")
    if not os.path.exists(path):
        raise RunError(f"checkpoint not found: {path}")
    params, _, norms, _ = load_checkpoint(path)
    by_device = infer_distributed(params, cfg.devices, cfg.channel, cfg.scene, seed=cfg.seed, norms=norms)
    report = _base_report(cfg, "infer")
    report["checkpoint"] = os.path.basename(path)
    report["policies"][ADA] = _write_timelines(out_dir, ADA, by_device)
    return report


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltedsim", description="Edge detection / local tracking scheduling experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("validate", "train-single", "train-federated", "infer", "compare-baselines"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="YAML experiment file")
        if verb != "validate":
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
            p.add_argument("--out", default=None, help="output directory (default: config 'output')")
            p.add_argument("--quiet", action="store_true")
        if verb == "compare-baselines":
            p.add_argument("--policies", default=None, help="comma-separated policy names")
        if verb == "infer":
            p.add_argument("--checkpoint", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    if args.verb == "validate":
        try:
            diags = validate(args.config)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        for d in diags:
            print(d, file=sys.stderr)
        if diags:
            return EXIT_INVALID
        print(f"{args.config}: ok")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if args.seed is not None:
        if args.seed < 0:
            print("error: --seed must be non-negative", file=sys.stderr)
            return EXIT_INVALID
        cfg.seed = args.seed
    out_dir = args.out or cfg.output
    progress = not args.quiet
    try:
        os.makedirs(out_dir, exist_ok=True)
        if args.verb == "compare-baselines":
            names = args.policies.split(",") if args.policies else cfg.policies
            unknown = [n for n in names if n not in POLICY_NAMES]
            if unknown:
                print(f"error: unknown policies: {', '.join(unknown)}", file=sys.stderr)
                return EXIT_INVALID
            report = compare_baselines(cfg, out_dir, names)
        elif args.verb == "train-single":
            report = train_single(cfg, out_dir, progress)
        elif args.verb == "train-federated":
            report = train_fed(cfg, out_dir, progress)
        else:
            report = infer_only(cfg, out_dir, args.checkpoint)
    except (RunError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_report(out_dir, report)
    _print_table({name: {k: v for k, v in rows.items() if k != "total"}
                  for name, rows in report["policies"].items()})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
