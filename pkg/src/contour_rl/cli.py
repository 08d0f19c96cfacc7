"""Command line entry point: ``contour-rl <subcommand> ...``.

Every command takes ``--config`` (JSON), ``--seed``, ``--out`` and
``--threads``; explicit flags override values from the config file. Each run
writes ``run_manifest.json`` into its output directory listing the resolved
config and SHA-256 digests of inputs and outputs.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, nn
from .contours import ensure_ccw, refine_contour
from .data import SynthParams, synth_sample
from .env import EnvConfig, Episode, export_trace
from .errors import ContourRLError
from .io import (atomic_write_text, load_split, read_manifest, read_pgm,
                 read_points_csv, read_contour_csv, save_sample, write_manifest, write_points_csv)

log = logging.getLogger("contour_rl")

RUN_MANIFEST = "run_manifest.json"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

DEFAULTS = {
    "synth": {"n": 100, "n_train": 32, "n_val": 8, "height": 162, "width": 208, "params": {}},
    "landing": {"iterations": 1200, "augment": True, "line_search": {}},
    "agent": {"ppo": {}, "env": {}},
    "trace": {"env": {}},
    "eval": {"split": "test", "env": {}, "overlays": False},
}


# ----------------------------------------------------------------- plumbing

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path, section: str) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[section]))
    if path:
        doc = json.loads(Path(path).read_text())
        cfg = _merge(cfg, doc.get(section, doc))
    return cfg


def _dataclass_from(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins timestamps for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


class Run:
    """Collects inputs/outputs of one command and writes the run manifest."""

    def __init__(self, command: str, out_dir: Path, config: dict, seed):
        self.command = command
        self.out_dir = out_dir
        self.config = config
        self.seed = seed
        self.started = _timestamp()
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.volatile: set[Path] = set()
        self.errors: list[str] = []

    def add_input(self, path) -> None:
        # keyed relative to the output dir so relocated run trees hash the same
        key = os.path.relpath(os.path.abspath(path), os.path.abspath(self.out_dir))
        self.inputs[key] = sha256_file(path)

    def add_output(self, path, volatile: bool = False) -> None:
        """Record an output; volatile files (wall-clock columns) are listed without a digest."""
        self.outputs.append(Path(path))
        if volatile:
            self.volatile.add(Path(path))

    def finish(self) -> dict:
        outs = {}
        for p in sorted(set(self.outputs)):
            try:
                key = str(p.relative_to(self.out_dir))
            except ValueError:
                key = str(p)
            outs[key] = "volatile" if p in self.volatile else sha256_file(p)
        doc = {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "started": self.started,
            "finished": _timestamp(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outs,
            "errors": self.errors,
        }
        atomic_write_text(self.out_dir / RUN_MANIFEST, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return doc


def _set_threads(n):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _load_net(path, run: Run) -> nn.Network:
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing checkpoint {path}")
    run.add_input(path)
    return nn.load_checkpoint(path)[0]


def _manifest_inputs(manifest, run: Run, splits=None):
    run.add_input(manifest)
    base = Path(manifest).parent
    for e in read_manifest(manifest):
        if splits is None or e["split"] in splits:
            run.add_input(base / e["image_path"])
            run.add_input(base / e["contour_path"])


# ----------------------------------------------------------------- commands

def cmd_synth(args, cfg: dict, run: Run) -> int:
    n, n_train, n_val = int(cfg["n"]), int(cfg["n_train"]), int(cfg["n_val"])
    if n < 1 or n_train < 0 or n_val < 0:
        raise ValueError("need n >= 1 and non-negative split sizes")
    if n_train + n_val >= n or n_train == 0:
        log.warning("degenerate split: n=%d train=%d val=%d", n, n_train, n_val)
    base = dict(cfg["params"])
    base.pop("seed", None)
    seeds = np.random.SeedSequence(int(args.seed)).generate_state(4 * n + 64, dtype=np.uint32)
    sample_dir = run.out_dir / "samples"
    entries, used = [], 0
    for i in range(n):
        while True:
            if used >= len(seeds):
                raise RuntimeError("too many rejected blobs; check the synth parameters")
            s = int(seeds[used])
            used += 1
            try:
                sample = synth_sample(SynthParams(seed=s, **base), cfg["height"], cfg["width"], sample_id=f"s{i:03d}")
                break
            except ContourRLError as exc:
                log.debug("seed %d rejected: %s", s, exc)
        img, csv_path = save_sample(sample, sample_dir)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        entries.append({"id": sample.id, "image_path": str(img.relative_to(run.out_dir)),
                        "contour_path": str(csv_path.relative_to(run.out_dir)), "split": split,
                        "seed": s})
        run.add_output(img)
        run.add_output(csv_path)
    write_manifest(run.out_dir / "manifest.json", entries)
    run.add_output(run.out_dir / "manifest.json")
    log.info("wrote %d samples to %s", n, run.out_dir)
    return 0


def cmd_preprocess(args, cfg: dict, run: Run) -> int:
    manifest = Path(args.dataset)
    base = manifest.parent
    run.add_input(manifest)
    out_entries = []
    for e in read_manifest(manifest):
        try:
            img_src = base / e["image_path"]
            image = read_pgm(img_src)
            pts = read_points_csv(base / e["contour_path"])
            contour = ensure_ccw(refine_contour(pts))
            contour.validate(shape=image.shape)
        except (ContourRLError, OSError, ValueError) as exc:
            msg = f"{e['id']}: {exc}"
            log.error(msg)
            run.errors.append(msg)
            continue
        run.add_input(img_src)
        img_dst = run.out_dir / e["image_path"]
        csv_dst = run.out_dir / e["contour_path"]
        img_dst.parent.mkdir(parents=True, exist_ok=True)
        csv_dst.parent.mkdir(parents=True, exist_ok=True)
        if img_src.resolve() != img_dst.resolve():
            shutil.copyfile(img_src, img_dst)
        write_points_csv(csv_dst, contour.points)
        run.add_output(img_dst)
        run.add_output(csv_dst)
        out_entries.append(dict(e))
    write_manifest(run.out_dir / "manifest.json", out_entries)
    run.add_output(run.out_dir / "manifest.json")
    return 1 if run.errors else 0


def cmd_train_landing(args, cfg: dict, run: Run) -> int:
    from .landing import LineSearchConfig, augment, make_pairs, train_generator

    manifest = Path(args.dataset)
    _manifest_inputs(manifest, run, {"train", "val"})
    train_pairs = make_pairs(load_split(manifest, "train"))
    if cfg.get("augment", True):
        train_pairs = augment(train_pairs)
    val_pairs = make_pairs(load_split(manifest, "val"))
    if not train_pairs:
        raise ValueError("training split is empty")
    ls = _dataclass_from(LineSearchConfig, cfg["line_search"])
    ckpt = run.out_dir / "landing.ckpt"
    log_path = run.out_dir / "landing_log.csv"
    net, start = None, 0
    if args.resume and ckpt.is_file():
        net, header = nn.load_checkpoint(ckpt)
        start = int(header["iteration"])
    else:
        net = nn.landing_network(seed=int(args.seed))
        nn.save_checkpoint(ckpt, net, iteration=0)
    iterations = max(int(cfg["iterations"]) - start, 0)
    res = train_generator(train_pairs, val_pairs, iterations, ls, net=net, start_iteration=start,
                          log_path=log_path, checkpoint_path=ckpt)
    if res.stalled:
        log.info("line search stalled after %d iterations; treating as converged", len(res.history))
    run.add_output(ckpt)
    if log_path.exists():
        run.add_output(log_path)
    return 0


def cmd_train_agent(args, cfg: dict, run: Run) -> int:
    from .ppo import PPOConfig, train

    manifest = Path(args.dataset)
    _manifest_inputs(manifest, run, {"train", "val"})
    ppo_cfg = dict(cfg["ppo"])
    ppo_cfg["seed"] = int(args.seed)
    config = _dataclass_from(PPOConfig, ppo_cfg)
    env_vals = dict(cfg["env"])
    env_vals.setdefault("gamma", config.gamma)
    env = _dataclass_from(EnvConfig, env_vals)
    samples_train = load_split(manifest, "train")
    samples_val = load_split(manifest, "val")
    if not samples_train:
        raise ValueError("training split is empty")
    policy = value = None
    start = 0
    pol_path, val_path = run.out_dir / "policy.ckpt", run.out_dir / "value.ckpt"
    if args.resume and pol_path.is_file() and val_path.is_file():
        policy, header = nn.load_checkpoint(pol_path)
        value, _ = nn.load_checkpoint(val_path)
        start = int(header["iteration"]) + 1
        config = _dataclass_from(PPOConfig, {**asdict(config), "iterations": max(config.iterations - start, 0)})
    res = train(samples_train, samples_val, config, env, out_dir=run.out_dir, policy=policy, value=value,
                start_iteration=start, log_path=run.out_dir / "agent_log.csv")
    for p in (pol_path, val_path):
        if p.exists():
            run.add_output(p)
    run.add_output(run.out_dir / "agent_log.csv", volatile=True)
    if res.aborted:
        run.errors.append(res.aborted)
        return 1
    log.info("best validation return %.3f at iteration %d", res.best_val_return, res.best_iteration)
    return 0


def _checkpoint_paths(args):
    base = Path(args.checkpoints) if args.checkpoints else None
    policy = Path(args.policy) if args.policy else (base / "policy.ckpt" if base else None)
    landing = Path(args.landing) if args.landing else (base / "landing.ckpt" if base else None)
    if policy is None or landing is None:
        raise ValueError("give --checkpoints DIR or both --policy and --landing")
    return policy, landing


def cmd_trace(args, cfg: dict, run: Run) -> int:
    from .data import Sample
    from .metrics import close_trace, overlay, trace_samples
    from .io import write_ppm

    policy_path, landing_path = _checkpoint_paths(args)
    policy, landing_net = _load_net(policy_path, run), _load_net(landing_path, run)
    env = _dataclass_from(EnvConfig, cfg["env"])
    run.add_input(args.image)
    image = read_pgm(args.image)
    truth = None
    if args.contour:
        run.add_input(args.contour)
        truth = read_contour_csv(args.contour, shape=image.shape)
    stem = Path(args.image).stem
    # the episode never reads the contour in test mode; a dummy keeps Sample valid
    sample = Sample(image=image, contour=truth or _frame_contour(image.shape), id=stem)
    result = trace_samples([sample], policy, landing_net, env)[0]
    ep: Episode = result.episode
    out = run.out_dir
    export_trace(ep, out / f"{stem}_trace.csv", out / f"{stem}_episode.json")
    summary = {
        "id": stem,
        "landing_spot": list(result.landing_spot),
        "steps": ep.step_count,
        "termination_reason": ep.termination_reason,
        "closed": result.closed_ok,
    }
    closed = result.closed
    if closed is None and len(ep.trace) >= 3:
        try:
            closed = close_trace(ep.trace)
        except ContourRLError:
            closed = None
    if closed is not None:
        write_points_csv(out / f"{stem}_contour.csv", closed.points)
        run.add_output(out / f"{stem}_contour.csv")
    if not result.closed_ok:
        summary["warning"] = "trace did not return home"
    if truth is not None and closed is not None:
        from .metrics import dice, fill_contour, hausdorff

        h, w = image.shape
        summary["dice"] = dice(fill_contour(closed, h, w), fill_contour(truth, h, w)) if result.closed_ok else 0.0
        summary["hausdorff"] = hausdorff(truth, closed)
    write_ppm(out / f"{stem}_overlay.ppm", overlay(image, truth, closed if closed is not None else np.array(ep.trace)))
    atomic_write_text(out / f"{stem}_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for name in ("_trace.csv", "_episode.json", "_overlay.ppm", "_summary.json"):
        run.add_output(out / f"{stem}{name}")
    return 0


def _frame_contour(shape):
    from .contours import Contour

    h, w = shape
    return Contour([(0, 0), (h - 1, 0), (h - 1, w - 1), (0, w - 1)])


def cmd_eval(args, cfg: dict, run: Run) -> int:
    from .metrics import evaluate, write_overlay, write_report

    manifest = Path(args.dataset)
    split = cfg["split"]
    policy_path, landing_path = _checkpoint_paths(args)
    policy, landing_net = _load_net(policy_path, run), _load_net(landing_path, run)
    _manifest_inputs(manifest, run, {split})
    samples = load_split(manifest, split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    env = _dataclass_from(EnvConfig, cfg["env"])
    traced: list = []
    report = evaluate(samples, policy, landing_net, env, results=traced)
    for p in write_report(report, run.out_dir):
        run.add_output(p)
    if cfg.get("overlays"):
        odir = run.out_dir / "overlays"
        odir.mkdir(exist_ok=True)
        for s, r in zip(samples, traced):
            pred = r.closed if r.closed is not None else np.array(r.episode.trace)
            write_overlay(odir / f"{s.id}.ppm", s, pred)
            run.add_output(odir / f"{s.id}.ppm")
    agg = report.aggregate
    print(f"Average Dice Score       {agg['dice_mean']:.3f} ± {agg['dice_std']:.3f}")
    print(f"Average Hausdorff (px)   {agg['hausdorff_mean']:.3f} ± {agg['hausdorff_std']:.3f}")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "synth"),
    "preprocess": (cmd_preprocess, "synth"),
    "train-landing": (cmd_train_landing, "landing"),
    "train-agent": (cmd_train_agent, "agent"),
    "trace": (cmd_trace, "trace"),
    "eval": (cmd_eval, "eval"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--seed", type=int, default=None, help="u64 seed (default 0)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")

    p = argparse.ArgumentParser(prog="contour-rl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, help="number of samples")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)

    s = sub.add_parser("preprocess", parents=[common], help="refine contours to CCW 8-connected")
    s.add_argument("dataset", help="manifest.json")

    for name, helptext in (("train-landing", "train the landing-spot generator"),
                           ("train-agent", "train the policy/value networks with PPO")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("dataset", help="manifest.json")
        s.add_argument("--iterations", type=int)
        s.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")

    for name, helptext in (("trace", "contour one image"), ("eval", "score a dataset split")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("dataset" if name == "eval" else "image",
                       help="manifest.json" if name == "eval" else "PGM image")
        s.add_argument("--checkpoints", help="directory with policy.ckpt and landing.ckpt")
        s.add_argument("--policy")
        s.add_argument("--landing")
        if name == "trace":
            s.add_argument("--contour", help="optional ground-truth CSV for the overlay")
        else:
            s.add_argument("--split", choices=["train", "val", "test"])
            s.add_argument("--overlays", action="store_true")
    return p


def _apply_flags(args, cfg: dict) -> dict:
    if args.command == "synth":
        for key in ("n", "n_train", "n_val"):
            if getattr(args, key) is not None:
                cfg[key] = getattr(args, key)
    elif args.command == "train-landing" and args.iterations is not None:
        cfg["iterations"] = args.iterations
    elif args.command == "train-agent" and args.iterations is not None:
        cfg["ppo"]["iterations"] = args.iterations
    elif args.command == "eval":
        if args.split:
            cfg["split"] = args.split
        if args.overlays:
            cfg["overlays"] = True
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("CONTOUR_RL_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    func, section = COMMANDS[args.command]
    try:
        cfg = _apply_flags(args, load_config(args.config, section))
        if args.seed is None:
            args.seed = int(cfg.pop("seed", 0))
        if not 0 <= args.seed < 2 ** 64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, out, cfg, args.seed)
        limiter = _set_threads(args.threads)
        try:
            code = func(args, cfg, run)
        finally:
            if limiter is not None:
                limiter.unregister()
        run.finish()
        return code
    except (ContourRLError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
