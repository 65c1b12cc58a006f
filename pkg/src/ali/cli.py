"""Command-line entry point.

Artifacts live under ``--out`` (default ``$ALI_CACHE`` or ``.ali_cache``):

    data/{train,test,zoo}/      generated splits
    priors/<kind>.safetensors   pretrained visual priors
    checkpoints/stage<k>.safetensors
    zoo/                        pseudo-pair corpus
    reports/, relight/, interp/ outputs
    runs/<command>[-detail]/    resolved config and artifact manifest
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import config as config_mod
from .datagen import DatasetManifest, load_png, make_dataset, save_png
from .encoder import KIND_ALIASES, VisualPrior, to_nhwc
from .errors import ALIError, PreconditionError
from .evaluation import copy_input, tradeoff_scatter, tradeoff_table, write_report
from .inference import interpolate_lighting, relight, save_frames
from .pipeline import (build_prior, evaluate, model_config, run_tradeoff, scene_config, stage_plan)
from .training import (Checkpoint, LightingZoo, SceneArrays, fresh_checkpoint, generate_lighting_zoo, train_stage0,
                       train_stage1, train_stage2, train_stage3)

logger = logging.getLogger("ali")

SPLITS = ("train", "test", "zoo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects the artifacts one command produces."""

    def __init__(self, out: Path, command: str, cfg: dict):
        self.out, self.command, self.cfg = out, command, cfg
        self.paths: List[Path] = []

    def add(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            if p.is_dir():
                self.paths.extend(sorted(q for q in p.rglob("*") if q.is_file()))
            else:
                self.paths.append(p)

    def finish(self) -> List[Path]:
        run_dir = self.out / "runs" / self.command
        snap = config_mod.dump(self.cfg, run_dir / "resolved_config.yaml")
        entries = {}
        for p in sorted(set(self.paths)):
            entries[p.relative_to(self.out).as_posix()] = _sha256(p)
        manifest = run_dir / "artifacts.json"
        manifest.write_text(json.dumps({"command": self.command, "artifacts": entries}, indent=1, sort_keys=True))
        for rel in entries:
            print(self.out / rel)
        print(snap)
        print(manifest)
        return [snap, manifest]


# ---------------------------------------------------------------------------
# helpers


def _split(out: Path, name: str) -> SceneArrays:
    root = out / "data" / name
    if not (root / "manifest.json").exists():
        raise PreconditionError(f"missing prerequisite dataset {root}; run gen-data first")
    return SceneArrays.from_manifest(DatasetManifest.load(root))


def _ckpt_path(out: Path, stage: int) -> Path:
    return out / "checkpoints" / f"stage{stage}.safetensors"


def _load_ckpt(out: Path, stage: int) -> Checkpoint:
    p = _ckpt_path(out, stage)
    if not p.exists():
        raise PreconditionError(f"missing prerequisite checkpoint {p.relative_to(out)} (train stage {stage} first)")
    return Checkpoint.load(p)


def _latest_ckpt(out: Path, explicit: Optional[str]) -> Checkpoint:
    if explicit:
        return Checkpoint.load(explicit)
    for stage in (3, 2):
        if _ckpt_path(out, stage).exists():
            return Checkpoint.load(_ckpt_path(out, stage))
    raise PreconditionError("missing prerequisite checkpoint: relighting needs stage 2 or 3")


def _image(path: str) -> np.ndarray:
    if not Path(path).exists():
        raise PreconditionError(f"missing input image {path}")
    return load_png(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, out: Path, run: Run) -> None:
    d = cfg["data"]
    counts = {"train": d["n_scenes"], "test": d["n_test_scenes"], "zoo": d["n_zoo_scenes"]}
    splits = SPLITS if args.split == "all" else (args.split,)
    for split in splits:
        m = make_dataset(int(counts[split]), int(d["n_lights"]), int(cfg["seed"]), out / "data" / split,
                         scene_config(cfg), split=split, jobs=int(cfg["jobs"]))
        run.add(out / "data" / split)
        logger.info("%s split: %d scenes, %d images", split, len(m.scenes), len(m))


def cmd_pretrain_prior(args, cfg, out: Path, run: Run) -> None:
    train = _split(out, "train")
    prior = build_prior(cfg, args.kind, train, int(cfg["seed"]))
    path = prior.save(out / "priors" / f"{args.kind}.safetensors")
    run.add(path)


def cmd_train(args, cfg, out: Path, run: Run) -> None:
    stage = args.stage
    plan = stage_plan(cfg, stage)
    log = out / "logs" / f"stage{stage}.jsonl"
    log.parent.mkdir(parents=True, exist_ok=True)
    log.write_text("")
    if stage == 0:
        ck = train_stage0(fresh_checkpoint(model_config(cfg)), _split(out, "train"), plan, log)
    elif stage == 1:
        ck0 = _load_ckpt(out, 0)
        kind = args.prior or cfg["prior"]["kind"]
        prior_path = out / "priors" / f"{kind}.safetensors"
        if not prior_path.exists():
            raise PreconditionError(f"missing prerequisite prior {prior_path.relative_to(out)}")
        ck = train_stage1(ck0, VisualPrior.load(prior_path), _split(out, "train"), plan, log)
    elif stage == 2:
        ck = train_stage2(_load_ckpt(out, 1), _split(out, "train"), plan, log)
    else:
        ck2 = _load_ckpt(out, 2)
        zoo_dir = out / "zoo"
        if not (zoo_dir / "zoo.json").exists():
            raise PreconditionError("missing prerequisite zoo; run the zoo command after stage 2")
        ck = train_stage3(ck2, LightingZoo.load(zoo_dir), plan, log)
    run.add(ck.save(_ckpt_path(out, stage)), log)


def cmd_zoo(args, cfg, out: Path, run: Run) -> None:
    ck = _load_ckpt(out, 2)
    z = cfg["zoo"]
    src = _split(out, "zoo")
    flat = src.images.reshape(-1, *src.images.shape[2:])
    ids = [f"{s}/{l}" for s in src.scene_ids for l in src.light_ids]
    n = min(len(flat), int(z["n_sources"]))
    from .numerics import seed_stream

    pick = np.sort(seed_stream(int(cfg["seed"]), "zoo-sources").choice(len(flat), size=n, replace=False))
    zoo = generate_lighting_zoo(ck, flat[pick], k=int(z["k"]), seed=int(cfg["seed"]), group_size=int(z["group_size"]),
                                steps=int(z["steps"]), source_ids=[ids[i] for i in pick])
    zoo.save(out / "zoo")
    run.add(out / "zoo")


def cmd_relight(args, cfg, out: Path, run: Run) -> None:
    ck = _latest_ckpt(out, args.checkpoint)
    y = relight(_image(args.content), _image(args.lighting), ck, steps=args.steps or int(cfg["eval"]["steps"]),
                seed=int(cfg["seed"]))
    path = Path(args.output) if args.output else out / "relight" / "relit.png"
    save_png(path, y)
    run.add(path)


def cmd_interp(args, cfg, out: Path, run: Run) -> None:
    ck = _latest_ckpt(out, args.checkpoint)
    frames = interpolate_lighting(_image(args.content), _image(args.light_a), _image(args.light_b), args.n_steps, ck,
                                  steps=args.steps or int(cfg["eval"]["steps"]), seed=int(cfg["seed"]))
    run.add(*save_frames(frames, out / "interp"))


def cmd_eval(args, cfg, out: Path, run: Run) -> None:
    test = _split(out, "test")
    which = args.model or cfg["eval"]["model"]
    if which == "copy":
        report = evaluate(cfg, None, test, args.protocol, fn=copy_input)
    else:
        ck = _latest_ckpt(out, args.checkpoint) if which == "diffusion" else (
            Checkpoint.load(args.checkpoint) if args.checkpoint else _load_ckpt(out, 0))
        report = evaluate(cfg, ck.model, test, args.protocol, which)
    report["model"] = which
    run.add(*write_report(report, out / "reports", f"{args.protocol}_{which}"))
    print(f"{args.protocol} {which}: psnr {report['raw']['psnr']:.4f} rmse {report['raw']['rmse']:.4f} "
          f"corrected rmse {report['corrected']['rmse']:.4f}")


def cmd_probe(args, cfg, out: Path, run: Run) -> None:
    train, test = _split(out, "train"), _split(out, "test")
    rows = run_tradeoff(cfg, train, test, cfg["probe"]["kinds"], cfg["probe"]["seeds"])
    table = out / "reports" / "tradeoff.tsv"
    table.parent.mkdir(parents=True, exist_ok=True)
    table.write_text(tradeoff_table(rows))
    run.add(table, tradeoff_scatter(rows, out / "reports" / "tradeoff.png"))


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain-prior": cmd_pretrain_prior, "train": cmd_train, "zoo": cmd_zoo,
    "relight": cmd_relight, "interp": cmd_interp, "eval": cmd_eval, "probe": cmd_probe,
}


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="YAML or JSON config layered over the preset")
    p.add_argument("--preset", default=d, choices=sorted(config_mod.PRESETS), help="base preset (default: default)")
    p.add_argument("--set", dest="overrides", action="append", default=d, metavar="KEY=VALUE",
                   help="override one config key, e.g. stages.0.epochs=5")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--out", default=d, help="artifact directory (default: $ALI_CACHE or .ali_cache)")
    p.add_argument("--jobs", type=int, default=d, help="worker processes for data generation")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ali", description="Augmented latent intrinsics relighting at desk scale.")
    _globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-illumination splits")
    p.add_argument("--scenes", type=int, help="training scenes")
    p.add_argument("--lights", type=int, help="lights per scene")
    p.add_argument("--split", choices=("all",) + SPLITS, default="all")

    p = sub.add_parser("pretrain-prior", help="pretrain a visual prior")
    p.add_argument("--kind", required=True, choices=sorted(KIND_ALIASES))

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, type=int, choices=(0, 1, 2, 3))
    p.add_argument("--prior", choices=sorted(KIND_ALIASES), help="prior for stage 1 (default: config)")

    sub.add_parser("zoo", help="generate the lighting zoo from the stage-2 model")

    p = sub.add_parser("relight", help="relight one image with the lighting of another")
    p.add_argument("--content", required=True)
    p.add_argument("--lighting", required=True)
    p.add_argument("--output")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint")

    p = sub.add_parser("interp", help="interpolate between two lightings")
    p.add_argument("--content", required=True)
    p.add_argument("--light-a", required=True)
    p.add_argument("--light-b", required=True)
    p.add_argument("--n-steps", type=int, default=5)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", help="run an evaluation protocol on the test split")
    p.add_argument("--protocol", required=True, choices=("cross", "in"))
    p.add_argument("--model", choices=("diffusion", "stage0", "copy"))
    p.add_argument("--checkpoint")

    sub.add_parser("probe", help="encoder trade-off: probe accuracy vs relight PSNR per prior")

    for sp in sub.choices.values():
        _globals(sp, suppress=True)
    return ap


def _run_name(args, cfg) -> str:
    """runs/ subdirectory: the command plus whatever tells repeated
    invocations apart."""
    if args.command == "train":
        return f"train-stage{args.stage}"
    if args.command == "pretrain-prior":
        return f"pretrain-prior-{args.kind}"
    if args.command == "eval":
        return f"eval-{args.protocol}-{args.model or cfg['eval']['model']}"
    if args.command == "gen-data" and args.split != "all":
        return f"gen-data-{args.split}"
    return args.command


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand")
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        flags: Dict = {"seed": args.seed, "jobs": args.jobs}
        if args.command == "gen-data":
            flags["data"] = {k: v for k, v in (("n_scenes", args.scenes), ("n_lights", args.lights)) if v is not None}
        cfg = config_mod.resolve(args.preset or "default", args.config, args.overrides or (), flags)
        out = Path(args.out or os.environ.get("ALI_CACHE") or ".ali_cache")
        out.mkdir(parents=True, exist_ok=True)
        torch.use_deterministic_algorithms(True)
        r = Run(out, _run_name(args, cfg), cfg)
        COMMANDS[args.command](args, cfg, out, r)
        r.finish()
    except ALIError as exc:
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
