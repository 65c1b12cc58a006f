"""Config-driven glue shared by the CLI and the end-to-end checks."""

from __future__ import annotations

import logging
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .datagen import SceneConfig
from .encoder import (KIND_ALIASES, PretrainConfig, VisualPrior, VisualPriorConfig, pretrain_contrastive_prior,
                      pretrain_recon_prior)
from .errors import ConfigurationError
from .evaluation import (Relighter, check_budgets, cross_scene_protocol, in_scene_protocol, probe_prior)
from .model import ALIModel, ModelConfig
from .numerics import derive_seed
from .training import (Checkpoint, SceneArrays, StagePlan, fresh_checkpoint, train_stage0, train_stage1,
                       train_stage2)

logger = logging.getLogger(__name__)


def scene_config(cfg: Mapping) -> SceneConfig:
    return SceneConfig.from_dict(dict(cfg["data"].get("scene", {})))


def model_config(cfg: Mapping, seed: Optional[int] = None) -> ModelConfig:
    sc = scene_config(cfg)
    return ModelConfig.from_dict({**cfg["model"], "image_size": sc.height,
                                  "seed": cfg["seed"] if seed is None else seed})


def prior_config(cfg: Mapping, kind: str, seed: int) -> VisualPriorConfig:
    p = cfg["prior"]
    return VisualPriorConfig(prior_kind=KIND_ALIASES.get(kind, kind), channels=tuple(p["channels"]),
                             n_layers=int(p["n_layers"]), seed=int(seed))


def pretrain_config(cfg: Mapping, seed: int) -> PretrainConfig:
    return PretrainConfig.from_dict({**cfg["prior"]["pretrain"], "seed": int(seed)})


def stage_plan(cfg: Mapping, stage: int, seed: Optional[int] = None) -> StagePlan:
    d = dict(cfg["stages"].get(str(stage), {}))
    d["seed"] = cfg["seed"] if seed is None else seed
    return StagePlan.from_dict({**d, "stage": stage})


def build_prior(cfg: Mapping, kind: str, train: SceneArrays, seed: int) -> VisualPrior:
    """A prior of the configured architecture trained by ``kind``'s recipe."""
    pc = prior_config(cfg, kind, seed)
    pc.validate()
    images = train.images.permute(0, 1, 3, 4, 2).numpy()
    if pc.prior_kind == "random_frozen":
        return VisualPrior(pc)
    if pc.prior_kind == "recon_pretrained":
        return pretrain_recon_prior(images, pc, pretrain_config(cfg, seed))[0]
    return pretrain_contrastive_prior(images, pc, pretrain_config(cfg, seed))[0]


# ---------------------------------------------------------------------------
# relighters over a trained model


def stage0_relighter(model: ALIModel) -> Relighter:
    def fn(content, lighting):
        return model.base_relight(content, lighting)
    return fn


def diffusion_relighter(model: ALIModel, steps: int, seed: int) -> Relighter:
    """Diffusion relights whose per-item noise depends only on a running item
    counter, so results do not depend on how a protocol batches its pairs."""
    state = {"next": 0}

    def fn(content, lighting):
        B = content.shape[0]
        seeds = [derive_seed(seed, "eval-item", state["next"] + b) for b in range(B)]
        state["next"] += B
        code = model.encode(lighting)[1]
        return model.diffusion_relight(content, code, steps, seeds)
    return fn


def relighter(model: ALIModel, which: str, steps: int, seed: int) -> Relighter:
    if which == "diffusion":
        model.require_stage(2)
        return diffusion_relighter(model, steps, seed)
    if which == "stage0":
        model.require_stage(0)
        return stage0_relighter(model)
    raise ConfigurationError(f"unknown model head {which!r}")


def evaluate(cfg: Mapping, model: ALIModel, test: SceneArrays, protocol: str, which: Optional[str] = None,
             fn: Optional[Relighter] = None) -> dict:
    e = cfg["eval"]
    if fn is None:
        fn = relighter(model, which or e["model"], int(e["steps"]), int(e["seed"]))
    if protocol == "in":
        return in_scene_protocol(fn, test.images, e["offset"], test.materials)
    if protocol == "cross":
        return cross_scene_protocol(fn, test.images, int(e["n_refs"]), int(e["seed"]), e["n_trials"])
    raise ConfigurationError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# encoder trade-off


def train_through_stage2(cfg: Mapping, base: Checkpoint, prior: VisualPrior, train: SceneArrays,
                         seed: int) -> Checkpoint:
    """Stages 1 and 2 on a copy of a stage-0 checkpoint."""
    ck = Checkpoint(_clone(base.model), dict(base.progress), dict(base.config), None, {})
    ck = train_stage1(ck, prior, train, stage_plan(cfg, 1, seed))
    return train_stage2(ck, train, stage_plan(cfg, 2, seed))


def _clone(model: ALIModel) -> ALIModel:
    m = ALIModel(model.cfg)
    for name in ("theta", "phi", "phi_prime"):
        m.group(name).load_state_dict(model.group(name).state_dict())
    if model.prior is not None:
        m.attach_prior(model.prior)
        m.theta_prime.load_state_dict(model.theta_prime.state_dict())
    m.stage = model.stage
    return m


def run_tradeoff(cfg: Mapping, train: SceneArrays, test: SceneArrays, kinds: Sequence[str],
                 seeds: Sequence[int]) -> List[Dict]:
    """For each seed: one shared stage-0 model, then per prior kind a matched
    pretraining budget, stages 1-2, an in-scene relight score and a linear
    probe. Returns one row per (seed, kind)."""
    rows = []
    for seed in seeds:
        base = train_stage0(fresh_checkpoint(model_config(cfg, seed)), train, stage_plan(cfg, 0, seed))
        priors = {k: build_prior(cfg, k, train, seed) for k in kinds}
        check_budgets(list(priors.values()))
        for kind, prior in priors.items():
            ck = train_through_stage2(cfg, base, prior, train, seed)
            rep = evaluate(cfg, ck.model, test, "in", "diffusion")
            acc = probe_prior(prior, train.images, train.materials, test.images, test.materials, seed)
            rows.append({"prior": KIND_ALIASES.get(kind, kind), "seed": int(seed), "probe_accuracy": acc,
                         "relight_psnr": rep["raw"]["psnr"]})
            logger.info("tradeoff seed %d %s: probe %.4f psnr %.3f", seed, kind, acc, rep["raw"]["psnr"])
    return rows
