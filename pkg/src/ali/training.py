"""Staged training: base model (0), prior fusion (1), diffusion decoder (2)
and self-refinement on pseudo-relit pairs (3).

Every stage runs through one loop that owns the optimizer, derives per-epoch
and per-step seeds from (seed, stage, epoch/step), checks frozen-group
digests before and after, and can stop mid-epoch and resume bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import load_file, save_file

from .datagen import DatasetManifest, load_arrays, save_png, load_png, to_uint8
from .diffusion import ddpm_loss
from .encoder import VisualPrior, VisualPriorConfig, to_nhwc
from .errors import ConfigurationError, ContractViolation, PreconditionError, TrainingError
from .losses import LOSS_TERMS, improved_intrinsics_loss, relight_recon_loss, stage1_total
from .model import GROUPS, ALIModel, ModelConfig
from .numerics import derive_seed, digest, seed_stream

logger = logging.getLogger(__name__)

BASE_LR = 4e-5

STAGE_TRAINABLE = {
    0: ("theta", "phi"),
    1: ("theta", "theta_prime"),
    2: ("phi_prime",),
    3: ("phi_prime",),
}


class FreezeViolation(TrainingError):
    """A parameter group that a stage must not touch changed."""


# ---------------------------------------------------------------------------
# plans and data


@dataclass
class StagePlan:
    stage: int
    epochs: int = 1
    lr_multiplier: float = 10.0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    groups_per_batch: int = 4  # G, scene-aware stages
    views_per_group: int = 4  # M
    batch_size: int = 32  # diffusion stages
    lam: float = 1.0
    loss_weights: Dict[str, float] = field(default_factory=dict)
    identity_mix: float = 0.10
    max_steps: Optional[int] = None  # stop after this many optimizer steps in total
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ConfigurationError(f"unknown stage {self.stage}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0.0 <= self.identity_mix <= 1.0:
            raise ConfigurationError(f"identity_mix must be in [0, 1], got {self.identity_mix}")
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")

    @property
    def lr(self) -> float:
        return BASE_LR * self.lr_multiplier

    @property
    def trainable(self) -> Tuple[str, ...]:
        return STAGE_TRAINABLE[self.stage]

    @property
    def frozen(self) -> Tuple[str, ...]:
        return tuple(g for g in GROUPS if g not in self.trainable)

    @property
    def sampler(self) -> str:
        return "scene_aware" if self.stage in (0, 1) else "cross_scene"

    @classmethod
    def from_dict(cls, d: Mapping) -> "StagePlan":
        d = {k: v for k, v in dict(d).items() if k in cls.__dataclass_fields__}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneArrays:
    """A split held in memory: images (S, Lt, 3, H, W) in [0, 1]."""

    images: torch.Tensor
    scene_ids: List[str]
    light_ids: List[str]
    materials: np.ndarray

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "SceneArrays":
        imgs, mats = load_arrays(manifest)
        return cls(torch.from_numpy(imgs).permute(0, 1, 4, 2, 3).contiguous(),
                   [s.scene_id for s in manifest.scenes], list(manifest.light_ids), mats)

    @property
    def n_scenes(self) -> int:
        return self.images.shape[0]

    @property
    def n_lights(self) -> int:
        return self.images.shape[1]

    def scene_lights(self) -> Dict[str, List[str]]:
        return {s: list(self.light_ids) for s in self.scene_ids}


def as_arrays(data) -> SceneArrays:
    if isinstance(data, SceneArrays):
        return data
    if isinstance(data, DatasetManifest):
        return SceneArrays.from_manifest(data)
    raise ContractViolation(f"expected a manifest or SceneArrays, got {type(data).__name__}")


def _scene_lights(data) -> Dict[str, List[str]]:
    if isinstance(data, SceneArrays):
        return data.scene_lights()
    if isinstance(data, DatasetManifest):
        return {s.scene_id: list(s.light_ids) for s in data.scenes}
    return {str(k): list(v) for k, v in dict(data).items()}


def scene_aware_batches(data, groups_per_batch: int, views_per_group: int, seed: int) -> Iterator[list]:
    """Yield batches of G groups; each group is M (scene_id, light_id) pairs
    from one scene with distinct lights.

    Each scene's lights are shuffled and cut into groups of M (a remainder
    shorter than M is left out), groups from all scenes are shuffled together
    and cut into batches of G (a final short batch is dropped). Every
    (scene, light) appears at most once per call.
    """
    G, M = int(groups_per_batch), int(views_per_group)
    if G < 1 or M < 1:
        raise ConfigurationError(f"need G, M >= 1, got G={G}, M={M}")
    table = _scene_lights(data)
    short = [s for s, ls in table.items() if len(ls) < M]
    if short:
        raise ConfigurationError(f"{len(short)} scenes have fewer than M={M} lightings (e.g. {short[0]})")
    rng = seed_stream(seed, "scene-aware")
    groups = []
    for scene_id in sorted(table):
        lights = list(table[scene_id])
        order = rng.permutation(len(lights))
        for k in range(len(lights) // M):
            groups.append([(scene_id, lights[j]) for j in order[k * M:(k + 1) * M]])
    order = rng.permutation(len(groups))
    for b in range(len(groups) // G):
        yield [groups[j] for j in order[b * G:(b + 1) * G]]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Model plus training provenance.

    ``progress`` records where a stage stopped: {stage, epoch, batch,
    global_step, complete}. Optimizer state is kept for resumption.
    """

    model: ALIModel
    progress: Dict[str, int] = field(default_factory=lambda: {"stage": -1, "epoch": 0, "batch": 0,
                                                               "global_step": 0, "complete": 1})
    config: Dict = field(default_factory=dict)
    optimizer: Optional[dict] = None
    history: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return self.model.stage

    def digests(self) -> Dict[str, str]:
        return self.model.group_digests()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {}
        for g in GROUPS:
            for k, v in self.model.group_state(g).items():
                tensors[f"param/{g}/{k}"] = v.detach().contiguous()
        opt_meta = None
        if self.optimizer is not None:
            opt_meta = {"param_groups": self.optimizer["param_groups"], "state_keys": {}}
            for idx, st in sorted(self.optimizer["state"].items()):
                keys = []
                for k, v in sorted(st.items()):
                    tensors[f"optim/{idx}/{k}"] = torch.as_tensor(v).detach().contiguous()
                    keys.append(k)
                opt_meta["state_keys"][str(idx)] = keys
        meta = {
            "model_stage": self.model.stage,
            "model_config": self.model.cfg.to_dict(),
            "prior_config": self.model.prior.cfg.to_dict() if self.model.prior is not None else None,
            "digests": self.digests(),
            "progress": self.progress,
            "config": self.config,
            "optimizer": opt_meta,
            "history": self.history,
        }
        save_file(tensors, str(path), metadata={"ali_checkpoint": json.dumps(meta, sort_keys=True)})
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise PreconditionError(f"missing prerequisite checkpoint {path}")
        with safe_open(str(path), framework="pt") as fh:
            meta = json.loads(fh.metadata()["ali_checkpoint"])
        tensors = load_file(str(path))
        model = ALIModel(ModelConfig.from_dict(meta["model_config"]))
        if meta["prior_config"] is not None:
            pc = dict(meta["prior_config"])
            pc["channels"] = tuple(pc["channels"])
            pc["selected_layers"] = tuple(pc["selected_layers"])
            model.attach_prior(VisualPrior(VisualPriorConfig(**pc)))
        for g in GROUPS:
            prefix = f"param/{g}/"
            state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            mod = model.group(g)
            if mod is None:
                if state:
                    raise ContractViolation(f"checkpoint has {g} weights but no module to hold them")
                continue
            (mod.encoder if g == "prior" else mod).load_state_dict(state)
        model.stage = int(meta["model_stage"])
        if model.prior is not None:
            model.prior.freeze()
        optimizer = None
        if meta["optimizer"] is not None:
            state = {}
            for idx, keys in meta["optimizer"]["state_keys"].items():
                state[int(idx)] = {k: tensors[f"optim/{idx}/{k}"] for k in keys}
            optimizer = {"state": state, "param_groups": meta["optimizer"]["param_groups"]}
        ckpt = cls(model, meta["progress"], meta["config"], optimizer, meta["history"])
        got = ckpt.digests()
        if got != meta["digests"]:
            bad = sorted(g for g in GROUPS if got[g] != meta["digests"].get(g))
            raise ContractViolation(f"checkpoint {path} fails digest check for {bad}")
        return ckpt


def fresh_checkpoint(cfg: Optional[ModelConfig] = None) -> Checkpoint:
    return Checkpoint(ALIModel(cfg or ModelConfig()))


# ---------------------------------------------------------------------------
# the shared loop


StepFn = Callable[[list, int], Tuple[torch.Tensor, Dict[str, float]]]


def _optimizer(model: ALIModel, plan: StagePlan) -> torch.optim.Optimizer:
    params = [p for g in plan.trainable for p in model.group_parameters(g)]
    if not params:
        raise PreconditionError(f"stage {plan.stage} has no trainable parameters")
    return torch.optim.AdamW(params, lr=plan.lr, weight_decay=plan.weight_decay)


def _run_stage(ckpt: Checkpoint, plan: StagePlan, epoch_batches: Callable[[int], List], step_fn: StepFn,
               log_path=None) -> Checkpoint:
    model = ckpt.model
    model.set_trainable(plan.trainable)
    frozen_before = {g: digest(model.group_state(g)) for g in plan.frozen}

    resuming = ckpt.progress.get("stage") == plan.stage and not ckpt.progress.get("complete", 1)
    epoch0 = int(ckpt.progress["epoch"]) if resuming else 0
    batch0 = int(ckpt.progress["batch"]) if resuming else 0
    step = int(ckpt.progress["global_step"]) if resuming else 0
    history = {k: list(v) for k, v in ckpt.history.items()} if resuming else {}
    opt = _optimizer(model, plan) if plan.epochs > 0 else None
    if resuming and ckpt.optimizer is not None and opt is not None:
        opt.load_state_dict(ckpt.optimizer)

    log = open(log_path, "a") if log_path else None
    stopped = False
    epoch, b = epoch0, batch0
    try:
        for epoch in range(epoch0, plan.epochs):
            batches = epoch_batches(epoch)
            start = batch0 if epoch == epoch0 else 0
            sums: Dict[str, float] = {}
            if resuming and epoch == epoch0:
                sums = dict(ckpt.config.get("_partial_sums", {}))
            for b in range(start, len(batches)):
                if plan.max_steps is not None and step >= plan.max_steps:
                    stopped = True
                    break
                loss, parts = step_fn(batches[b], derive_seed(plan.seed, "stage", plan.stage, "step", step))
                if not torch.isfinite(loss):
                    raise TrainingError(f"stage {plan.stage} diverged at step {step}",
                                        {"stage": plan.stage, "step": step, "epoch": epoch, "terms": parts})
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if plan.grad_clip:
                    torch.nn.utils.clip_grad_norm_([p for grp in opt.param_groups for p in grp["params"]],
                                                   plan.grad_clip)
                opt.step()
                step += 1
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                sums["_n"] = sums.get("_n", 0.0) + 1
                if log:
                    log.write(json.dumps({"stage": plan.stage, "step": step, **parts}, sort_keys=True) + "\n")
            if stopped:
                b_stop = b
                break
            n = max(sums.pop("_n", 0.0), 1.0)
            for k, v in sums.items():
                history.setdefault(k, []).append(v / n)
            batch0 = 0
    finally:
        if log:
            log.close()

    after = {g: digest(model.group_state(g)) for g in plan.frozen}
    changed = sorted(g for g in plan.frozen if after[g] != frozen_before[g])
    if changed:
        raise FreezeViolation(f"stage {plan.stage} mutated frozen groups {changed}", {"groups": changed})
    model.set_trainable(())

    config = {**ckpt.config, f"stage{plan.stage}": plan.to_dict()}
    config.pop("_partial_sums", None)
    if stopped:
        config["_partial_sums"] = sums
        progress = {"stage": plan.stage, "epoch": epoch, "batch": b_stop, "global_step": step, "complete": 0}
        return Checkpoint(model, progress, config, opt.state_dict(), history)
    model.stage = max(model.stage, plan.stage)
    progress = {"stage": plan.stage, "epoch": plan.epochs, "batch": 0, "global_step": step, "complete": 1}
    return Checkpoint(model, progress, config, opt.state_dict() if opt is not None else None, history)


def _check_prereq(ckpt: Checkpoint, plan: StagePlan, expected: int) -> None:
    if plan.stage != expected:
        raise ConfigurationError(f"plan is for stage {plan.stage}, expected {expected}")
    resuming = ckpt.progress.get("stage") == expected and not ckpt.progress.get("complete", 1)
    if not resuming and ckpt.model.stage < expected - 1:
        raise PreconditionError(f"missing prerequisite checkpoint: stage {expected} needs stage {expected - 1}, "
                                f"checkpoint has stage {ckpt.model.stage}")


# ---------------------------------------------------------------------------
# stages 0 and 1


def _gather(arrays: SceneArrays, batch: list) -> Tuple[torch.Tensor, int, int]:
    s_index = {s: i for i, s in enumerate(arrays.scene_ids)}
    l_index = {l: i for i, l in enumerate(arrays.light_ids)}
    G, M = len(batch), len(batch[0])
    idx_s = [s_index[s] for grp in batch for s, _ in grp]
    idx_l = [l_index[l] for grp in batch for _, l in grp]
    return arrays.images[idx_s, idx_l], G, M


def cross_lighting_targets(G: int, M: int, seed: int) -> torch.Tensor:
    """Index of the lighting partner for each of G*M items: a random nonzero
    cyclic shift inside each group (identity when M == 1)."""
    rng = seed_stream(seed, "cross-lighting")
    out = []
    for g in range(G):
        r = int(rng.integers(1, M)) if M > 1 else 0
        out.extend(g * M + (m + r) % M for m in range(M))
    return torch.tensor(out, dtype=torch.long)


def relight_batch(model: ALIModel, x: torch.Tensor, G: int, M: int, seed: int):
    """Intrinsics from each item, lighting code from its partner; target is
    the partner image. Returns (pred, target, levels (G, M, ...), codes)."""
    stack, code = model.encode(x)
    partner = cross_lighting_targets(G, M, seed)
    pred = model.phi(stack, code[partner])
    levels = [a.reshape(G, M, *a.shape[1:]) for a in stack]
    return pred, x[partner], levels, code


def train_stage0(ckpt: Checkpoint, data, plan: StagePlan, log_path=None) -> Checkpoint:
    """Train the relighting encoder and base decoder from scratch on
    cross-lighting pairs, with (optionally weighted) intrinsic and
    regularization terms."""
    _check_prereq(ckpt, plan, 0)
    arrays = as_arrays(data)
    model = ckpt.model

    def step_fn(batch, seed):
        x, G, M = _gather(arrays, batch)
        pred, target, levels, code = relight_batch(model, x, G, M, seed)
        return stage1_total(pred, target, levels, code, plan.lam, seed, plan.loss_weights or None)

    def epochs(e):
        return list(scene_aware_batches(arrays, plan.groups_per_batch, plan.views_per_group,
                                        derive_seed(plan.seed, "stage", 0, "epoch", e)))

    return _run_stage(ckpt, plan, epochs, step_fn, log_path)


def train_stage1(ckpt: Checkpoint, prior: Optional[VisualPrior], data, plan: StagePlan, log_path=None) -> Checkpoint:
    """Attach the frozen prior through a zero-initialized projection and train
    the encoder plus projection on the composite objective, decoders frozen."""
    _check_prereq(ckpt, plan, 1)
    arrays = as_arrays(data)
    model = ckpt.model
    resuming = ckpt.progress.get("stage") == 1 and not ckpt.progress.get("complete", 1)
    if not resuming:
        if prior is None:
            raise PreconditionError("stage 1 needs a visual prior")
        model.attach_prior(prior)
    elif model.prior is None:
        raise PreconditionError("resumed stage-1 checkpoint carries no prior")

    def step_fn(batch, seed):
        x, G, M = _gather(arrays, batch)
        pred, target, levels, code = relight_batch(model, x, G, M, seed)
        return stage1_total(pred, target, levels, code, plan.lam, seed, plan.loss_weights or None)

    def epochs(e):
        return list(scene_aware_batches(arrays, plan.groups_per_batch, plan.views_per_group,
                                        derive_seed(plan.seed, "stage", 1, "epoch", e)))

    return _run_stage(ckpt, plan, epochs, step_fn, log_path)


# ---------------------------------------------------------------------------
# stage 2


@torch.no_grad()
def encode_all(model: ALIModel, images: torch.Tensor, batch: int = 64):
    """Frozen ALI levels and codes for (N, 3, H, W) images."""
    levels, codes = None, []
    for i in range(0, len(images), batch):
        stack, code = model.encode(images[i:i + batch])
        if levels is None:
            levels = [[] for _ in stack]
        for acc, a in zip(levels, stack):
            acc.append(a)
        codes.append(code)
    return [torch.cat(a) for a in levels], torch.cat(codes)


def cross_scene_pairs(n_scenes: int, n_lights: int, seed: int) -> np.ndarray:
    """One pair per (scene, target light) with a random source light != target,
    shuffled across scenes. Rows are (scene, source light, target light)."""
    if n_lights < 2:
        raise ConfigurationError("pairs need at least two lightings per scene")
    rng = seed_stream(seed, "pairs")
    s, l2 = np.meshgrid(np.arange(n_scenes), np.arange(n_lights), indexing="ij")
    s, l2 = s.ravel(), l2.ravel()
    l1 = (l2 + rng.integers(1, n_lights, size=l2.size)) % n_lights
    order = rng.permutation(s.size)
    return np.stack([s[order], l1[order], l2[order]], axis=1)


def _chunks(n: int, size: int) -> List[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def train_stage2(ckpt: Checkpoint, data, plan: StagePlan, log_path=None) -> Checkpoint:
    """Fit the diffusion decoder to denoise target-lighting latents, conditioned
    on the source image's ALI and the target image's lighting code."""
    _check_prereq(ckpt, plan, 2)
    arrays = as_arrays(data)
    model = ckpt.model
    S, Lt = arrays.n_scenes, arrays.n_lights
    flat = arrays.images.reshape(S * Lt, *arrays.images.shape[2:])
    levels, codes = encode_all(model, flat)
    latents = model.latent(flat)

    def step_fn(rows, seed):
        src = rows[:, 0] * Lt + rows[:, 1]
        tgt = rows[:, 0] * Lt + rows[:, 2]
        loss = ddpm_loss(model.phi_prime, latents[tgt], [a[src] for a in levels], codes[tgt], model.schedule, seed)
        return loss, {"ddpm": loss.item()}

    def epochs(e):
        pairs = cross_scene_pairs(S, Lt, derive_seed(plan.seed, "stage", 2, "epoch", e))
        return [torch.from_numpy(pairs[ix]) for ix in _chunks(len(pairs), plan.batch_size)]

    return _run_stage(ckpt, plan, epochs, step_fn, log_path)


# ---------------------------------------------------------------------------
# lighting zoo and stage 3


@dataclass
class LightingZoo:
    """Pseudo pairs (inputs[i] -> sources[target[i]]) plus the source set.

    ``donor[i]`` is the source index whose lighting code produced input i.
    Inputs are stored quantized to 8 bits so in-memory and on-disk zoos agree.
    """

    inputs: torch.Tensor  # (N*k, 3, H, W)
    target: np.ndarray
    donor: np.ndarray
    sources: torch.Tensor  # (N, 3, H, W)
    source_ids: List[str]
    k: int
    seed: int

    def __len__(self) -> int:
        return len(self.target)

    def save(self, root) -> Path:
        root = Path(root)
        for sub in ("pseudo", "source"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        pairs = []
        for i in range(len(self)):
            rel = f"pseudo/{i:05d}.png"
            save_png(root / rel, to_nhwc(self.inputs[i:i + 1])[0])
            pairs.append({"input": rel, "target": int(self.target[i]), "donor": int(self.donor[i])})
        srcs = []
        for j, sid in enumerate(self.source_ids):
            rel = f"source/{j:05d}.png"
            save_png(root / rel, to_nhwc(self.sources[j:j + 1])[0])
            srcs.append({"id": sid, "image": rel})
        meta = {"version": 1, "k": self.k, "seed": self.seed, "pairs": pairs, "sources": srcs}
        path = root / "zoo.json"
        path.write_text(json.dumps(meta, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, root) -> "LightingZoo":
        root = Path(root)
        path = root / "zoo.json"
        if not path.exists():
            raise PreconditionError(f"missing prerequisite zoo manifest {path}")
        meta = json.loads(path.read_text())

        def img(rel):
            return torch.from_numpy(load_png(root / rel)).permute(2, 0, 1)

        inputs = torch.stack([img(p["input"]) for p in meta["pairs"]])
        sources = torch.stack([img(s["image"]) for s in meta["sources"]])
        return cls(inputs, np.array([p["target"] for p in meta["pairs"]], dtype=np.int64),
                   np.array([p["donor"] for p in meta["pairs"]], dtype=np.int64), sources,
                   [s["id"] for s in meta["sources"]], int(meta["k"]), int(meta["seed"]))


def _quantize(x: torch.Tensor) -> torch.Tensor:
    return torch.round(x.clamp(0, 1) * 255.0) / 255.0


def zoo_donors(n: int, k: int, group_size: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Random grouping of n sources; each source takes k donors from its group
    mates. If k exceeds the mates available, the donor list wraps around a
    fresh shuffle of the mates (sampling with resampling).

    Returns (source index, donor index) arrays of length n*k.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if n < 2:
        raise ConfigurationError("a lighting zoo needs at least two source images")
    rng = seed_stream(seed, "zoo-groups")
    order = rng.permutation(n)
    size = max(2, min(group_size, n))
    groups = [order[i:i + size] for i in range(0, n, size)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        groups[-2] = np.concatenate([groups[-2], groups[-1]])
        groups.pop()
    src, don = [], []
    for grp in groups:
        for s in grp:
            mates = [int(m) for m in grp if m != s]
            picks: List[int] = []
            while len(picks) < k:
                picks.extend(int(mates[j]) for j in rng.permutation(len(mates)))
            src.extend([int(s)] * k)
            don.extend(picks[:k])
    src, don = np.array(src, dtype=np.int64), np.array(don, dtype=np.int64)
    order = np.argsort(src, kind="stable")
    return src[order], don[order]


@torch.no_grad()
def generate_lighting_zoo(ckpt: Checkpoint, images, k: int = 7, seed: int = 0, group_size: int = 8,
                          steps: int = 50, batch: int = 64, source_ids: Optional[Sequence[str]] = None) -> LightingZoo:
    """Relight every source image with the codes of k random batch-mates.

    ``images`` is a (N, 3, H, W) tensor or a SceneArrays whose every image is a
    source. Each output is paired with its unmodified source as ground truth.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    ckpt.model.require_stage(2)
    if isinstance(images, (SceneArrays, DatasetManifest)):
        arr = as_arrays(images)
        source_ids = [f"{s}/{l}" for s in arr.scene_ids for l in arr.light_ids]
        images = arr.images.reshape(-1, *arr.images.shape[2:])
    images = images.contiguous()
    n = len(images)
    source_ids = list(source_ids) if source_ids is not None else [str(i) for i in range(n)]
    model = ckpt.model
    src, don = zoo_donors(n, k, group_size, seed)
    levels, codes = encode_all(model, images)
    outs = []
    for ix in _chunks(len(src), batch):
        seeds = [derive_seed(seed, "zoo", int(i)) for i in ix]
        z = model.sample_latent([a[src[ix]] for a in levels], codes[don[ix]], steps, seeds)
        outs.append(_quantize(latent_image(model, z)))
    return LightingZoo(torch.cat(outs), src, don, images, source_ids, k, seed)


def latent_image(model: ALIModel, z: torch.Tensor) -> torch.Tensor:
    from .diffusion import latent_to_image

    return latent_to_image(z, model.cfg.latent_factor).clamp(0, 1)


def identity_mix_epoch(n_pseudo: int, n_sources: int, fraction: float, seed: int) -> np.ndarray:
    """An epoch of n_pseudo items: round(fraction * n_pseudo) identity items
    (source indices, encoded as -1 - index) and the rest distinct pseudo-pair
    indices, shuffled together."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"identity fraction must be in [0, 1], got {fraction}")
    rng = seed_stream(seed, "identity-mix")
    n_id = int(round(fraction * n_pseudo))
    pseudo = rng.permutation(n_pseudo)[: n_pseudo - n_id]
    ident = -1 - rng.integers(0, n_sources, size=n_id)
    items = np.concatenate([pseudo, ident])
    return items[rng.permutation(len(items))]


def train_stage3(ckpt: Checkpoint, zoo: LightingZoo, plan: StagePlan, log_path=None) -> Checkpoint:
    """Self-refinement: pseudo-relit inputs map back to their source images,
    with identity reconstructions mixed in at ``plan.identity_mix``."""
    _check_prereq(ckpt, plan, 3)
    model = ckpt.model
    in_levels, _ = encode_all(model, zoo.inputs)
    src_levels, src_codes = encode_all(model, zoo.sources)
    src_latents = model.latent(zoo.sources)
    target = torch.from_numpy(zoo.target)

    def step_fn(items, seed):
        items = torch.as_tensor(items)
        ident = items < 0
        tgt = torch.where(ident, -1 - items, target[items.clamp(min=0)])
        cond = [torch.where(ident[:, None, None, None], sl[tgt], il[items.clamp(min=0)])
                for il, sl in zip(in_levels, src_levels)]
        loss = ddpm_loss(model.phi_prime, src_latents[tgt], cond, src_codes[tgt], model.schedule, seed)
        return loss, {"ddpm": loss.item(), "identity_fraction": float(ident.float().mean())}

    def epochs(e):
        items = identity_mix_epoch(len(zoo), len(zoo.sources), plan.identity_mix,
                                   derive_seed(plan.seed, "stage", 3, "epoch", e))
        return [items[ix] for ix in _chunks(len(items), plan.batch_size)]

    return _run_stage(ckpt, plan, epochs, step_fn, log_path)


def epoch_identity_fraction(n_pseudo: int, n_sources: int, fraction: float, seed: int) -> float:
    items = identity_mix_epoch(n_pseudo, n_sources, fraction, seed)
    return float((items < 0).mean())
