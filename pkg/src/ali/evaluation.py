"""Image metrics, color correction, material-grouped scoring and the
relighting protocols.

A relighter is any callable ``fn(content, lighting) -> relit`` on
(B, 3, H, W) tensors in [0, 1]: it must transfer the lighting of
``lighting`` onto the scene in ``content``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .datagen import CATEGORY_NAMES, DIFFUSE, GLOSSY, METALLIC, SPECULAR, UNCERTAIN, dominant_category
from .errors import ConfigurationError, ContractViolation, ProtocolError
from .numerics import seed_stream

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# row order of the material table; ALL comes last
CATEGORY_ORDER = ("Uncertain", "Diffuse", "Glossy", "Metallic", "Specular")
REPORT_COLUMNS = ("category", "ssim", "psnr", "rmse", "lpips", "pixel_count")

Relighter = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


# ---------------------------------------------------------------------------
# metrics on (H, W, C) or (H, W) arrays in [0, 1]


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    g = np.asarray(gt.detach().cpu() if isinstance(gt, torch.Tensor) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ContractViolation(f"shape mismatch {p.shape} vs {g.shape}")
    return p, g


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean((p - g) ** 2))


def rmse(pred, gt) -> float:
    return math.sqrt(mse(pred, gt))


def psnr_from_mse(m: float) -> float:
    if m <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def psnr(pred, gt) -> float:
    """10 log10(1 / MSE) for a unit data range, capped at 99 dB."""
    return psnr_from_mse(mse(pred, gt))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation over the window positions that fit entirely
    inside the image: (H, W) -> (H - k + 1, W - k + 1)."""
    k = len(w)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ w


def ssim_map(pred, gt) -> np.ndarray:
    """Channel-averaged SSIM at every window center, (H - 10, W - 10) for the
    default 11x11 window."""
    p, g = _pair(pred, gt)
    if p.ndim == 2:
        p, g = p[..., None], g[..., None]
    if min(p.shape[:2]) < SSIM_WINDOW:
        raise ContractViolation(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    maps = []
    for c in range(p.shape[-1]):
        x, y = p[..., c], g[..., c]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def ssim(pred, gt) -> float:
    return float(ssim_map(pred, gt).mean())


# ---------------------------------------------------------------------------
# color correction


def color_correct(pred, ref) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel least-squares gain g_c = <pred_c, ref_c> / <pred_c, pred_c>.

    Works on (..., H, W, C); gains are fitted per image. Returns the clamped,
    corrected prediction and the gains (..., C). A channel that is zero
    everywhere keeps gain 1 and triggers a warning.
    """
    p, r = _pair(pred, ref)
    num = (p * r).sum(axis=(-3, -2))
    den = (p * p).sum(axis=(-3, -2))
    zero = den <= 0
    if np.any(zero):
        warnings.warn(f"{int(zero.sum())} all-zero channel(s) in color correction; gain set to 1", RuntimeWarning)
    gains = np.where(zero, 1.0, num / np.where(zero, 1.0, den))
    corrected = np.clip(p * gains[..., None, None, :], 0.0, 1.0)
    return corrected, gains


# ---------------------------------------------------------------------------
# material grouping


@dataclass
class MetricsRow:
    category: str
    ssim: Optional[float]
    psnr: Optional[float]
    rmse: Optional[float]
    pixel_count: int
    lpips: Optional[float] = None  # reserved; not computed

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


class MaterialClusterMap:
    """Total map from raw material indices to the five reflectance clusters."""

    def __init__(self, mapping: Mapping[int, int]):
        self.mapping = {int(k): int(v) for k, v in mapping.items()}
        bad = {v for v in self.mapping.values() if v not in range(len(CATEGORY_NAMES))}
        if bad:
            raise ConfigurationError(f"cluster ids {sorted(bad)} outside 0..{len(CATEGORY_NAMES) - 1}")

    @classmethod
    def identity(cls) -> "MaterialClusterMap":
        return cls({c: c for c in range(len(CATEGORY_NAMES))})

    @classmethod
    def miiw(cls) -> "MaterialClusterMap":
        """The 38 Multi-Illumination material labels grouped by reflectance.

        Label 27 (tile) is listed under two clusters in the source grouping;
        it is assigned to Glossy here.
        """
        groups = {
            DIFFUSE: (3, 5, 6, 7, 8, 9, 10, 11, 14, 16, 21, 25, 26, 29, 31, 32, 33, 34, 35, 36),
            GLOSSY: (4, 15, 23, 24, 27, 30),
            SPECULAR: (12, 18, 22),
            METALLIC: (17,),
            UNCERTAIN: (0, 1, 2, 13, 19, 20, 28, 37),
        }
        return cls({raw: c for c, raws in groups.items() for raw in raws})

    def __call__(self, raw_map: np.ndarray) -> np.ndarray:
        raw_map = np.asarray(raw_map)
        missing = set(np.unique(raw_map).tolist()) - set(self.mapping)
        if missing:
            raise ContractViolation(f"raw material labels {sorted(missing)} have no cluster")
        lut = np.zeros(max(self.mapping) + 1, dtype=np.int64)
        for k, v in self.mapping.items():
            lut[k] = v
        return lut[raw_map]


class MaterialAccumulator:
    """Pools squared error and SSIM over many images, per category.

    SSIM for a category is the mean of the SSIM map over window centers whose
    pixel belongs to the category; pixels too close to the border to center a
    window count for RMSE/PSNR but not for SSIM.
    """

    def __init__(self, clusters: Optional[MaterialClusterMap] = None):
        self.clusters = clusters or MaterialClusterMap.identity()
        n = len(CATEGORY_NAMES)
        self.se = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)
        self.ssim_sum = np.zeros(n)
        self.ssim_count = np.zeros(n, dtype=np.int64)

    def add(self, pred, gt, material_map) -> None:
        p, g = _pair(pred, gt)
        cats = self.clusters(material_map)
        if cats.shape != p.shape[:2]:
            raise ContractViolation(f"material map {cats.shape} does not match image {p.shape[:2]}")
        err = ((p - g) ** 2).mean(axis=-1) if p.ndim == 3 else (p - g) ** 2
        smap = ssim_map(p, g)
        r = SSIM_WINDOW // 2
        centers = cats[r:cats.shape[0] - r, r:cats.shape[1] - r]
        n = len(CATEGORY_NAMES)
        self.se += np.bincount(cats.ravel(), weights=err.ravel(), minlength=n)
        self.count += np.bincount(cats.ravel(), minlength=n)
        self.ssim_sum += np.bincount(centers.ravel(), weights=smap.ravel(), minlength=n)
        self.ssim_count += np.bincount(centers.ravel(), minlength=n)

    def rows(self) -> List[MetricsRow]:
        out = []
        for name in CATEGORY_ORDER:
            c = CATEGORY_NAMES.index(name)
            out.append(self._row(name, self.se[c], self.count[c], self.ssim_sum[c], self.ssim_count[c]))
        out.append(self._row("ALL", self.se.sum(), self.count.sum(), self.ssim_sum.sum(), self.ssim_count.sum()))
        return out

    @staticmethod
    def _row(name, se, count, ssum, scount) -> MetricsRow:
        if count == 0:
            return MetricsRow(name, None, None, None, 0)
        m = float(se / count)
        s = float(ssum / scount) if scount > 0 else None
        return MetricsRow(name, s, psnr_from_mse(m), math.sqrt(m), int(count))


def material_grouped_metrics(pred, gt, material_map, clusters: Optional[MaterialClusterMap] = None) -> List[MetricsRow]:
    """Per-category SSIM/PSNR/RMSE rows (fixed order) plus an ALL row."""
    acc = MaterialAccumulator(clusters)
    acc.add(pred, gt, material_map)
    return acc.rows()


# ---------------------------------------------------------------------------
# relighters


def copy_input(content: torch.Tensor, lighting: torch.Tensor) -> torch.Tensor:
    """Baseline that ignores the lighting reference."""
    return content


class OracleRelighter:
    """Returns the ground-truth render by looking both inputs up in a split."""

    def __init__(self, images: torch.Tensor):
        self.images = images  # (S, Lt, 3, H, W)
        S, Lt = images.shape[:2]
        self.index = {self._key(images[s, l]): (s, l) for s in range(S) for l in range(Lt)}

    @staticmethod
    def _key(x: torch.Tensor) -> bytes:
        return x.contiguous().numpy().tobytes()

    def __call__(self, content: torch.Tensor, lighting: torch.Tensor) -> torch.Tensor:
        out = []
        for c, l in zip(content, lighting):
            if self._key(c) not in self.index or self._key(l) not in self.index:
                raise ProtocolError("oracle asked about an image outside its split")
            s, _ = self.index[self._key(c)]
            _, lt = self.index[self._key(l)]
            out.append(self.images[s, lt])
        return torch.stack(out)


def _run(relight: Relighter, content: torch.Tensor, lighting: torch.Tensor, batch: int) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, len(content), batch):
            y = relight(content[i:i + batch], lighting[i:i + batch])
            if tuple(y.shape) != tuple(content[i:i + batch].shape):
                raise ContractViolation(f"relighter returned {tuple(y.shape)} for {tuple(content[i:i + batch].shape)}")
            outs.append(y.detach().clamp(0, 1))
    return torch.cat(outs)


def _hwc(x: torch.Tensor) -> np.ndarray:
    return x.permute(1, 2, 0).numpy().astype(np.float64)


def _score(preds: torch.Tensor, gts: torch.Tensor, materials: Optional[np.ndarray]):
    raw = {"psnr": [], "rmse": [], "ssim": []}
    cor = {"psnr": [], "rmse": [], "ssim": []}
    acc = MaterialAccumulator() if materials is not None else None
    for i in range(len(preds)):
        p, g = _hwc(preds[i]), _hwc(gts[i])
        c, _ = color_correct(p, g)
        for d, x in ((raw, p), (cor, c)):
            d["psnr"].append(psnr(x, g))
            d["rmse"].append(rmse(x, g))
            d["ssim"].append(ssim(x, g))
        if acc is not None:
            acc.add(p, g, materials[i])
    summary = {
        "raw": {k: float(np.mean(v)) for k, v in raw.items()},
        "corrected": {k: float(np.mean(v)) for k, v in cor.items()},
        "per_pair_psnr": [float(v) for v in raw["psnr"]],
    }
    if acc is not None:
        summary["materials"] = [r.to_dict() for r in acc.rows()]
    return summary


def in_scene_protocol(relight: Relighter, images: torch.Tensor, offset: Optional[int] = None,
                      materials: Optional[np.ndarray] = None, batch: int = 64) -> dict:
    """Relight every (scene, light i) to light (i + offset) mod Lt of the same
    scene, using the target image as the lighting reference.

    ``images`` is (S, Lt, 3, H, W); ``offset`` defaults to Lt // 2.
    """
    S, Lt = images.shape[:2]
    if offset is None:
        offset = Lt // 2
    if S < 1 or Lt < 1:
        raise ProtocolError("in-scene protocol needs at least one image")
    s = np.repeat(np.arange(S), Lt)
    l1 = np.tile(np.arange(Lt), S)
    l2 = (l1 + offset) % Lt
    content, target = images[s, l1], images[s, l2]
    preds = _run(relight, content, target, batch)
    report = _score(preds, target, materials[s] if materials is not None else None)
    report.update({"protocol": "in", "offset": int(offset), "n_pairs": int(len(s))})
    return report


def cross_scene_trials(n_scenes: int, n_lights: int, n_refs: int, seed: int, n_trials: Optional[int] = None) -> List[dict]:
    """Each trial: one target scene and source light, plus n_refs references
    (scene, light) from other scenes with a light different from the source.

    References are drawn without replacement from the pool of valid
    (scene, light) pairs, so light ids repeat across references when n_refs
    exceeds the number of lights.
    """
    if n_scenes < 2:
        raise ProtocolError("cross-scene protocol needs at least two scenes")
    if n_lights < 2:
        raise ProtocolError("cross-scene protocol needs at least two lightings")
    pool = (n_scenes - 1) * (n_lights - 1)
    if n_refs < 1 or n_refs > pool:
        raise ProtocolError(f"cannot draw {n_refs} references from a pool of {pool}")
    rng = seed_stream(seed, "cross-scene")
    n_trials = n_scenes if n_trials is None else int(n_trials)
    trials = []
    for k in range(n_trials):
        s_t = k % n_scenes
        l_src = int(rng.integers(0, n_lights))
        cand = [(s, l) for s in range(n_scenes) if s != s_t for l in range(n_lights) if l != l_src]
        pick = rng.choice(len(cand), size=n_refs, replace=False)
        trials.append({"scene": s_t, "source_light": l_src, "refs": [cand[j] for j in sorted(pick)]})
    return trials


def cross_scene_protocol(relight: Relighter, images: torch.Tensor, n_refs: int = 12, seed: int = 0,
                         n_trials: Optional[int] = None, batch: int = 64) -> dict:
    """Transfer lighting from references in other scenes onto a target scene
    and score against the target scene's own render under each reference's
    light, raw and after per-channel gain correction."""
    S, Lt = images.shape[:2]
    trials = cross_scene_trials(S, Lt, n_refs, seed, n_trials)
    s_c, l_c, s_r, l_r = [], [], [], []
    for tr in trials:
        for s, l in tr["refs"]:
            s_c.append(tr["scene"])
            l_c.append(tr["source_light"])
            s_r.append(s)
            l_r.append(l)
    content = images[s_c, l_c]
    refs = images[s_r, l_r]
    gt = images[s_c, l_r]
    preds = _run(relight, content, refs, batch)
    report = _score(preds, gt, None)
    report.update({"protocol": "cross", "n_refs": int(n_refs), "n_trials": len(trials), "seed": int(seed),
                   "trials": trials})
    return report


# ---------------------------------------------------------------------------
# report I/O


def material_table(rows: Sequence[Mapping]) -> str:
    """Tab-separated table with the fixed column order; null cells are 'nan'."""
    lines = ["\t".join(REPORT_COLUMNS)]
    for r in rows:
        cells = []
        for col in REPORT_COLUMNS:
            v = r.get(col)
            if v is None:
                cells.append("nan")
            elif isinstance(v, float):
                cells.append(f"{v:.6f}")
            else:
                cells.append(str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_report(report: Mapping, out_dir, name: str) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{name}.json"]
    paths[0].write_text(json.dumps(report, indent=1, sort_keys=True))
    if "materials" in report:
        p = out_dir / f"{name}_materials.tsv"
        p.write_text(material_table(report["materials"]))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# encoder trade-off probe


def pooled_prior_features(prior, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    """Spatial mean of every selected prior layer, concatenated."""
    from .encoder import prior_features

    outs = []
    for i in range(0, len(images), batch):
        maps = prior_features(images[i:i + batch], prior)
        outs.append(torch.cat([m.mean(dim=(2, 3)) for m in maps], 1).double().numpy())
    return np.concatenate(outs)


def scene_labels(materials: np.ndarray) -> np.ndarray:
    """Dominant material category of each scene."""
    return np.array([dominant_category(m) for m in materials], dtype=np.int64)


def linear_probe_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                          seed: int = 0) -> float:
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    clf.fit(train_x, train_y)
    return float((clf.predict(test_x) == test_y).mean())


def check_budgets(priors: Sequence) -> None:
    """Pretrained priors must share parameter count and step budget; the
    random prior shares the architecture but has no step budget."""
    counts = {sum(p.numel() for p in pr.encoder.parameters()) for pr in priors}
    if len(counts) > 1:
        raise ConfigurationError(f"priors differ in parameter count: {sorted(counts)}")
    steps = {pr.cfg.pretrain_steps for pr in priors if pr.cfg.prior_kind != "random_frozen"}
    if len(steps) > 1:
        raise ConfigurationError(f"pretrained priors differ in step budget: {sorted(steps)}")


def probe_prior(prior, train_images: torch.Tensor, train_materials: np.ndarray, test_images: torch.Tensor,
                test_materials: np.ndarray, seed: int = 0) -> float:
    """Linear-probe accuracy for the dominant scene material, one sample per
    (scene, lighting). ``*_images`` are (S, Lt, 3, H, W)."""
    def xy(images, mats):
        S, Lt = images.shape[:2]
        x = pooled_prior_features(prior, images.reshape(S * Lt, *images.shape[2:]))
        return x, np.repeat(scene_labels(mats), Lt)

    trx, try_ = xy(train_images, train_materials)
    tex, tey = xy(test_images, test_materials)
    return linear_probe_accuracy(trx, try_, tex, tey, seed)


def tradeoff_table(rows: Sequence[Mapping]) -> str:
    lines = ["prior\tseed\tprobe_accuracy\trelight_psnr"]
    for r in rows:
        lines.append(f"{r['prior']}\t{r['seed']}\t{r['probe_accuracy']:.6f}\t{r['relight_psnr']:.6f}")
    return "\n".join(lines) + "\n"


def tradeoff_scatter(rows: Sequence[Mapping], path) -> Path:
    """Probe accuracy (x) against relight PSNR (y), one marker per prior."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 3.5), dpi=100)
    kinds = sorted({r["prior"] for r in rows})
    for kind in kinds:
        pts = [r for r in rows if r["prior"] == kind]
        ax.scatter([r["probe_accuracy"] for r in pts], [r["relight_psnr"] for r in pts], label=kind)
    ax.set_xlabel("linear probe accuracy")
    ax.set_ylabel("in-scene relight PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
