"""Gradient-guided Score-CAM saliency, templates and atlas-region ranking.

Pipeline per subject and modality: Score-CAM at the backbone's last conv layer
(low resolution) -> interpolation to the input grid -> multiplication by the
input-gradient of the predicted-class logit -> rectification. Population
templates average the per-subject maps; FC templates are symmetrized and volume
templates are ranked by mean activation per atlas region.

Interpolation follows the half-pixel (align-corners-false) convention: output
index ``o`` on an axis of length ``out`` samples the source at
``s = (o + 0.5) * in / out - 0.5`` clamped to ``[0, in - 1]``, and linear
weights are taken between ``floor(s)`` and ``floor(s) + 1``, separably per axis.

Because attention mixes subjects, every forward pass here runs the subject
inside a context batch (by default the list of subjects being explained).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from camf.data import AtlasParcellation
from camf.errors import ConfigError, EmptyBatchError, NumericError, ShapeMismatchError
from camf.fusion import CAMFModel, predict, stack_inputs

MODALITIES = ("fmri", "smri")


@dataclass
class SaliencyMap:
    grid: np.ndarray
    resolution: str  # "low" | "input"
    modality: str
    subject_id: str
    channel_weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class RegionRanking:
    entries: list[tuple[int, str, float]]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["region_id", "name", "mean_activation"])
            for rid, name, val in self.entries:
                w.writerow([rid, name, repr(float(val))])
        return path

    @property
    def top(self) -> tuple[int, str, float]:
        return self.entries[0]


def _check_model(model: CAMFModel) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"model parameter {name} is not finite")


def _context(sample, context):
    context = [sample] if context is None else list(context)
    ids = [s.subject_id for s in context]
    if sample.subject_id not in ids:
        context.append(sample)
        ids.append(sample.subject_id)
    return context, ids.index(sample.subject_id)


def _inputs(model, samples, fc_transform=None):
    dtype = next(model.parameters()).dtype
    fc, vol, _ = stack_inputs(samples, dtype, fc_transform)
    return {"fmri": fc, "smri": vol}


def _logits(model, x):
    return model(x["fmri"] if model.uses_fmri else None, x["smri"] if model.uses_smri else None)[0]


def _interp(t: torch.Tensor, size) -> torch.Tensor:
    """Linear interpolation of a ``c x <spatial>`` tensor to ``size``."""
    mode = {1: "linear", 2: "bilinear", 3: "trilinear"}[t.dim() - 1]
    return F.interpolate(t.unsqueeze(0), size=tuple(size), mode=mode, align_corners=False)[0]


@torch.no_grad()
def score_cam(
    model: CAMFModel,
    sample,
    modality: str,
    target_class: int | None = None,
    context=None,
    fc_transform=None,
    chunk: int = 16,
) -> SaliencyMap:
    """Low-resolution Score-CAM map for one subject and modality.

    Each channel of the last conv activation is upsampled to the input grid,
    min-max normalized and used to mask this subject's input for the chosen
    modality (the other modality and the rest of the context stay intact). The
    target-class softmax score of each masked pass is softmaxed across channels;
    constant channels are skipped with weight 0.
    """
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}")
    _check_model(model)
    model.eval()
    context, i = _context(sample, context)
    x = _inputs(model, context, fc_transform)
    backbone = model.backbone(modality)

    f1, f2 = model.encode(x["fmri"] if model.uses_fmri else None, x["smri"] if model.uses_smri else None)
    if target_class is None:
        target_class = int(predict(model.classify_features(f1, f2)[0])[i])

    acts = backbone.feature_maps(x[modality][i : i + 1])[0]  # C x low
    in_shape = x[modality].shape[1:]
    n_ch = acts.shape[0]
    scores = torch.full((n_ch,), float("-inf"), dtype=acts.dtype)
    for start in range(0, n_ch, chunk):
        up = _interp(acts[start : start + chunk], in_shape)
        flat = up.flatten(1)
        lo, hi = flat.min(1).values, flat.max(1).values
        span = hi - lo
        live = span > 1e-12 * torch.clamp(hi.abs(), min=1.0)
        if not live.any():
            continue
        norm = (up[live] - lo[live].view(-1, *[1] * len(in_shape))) / span[live].view(-1, *[1] * len(in_shape))
        feats = backbone(x[modality][i] * norm)
        live_idx = torch.nonzero(live).flatten() + start
        for k, c in enumerate(live_idx.tolist()):
            if modality == "fmri":
                g1 = f1.clone()
                g1[i] = feats[k]
                logits = model.classify_features(g1, f2)[0]
            else:
                g2 = f2.clone()
                g2[i] = feats[k]
                logits = model.classify_features(f1, g2)[0]
            scores[c] = torch.softmax(logits[i], dim=0)[target_class]

    live = torch.isfinite(scores)
    weights = torch.zeros_like(scores)
    if live.any():
        weights[live] = torch.softmax(scores[live], dim=0)
    cam = torch.relu((weights.view(-1, *[1] * (acts.dim() - 1)) * acts).sum(0))
    return SaliencyMap(
        cam.double().numpy(), "low", modality, sample.subject_id, weights.double().numpy()
    )


def upsample(smap: SaliencyMap, target_shape) -> SaliencyMap:
    target_shape = tuple(int(s) for s in target_shape)
    src = smap.grid.shape
    if len(target_shape) != len(src):
        raise ShapeMismatchError(f"cannot interpolate a {len(src)}D map to {target_shape}")
    if any(t < s for t, s in zip(target_shape, src)):
        raise ShapeMismatchError(f"target {target_shape} is smaller than source {src}")
    t = torch.as_tensor(np.asarray(smap.grid, dtype=np.float64)).unsqueeze(0)
    out = torch.clamp(_interp(t, target_shape)[0], min=0.0).numpy()
    return SaliencyMap(out, "input", smap.modality, smap.subject_id, smap.channel_weights)


def input_gradient(
    model: CAMFModel, sample, modality: str, context=None, fc_transform=None, target_class=None
) -> np.ndarray:
    """Gradient of this subject's predicted-class logit w.r.t. its own input for ``modality``."""
    _check_model(model)
    model.eval()
    context, i = _context(sample, context)
    x = _inputs(model, context, fc_transform)
    x[modality] = x[modality].clone().requires_grad_(True)
    logits = _logits(model, x)
    if target_class is None:
        target_class = int(predict(logits.detach())[i])
    (grad,) = torch.autograd.grad(logits[i, target_class], x[modality])
    return grad[i].double().numpy()


def refine(smap: SaliencyMap, gradient: np.ndarray) -> SaliencyMap:
    if smap.grid.shape != gradient.shape:
        raise ShapeMismatchError(f"gradient {gradient.shape} vs map {smap.grid.shape}")
    out = np.maximum(gradient * smap.grid, 0.0)
    return SaliencyMap(out, smap.resolution, smap.modality, smap.subject_id, smap.channel_weights)


def gradient_refine(
    smap: SaliencyMap, model: CAMFModel, sample, modality: str, context=None, fc_transform=None
) -> SaliencyMap:
    """Rectified element-wise product of the interpolated map and the predicted-class input gradient."""
    if smap.resolution != "input":
        raise ShapeMismatchError("gradient refinement needs an input-resolution map")
    return refine(smap, input_gradient(model, sample, modality, context, fc_transform))


def population_template(maps) -> SaliencyMap:
    maps = list(maps)
    if not maps:
        raise EmptyBatchError("no saliency maps to average")
    shape = maps[0].grid.shape
    if any(m.grid.shape != shape for m in maps):
        raise ShapeMismatchError("saliency maps differ in shape")
    # sort for an order-independent float sum
    ordered = sorted(maps, key=lambda m: m.subject_id)
    mean = np.mean(np.stack([m.grid for m in ordered]), axis=0)
    return SaliencyMap(mean, maps[0].resolution, maps[0].modality, "population")


def symmetrize_fc(smap: SaliencyMap) -> SaliencyMap:
    g = smap.grid
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatchError(f"FC saliency must be square, got {g.shape}")
    return SaliencyMap((g + g.T) / 2.0, smap.resolution, smap.modality, smap.subject_id)


def region_aggregate(smap: SaliencyMap, atlas: AtlasParcellation) -> RegionRanking:
    """Mean activation per atlas region, sorted descending (ties by region id)."""
    if smap.grid.shape != atlas.labels.shape:
        raise ShapeMismatchError(f"map grid {smap.grid.shape} != atlas grid {atlas.labels.shape}")
    labels = atlas.labels.ravel().astype(np.int64)
    k = len(atlas.region_names)
    sums = np.bincount(labels, weights=smap.grid.ravel().astype(np.float64), minlength=k + 1)
    counts = np.bincount(labels, minlength=k + 1)
    entries = [
        (rid, atlas.region_names[rid - 1], float(sums[rid] / counts[rid]))
        for rid in range(1, k + 1)
        if counts[rid] > 0
    ]
    entries.sort(key=lambda e: (-e[2], e[0]))
    return RegionRanking(entries)


@dataclass
class Explanation:
    subject_maps: dict  # modality -> list[SaliencyMap] (refined, input resolution)
    low_maps: dict  # modality -> list[SaliencyMap]
    templates: dict  # modality -> SaliencyMap
    fc_symmetric: SaliencyMap | None
    ranking: RegionRanking | None


def explain(
    model: CAMFModel,
    samples,
    atlas: AtlasParcellation | None = None,
    refine_first: bool = True,
    fc_transform=None,
) -> Explanation:
    """Full interpretation over ``samples``, which also serve as the attention context.

    ``refine_first=False`` averages the interpolated maps first and multiplies the
    template by the mean input gradient.
    """
    samples = list(samples)
    if not samples:
        raise EmptyBatchError("nothing to explain")
    modalities = [m for m in MODALITIES if (m == "fmri" and model.uses_fmri) or (m == "smri" and model.uses_smri)]
    subject_maps, low_maps, templates = {}, {}, {}
    for mod in modalities:
        lows, ups, grads = [], [], []
        for s in samples:
            low = score_cam(model, s, mod, context=samples, fc_transform=fc_transform)
            up = upsample(low, (s.fc if mod == "fmri" else s.volume).shape)
            lows.append(low)
            ups.append(up)
            grads.append(input_gradient(model, s, mod, samples, fc_transform))
        low_maps[mod] = lows
        if refine_first:
            subject_maps[mod] = [refine(u, g) for u, g in zip(ups, grads)]
            templates[mod] = population_template(subject_maps[mod])
        else:
            subject_maps[mod] = ups
            tmpl = population_template(ups)
            templates[mod] = refine(tmpl, np.mean(np.stack(grads), axis=0))
            templates[mod].subject_id = "population"
    fc_sym = symmetrize_fc(templates["fmri"]) if "fmri" in templates else None
    ranking = None
    if atlas is not None and "smri" in templates:
        ranking = region_aggregate(templates["smri"], atlas)
    return Explanation(subject_maps, low_maps, templates, fc_sym, ranking)
