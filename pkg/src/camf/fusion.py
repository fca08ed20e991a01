"""Attention interaction modules, adaptive fusion, classifier head and the full model.

Attention runs across the subjects of a batch: for ``f`` of shape ``n x d1`` the
score matrix is ``n x n``. Predictions therefore depend on which subjects share
a batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from camf.backbones import (
    ACTIVATIONS,
    DESK_FMRI,
    DESK_GRID,
    DESK_ROI_COUNT,
    DESK_SMRI,
    Backbone,
    BackboneConfig,
)
from camf.errors import ConfigError, EmptyBatchError, ShapeMismatchError

FUSION_MODES = (
    "camf",
    "unimodal_fmri",
    "unimodal_smri",
    "elementwise_sum",
    "concat",
    "adaptive_weights",
    "sa_adaptive",
    "ca_adaptive",
    "sa_ca_concat",
)
ATTENTION_MODES = frozenset({"camf", "sa_adaptive", "ca_adaptive", "sa_ca_concat"})
VALUE_SOURCES = ("query", "key")


class AttentionParams(nn.Module):
    """Query/key/value projections, each ``d1 x d2``, no bias."""

    def __init__(self, d1: int, d2: int):
        super().__init__()
        self.W_q = nn.Parameter(torch.zeros(d1, d2))
        self.W_k = nn.Parameter(torch.zeros(d1, d2))
        self.W_v = nn.Parameter(torch.zeros(d1, d2))

    @property
    def d2(self) -> int:
        return self.W_q.shape[1]


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return torch.softmax(q @ k.T / math.sqrt(q.shape[1]), dim=1)


def self_attention(f: torch.Tensor, params: AttentionParams, return_weights: bool = False):
    if f.shape[0] == 0:
        raise EmptyBatchError("self-attention over an empty batch")
    if f.dim() != 2 or f.shape[1] != params.W_q.shape[0]:
        raise ShapeMismatchError(f"expected n x {params.W_q.shape[0]} features, got {tuple(f.shape)}")
    a = attention_weights(f @ params.W_q, f @ params.W_k)
    out = a @ (f @ params.W_v)
    return (out, a) if return_weights else out


def cross_attention(
    f_query: torch.Tensor,
    f_key: torch.Tensor,
    params: AttentionParams,
    value_source: str = "query",
    return_weights: bool = False,
):
    """Queries from ``f_query``, keys from ``f_key``; values from ``f_query`` by default."""
    if f_query.shape[0] != f_key.shape[0]:
        raise ShapeMismatchError(f"row counts differ: {f_query.shape[0]} vs {f_key.shape[0]}")
    if f_query.shape[0] == 0:
        raise EmptyBatchError("cross-attention over an empty batch")
    if value_source not in VALUE_SOURCES:
        raise ConfigError(f"value_source must be one of {VALUE_SOURCES}")
    a = attention_weights(f_query @ params.W_q, f_key @ params.W_k)
    v = (f_query if value_source == "query" else f_key) @ params.W_v
    out = a @ v
    return (out, a) if return_weights else out


@dataclass
class FusionState:
    """Per-call record of the fusion stage; never shared between calls."""

    branches: dict[str, torch.Tensor] = field(default_factory=dict)
    logits: torch.Tensor | None = None
    alphas: torch.Tensor | None = None
    attention: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def f_sa1(self):
        return self.branches.get("sa1")

    @property
    def f_sa2(self):
        return self.branches.get("sa2")

    @property
    def f_ca1(self):
        return self.branches.get("ca1")

    @property
    def f_ca2(self):
        return self.branches.get("ca2")

    def summary(self) -> dict:
        out = {"branches": list(self.branches)}
        if self.alphas is not None:
            out["alphas"] = [float(a) for a in self.alphas.detach().cpu()]
            out["fusion_logits"] = [float(a) for a in self.logits.detach().cpu()]
        return out


def adaptive_fuse(branches, logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-weighted sum of equally shaped branch outputs."""
    branches = list(branches)
    if len(branches) != logits.shape[0]:
        raise ShapeMismatchError(f"{len(branches)} branches vs {logits.shape[0]} fusion logits")
    shape = branches[0].shape
    if any(b.shape != shape for b in branches):
        raise ShapeMismatchError(f"branch shapes differ: {[tuple(b.shape) for b in branches]}")
    alphas = torch.softmax(logits, dim=0)
    fused = sum(a * b for a, b in zip(alphas, branches))
    return fused, alphas


class ClassifierHead(nn.Module):
    def __init__(self, in_features: int, hidden: int = 128, activation: str = "relu"):
        super().__init__()
        self.hidden = nn.Linear(in_features, hidden)
        self.act = ACTIVATIONS[activation]()
        self.out = nn.Linear(hidden, 2)

    def forward(self, x):
        return self.out(self.act(self.hidden(x)))


def classify(f_o: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    if f_o.shape[1] != head.hidden.in_features:
        raise ShapeMismatchError(f"head expects width {head.hidden.in_features}, got {f_o.shape[1]}")
    return head(f_o)


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the two classes; ties go to class 0 (HC)."""
    return (logits[:, 1] > logits[:, 0]).long()


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``labels`` are class indices or one-hot rows."""
    if labels.dim() == 1:
        labels = F.one_hot(labels.long(), logits.shape[1]).to(logits.dtype)
    log_probs = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -(labels * log_probs).sum(dim=1).mean()


@dataclass
class ModelConfig:
    fmri_backbone: BackboneConfig = DESK_FMRI
    smri_backbone: BackboneConfig = DESK_SMRI
    roi_count: int = DESK_ROI_COUNT
    grid_shape: tuple[int, int, int] = DESK_GRID
    d2: int = 32
    hidden: int = 128
    head_activation: str = "relu"
    fusion_mode: str = "camf"
    ca_value_source: str = "query"

    def __post_init__(self):
        self.grid_shape = tuple(self.grid_shape)
        if isinstance(self.fmri_backbone, dict):
            self.fmri_backbone = BackboneConfig.from_dict(self.fmri_backbone)
        if isinstance(self.smri_backbone, dict):
            self.smri_backbone = BackboneConfig.from_dict(self.smri_backbone)

    @property
    def d1(self) -> int:
        return self.fmri_backbone.final_channels

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; choose from {FUSION_MODES}")
        if self.ca_value_source not in VALUE_SOURCES:
            raise ConfigError(f"ca_value_source must be one of {VALUE_SOURCES}")
        if self.head_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown head activation {self.head_activation!r}")
        if self.fmri_backbone.dimensionality != 2 or self.smri_backbone.dimensionality != 3:
            raise ConfigError("fMRI backbone must be 2D and sMRI backbone 3D")
        if self.fmri_backbone.final_channels != self.smri_backbone.final_channels:
            raise ConfigError("both backbones must end with the same channel count d1")
        if not self.fmri_backbone.accepts((self.roi_count, self.roi_count)):
            raise ConfigError(f"roi_count {self.roi_count} too small for the 2D backbone")
        if not self.smri_backbone.accepts(self.grid_shape):
            raise ConfigError(f"grid {self.grid_shape} too small for the 3D backbone")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fmri_backbone"] = self.fmri_backbone.to_dict()
        d["smri_backbone"] = self.smri_backbone.to_dict()
        d["grid_shape"] = list(self.grid_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CAMFModel(nn.Module):
    """Two backbones, the interaction stage selected by ``fusion_mode``, and an MLP head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        mode = config.fusion_mode
        d1, d2 = config.d1, config.d2
        self.uses_fmri = mode != "unimodal_smri"
        self.uses_smri = mode != "unimodal_fmri"
        self.fmri = Backbone(config.fmri_backbone) if self.uses_fmri else None
        self.smri = Backbone(config.smri_backbone) if self.uses_smri else None

        self.attn = nn.ModuleDict()
        if mode in ("camf", "sa_adaptive", "sa_ca_concat"):
            self.attn["sa1"] = AttentionParams(d1, d2)
            self.attn["sa2"] = AttentionParams(d1, d2)
        if mode in ("camf", "ca_adaptive", "sa_ca_concat"):
            self.attn["ca1"] = AttentionParams(d1, d2)
            self.attn["ca2"] = AttentionParams(d1, d2)

        n_weights = {"camf": 4, "adaptive_weights": 2, "sa_adaptive": 2, "ca_adaptive": 2}.get(mode)
        self.fusion_logits = nn.Parameter(torch.zeros(n_weights)) if n_weights else None

        in_features = {
            "unimodal_fmri": d1,
            "unimodal_smri": d1,
            "elementwise_sum": d1,
            "concat": 2 * d1,
            "adaptive_weights": d1,
            "sa_ca_concat": 4 * d2,
        }.get(mode, d2)
        self.head = ClassifierHead(in_features, config.hidden, config.head_activation)

    @property
    def fusion_mode(self) -> str:
        return self.config.fusion_mode

    def backbone(self, modality: str) -> Backbone:
        bb = {"fmri": self.fmri, "smri": self.smri}[modality]
        if bb is None:
            raise ConfigError(f"fusion mode {self.fusion_mode!r} has no {modality} backbone")
        return bb

    def layer_activation(self, name: str, x: torch.Tensor) -> torch.Tensor:
        """Named-layer retrieval: ``"fmri.last_conv"`` or ``"smri.last_conv"``."""
        modality, _, layer = name.partition(".")
        if layer != "last_conv":
            raise ConfigError(f"unknown layer {name!r}")
        return self.backbone(modality).feature_maps(x)

    def encode(self, fc: torch.Tensor | None, vol: torch.Tensor | None):
        f1 = self.fmri(fc) if self.uses_fmri else None
        f2 = self.smri(vol) if self.uses_smri else None
        return f1, f2

    def fuse(self, f1, f2) -> tuple[torch.Tensor, FusionState]:
        mode = self.fusion_mode
        st = FusionState()
        n = (f1 if f1 is not None else f2).shape[0]
        if n == 0:
            raise EmptyBatchError("forward over an empty batch")
        if mode == "unimodal_fmri":
            return f1, st
        if mode == "unimodal_smri":
            return f2, st
        if mode == "elementwise_sum":
            return f1 + f2, st
        if mode == "concat":
            return torch.cat([f1, f2], dim=1), st
        if mode == "adaptive_weights":
            fused, st.alphas = adaptive_fuse([f1, f2], self.fusion_logits)
            st.logits = self.fusion_logits
            return fused, st

        vs = self.config.ca_value_source
        if "sa1" in self.attn:
            st.branches["sa1"], st.attention["sa1"] = self_attention(f1, self.attn["sa1"], True)
            st.branches["sa2"], st.attention["sa2"] = self_attention(f2, self.attn["sa2"], True)
        if "ca1" in self.attn:
            st.branches["ca1"], st.attention["ca1"] = cross_attention(f1, f2, self.attn["ca1"], vs, True)
            st.branches["ca2"], st.attention["ca2"] = cross_attention(f2, f1, self.attn["ca2"], vs, True)
        branches = list(st.branches.values())
        if mode == "sa_ca_concat":
            return torch.cat(branches, dim=1), st
        fused, st.alphas = adaptive_fuse(branches, self.fusion_logits)
        st.logits = self.fusion_logits
        return fused, st

    def classify_features(self, f1, f2) -> tuple[torch.Tensor, FusionState]:
        fused, st = self.fuse(f1, f2)
        return classify(fused, self.head), st

    def forward(self, fc: torch.Tensor | None, vol: torch.Tensor | None):
        f1, f2 = self.encode(fc, vol)
        return self.classify_features(f1, f2)


def stack_inputs(samples, dtype=torch.float32, fc_transform=None):
    """Batch tensors ``(fc n x R x R, volume n x Dx x Dy x Dz, labels n)`` from samples."""
    if not samples:
        raise EmptyBatchError("no samples to stack")
    fcs = [s.fc if fc_transform is None else fc_transform(s.fc) for s in samples]
    fc = torch.as_tensor(np.stack(fcs), dtype=dtype)
    vol = torch.as_tensor(np.stack([s.volume for s in samples]), dtype=dtype)
    labels = torch.as_tensor([s.label for s in samples], dtype=torch.long)
    return fc, vol, labels


def forward(samples, model: CAMFModel, fusion_mode: str | None = None, fc_transform=None):
    """Logits and fusion state for a list of ``SubjectSample`` forming one attention batch."""
    if fusion_mode is not None and fusion_mode != model.fusion_mode:
        raise ConfigError(f"model was built for {model.fusion_mode!r}, not {fusion_mode!r}")
    dtype = next(model.parameters()).dtype
    fc, vol, _ = stack_inputs(samples, dtype, fc_transform)
    return model(fc if model.uses_fmri else None, vol if model.uses_smri else None)
