"""Two-branch embedding network: stripe-pooled local features and a
channel-expanded global feature over a shared convolutional backbone.

The backbone maps an RGB image to a C x H x W feature map.  The local branch
splits the map into R horizontal stripes (top to bottom) and average-pools
each one into a C-d vector.  The global branch expands the map to R*C
channels with a 1x1 convolution and average-pools it into a single R*C-d
vector whose r-th contiguous C-channel block is trained to mirror the r-th
stripe.  At retrieval time only the global vector is used.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_container, save_container
from .config import ModelConfig


def local_branch(fm: torch.Tensor, R: int) -> torch.Tensor:
    """Average-pool each of R horizontal stripes of a feature map.

    Accepts (C, H, W) or (B, C, H, W); returns (R, C) or (B, R, C) with
    stripe 0 at the top.  H must be divisible by R; the map is never padded.
    """
    squeeze = fm.dim() == 3
    if squeeze:
        fm = fm.unsqueeze(0)
    if fm.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) feature map, got shape {tuple(fm.shape)}")
    h = fm.shape[2]
    if h % R:
        raise ValueError(f"feature-map height {h} is not divisible by R={R}; refusing to pad")
    stripe = h // R
    # (B, C, R, stripe, W) -> mean over rows within the stripe and all columns
    parts = fm.reshape(fm.shape[0], fm.shape[1], R, stripe, fm.shape[3]).mean(dim=(3, 4))
    parts = parts.permute(0, 2, 1)  # (B, R, C)
    return parts[0] if squeeze else parts


def global_branch(fm: torch.Tensor, expansion: nn.Conv2d) -> torch.Tensor:
    """Expand channels with a 1x1 convolution, then average-pool spatially.

    Accepts (C, H, W) or (B, C, H, W); returns (RC,) or (B, RC).  Because
    both steps are linear, the result equals the expansion applied to the
    whole-map average plus bias.
    """
    squeeze = fm.dim() == 3
    if squeeze:
        fm = fm.unsqueeze(0)
    if fm.shape[1] != expansion.in_channels:
        raise ValueError(
            f"feature map has {fm.shape[1]} channels but the expansion layer "
            f"expects {expansion.in_channels}"
        )
    out = expansion(fm).mean(dim=(2, 3))
    return out[0] if squeeze else out


def split_channels(gf: torch.Tensor, R: int) -> list[torch.Tensor]:
    """Split a feature vector (or batch of them) into R contiguous channel blocks."""
    d = gf.shape[-1]
    if d % R:
        raise ValueError(f"feature length {d} is not divisible by R={R}")
    c = d // R
    return [gf[..., r * c : (r + 1) * c] for r in range(R)]


def part_activation_maps(expanded_map: torch.Tensor, R: int) -> torch.Tensor:
    """Per-position maximum over each contiguous channel block.

    Accepts (RC, H, W) or (B, RC, H, W); returns (R, H, W) or (B, R, H, W).
    Map r summarises where the r-th channel block of the expanded map fires.
    """
    squeeze = expanded_map.dim() == 3
    if squeeze:
        expanded_map = expanded_map.unsqueeze(0)
    b, rc, h, w = expanded_map.shape
    if rc % R:
        raise ValueError(f"channel count {rc} is not divisible by R={R}")
    maps = expanded_map.reshape(b, R, rc // R, h, w).max(dim=2).values
    return maps[0] if squeeze else maps


def stripe_mass_fractions(maps: torch.Tensor, R: int) -> torch.Tensor:
    """Fraction of (non-negative) activation mass that each part map puts in
    each stripe.

    maps: (R, H, W) or (B, R, H, W) part activation maps.  Negative values
    are clipped to zero before summing, matching how the maps are rendered.
    Returns (R, R) or (B, R, R): entry [r, s] is the share of map r's mass in
    stripe s.  Rows of an all-zero map fall back to the uniform share.
    """
    squeeze = maps.dim() == 3
    if squeeze:
        maps = maps.unsqueeze(0)
    b, r_maps, h, w = maps.shape
    if h % R:
        raise ValueError(f"map height {h} is not divisible by R={R}")
    pos = maps.clamp(min=0.0)
    per_stripe = pos.reshape(b, r_maps, R, h // R, w).sum(dim=(3, 4))  # (B, R, R)
    total = per_stripe.sum(dim=2, keepdim=True)
    frac = torch.where(total > 0, per_stripe / total.clamp(min=1e-30), torch.full_like(per_stripe, 1.0 / R))
    return frac[0] if squeeze else frac


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Four conv blocks with an exact /8 spatial reduction.

    The ~17 px receptive field spans about one body band, so features stay
    local the way effective receptive fields do in deep trunks.
    """

    def __init__(self, channels: int):
        super().__init__()
        mid = max(16, channels // 2)
        self.blocks = nn.Sequential(
            _conv_block(3, 16, stride=1),
            _conv_block(16, mid, stride=2),
            _conv_block(mid, mid, stride=2),
            _conv_block(mid, channels, stride=2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


def _resnet50_trunk() -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
    )


@dataclass
class ModelOutputs:
    feature_map: torch.Tensor  # (B, C, H, W)
    expanded_map: torch.Tensor  # (B, RC, H, W)
    local_parts: torch.Tensor  # (B, R, C), stripe order top to bottom
    global_feature: torch.Tensor  # (B, RC)
    logits_global: torch.Tensor | None
    logits_local: torch.Tensor | None


class Model(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone_kind == "toy_cnn":
            self.backbone = ToyBackbone(config.channels_C)
        else:
            self.backbone = _resnet50_trunk()
        rc = config.global_dim
        self.expand = nn.Conv2d(config.channels_C, rc, kernel_size=1, bias=True)
        post: list[nn.Module] = []
        if config.expansion_post in ("bn", "bn_relu"):
            post.append(nn.BatchNorm2d(rc))
        if config.expansion_post in ("relu", "bn_relu"):
            post.append(nn.ReLU(inplace=True))
        self.expand_post = nn.Sequential(*post) if post else nn.Identity()
        self.dropout = nn.Dropout(p=config.dropout_rate)
        self.classifier_global = (
            nn.Linear(rc, config.num_identities)
            if config.loss_attachment in ("global", "both")
            else None
        )
        self.classifier_local = (
            nn.Linear(rc, config.num_identities)
            if config.loss_attachment in ("local", "both")
            else None
        )

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, images: torch.Tensor) -> ModelOutputs:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) image batch, got shape {tuple(images.shape)}")
        fm = self.backbone(images)
        expanded = self.expand_post(self.expand(fm))
        global_feature = expanded.mean(dim=(2, 3))
        local_parts = local_branch(fm, self.config.stripes_R)
        logits_global = None
        if self.classifier_global is not None:
            logits_global = self.classifier_global(self.dropout(global_feature))
        logits_local = None
        if self.classifier_local is not None:
            flat = local_parts.reshape(local_parts.shape[0], -1)
            logits_local = self.classifier_local(self.dropout(flat))
        return ModelOutputs(fm, expanded, local_parts, global_feature, logits_global, logits_local)

    @torch.no_grad()
    def extract_global(self, images: torch.Tensor) -> torch.Tensor:
        """Inference-time embedding: the global feature only."""
        was_training = self.training
        self.eval()
        try:
            fm = self.backbone(images)
            expanded = self.expand_post(self.expand(fm))
            return expanded.mean(dim=(2, 3))
        finally:
            self.train(was_training)

    @torch.no_grad()
    def activation_maps(self, images: torch.Tensor) -> torch.Tensor:
        """Part activation maps of the (pre-pooling) expanded map."""
        was_training = self.training
        self.eval()
        try:
            expanded = self.expand_post(self.expand(self.backbone(images)))
            return part_activation_maps(expanded, self.config.stripes_R)
        finally:
            self.train(was_training)


def build_model(config: ModelConfig, backbone_weights: str | None = None) -> Model:
    """Construct the two-branch model, optionally loading pretrained backbone
    weights from a checkpoint container whose array names match the backbone
    state dict."""
    model = Model(config)
    if backbone_weights is not None:
        container = load_container(backbone_weights)
        load_state_arrays(model.backbone, container.arrays, where=str(backbone_weights))
    return model


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray], where: str = "container") -> None:
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing or unexpected:
        raise ValueError(f"{where}: state mismatch, missing={missing}, unexpected={unexpected}")
    module.load_state_dict({k: torch.from_numpy(np.asarray(v)).reshape(state[k].shape) for k, v in arrays.items()})


def save_model_checkpoint(
    path,
    model: Model,
    step: int = 0,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra: dict | None = None,
) -> None:
    from dataclasses import asdict

    arrays = {f"model.{k}": v for k, v in state_arrays(model).items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    save_container(path, arrays, config=asdict(model.config), step=step, extra=extra)


def load_model_checkpoint(path) -> tuple[Model, "Container"]:
    from .checkpoint import Container  # noqa: F401  (type for the docstring)

    container = load_container(path)
    config = ModelConfig(**container.config)
    model = Model(config)
    model_arrays = {
        k[len("model.") :]: v for k, v in container.arrays.items() if k.startswith("model.")
    }
    load_state_arrays(model, model_arrays, where=str(path))
    return model, container
