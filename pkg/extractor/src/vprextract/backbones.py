"""Vision backbones that emit per-patch token grids.

The `dinov2`/`clip` entries load real pretrained encoders and need their
weights available (network or local cache); the `toy-*` pair is a
deterministic seeded patch embedding for offline runs and tests. Both obey
the same small interface, so the extraction pipeline treats them alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class Backbone:
    """A frozen encoder mapping a normalized image batch to patch tokens.

    `native_resolution` pins the input size (the image is resized to it
    regardless of the requested grid resolution); None means the requested
    resolution is used directly and must divide by `patch_size`.
    """

    name: str
    dim: int
    patch_size: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    native_resolution: Optional[int]
    forward: Callable[[torch.Tensor], torch.Tensor]  # (1,3,H,W) -> (1, h*w, dim)

    def grid_for(self, resolution: int) -> tuple[int, int]:
        side = resolution // self.patch_size
        return side, side


def _toy_backbone(name: str, dim: int, patch_size: int, native_resolution: Optional[int], seed: int) -> Backbone:
    gen = torch.Generator().manual_seed(seed)
    conv = torch.nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size, bias=True)
    mix = torch.nn.Linear(dim, dim)
    with torch.no_grad():
        for module in (conv, mix):
            for p in module.parameters():
                p.copy_(torch.empty_like(p).uniform_(-0.5, 0.5, generator=gen))
    conv.eval()
    mix.eval()

    @torch.no_grad()
    def forward(x: torch.Tensor) -> torch.Tensor:
        feat = conv(x)  # (1, dim, h, w)
        tokens = feat.flatten(2).transpose(1, 2)  # (1, h*w, dim)
        return mix(torch.tanh(tokens))

    return Backbone(
        name=name,
        dim=dim,
        patch_size=patch_size,
        mean=IMAGENET_MEAN,
        std=IMAGENET_STD,
        native_resolution=native_resolution,
        forward=forward,
    )


def _load_dinov2(variant: str = "dinov2_vitb14") -> Backbone:
    try:
        model = torch.hub.load("facebookresearch/dinov2", variant)
    except Exception as e:
        raise RuntimeError(
            f"cannot load {variant}: pretrained weights unavailable in this "
            f"environment ({e}); use the toy-dino backbone for offline runs"
        ) from e
    model.eval()
    dim = model.embed_dim

    @torch.no_grad()
    def forward(x: torch.Tensor) -> torch.Tensor:
        # Patch tokens only; the class token is dropped by the hub API.
        return model.forward_features(x)["x_norm_patchtokens"]

    return Backbone(
        name=variant,
        dim=dim,
        patch_size=model.patch_size,
        mean=IMAGENET_MEAN,
        std=IMAGENET_STD,
        native_resolution=None,
        forward=forward,
    )


def _load_clip(variant: str = "ViT-B-16", pretrained: str = "openai") -> Backbone:
    try:
        import open_clip
    except ImportError as e:
        raise RuntimeError(
            "open_clip is not installed; use the toy-clip backbone for offline runs"
        ) from e
    model, _, _ = open_clip.create_model_and_transforms(variant, pretrained=pretrained)
    visual = model.visual
    visual.output_tokens = True  # forward returns (pooled, patch tokens)
    visual.eval()
    patch = visual.conv1.kernel_size[0]
    native = visual.image_size[0] if isinstance(visual.image_size, (tuple, list)) else visual.image_size

    @torch.no_grad()
    def forward(x: torch.Tensor) -> torch.Tensor:
        _, tokens = visual(x)
        return tokens

    return Backbone(
        name=f"{variant}:{pretrained}",
        dim=visual.output_dim if visual.proj is None else visual.proj.shape[0],
        patch_size=patch,
        mean=CLIP_MEAN,
        std=CLIP_STD,
        native_resolution=int(native),
        forward=forward,
    )


BUILDERS: dict[str, Callable[[], Backbone]] = {
    "dinov2": _load_dinov2,
    "clip": _load_clip,
    # Offline stand-ins: patch-14 DINO-like grid, patch-16 CLIP-like grid at a
    # fixed 224 native input, with different widths to exercise the engine's
    # clip adapter.
    "toy-dino": lambda: _toy_backbone("toy-dino", dim=24, patch_size=14, native_resolution=None, seed=101),
    "toy-clip": lambda: _toy_backbone("toy-clip", dim=32, patch_size=16, native_resolution=224, seed=202),
}


def build_backbone(name: str) -> Backbone:
    if name not in BUILDERS:
        raise ValueError(f"unknown backbone {name!r}; available: {sorted(BUILDERS)}")
    return BUILDERS[name]()
