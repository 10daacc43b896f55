"""Pixel-level composition of visual primitives onto observations.

Images are ``float32`` arrays of shape ``(C, H, W)`` with values in ``[0, 1]``.
A primitive is drawn around the pixel that contains its anchor; distances are
measured between pixel centers. No function here mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AVPError
from .supervision import PrimitiveLabel, Stage

PROMPT_TYPES = ("none", "point", "box", "boxmask")

RED = (1.0, 0.0, 0.0)
GREEN = (0.0, 1.0, 0.0)
GRAY = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class RenderConfig:
    prompt_type: str = "boxmask"
    alpha: float = 0.7
    box_half_width: int = 5
    point_radius: float = 2.0
    memory_depth: int = 1
    pick_color: tuple = RED
    place_color: tuple = GREEN
    memory_color: tuple = GRAY

    def __post_init__(self):
        if self.prompt_type not in PROMPT_TYPES:
            raise AVPError(f"unknown prompt type {self.prompt_type!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise AVPError("alpha must be in [0, 1]")
        if self.box_half_width < 1:
            raise AVPError("box_half_width must be >= 1")
        if self.memory_depth < 0:
            raise AVPError("memory_depth must be >= 0")
        if self.memory_color in (self.pick_color, self.place_color):
            raise AVPError("memory color must differ from the stage colors")

    def stage_color(self, stage) -> tuple:
        return self.pick_color if Stage(stage) == Stage.PICK else self.place_color


@dataclass(frozen=True)
class VisualPrimitive:
    label: PrimitiveLabel
    config: RenderConfig


def blank(height: int = 64, width: int = 64, value: float = 0.0, channels: int = 3) -> np.ndarray:
    return np.full((channels, height, width), value, dtype=np.float32)


def _anchor_pixel(label: PrimitiveLabel) -> tuple[int, int]:
    return int(np.floor(label.anchor.u)), int(np.floor(label.anchor.v))


def _paint(out: np.ndarray, mask: np.ndarray, color) -> None:
    col = np.asarray(color, dtype=np.float32)[: out.shape[0]]
    out[:, mask] = col[:, None]


def point_mask(shape, label: PrimitiveLabel, radius: float) -> np.ndarray:
    h, w = shape
    cu, cv = _anchor_pixel(label)
    jj, ii = np.ogrid[:h, :w]
    return (ii - cu) ** 2 + (jj - cv) ** 2 <= radius * radius


def box_masks(shape, label: PrimitiveLabel, half_width: int) -> tuple[np.ndarray, np.ndarray]:
    """(inside-or-on-box region, outline) boolean masks, clipped to the image."""
    h, w = shape
    cu, cv = _anchor_pixel(label)
    jj, ii = np.ogrid[:h, :w]
    cheb = np.maximum(np.abs(ii - cu), np.abs(jj - cv))
    return cheb <= half_width, cheb == half_width


def render_point(img, label: PrimitiveLabel, cfg: RenderConfig, color=None) -> np.ndarray:
    out = np.array(img, dtype=np.float32, copy=True)
    _paint(out, point_mask(out.shape[1:], label, cfg.point_radius), color or cfg.stage_color(label.stage))
    return out


def render_box(img, label: PrimitiveLabel, cfg: RenderConfig, color=None) -> np.ndarray:
    out = np.array(img, dtype=np.float32, copy=True)
    _, outline = box_masks(out.shape[1:], label, cfg.box_half_width)
    _paint(out, outline, color or cfg.stage_color(label.stage))
    return out


def apply_mask(img, label: PrimitiveLabel, cfg: RenderConfig) -> np.ndarray:
    """Blend everything outside the label's box toward black by ``alpha``."""
    out = np.array(img, dtype=np.float32, copy=True)
    if cfg.alpha == 0.0:
        return out
    region, _ = box_masks(out.shape[1:], label, cfg.box_half_width)
    outside = ~region
    out[:, outside] = ((1.0 - cfg.alpha) * out[:, outside].astype(np.float64)).astype(np.float32)
    return out


def render_box_mask(img, label: PrimitiveLabel, cfg: RenderConfig, color=None) -> np.ndarray:
    return render_box(apply_mask(img, label, cfg), label, cfg, color)


def _draw(img, label, cfg, color):
    if cfg.prompt_type == "point":
        return render_point(img, label, cfg, color)
    return render_box(img, label, cfg, color)


def compose(img, current: VisualPrimitive, history=()) -> np.ndarray:
    """Overlay the current primitive, plus remembered earlier ones, onto ``img``.

    Order: background mask (box-mask only, relative to the current box), then
    history oldest to newest in the memory color, then the current primitive.
    """
    cfg = current.config
    if cfg.prompt_type == "none":
        return np.array(img, dtype=np.float32, copy=True)
    out = apply_mask(img, current.label, cfg) if cfg.prompt_type == "boxmask" else np.array(img, dtype=np.float32, copy=True)
    history = list(history)[-cfg.memory_depth :] if cfg.memory_depth > 0 else []
    for lab in history:
        out = _draw(out, lab, cfg, cfg.memory_color)
    return _draw(out, current.label, cfg, cfg.stage_color(current.label.stage))


def to_ppm(img) -> bytes:
    """Binary PPM (P6, 8-bit) of an RGB image; values map to ``round(255 * v)``."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise AVPError("PPM export needs a 3-channel image")
    _, h, w = img.shape
    px = np.rint(np.clip(img, 0.0, 1.0).astype(np.float64) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + np.transpose(px, (1, 2, 0)).tobytes()
