from .core import (
    PoseGradient,
    RenderConfig,
    RenderedView,
    RenderPass,
    default_workers,
    render,
    render_backward,
    render_depth_at,
)

__all__ = [
    "PoseGradient",
    "RenderConfig",
    "RenderedView",
    "RenderPass",
    "default_workers",
    "render",
    "render_backward",
    "render_depth_at",
]
