"""Differentiable tile-based surfel rasterizer."""

from .camera import Camera, make_lookat_camera
from .render import RenderOutput, render, render_backward

__all__ = ["Camera", "make_lookat_camera", "RenderOutput", "render", "render_backward"]
