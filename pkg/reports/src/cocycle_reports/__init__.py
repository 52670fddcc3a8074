"""Figure rendering for the cocycle simulation toolkit's file outputs."""

from .render import (
    RENDERERS,
    FigureRequest,
    RenderError,
    load_request,
    render,
    slope_annotation,
)

__version__ = "0.1.0"

__all__ = [
    "RENDERERS",
    "FigureRequest",
    "RenderError",
    "load_request",
    "render",
    "slope_annotation",
]
