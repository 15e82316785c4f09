"""NVRC-Lite: desk-scale neural video codec with an octree entropy model."""

from nvrl._core import (
    __version__,
    build_schedule,
    decode,
    encode,
    evaluate,
    profile,
    psnr,
    synthetic_video,
)

__all__ = [
    "__version__",
    "build_schedule",
    "decode",
    "encode",
    "evaluate",
    "profile",
    "psnr",
    "synthetic_video",
]
