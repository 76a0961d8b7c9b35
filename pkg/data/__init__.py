"""
Data layer for DiffuEraser Desk
Frame/mask directory I/O, output compositing, synthetic corpora and latent caching
"""

from .video_io import (
    VideoFrames,
    MaskSequence,
    load_frames,
    load_masks,
    save_frames,
    save_masks,
    blend_output,
)
from .cache_manager import (
    CacheManager,
    get_cache_manager,
    clear_latent_cache
)

__all__ = [
    # Video I/O
    "VideoFrames",
    "MaskSequence",
    "load_frames",
    "load_masks",
    "save_frames",
    "save_masks",
    "blend_output",

    # Cache management
    "CacheManager",
    "get_cache_manager",
    "clear_latent_cache"
]


def verify_data_layer():
    """Report the state of the latent cache"""
    info = get_cache_manager().get_cache_info()
    return {
        "cache_system": True,
        "cache_entries": info["entries"],
        "cache_capacity": info["max_entries"],
    }
