"""
Reference external prior for DiffuEraser Desk
Implements the external prior contract with the built-in propagation prior:

    python scripts/propagation_prior.py --frames DIR --masks DIR --out DIR
"""
import argparse
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.exceptions import DiffuEraserError
from data.video_io import load_frames, load_masks, save_frames
from diffusion.prior import builtin_prior


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--frames", required=True)
    parser.add_argument("--masks", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    try:
        frames = load_frames(args.frames)
        masks = load_masks(args.masks, frames.num_frames)
        result = builtin_prior(frames, masks)
        save_frames(result.frames, args.out, crop=False)
    except DiffuEraserError as e:
        print(f"propagation prior failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
