#!/usr/bin/env python3
"""Generate a seeded synthetic texture dataset and write it as a PKDS file."""
import argparse

from prunekit.data import save_dataset, synthetic_textures


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=5000)
    ap.add_argument("--height", type=int, default=16)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--channels", type=int, default=3)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--seed", type=int, default=123)
    ap.add_argument("--noise", type=float, default=0.46)
    ap.add_argument("--amplitude", type=float, default=0.14)
    args = ap.parse_args()

    d = synthetic_textures(
        args.count, args.height, args.width, args.channels,
        num_classes=args.classes, seed=args.seed,
        noise=args.noise, amplitude=args.amplitude,
    )
    save_dataset(d, args.out)
    print(f"wrote {len(d)} samples ({args.height}x{args.width}x{args.channels}, "
          f"{args.classes} classes) to {args.out}")


if __name__ == "__main__":
    main()
