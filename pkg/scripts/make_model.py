#!/usr/bin/env python3
"""Write a freshly initialized model manifest for one of the preset chains."""
import argparse

from prunekit.model import count_params, save_model
from prunekit.presets import desk_chain, table1_chain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=["desk", "table1"], default="desk")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--conv-widths", default="6,6", help="desk preset only")
    ap.add_argument("--fc-width", type=int, default=24, help="desk preset only")
    args = ap.parse_args()

    if args.preset == "desk":
        w1, w2 = (int(v) for v in args.conv_widths.split(","))
        g = desk_chain(conv_widths=(w1, w2), fc_width=args.fc_width, seed=args.seed)
    else:
        g = table1_chain(seed=args.seed)
    save_model(g, args.out)
    per, total = count_params(g)
    print(f"wrote {args.preset} model to {args.out} ({total} parameters)")
    for lid, n in per.items():
        if n:
            print(f"  {lid}: {n}")


if __name__ == "__main__":
    main()
