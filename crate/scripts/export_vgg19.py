#!/usr/bin/env python3
"""Export torchvision VGG-19 convolutions conv1_1..conv5_2 to the rp2pn
weight format (magic RP2PNVGG, u32 count, then per conv u32 out/in/k,
f32 weights in (out, in, ky, kx) order and f32 biases, little endian).

    python3 scripts/export_vgg19.py weights/vgg19.bin
    python3 scripts/export_vgg19.py --random /tmp/vgg_random.bin   # offline format check
"""
import argparse
import struct
from pathlib import Path

import numpy as np

N_CONVS = 14


def torchvision_convs():
    from torchvision.models import VGG19_Weights, vgg19

    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).eval()
    convs = [m for m in model.features if m.__class__.__name__ == "Conv2d"][:N_CONVS]
    return [(c.weight.detach().numpy(), c.bias.detach().numpy()) for c in convs]


def random_convs(seed=0):
    rng = np.random.default_rng(seed)
    widths = [64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512]
    out, cin = [], 3
    for w in widths:
        scale = np.sqrt(2.0 / (cin * 9))
        out.append((rng.normal(0, scale, (w, cin, 3, 3)), np.zeros(w)))
        cin = w
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("output", type=Path)
    ap.add_argument("--random", action="store_true", help="He-initialized weights, no download")
    args = ap.parse_args()
    convs = random_convs() if args.random else torchvision_convs()
    args.output.parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "wb") as f:
        f.write(b"RP2PNVGG")
        f.write(struct.pack("<I", len(convs)))
        for w, b in convs:
            o, i, k, _ = w.shape
            f.write(struct.pack("<III", o, i, k))
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    print(f"wrote {args.output} ({args.output.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
