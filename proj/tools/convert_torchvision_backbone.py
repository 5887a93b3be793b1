#!/usr/bin/env python3
"""Convert a torchvision MobileNetV3-Large feature extractor into a MAGETNSR
tensor archive that `mobileage train --backbone_weights` accepts.

    convert_torchvision_backbone.py --out imagenet.mtns
    convert_torchvision_backbone.py --weights none --seed 3 --out random.mtns \
        --reference ref.mtns

`--weights imagenet` downloads IMAGENET1K_V1 (needs network or a warm torch
hub cache). `--reference` also writes a small archive with a fixed input
batch and the pooled 960-d features torchvision computes for it, so the C++
backbone can be checked against torchvision (see backbone_reference).
"""

import argparse
import json
import os
import struct
import sys

import numpy as np
import torch
import torchvision

MAGIC = b"MAGETNSR"


def write_archive(path, tensors, metadata):
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    head = json.dumps({"metadata": metadata, "tensors": index}, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def backbone_tensors(model):
    out = {}
    for name, t in model.features.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        out["backbone." + name] = t.detach().cpu().float().numpy()
    return out


def randomize_batchnorm(model, gen):
    # non-trivial affine parameters and running statistics, so the check
    # exercises every BN term rather than the identity default
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(0.5 + torch.rand(m.weight.shape, generator=gen))
                m.bias.copy_(0.2 * torch.randn(m.bias.shape, generator=gen))
                m.running_mean.copy_(0.1 * torch.randn(m.running_mean.shape, generator=gen))
                m.running_var.copy_(0.5 + torch.rand(m.running_var.shape, generator=gen))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--weights", choices=["imagenet", "none"], default="imagenet")
    ap.add_argument("--seed", type=int, default=0, help="init seed for --weights none")
    ap.add_argument("--reference", help="also write reference input/features here")
    ap.add_argument("--batch", type=int, default=2, help="reference batch size")
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    if args.weights == "imagenet":
        try:
            w = torchvision.models.MobileNet_V3_Large_Weights.IMAGENET1K_V1
            model = torchvision.models.mobilenet_v3_large(weights=w)
        except Exception as e:  # network or cache failure
            sys.exit(f"error: cannot load ImageNet weights ({e}); use --weights none for a random init")
        source = "torchvision IMAGENET1K_V1"
    else:
        model = torchvision.models.mobilenet_v3_large(weights=None)
        randomize_batchnorm(model, torch.Generator().manual_seed(args.seed + 1))
        source = f"torchvision random init (seed {args.seed})"
    model.eval()

    tensors = backbone_tensors(model)
    meta = {"kind": "backbone", "backbone": "mobilenet_v3_large", "source": source,
            "torchvision": torchvision.__version__}
    write_archive(args.out, tensors, meta)
    print(f"wrote {len(tensors)} tensors to {args.out}")

    if args.reference:
        gen = torch.Generator().manual_seed(args.seed + 2)
        x = torch.randn(args.batch, 3, 224, 224, generator=gen)
        with torch.no_grad():
            f = torch.flatten(model.avgpool(model.features(x)), 1)
        write_archive(args.reference, {"input": x.numpy(), "features": f.numpy()},
                      {"kind": "reference", "source": source})
        print(f"wrote reference batch of {args.batch} to {args.reference}")


if __name__ == "__main__":
    main()
