#!/usr/bin/env python3
"""Write torchvision Inception V3 weights as a dropsynth tensor archive.

  export_inception.py out.bin                 pretrained ImageNet weights
  export_inception.py out.bin --random --seed 3 --reference ref.bin

--reference also stores a small random input batch and the pool features
torch computes for it (double precision), for cross-checking the C++ port.
"""

import argparse
import json
import struct
import sys

import numpy as np
import torch
import torch.nn.functional as F
import torchvision


def write_archive(path, magic, version, meta, tensors):
    with open(path, "wb") as f:
        f.write(magic.encode().ljust(8, b"\0"))
        text = json.dumps(meta).encode()
        f.write(struct.pack("<IQ", version, len(text)))
        f.write(text)
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            a = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<Q", d))
            f.write(a.tobytes())


def build(random_init, seed):
    if random_init:
        torch.manual_seed(seed)
        model = torchvision.models.inception_v3(weights=None, aux_logits=False, init_weights=True)
        # Non-trivial batch-norm statistics so that folding gets exercised.
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.data.uniform_(0.5, 1.5)
                m.bias.data.uniform_(-0.2, 0.2)
                m.running_mean.uniform_(-0.1, 0.1)
                m.running_var.uniform_(0.5, 2.0)
    else:
        w = torchvision.models.Inception_V3_Weights.IMAGENET1K_V1
        model = torchvision.models.inception_v3(weights=w)
    return model.eval().double()


def pool_features(model, x):
    # Same path as Inception3._forward up to the pooled features; input is
    # already in [-1, 1], so transform_input is not applied.
    for name in ["Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1", "Conv2d_3b_1x1",
                 "Conv2d_4a_3x3", "maxpool2", "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b",
                 "Mixed_6c", "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c", "avgpool"]:
        x = getattr(model, name)(x)
    return torch.flatten(x, 1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--random", action="store_true", help="random weights instead of ImageNet ones")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--reference", help="also write a reference input/feature archive here")
    ap.add_argument("--ref-count", type=int, default=2)
    ap.add_argument("--ref-size", type=int, default=80)
    args = ap.parse_args()

    model = build(args.random, args.seed)
    tensors = {}
    for key, value in model.state_dict().items():
        if key.startswith(("fc.", "AuxLogits.")) or key.endswith("num_batches_tracked"):
            continue
        tensors[key] = value.numpy()
    meta = {"source": "torchvision", "random": args.random, "seed": args.seed}
    write_archive(args.out, "DSWEIGHT", 1, meta, tensors)

    if args.reference:
        g = torch.Generator().manual_seed(args.seed + 1)
        n, s = args.ref_count, args.ref_size
        gray = torch.rand((n, 1, s, s), generator=g, dtype=torch.float64) * 2 - 1
        rgb = gray.repeat(1, 3, 1, 1)
        x = F.interpolate(rgb, size=(299, 299), mode="bilinear", align_corners=False)
        with torch.no_grad():
            feats = pool_features(model, x)
        write_archive(args.reference, "DSREF", 1, {"count": n, "size": s},
                      {"input": gray.numpy(), "features": feats.numpy()})
    return 0


if __name__ == "__main__":
    sys.exit(main())
