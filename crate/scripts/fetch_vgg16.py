#!/usr/bin/env python3
"""Convert VGG-16 convolution weights to the archive layout `nst` loads.

Sources:
  --torchvision          download torchvision's IMAGENET1K_V1 weights (needs torch + torchvision)
  --state-dict PATH      a local PyTorch state dict with `features.N.weight/bias` keys
  --caffe-npz PATH       an .npz of the original release with `convB_S_W` (out,in,3,3) and
                         `convB_S_b` arrays in BGR input order

The output holds `convB_S.weight` [out, in, 3, 3] and `convB_S.bias` [out] as
float32 for the 13 conv layers, plus `preprocessing` and `source` metadata.
The sha256 of the written file is printed; pin it as `train.backbone.sha256`.

Usage:
  python scripts/fetch_vgg16.py --torchvision -o weights/vgg16.safetensors
  python scripts/fetch_vgg16.py --sha256 <hex> -o weights/vgg16.safetensors   # verify only
"""

import argparse
import hashlib
import json
import sys

import numpy as np

# torchvision `features` indices of the 13 convolutions.
LAYERS = [
    (1, 1, 0), (1, 2, 2),
    (2, 1, 5), (2, 2, 7),
    (3, 1, 10), (3, 2, 12), (3, 3, 14),
    (4, 1, 17), (4, 2, 19), (4, 3, 21),
    (5, 1, 24), (5, 2, 26), (5, 3, 28),
]

TORCHVISION = {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]}
CAFFE = {
    "mean": [123.68 / 255.0, 116.779 / 255.0, 103.939 / 255.0],
    "std": [1.0 / 255.0] * 3,
}


def sha256_of(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def from_state_dict(sd):
    out = {}
    for b, s, idx in LAYERS:
        w = sd[f"features.{idx}.weight"]
        bias = sd[f"features.{idx}.bias"]
        out[f"conv{b}_{s}.weight"] = np.ascontiguousarray(np.asarray(w, dtype=np.float32))
        out[f"conv{b}_{s}.bias"] = np.ascontiguousarray(np.asarray(bias, dtype=np.float32))
    return out


def load_torch(path=None):
    import torch

    if path is None:
        from torchvision.models import VGG16_Weights, vgg16

        sd = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).state_dict()
    else:
        sd = torch.load(path, map_location="cpu")
    return from_state_dict({k: v.numpy() for k, v in sd.items()})


def load_caffe_npz(path):
    data = np.load(path)
    out = {}
    for b, s, _ in LAYERS:
        w = np.asarray(data[f"conv{b}_{s}_W"], dtype=np.float32)
        if (b, s) == (1, 1):
            # The loader feeds RGB; the original release expects BGR.
            w = w[:, ::-1, :, :]
        out[f"conv{b}_{s}.weight"] = np.ascontiguousarray(w)
        out[f"conv{b}_{s}.bias"] = np.asarray(data[f"conv{b}_{s}_b"], dtype=np.float32)
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--torchvision", action="store_true")
    src.add_argument("--state-dict")
    src.add_argument("--caffe-npz")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sha256", help="expected digest of the output file; exits 1 on mismatch")
    args = p.parse_args()

    if args.torchvision or args.state_dict or args.caffe_npz:
        from safetensors.numpy import save_file

        if args.caffe_npz:
            tensors, prep, source = load_caffe_npz(args.caffe_npz), CAFFE, f"caffe:{args.caffe_npz}"
        else:
            tensors = load_torch(args.state_dict)
            prep, source = TORCHVISION, f"torchvision:{args.state_dict or 'IMAGENET1K_V1'}"
        save_file(tensors, args.output, metadata={"preprocessing": json.dumps(prep), "source": source})
    elif not args.sha256:
        p.error("give a source or --sha256 to verify an existing file")

    digest = sha256_of(args.output)
    print(digest)
    if args.sha256 and args.sha256.lower() != digest:
        print(f"sha256 mismatch: expected {args.sha256}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
