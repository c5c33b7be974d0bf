#!/usr/bin/env python3
"""Export torchvision's ImageNet VGG19 feature stack for the perceptual loss.

Writes `features.{i}.weight` / `features.{i}.bias` as float32 safetensors plus
a `<out>.sha256` sidecar that `bag` checks before loading.

    python scripts/export_vgg19.py [weights/vgg19_features.safetensors]
"""

import argparse
import hashlib
from pathlib import Path

import torch
from safetensors.torch import save_file
from torchvision.models import VGG19_Weights, vgg19


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", nargs="?", default="weights/vgg19_features.safetensors", type=Path)
    args = parser.parse_args()

    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).eval()
    tensors = {
        f"features.{name}": t.detach().to(torch.float32).contiguous()
        for name, t in model.features.state_dict().items()
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(args.out), metadata={"source": "torchvision VGG19_Weights.IMAGENET1K_V1"})

    digest = hashlib.sha256(args.out.read_bytes()).hexdigest()
    sidecar = args.out.with_name(args.out.name + ".sha256")
    sidecar.write_text(f"{digest}  {args.out.name}\n")
    print(f"wrote {args.out} ({len(tensors)} arrays), sha256 {digest}")


if __name__ == "__main__":
    main()
