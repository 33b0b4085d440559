#!/usr/bin/env python3
"""Export torchvision ImageNet weights to `<out>/<name>.safetensors`.

    python scripts/export_torchvision_weights.py resnet18 --out weights/

Tensor names follow the torchvision state dict; the 1000-way classifier and
`num_batches_tracked` counters are dropped. GoogLeNet is not exported here:
the toolkit uses the original Inception v1 release, whose parameter names are
listed by `tbscreen report --params googlenet`.

`--random` skips the download and exports a seeded random network with
randomized batch-norm statistics. `--reference` additionally writes
`<name>.reference.json` holding a random input in [0, 1] and the network's
feature vector for it, for parity checks against the Rust models.
"""

import argparse
import json
import pathlib
import sys

import torch
import torchvision
from safetensors.torch import save_file

MODELS = {
    "alexnet": ("alexnet", "AlexNet_Weights", 227, "classifier.6."),
    "resnet18": ("resnet18", "ResNet18_Weights", 224, "fc."),
    "resnet50": ("resnet50", "ResNet50_Weights", 224, "fc."),
    "resnet101": ("resnet101", "ResNet101_Weights", 224, "fc."),
}
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


def build(name, random):
    ctor, weights_enum, _, _ = MODELS[name]
    weights = None if random else getattr(torchvision.models, weights_enum).IMAGENET1K_V1
    model = getattr(torchvision.models, ctor)(weights=weights).eval()
    if random:
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.5, 0.5)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.data.uniform_(0.5, 1.5)
                m.bias.data.uniform_(-0.2, 0.2)
    return model


def features(name, model, x):
    x = (x - torch.tensor(MEAN).view(1, 3, 1, 1)) / torch.tensor(STD).view(1, 3, 1, 1)
    if name == "alexnet":
        h = torch.flatten(model.avgpool(model.features(x)), 1)
        return model.classifier[:6](h)
    body = torch.nn.Sequential(*list(model.children())[:-1])
    return torch.flatten(body(x), 1)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("name", choices=sorted(MODELS) + ["googlenet"])
    p.add_argument("--out", type=pathlib.Path, required=True)
    p.add_argument("--random", action="store_true", help="seeded random weights instead of ImageNet")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", action="store_true", help="also write a reference input and feature vector")
    args = p.parse_args()
    if args.name == "googlenet":
        sys.exit("googlenet: convert the original Inception v1 release; see `tbscreen report --params googlenet`")

    torch.manual_seed(args.seed)
    model = build(args.name, args.random)
    head = MODELS[args.name][3]
    state = {
        k: v.detach().float().contiguous()
        for k, v in model.state_dict().items()
        if not k.startswith(head) and not k.endswith("num_batches_tracked")
    }
    args.out.mkdir(parents=True, exist_ok=True)
    dest = args.out / f"{args.name}.safetensors"
    save_file(state, str(dest))
    print(f"wrote {len(state)} tensors to {dest}")

    if args.reference:
        side = MODELS[args.name][2]
        x = torch.rand(1, 3, side, side)
        with torch.no_grad():
            f = features(args.name, model, x)[0]
        ref = {"side": side, "input": x.flatten().tolist(), "features": f.tolist()}
        (args.out / f"{args.name}.reference.json").write_text(json.dumps(ref))


if __name__ == "__main__":
    main()
