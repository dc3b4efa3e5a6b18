"""Torch module definitions for the registered architectures.

Scratch networks (SongNet, WeiNet, SilNet) are reconstructions of small
facial-expression CNNs; their exact layer widths are not pinned down by the
sources available here and are marked as such in the registry. Pretrained
families reuse torchvision definitions where they exist, with a
global-pool + single affine head producing two logits.
"""

from __future__ import annotations

import torch
from torch import nn
from torchvision import models as tvm


def _conv_block(cin: int, cout: int, k: int = 3, pool: int = 2, bn: bool = False) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, k, padding=k // 2)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers += [nn.ReLU(inplace=True), nn.MaxPool2d(pool)]
    return layers


class TinyCNN(nn.Module):
    """Three conv-BN-ReLU-pool blocks, global average pooling, affine head. Input 64x64."""

    def __init__(self, num_classes: int = 2):
        super().__init__()
        self.features = nn.Sequential(
            *_conv_block(3, 16, bn=True), *_conv_block(16, 32, bn=True), *_conv_block(32, 64, bn=True)
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.head(torch.flatten(self.pool(self.features(x)), 1))


def songnet(num_classes: int = 2) -> nn.Module:
    # 32x32 input, three 5x5 conv/pool stages, one hidden FC layer
    return nn.Sequential(
        *_conv_block(3, 32, 5),
        *_conv_block(32, 32, 5),
        *_conv_block(32, 64, 5),
        nn.Flatten(),
        nn.Linear(64 * 4 * 4, 64),
        nn.ReLU(inplace=True),
        nn.Dropout(0.5),
        nn.Linear(64, num_classes),
    )


def weinet(num_classes: int = 2) -> nn.Module:
    # 96x96 input
    return nn.Sequential(
        *_conv_block(3, 32, 5, bn=True),
        *_conv_block(32, 64, 3, bn=True),
        *_conv_block(64, 128, 3, bn=True),
        *_conv_block(128, 128, 3, bn=True),
        nn.Flatten(),
        nn.Linear(128 * 6 * 6, 256),
        nn.ReLU(inplace=True),
        nn.Dropout(0.5),
        nn.Linear(256, num_classes),
    )


def silnet(num_classes: int = 2) -> nn.Module:
    # 150x150 input
    return nn.Sequential(
        *_conv_block(3, 32, 3, bn=True),
        *_conv_block(32, 64, 3, bn=True),
        *_conv_block(64, 128, 3, bn=True),
        *_conv_block(128, 256, 3, bn=True),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Dropout(0.5),
        nn.Linear(256, num_classes),
    )


def alexnet(num_classes: int = 2) -> nn.Module:
    return tvm.alexnet(weights=None, num_classes=num_classes)


class GlobalPoolHead(nn.Module):
    """Backbone features -> global average pool -> affine layer."""

    def __init__(self, features: nn.Module, channels: int, num_classes: int = 2):
        super().__init__()
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(channels, num_classes)

    def forward(self, x):
        return self.head(torch.flatten(self.pool(self.features(x)), 1))


def vgg(depth: int) -> tuple[nn.Module, str]:
    net = tvm.vgg16(weights=None) if depth == 16 else tvm.vgg19(weights=None)
    return GlobalPoolHead(net.features, 512), "head."


# --- pre-activation ResNet-101 ------------------------------------------------


class PreActBottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int = 1):
        super().__init__()
        cout = width * self.expansion
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        pre = torch.relu(self.bn1(x))
        short = x if self.shortcut is None else self.shortcut(pre)
        out = self.conv1(pre)
        out = self.conv2(torch.relu(self.bn2(out)))
        out = self.conv3(torch.relu(self.bn3(out)))
        return out + short


class PreActResNet(nn.Module):
    def __init__(self, blocks=(3, 4, 23, 3), num_classes: int = 2):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        layers = []
        cin = 64
        for i, (n, width) in enumerate(zip(blocks, (64, 128, 256, 512))):
            for j in range(n):
                stride = 2 if (j == 0 and i > 0) else 1
                layers.append(PreActBottleneck(cin, width, stride))
                cin = width * PreActBottleneck.expansion
        self.stages = nn.Sequential(*layers)
        self.post = nn.Sequential(nn.BatchNorm2d(cin), nn.ReLU(inplace=True))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(cin, num_classes)

    def forward(self, x):
        x = self.post(self.stages(self.stem(x)))
        return self.head(torch.flatten(self.pool(x), 1))


# --- Xception ------------------------------------------------------------------


class SeparableConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=1, groups=cin, bias=False)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class XceptionBlock(nn.Module):
    def __init__(self, cin: int, cout: int, reps: int, stride: int, start_relu: bool = True, grow_first: bool = True):
        super().__init__()
        layers: list[nn.Module] = []
        c = cin
        for i in range(reps):
            target = cout if (grow_first and i == 0) or (not grow_first and i == reps - 1) else c
            if i > 0 or start_relu:
                layers.append(nn.ReLU(inplace=False))
            layers += [SeparableConv(c, target), nn.BatchNorm2d(target)]
            c = target
        if stride != 1:
            layers.append(nn.MaxPool2d(3, stride, padding=1))
        self.body = nn.Sequential(*layers)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return self.body(x) + (x if self.skip is None else self.skip(x))


class Xception(nn.Module):
    def __init__(self, num_classes: int = 2):
        super().__init__()
        self.entry = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, bias=False), nn.BatchNorm2d(32), nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True),
            XceptionBlock(64, 128, 2, 2, start_relu=False),
            XceptionBlock(128, 256, 2, 2),
            XceptionBlock(256, 728, 2, 2),
        )
        self.middle = nn.Sequential(*(XceptionBlock(728, 728, 3, 1) for _ in range(8)))
        self.exit = nn.Sequential(
            XceptionBlock(728, 1024, 2, 2, grow_first=False),
            SeparableConv(1024, 1536), nn.BatchNorm2d(1536), nn.ReLU(inplace=True),
            SeparableConv(1536, 2048), nn.BatchNorm2d(2048), nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(2048, num_classes)

    def forward(self, x):
        x = self.exit(self.middle(self.entry(x)))
        return self.head(torch.flatten(self.pool(x), 1))


def construct(name: str) -> tuple[nn.Module, str]:
    """Fresh module for ``name`` and the state-dict prefix of its replaceable head."""
    if name == "tiny_cnn":
        return TinyCNN(), "head."
    if name == "songnet":
        return songnet(), "13."
    if name == "weinet":
        return weinet(), "20."
    if name == "silnet":
        return silnet(), "19."
    if name == "alexnet":
        return alexnet(), "classifier.6."
    if name == "vgg16":
        return vgg(16)
    if name == "vgg19":
        return vgg(19)
    if name == "resnet50":
        net = tvm.resnet50(weights=None)
        net.fc = nn.Linear(net.fc.in_features, 2)
        return net, "fc."
    if name == "resnet101v2":
        return PreActResNet(), "head."
    if name == "inception_v3":
        net = tvm.inception_v3(weights=None, aux_logits=False, init_weights=True, transform_input=False)
        net.fc = nn.Linear(net.fc.in_features, 2)
        return net, "fc."
    if name == "xception":
        return Xception(), "head."
    raise KeyError(name)
