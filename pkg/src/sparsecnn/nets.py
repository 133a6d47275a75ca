"""Layer geometries of the reference networks (per image, ungrouped)."""
from collections import OrderedDict
from typing import Dict

from .tensor import LayerSpec

ALEXNET: Dict[str, LayerSpec] = OrderedDict(
    conv1=LayerSpec(N=96, C=3, R=11, S=11, H_in=227, W_in=227, stride=4, pad=0),
    conv2=LayerSpec(N=256, C=96, R=5, S=5, H_in=27, W_in=27, stride=1, pad=2),
    conv3=LayerSpec(N=384, C=256, R=3, S=3, H_in=13, W_in=13, stride=1, pad=1),
    conv4=LayerSpec(N=384, C=384, R=3, S=3, H_in=13, W_in=13, stride=1, pad=1),
    conv5=LayerSpec(N=256, C=384, R=3, S=3, H_in=13, W_in=13, stride=1, pad=1),
    fc6=LayerSpec.fully_connected(4096, 9216),
    fc7=LayerSpec.fully_connected(4096, 4096),
    fc8=LayerSpec.fully_connected(1000, 4096),
)

# (spatial size, in channels, 1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool proj)
_INCEPTION = OrderedDict([
    ("3a", (28, 192, 64, 96, 128, 16, 32, 32)),
    ("3b", (28, 256, 128, 128, 192, 32, 96, 64)),
    ("4a", (14, 480, 192, 96, 208, 16, 48, 64)),
    ("4b", (14, 512, 160, 112, 224, 24, 64, 64)),
    ("4c", (14, 512, 128, 128, 256, 24, 64, 64)),
    ("4d", (14, 512, 112, 144, 288, 32, 64, 64)),
    ("4e", (14, 528, 256, 160, 320, 32, 128, 128)),
    ("5a", (7, 832, 256, 160, 320, 32, 128, 128)),
    ("5b", (7, 832, 384, 192, 384, 48, 128, 128)),
])


def _googlenet() -> Dict[str, LayerSpec]:
    layers = OrderedDict()
    # 223 rather than 224 keeps the strided geometry integral (112 x 112 output)
    layers["conv1/7x7_s2"] = LayerSpec(64, 3, 7, 7, 223, 223, stride=2, pad=3)
    layers["conv2/3x3_reduce"] = LayerSpec(64, 64, 1, 1, 56, 56)
    layers["conv2/3x3"] = LayerSpec(192, 64, 3, 3, 56, 56, pad=1)
    for name, (hw, cin, n1, n3r, n3, n5r, n5, npool) in _INCEPTION.items():
        p = f"inception_{name}/"
        layers[p + "1x1"] = LayerSpec(n1, cin, 1, 1, hw, hw)
        layers[p + "3x3_reduce"] = LayerSpec(n3r, cin, 1, 1, hw, hw)
        layers[p + "3x3"] = LayerSpec(n3, n3r, 3, 3, hw, hw, pad=1)
        layers[p + "5x5_reduce"] = LayerSpec(n5r, cin, 1, 1, hw, hw)
        layers[p + "5x5"] = LayerSpec(n5, n5r, 5, 5, hw, hw, pad=2)
        layers[p + "pool_proj"] = LayerSpec(npool, cin, 1, 1, hw, hw)
    layers["loss3/classifier"] = LayerSpec.fully_connected(1000, 1024)
    return layers


GOOGLENET: Dict[str, LayerSpec] = _googlenet()

LAYER_PRESETS: Dict[str, LayerSpec] = OrderedDict(
    (f"alexnet-{k}", v) for k, v in ALEXNET.items()
)
