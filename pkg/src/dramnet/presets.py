"""Named architectures: the DRAMNet layer stack at full and desk scale, plus two small comparators."""

from __future__ import annotations

from .model import ArchitectureSpec, LayerSpec

DESK_INPUT = 64
FULL_INPUT = 1024

# Input-size column of the published architecture table, as printed.
TABLE1_INPUT_SIZES = {
    "Layer1": (1024, 1024, 1),
    "Layer2": (1024, 1024, 3),
    "Layer3": (1024, 1024, 64),
    "Layer4": (512, 512, 64),
    "Layer5": (180, 512, 512),
    "Layer6": (256, 256, 128),
    "Layer7": (128, 128, 192),
    "Layer8": (128, 128, 192),
    "Layer9": (2048,),
    "Layer10": (2048,),
}

# Rows where the printed value cannot be the true input of that layer.
TABLE1_DEVIATIONS = {
    "Layer5": "printed 180 x 512 x 512 is inconsistent with Layer4's 512 x 512 x 128 output; treated as a typo",
    "Layer7": "printed 128 x 128 x 192 is the pool's output, not its input (256 x 256 x 192)",
}


def conv_block(units, group, kernel=(3, 3), stride=1):
    return [
        LayerSpec("conv2d", kernel=kernel, stride=stride, units=units, group=group),
        LayerSpec("batchnorm", group=group),
        LayerSpec("relu", group=group),
    ]


def pool(group, kernel=(2, 2), stride=2):
    return [LayerSpec("pool", kernel=kernel, stride=stride, group=group)]


def full_block(units, group, p=0.5):
    return [
        LayerSpec("full", units=units, group=group),
        LayerSpec("batchnorm", group=group),
        LayerSpec("relu", group=group),
        LayerSpec("dropout", dropout_p=p, group=group),
    ]


def output(n_classes, group):
    return [LayerSpec("full", units=n_classes, group=group), LayerSpec("softmax", group=group)]


def dramnet(input_size: int = DESK_INPUT, n_classes: int = 3) -> ArchitectureSpec:
    layers = [
        *conv_block(3, "Layer1"),
        *conv_block(64, "Layer2"),
        *pool("Layer3"),
        *conv_block(128, "Layer4"),
        *pool("Layer5"),
        *conv_block(192, "Layer6"),
        *pool("Layer7"),
        *full_block(2048, "Layer8"),
        *full_block(2048, "Layer9"),
        *output(n_classes, "Layer10"),
    ]
    name = "dramnet_full" if input_size == FULL_INPUT else "dramnet_desk"
    return ArchitectureSpec(name, (input_size, input_size, 1), layers, n_classes)


def alexnet_s(input_size: int = DESK_INPUT, n_classes: int = 3) -> ArchitectureSpec:
    layers = [
        *conv_block(32, "Conv1", kernel=(11, 11), stride=2),
        *pool("Pool1"),
        *conv_block(64, "Conv2", kernel=(5, 5)),
        *pool("Pool2"),
        *conv_block(96, "Conv3"),
        *conv_block(96, "Conv4"),
        *conv_block(64, "Conv5"),
        *pool("Pool5"),
        *full_block(512, "Full6"),
        *full_block(512, "Full7"),
        *output(n_classes, "Out"),
    ]
    return ArchitectureSpec("alexnet_s", (input_size, input_size, 1), layers, n_classes)


def vggnet_s(input_size: int = DESK_INPUT, n_classes: int = 3) -> ArchitectureSpec:
    layers = []
    for b, depth in enumerate((32, 64, 128), start=1):
        layers += conv_block(depth, f"Block{b}a") + conv_block(depth, f"Block{b}b") + pool(f"Block{b}pool")
    layers += full_block(512, "Full1") + full_block(512, "Full2") + output(n_classes, "Out")
    return ArchitectureSpec("vggnet_s", (input_size, input_size, 1), layers, n_classes)


ARCHITECTURES = {"dramnet": dramnet, "alexnet-s": alexnet_s, "vggnet-s": vggnet_s}


def presets() -> dict[str, ArchitectureSpec]:
    return {
        "dramnet_full": dramnet(FULL_INPUT),
        "dramnet_desk": dramnet(DESK_INPUT),
        "alexnet_s": alexnet_s(),
        "vggnet_s": vggnet_s(),
    }


def get_architecture(name: str, input_size: int = DESK_INPUT, n_classes: int = 3) -> ArchitectureSpec:
    key = name.replace("_", "-")
    if key not in ARCHITECTURES:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[key](input_size, n_classes)
