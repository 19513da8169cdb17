"""The compact encoder ("CTL-Small") and its two heads.

The encoder is fully convolutional: a 3x3/16 stem, then three residual
blocks of widths 16, 32, 64, each downsampling by stride 2, followed by
global average pooling into a 64-dim feature.  Input is a 1-channel
normalized texture map; any spatial size large enough to survive three
stride-2 stages works, so the same encoder serves every LBP radius.

Heads:
  * projection_mlp (pretraining): 64 -> 512 -> ReLU -> 128
  * gap_linear (downstream): 64 -> n_classes logits
"""

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm2d, Conv2d, Dense, GlobalAvgPool, ReLU, Residual, Sequential


@dataclass
class NetworkSpec:
    """Architecture description consumed by the builders."""

    in_channels: int = 1
    stem_width: int = 16
    block_widths: tuple = (16, 32, 64)
    encoder_output_dim: int = 64
    head: str = "projection_mlp"  # or "gap_linear"
    projection_hidden: int = 512
    projection_dim: int = 128
    n_classes: int = 5

    def __post_init__(self):
        if self.head not in ("projection_mlp", "gap_linear"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.block_widths[-1] != self.encoder_output_dim:
            raise ValueError("encoder_output_dim must equal the last block width")

    def layer_descriptors(self):
        out = [f"conv3x3({self.in_channels}->{self.stem_width}) + bn + relu"]
        prev = self.stem_width
        for width in self.block_widths:
            out.append(f"residual({prev}->{width}, stride 2)")
            prev = width
        out.append("gap")
        if self.head == "projection_mlp":
            out.append(f"dense({prev}->{self.projection_hidden}) + relu + "
                       f"dense({self.projection_hidden}->{self.projection_dim})")
        else:
            out.append(f"dense({prev}->{self.n_classes})")
        return out


def _residual_block(in_ch, out_ch, stride, stream, dtype):
    main = Sequential([
        ("conv1", Conv2d(in_ch, out_ch, 3, stride=stride, padding=1,
                         bias=False, stream=stream.spawn("conv1"), dtype=dtype)),
        ("bn1", BatchNorm2d(out_ch, dtype=dtype)),
        ("relu1", ReLU()),
        ("conv2", Conv2d(out_ch, out_ch, 3, stride=1, padding=1,
                         bias=False, stream=stream.spawn("conv2"), dtype=dtype)),
        ("bn2", BatchNorm2d(out_ch, dtype=dtype)),
    ])
    skip = None
    if stride != 1 or in_ch != out_ch:
        skip = Sequential([
            ("conv", Conv2d(in_ch, out_ch, 1, stride=stride, padding=0,
                            bias=False, stream=stream.spawn("skip"), dtype=dtype)),
            ("bn", BatchNorm2d(out_ch, dtype=dtype)),
        ])
    return Residual(main, skip)


def build_encoder(spec, stream, dtype=np.float32):
    """Convolutional trunk; output is (N, encoder_output_dim, h', w')."""
    children = [
        ("stem", Sequential([
            ("conv", Conv2d(spec.in_channels, spec.stem_width, 3, stride=1, padding=1,
                            bias=False, stream=stream.spawn("stem"), dtype=dtype)),
            ("bn", BatchNorm2d(spec.stem_width, dtype=dtype)),
            ("relu", ReLU()),
        ])),
    ]
    prev = spec.stem_width
    for i, width in enumerate(spec.block_widths, start=1):
        children.append((f"block{i}",
                         _residual_block(prev, width, 2, stream.spawn(f"block{i}"), dtype)))
        prev = width
    return Sequential(children)


def build_head(spec, stream, dtype=np.float32):
    if spec.head == "projection_mlp":
        return Sequential([
            ("fc1", Dense(spec.encoder_output_dim, spec.projection_hidden,
                          stream=stream.spawn("fc1"), dtype=dtype)),
            ("relu", ReLU()),
            ("fc2", Dense(spec.projection_hidden, spec.projection_dim,
                          stream=stream.spawn("fc2"), dtype=dtype)),
        ])
    return Sequential([
        ("linear", Dense(spec.encoder_output_dim, spec.n_classes,
                         stream=stream.spawn("linear"), dtype=dtype)),
    ])


@dataclass
class Network:
    """Encoder trunk + GAP + head, with named parameters for checkpoints."""

    spec: NetworkSpec
    encoder: Sequential
    gap: GlobalAvgPool
    head: Sequential
    feature_maps: np.ndarray = field(default=None, repr=False)

    def forward(self, x, training=False):
        maps = self.encoder.forward(x, training=training)
        self.feature_maps = maps  # kept for CAM extraction
        pooled = self.gap.forward(maps, training=training)
        return self.head.forward(pooled, training=training)

    def backward(self, dy):
        d = self.head.backward(dy)
        d = self.gap.backward(d)
        return self.encoder.backward(d)

    def params(self):
        return ([(f"encoder/{n}", t) for n, t in self.encoder.params()]
                + [(f"head/{n}", t) for n, t in self.head.params()])

    def state(self):
        return [(f"encoder/{n}", t) for n, t in self.encoder.state()]

    def blobs(self):
        """All persistent tensors (parameters + running stats), ordered."""
        return self.params() + self.state()

    def zero_grads(self):
        for _, t in self.params():
            t.zero_grad()


def build_network(spec, stream, dtype=np.float32):
    return Network(
        spec=spec,
        encoder=build_encoder(spec, stream.spawn("encoder"), dtype),
        gap=GlobalAvgPool(),
        head=build_head(spec, stream.spawn("head"), dtype),
    )


def load_blobs_into(network, blobs, prefix=None, strict=True):
    """Copy checkpoint blobs onto matching named tensors.

    Args:
        network: target Network.
        blobs: dict name -> array.
        prefix: if given, only names starting with it are loaded
            (e.g. "encoder/" to transplant a pretrained trunk).
        strict: error on missing blobs for selected tensors.
    """
    loaded = 0
    for name, tensor in network.blobs():
        if prefix is not None and not name.startswith(prefix):
            continue
        if name not in blobs:
            if strict:
                raise KeyError(f"checkpoint is missing blob {name!r}")
            continue
        value = np.asarray(blobs[name])
        if tuple(value.shape) != tuple(tensor.shape):
            raise ValueError(f"blob {name!r} has shape {value.shape}, "
                             f"expected {tuple(tensor.shape)}")
        tensor.data = value.astype(tensor.dtype).copy()
        loaded += 1
    if loaded == 0:
        raise KeyError(f"no blobs matched prefix {prefix!r}")
    return loaded
