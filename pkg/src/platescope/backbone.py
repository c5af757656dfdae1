"""Micro depthwise-separable CNN backbone and its widened variant.

The network maps a multi-channel image batch to an embedding vector per item:
stem 3x3 conv -> ``num_blocks`` depthwise-separable blocks (relu, stride-2
downsampling on every other block, channels doubling at each downsample) ->
global mean pool -> dense projection to the embedding. The class-weight
matrix used by the margin/softmax losses lives alongside the backbone
parameters under the name ``classifier.weight``.

There is deliberately no batch normalization: per-group input normalization
(see :mod:`platescope.data`) plays that role, and keeping the forward free of
train/eval mode switches makes the student/teacher consistency comparison
clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError

CLASS_WEIGHT_NAME = "classifier.weight"


@dataclass
class BackboneConfig:
    """Architecture knobs; ``width_multiplier=2`` gives the wide variant."""

    num_classes: int
    input_channels: int = 6
    stem_channels: int = 16
    num_blocks: int = 4
    width_multiplier: float = 1.0
    embedding_dim: int = 64

    def __post_init__(self):
        if self.width_multiplier < 1:
            raise ShapeError(f"width_multiplier must be >= 1, got {self.width_multiplier}")
        if self.embedding_dim < 2:
            raise ShapeError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {self.num_classes}")

    def block_plan(self):
        """Per block: (in_channels, out_channels, stride)."""
        ch = int(round(self.stem_channels * self.width_multiplier))
        plan = []
        for b in range(self.num_blocks):
            stride = 2 if b % 2 == 1 else 1
            out_ch = ch * 2 if stride == 2 else ch
            plan.append((ch, out_ch, stride))
            ch = out_ch
        return plan

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "stem_channels": self.stem_channels,
            "num_blocks": self.num_blocks,
            "width_multiplier": self.width_multiplier,
            "embedding_dim": self.embedding_dim,
        }


class ModelParams:
    """Ordered name -> Tensor map for one network."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        seen = set()
        for name in tensors:
            if name in seen:
                raise ShapeError(f"duplicate parameter name '{name}'")
            seen.add(name)
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors.keys())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def block_parameter_count(self, block: int) -> int:
        prefix = f"block{block}."
        return sum(t.data.size for n, t in self.tensors.items() if n.startswith(prefix))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def validate_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter '{name}' contains non-finite values")


def build(config: BackboneConfig, seed: int) -> ModelParams:
    """Seeded He-style (fan-in) initialization; biases start at zero."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    tensors: dict[str, Tensor] = {}
    stem_ch = int(round(config.stem_channels * config.width_multiplier))
    tensors["stem.kernel"] = he((stem_ch, config.input_channels, 3, 3), config.input_channels * 9)
    tensors["stem.bias"] = Tensor(np.zeros(stem_ch))
    for b, (cin, cout, _stride) in enumerate(config.block_plan()):
        tensors[f"block{b}.depthwise"] = he((cin, 3, 3), 9)
        tensors[f"block{b}.pointwise"] = he((cout, cin, 1, 1), cin)
        tensors[f"block{b}.bias"] = Tensor(np.zeros(cout))
    final_ch = config.block_plan()[-1][1] if config.num_blocks else stem_ch
    tensors["embed.weight"] = he((final_ch, config.embedding_dim), final_ch)
    tensors["embed.bias"] = Tensor(np.zeros(config.embedding_dim))
    tensors[CLASS_WEIGHT_NAME] = he((config.embedding_dim, config.num_classes), config.embedding_dim)
    params = ModelParams(config, tensors)
    params.validate_finite()
    return params


def forward(params: ModelParams, batch) -> Tensor:
    """Embed a [N,C,H,W] batch; records on the active tape if any."""
    batch = ad.as_tensor(batch)
    cfg = params.config
    if batch.data.ndim != 4 or batch.data.shape[1] != cfg.input_channels:
        raise ShapeError(f"forward: expected [N,{cfg.input_channels},H,W], got {batch.shape}")
    x = ad.relu(ad.add_channel_bias(ad.conv2d(batch, params["stem.kernel"], stride=1, padding=1), params["stem.bias"]))
    for b, (_cin, _cout, stride) in enumerate(cfg.block_plan()):
        x = ad.depthwise_separable_conv(x, params[f"block{b}.depthwise"], params[f"block{b}.pointwise"], stride=stride, padding=1)
        x = ad.relu(ad.add_channel_bias(x, params[f"block{b}.bias"]))
    pooled = ad.mean_pool2d(x)
    return ad.dense(pooled, params["embed.weight"], params["embed.bias"])


def class_logits(embeddings: Tensor, params: ModelParams, feature_scale: float | None = None) -> Tensor:
    """Inference logits: scaled cosine similarities, or raw dot products.

    ``feature_scale`` set (margin-loss convention) -> s * cos(theta) from
    row-normalized embeddings and column-normalized class weights; ``None``
    (plain-softmax convention) -> embeddings @ W.
    """
    w = params[CLASS_WEIGHT_NAME]
    if feature_scale is None:
        return ad.matmul(embeddings, w)
    xn = ad.l2_normalize_rows(embeddings)
    wn = ad.transpose(ad.l2_normalize_rows(ad.transpose(w)))
    return ad.scale(ad.matmul(xn, wn), feature_scale)
