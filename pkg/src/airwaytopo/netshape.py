"""Symbolic shape and parameter accounting for the SE-UNet with DIE blocks.

Nothing is executed.  The network is walked stage by stage with tensor
shapes as ``(channels, (d, h, w))``, and every residual addition is checked.

Layout
------
Encoder level ``i`` (0-based, four levels) sees the input pooled ``i``
times.  Its DIE runs the level input through a chain of ConvBlocks,
concatenates all block outputs and fuses them with a 1x1x1 conv.  A second
path pools the raw network input down to the same resolution and applies a
1x1x1 conv; the two are added.  The sum is max-pooled into the next level.

Decoder DIE ``k`` takes the previous stage upsampled by two, concatenated
with the encoder output at that resolution, and feeds it through a 2-block
DIE.  Each decoder DIE also carries a 1x1x1 supervision head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import IndivisibleInput, InvalidParams, ShapeMismatch

__all__ = [
    "NetConfig",
    "LayerShape",
    "infer_shapes",
    "param_count",
    "convblock_params",
    "die_concat_channels",
]

DEFAULT_ENCODER = [[8, 16, 32], [16, 32, 64], [32, 64, 128], [64, 128, 256]]
DEFAULT_DECODER = [[64, 128], [32, 64], [16, 32]]
ENCODER_DEPTH = 4
DECODER_DEPTH = 3
ENCODER_BLOCKS = 3
DECODER_BLOCKS = 2


@dataclass
class NetConfig:
    input_size: int = 128
    input_channels: int = 1
    encoder_dies: list = field(default_factory=lambda: [list(b) for b in DEFAULT_ENCODER])
    decoder_dies: list = field(default_factory=lambda: [list(b) for b in DEFAULT_DECODER])
    die_out_channels: list | None = None
    # channels produced by the pooled-input 1x1x1 path; defaults to the DIE output
    residual_channels: list | None = None
    n_classes: int = 1

    def __post_init__(self):
        if self.input_size <= 0 or self.input_channels <= 0 or self.n_classes <= 0:
            raise InvalidParams("input_size, input_channels and n_classes must be positive")
        if len(self.encoder_dies) != ENCODER_DEPTH or len(self.decoder_dies) != DECODER_DEPTH:
            raise InvalidParams(f"need {ENCODER_DEPTH} encoder and {DECODER_DEPTH} decoder DIEs")
        for blocks in self.encoder_dies:
            if len(blocks) != ENCODER_BLOCKS:
                raise InvalidParams(f"encoder DIEs have {ENCODER_BLOCKS} blocks, got {blocks}")
        for blocks in self.decoder_dies:
            if len(blocks) != DECODER_BLOCKS:
                raise InvalidParams(f"decoder DIEs have {DECODER_BLOCKS} blocks, got {blocks}")
        for blocks in self.encoder_dies + self.decoder_dies:
            if any(int(c) <= 0 for c in blocks):
                raise InvalidParams("channel counts must be positive")
        if self.die_out_channels is None:
            self.die_out_channels = [b[-1] for b in self.encoder_dies + self.decoder_dies]
        if len(self.die_out_channels) != ENCODER_DEPTH + DECODER_DEPTH:
            raise InvalidParams("die_out_channels needs one entry per DIE")
        if self.residual_channels is None:
            self.residual_channels = list(self.die_out_channels[:ENCODER_DEPTH])
        if len(self.residual_channels) != ENCODER_DEPTH:
            raise InvalidParams("residual_channels needs one entry per encoder DIE")

    @classmethod
    def from_json(cls, obj: dict) -> "NetConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        unknown = set(obj) - set(known)
        if unknown:
            raise InvalidParams(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**known)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerShape:
    stage: str
    spatial: tuple[int, int, int]
    channels: int

    def to_json(self) -> dict:
        return {"stage": self.stage, "spatial": list(self.spatial), "channels": self.channels}


def die_concat_channels(blocks) -> int:
    return int(sum(blocks))


def convblock_params(c_in: int, c_out: int) -> int:
    """3x3x3 conv with bias, sigmoid-gated 1x1x1 recalibration, instance-norm affine."""
    return 27 * c_in * c_out + c_out + c_out * c_out + c_out + 2 * c_out


def _conv1_params(c_in: int, c_out: int) -> int:
    return c_in * c_out + c_out


def _die_params(c_in: int, blocks, c_out: int) -> int:
    total, prev = 0, c_in
    for c in blocks:
        total += convblock_params(prev, c)
        prev = c
    return total + _conv1_params(die_concat_channels(blocks), c_out)


def _cube(n: int) -> tuple[int, int, int]:
    return (n, n, n)


def _walk(cfg: NetConfig):
    """Yield ``(LayerShape, params)`` for each stage in execution order."""
    factor = 2 ** (ENCODER_DEPTH - 1)
    if cfg.input_size % factor:
        raise IndivisibleInput(f"input size {cfg.input_size} not divisible by {factor}")
    size, ch = cfg.input_size, cfg.input_channels
    yield LayerShape("input", _cube(size), ch), 0
    skips = []
    for i, blocks in enumerate(cfg.encoder_dies):
        name = f"enc{i + 1}"
        if i:
            size //= 2
            yield LayerShape(f"{name}.maxpool", _cube(size), ch), 0
        prev = ch
        for j, c in enumerate(blocks):
            yield LayerShape(f"{name}.block{j + 1}", _cube(size), c), convblock_params(prev, c)
            prev = c
        cat = die_concat_channels(blocks)
        out = cfg.die_out_channels[i]
        yield LayerShape(f"{name}.concat", _cube(size), cat), 0
        die = LayerShape(f"{name}.die", _cube(size), out)
        yield die, _conv1_params(cat, out)
        res = LayerShape(f"{name}.pyramid", _cube(size), cfg.residual_channels[i])
        yield res, _conv1_params(cfg.input_channels, cfg.residual_channels[i])
        if (res.spatial, res.channels) != (die.spatial, die.channels):
            raise ShapeMismatch(
                f"{name}: residual operands differ, pyramid {res.channels}x{res.spatial} "
                f"vs DIE {die.channels}x{die.spatial}"
            )
        ch = out
        yield LayerShape(f"{name}.out", _cube(size), ch), 0
        skips.append((size, ch))
    skips.pop()  # the deepest level feeds the decoder directly
    for k, blocks in enumerate(cfg.decoder_dies):
        name = f"dec{k + 1}"
        size *= 2
        skip_size, skip_ch = skips.pop()
        if skip_size != size:
            raise ShapeMismatch(f"{name}: upsampled {size} vs skip {skip_size}")
        yield LayerShape(f"{name}.up", _cube(size), ch), 0
        yield LayerShape(f"{name}.skipcat", _cube(size), ch + skip_ch), 0
        prev = ch + skip_ch
        for j, c in enumerate(blocks):
            yield LayerShape(f"{name}.block{j + 1}", _cube(size), c), convblock_params(prev, c)
            prev = c
        cat = die_concat_channels(blocks)
        out = cfg.die_out_channels[ENCODER_DEPTH + k]
        yield LayerShape(f"{name}.concat", _cube(size), cat), 0
        yield LayerShape(f"{name}.die", _cube(size), out), _conv1_params(cat, out)
        # supervision head, upsampled to full resolution for the feature pyramid
        yield LayerShape(f"{name}.head", _cube(cfg.input_size), cfg.n_classes), _conv1_params(out, cfg.n_classes)
        ch = out
    if size != cfg.input_size:
        raise ShapeMismatch(f"decoder ends at {size}, input is {cfg.input_size}")


def infer_shapes(cfg: NetConfig) -> list[LayerShape]:
    return [shape for shape, _ in _walk(cfg)]


def param_count(cfg: NetConfig) -> int:
    return sum(p for _, p in _walk(cfg))


def describe(cfg: NetConfig) -> dict:
    rows = list(_walk(cfg))
    return {
        "config": cfg.to_json(),
        "layers": [dict(s.to_json(), params=p) for s, p in rows],
        "param_count": sum(p for _, p in rows),
    }
