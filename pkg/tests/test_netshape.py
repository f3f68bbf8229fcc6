import json

import pytest

from airwaytopo.errors import IndivisibleInput, InvalidParams, ShapeMismatch
from airwaytopo.netshape import (
    NetConfig,
    convblock_params,
    describe,
    die_concat_channels,
    infer_shapes,
    param_count,
)


def by_stage(cfg):
    return {s.stage: s for s in infer_shapes(cfg)}


def test_default_die1_concat_is_56():
    shapes = by_stage(NetConfig())
    assert die_concat_channels([8, 16, 32]) == 56
    assert shapes["enc1.concat"].channels == 56
    assert shapes["enc1.concat"].spatial == (128, 128, 128)


def test_encoder_halving_and_decoder_doubling():
    shapes = by_stage(NetConfig())
    enc = [shapes[f"enc{i}.out"].spatial[0] for i in range(1, 5)]
    dec = [shapes[f"dec{i}.die"].spatial[0] for i in range(1, 4)]
    assert enc == [128, 64, 32, 16]
    assert dec == [32, 64, 128]
    assert shapes["enc2.block1"].spatial == (64, 64, 64)
    for i in range(1, 4):
        assert shapes[f"dec{i}.head"].spatial == (128, 128, 128)


def test_residual_operands_match():
    shapes = by_stage(NetConfig())
    for i in range(1, 5):
        a, b = shapes[f"enc{i}.pyramid"], shapes[f"enc{i}.die"]
        assert (a.spatial, a.channels) == (b.spatial, b.channels)


def test_mismatched_residual_rejected():
    with pytest.raises(ShapeMismatch):
        infer_shapes(NetConfig(residual_channels=[32, 64, 100, 256]))
    with pytest.raises(ShapeMismatch):
        param_count(NetConfig(die_out_channels=[32, 64, 128, 256, 128, 64, 32], residual_channels=[16, 64, 128, 256]))


def test_indivisible_input():
    with pytest.raises(IndivisibleInput):
        infer_shapes(NetConfig(input_size=100))
    assert by_stage(NetConfig(input_size=96))["enc4.out"].spatial == (12, 12, 12)


def test_convblock_params():
    assert convblock_params(1, 8) == 27 * 8 + 8 + 8 * 8 + 8 + 2 * 8 == 312
    ratio = convblock_params(1024, 1024) / convblock_params(512, 512)
    assert ratio == pytest.approx(4.0, rel=0.01)


def test_config_validation():
    with pytest.raises(InvalidParams):
        NetConfig(encoder_dies=[[], [16, 32, 64], [32, 64, 128], [64, 128, 256]])
    with pytest.raises(InvalidParams):
        NetConfig(encoder_dies=[[8, 16], [16, 32, 64], [32, 64, 128], [64, 128, 256]])
    with pytest.raises(InvalidParams):
        NetConfig(decoder_dies=[[64, 128]] * 2)
    with pytest.raises(InvalidParams):
        NetConfig(input_size=0)
    with pytest.raises(InvalidParams):
        NetConfig.from_json({"input_size": 128, "depth": 5})


def oracle_param_count(enc, dec, n_in=1, n_cls=1):
    """Independent sum over the documented layer list."""
    total = 0
    ch = n_in
    outs = []
    for blocks in enc:
        prev = ch
        for c in blocks:
            total += 27 * prev * c + c + c * c + c + 2 * c
            prev = c
        out = blocks[-1]
        total += sum(blocks) * out + out  # fusion conv
        total += n_in * out + out  # pooled-input path
        outs.append(out)
        ch = out
    skips = outs[:-1][::-1]
    for blocks, skip in zip(dec, skips):
        prev = ch + skip
        for c in blocks:
            total += 27 * prev * c + c + c * c + c + 2 * c
            prev = c
        out = blocks[-1]
        total += sum(blocks) * out + out
        total += out * n_cls + n_cls  # supervision head
        ch = out
    return total


def test_param_count_matches_oracle():
    cfg = NetConfig()
    expected = oracle_param_count(cfg.encoder_dies, cfg.decoder_dies)
    assert param_count(cfg) == expected == 3_252_827
    small = NetConfig(
        input_size=32,
        input_channels=2,
        n_classes=3,
        encoder_dies=[[4, 4, 8], [8, 8, 8], [8, 16, 16], [16, 16, 32]],
        decoder_dies=[[16, 16], [8, 8], [4, 8]],
    )
    assert param_count(small) == oracle_param_count(small.encoder_dies, small.decoder_dies, 2, 3)


def test_describe_is_json_and_consistent():
    d = describe(NetConfig())
    text = json.dumps(d)
    assert json.loads(text)["param_count"] == sum(row["params"] for row in d["layers"])
    assert NetConfig.from_json(d["config"]).to_json() == d["config"]
