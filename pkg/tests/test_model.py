from dataclasses import replace

import numpy as np
import pytest

from siamix import model as M
from siamix import tensor as T
from siamix.errors import ConfigError, ContractError
from siamix.fusion import ConcatFusion

import oracles


def images(rng, size=64, batch=1):
    return [rng.random((batch, 3, size, size)).astype(np.float32) for _ in range(2)]


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("k", range(6))
def test_variant_matches_published_settings(k):
    v = M.get_variant(f"siamix-{k}")
    assert tuple((s.heads, s.layers, s.channels) for s in v.stages) == M.PUBLISHED_TABLE[k]


def test_published_table_snapshot():
    # literal copy of the settings table, kept separate from the library constant
    expected = {
        0: ([1, 2, 5, 8], [2, 2, 2, 2], [32, 64, 160, 256]),
        1: ([1, 2, 5, 8], [2, 2, 2, 2], [64, 128, 320, 512]),
        2: ([1, 2, 5, 8], [3, 3, 6, 3], [64, 128, 320, 512]),
        3: ([1, 2, 5, 8], [3, 3, 18, 3], [64, 128, 320, 512]),
        4: ([1, 2, 5, 8], [3, 8, 27, 3], [64, 128, 320, 512]),
        5: ([1, 2, 5, 8], [3, 6, 40, 3], [64, 128, 320, 512]),
    }
    for k, (heads, layers, chans) in expected.items():
        stages = M.get_variant(f"siamix-{k}").stages
        assert [s.heads for s in stages] == heads
        assert [s.layers for s in stages] == layers
        assert [s.channels for s in stages] == chans


def test_unknown_variant():
    with pytest.raises(ConfigError):
        M.build("siamix-9")
    with pytest.raises(ConfigError):
        M.get_variant("nano@siamix-0")


def test_variant_names_cover_all():
    names = M.variant_names()
    for n in ("siamix-0", "siamix-5", "nano", "mono-baseline", "concat-fusion-baseline"):
        assert n in names
        M.get_variant(n)


def test_build_is_deterministic():
    a, b = M.build("siamix-0", 2, 42), M.build("siamix-0", 2, 42)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_siamix5_stage3_depth():
    v = M.get_variant("siamix-5")
    assert v.stages[2].layers == 40


@pytest.mark.slow
def test_siamix5_built_stage3_depth():
    model = M.build("siamix-5", 2, 1)
    assert len(model.encoder1.stages[2].blocks) == 40


def test_mono_baseline_structure():
    m = M.build("mono-baseline", 2, 0)
    assert m.encoder2 is None and m.fusion == []
    assert m(np.zeros((1, 3, 64, 64), np.float32)).shape == (1, 2, 16, 16)


def test_concat_baseline_structure():
    m = M.build("concat-fusion-baseline@nano-tiny", 2, 0)
    assert len(m.fusion) == 4 and all(isinstance(f, ConcatFusion) for f in m.fusion)
    assert m(*images(np.random.default_rng(0))).shape == (1, 2, 16, 16)


def test_shared_encoders_flag():
    m = M.build(M.get_variant("nano-tiny", share_encoders=True))
    assert m.encoder2 is m.encoder1
    independent = M.build("nano-tiny")
    assert M.count_params(independent) > M.count_params(m)


def test_init_conventions():
    m = M.build("nano-tiny", seed=0)
    for name, p in m.named_parameters():
        if name.endswith("gamma"):
            np.testing.assert_array_equal(p.data, 1)
        elif name.endswith("beta") or name.endswith("bias"):
            np.testing.assert_array_equal(p.data, 0)
        elif ".q.weight" in name or ".fc1.weight" in name:
            assert np.abs(p.data).max() <= 0.04 + 1e-7


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------
def test_siamix0_forward_shape(rng):
    m = M.build("siamix-0")
    with T.no_grad():
        out = M.forward(m, *images(rng, 256))
    assert out.shape == (1, 2, 64, 64)


def test_batch_two_and_determinism(rng):
    m = M.build("nano-tiny", seed=2)
    t1, t2 = images(rng, 64, batch=2)
    a, b = m(t1, t2), m(t1, t2)
    assert a.shape == (2, 2, 16, 16)
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_shape_mismatch(rng):
    m = M.build("nano-tiny")
    with pytest.raises(ContractError):
        m(np.zeros((1, 3, 64, 64), np.float32), np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(ContractError):
        m(np.zeros((1, 3, 64, 64), np.float32))


# ---------------------------------------------------------------------------
# parameter and FLOP audits
# ---------------------------------------------------------------------------
@pytest.mark.parametrize(
    "name,chans,layers,dec",
    [
        ("nano", [64, 128, 320, 512], [1, 1, 1, 1], 256),
        ("nano-tiny", [8, 16, 24, 32], [1, 1, 1, 1], 64),
        ("siamix-0", [32, 64, 160, 256], [2, 2, 2, 2], 256),
    ],
)
def test_param_count_closed_form(name, chans, layers, dec):
    expected = oracles.closed_form_params(chans, layers, [8, 4, 2, 1], dec)
    assert M.count_params(M.build(name)) == expected


def test_mono_param_closed_form():
    expected = oracles.closed_form_params([8, 16, 24, 32], [1] * 4, [8, 4, 2, 1], 64, fusion_depth=0, encoders=1)
    assert M.count_params(M.build("mono-baseline@nano-tiny")) == expected


def test_analytic_flops_equal_op_level_count():
    for name in ("nano-tiny", "mono-baseline@nano-tiny", "concat-fusion-baseline@nano-tiny"):
        model = M.build(name)
        measured = M.measure_macs(model, 64, 64)
        analytic = M.flop_breakdown(name, 64, 64)
        assert sum(measured.values()) == sum(analytic.values())
        assert measured.get("attention_scores", 0) == sum(v for k, v in analytic.items() if k.endswith("attention_scores"))


def test_count_flops_excludes_scores_by_default():
    full = M.count_flops("siamix-0", 256, 256, include_attention_scores=True)
    lean = M.count_flops("siamix-0", 256, 256)
    br = M.flop_breakdown("siamix-0", 256, 256)
    assert full - lean == br["encoder.attention_scores"] + br["fusion.attention_scores"]


def test_stage1_attention_macs_ratio():
    s1 = M.get_variant("siamix-0").stages[0]
    r8 = M.attention_score_macs(s1, 64, 64)
    r1 = M.attention_score_macs(replace(s1, reduction=1), 64, 64)
    assert r1 == 8 * r8


def test_flops_indivisible_input():
    with pytest.raises(ContractError):
        M.count_flops("nano", 100, 100)


# ---------------------------------------------------------------------------
# effective receptive field
# ---------------------------------------------------------------------------
def test_receptive_field_arithmetic():
    assert M.receptive_field([3, 3], [1, 1]) == oracles.receptive_field_arith([3, 3]) == 5
    assert M.receptive_field([7, 3], [4, 2]) == 7 + 2 * 4


def test_conv_baseline_support_is_theoretical_field(rng):
    base = M.ConvBaseline(seed=0)
    x = rng.random((1, 3, 21, 21))
    heat = M.erf_probe(base, x, target="logits", position=(10, 10))
    rf = oracles.receptive_field_arith([base.kernel] * base.layers)
    rows, cols = np.nonzero(heat)
    half = rf // 2
    assert rows.min() >= 10 - half and rows.max() <= 10 + half
    assert cols.min() >= 10 - half and cols.max() <= 10 + half
    assert heat.min() >= 0 and heat.max() == 1


def test_nano_stage4_reaches_beyond_local_window(rng):
    model = M.build("nano", seed=0)
    t1, t2 = images(rng, 64)
    heat = M.erf_probe(model, t1, t2, target=4, position=(32, 32))
    assert heat.min() >= 0 and heat.max() == 1
    assert M.erf_mass_outside(heat, (32, 32), 3) > 0


def test_erf_position_errors(rng):
    model = M.build("nano-tiny")
    t1, t2 = images(rng, 64)
    with pytest.raises(ContractError):
        M.erf_probe(model, t1, t2, position=(64, 0))
    with pytest.raises(ContractError):
        M.erf_probe(model, t1, t2, target=7)
