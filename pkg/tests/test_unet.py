"""U-Net contracts: shapes, conditioning, name partition, head swap,
weight transfer, step fixing and freeze plans."""

import numpy as np
import pytest

from diffseg.checkpoint import ModelCheckpoint
from diffseg.errors import ConfigError, DataError
from diffseg.rng import RngStream
from diffseg.tensor import Tensor
from diffseg.unet import (
    ClassHead,
    UNetConfig,
    apply_freeze,
    attach_head,
    build_noise_unet,
    build_plain_unet,
    fix_diffusion_step,
    model_scale,
    transfer_weights,
)

PREFIXES = ("encoder.", "middle.", "decoder.", "time.", "out.")


def tiny_cfg(c=8, levels=2, **kw):
    mults = (1, 2) if levels == 2 else (1, 2, 2)
    kw.setdefault("attn_levels", (levels - 1,))
    return UNetConfig(base_width=c, channel_mults=mults, res_blocks=1, **kw)


def checkpoint_of(model, extra_meta=()):
    tensors = {n: p.data.copy() for n, p in model.named_parameters().items()}
    meta = dict(model.cfg.to_meta())
    meta.update(extra_meta)
    return ModelCheckpoint(tensors=tensors, meta=meta)


def wake_zero_layers(model, seed=123):
    """Replace the zero-initialized output layers with small random weights.

    A fresh model is an exact identity-plus-skips function (residual output
    convs, attention projections and the final conv start at zero), so
    conditioning only shows through after those layers move, as they do in
    training. Tests that probe conditioning emulate that state directly.
    """
    rng = RngStream(seed, stream=900)
    for p in model.named_parameters().values():
        if not p.data.any():
            p.tensor.data = (rng.normal(p.shape) * 0.2).astype(p.data.dtype)


@pytest.mark.parametrize("c", [8, 16])
@pytest.mark.parametrize("levels", [2, 3])
@pytest.mark.parametrize("hw", [16, 32, 64])
def test_shape_contract_matrix(c, levels, hw):
    model = build_noise_unet(tiny_cfg(c, levels), RngStream(1))
    x = RngStream(2).normal((2, 1, hw, hw))
    out = model.predict(x, t=np.array([3, 7]))
    assert out.shape == (2, 1, hw, hw)


def test_conditioning_is_live():
    model = build_noise_unet(tiny_cfg(), RngStream(3))
    wake_zero_layers(model)
    x = RngStream(4).normal((2, 1, 16, 16))
    a = model.predict(x, t=3)
    b = model.predict(x, t=7)
    assert np.max(np.abs(a - b)) > 1e-6


def test_fresh_model_predicts_zero_noise():
    # zero-initialized residual/attention/output layers make the fresh
    # network output exactly zero; training breaks this symmetry
    model = build_noise_unet(tiny_cfg(), RngStream(3))
    x = RngStream(4).normal((2, 1, 16, 16))
    np.testing.assert_array_equal(model.predict(x, t=5), 0.0)


def test_zeroed_time_branch_kills_conditioning():
    model = build_noise_unet(tiny_cfg(), RngStream(5))
    wake_zero_layers(model)  # make sure only the ablation silences t
    for name, p in model.named_parameters().items():
        if name.startswith("time.") or ".emb." in name:
            p.tensor.data[...] = 0.0
    x = RngStream(6).normal((1, 1, 16, 16))
    a = model.predict(x, t=0)
    b = model.predict(x, t=900)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() > 0  # the ablated model still computes something


def test_spatial_divisibility_enforced():
    model = build_noise_unet(tiny_cfg(levels=3), RngStream(7))
    x = RngStream(8).normal((1, 1, 18, 18))
    with pytest.raises(ConfigError):
        model.predict(x, t=1)


def test_parameter_name_partition():
    model = build_noise_unet(tiny_cfg(), RngStream(9))
    names = model.named_parameters()
    assert names, "model must expose parameters"
    for n in names:
        assert sum(n.startswith(p) for p in PREFIXES) == 1, n


def test_plain_variant_drops_exactly_conditioning_parameters():
    rng_a, rng_b = RngStream(11), RngStream(11)
    cond = build_noise_unet(tiny_cfg(), rng_a)
    plain = build_plain_unet(tiny_cfg(time_conditioned=False), rng_b)
    cond_names = set(cond.named_parameters())
    plain_names = set(plain.named_parameters())
    dropped = cond_names - plain_names
    assert plain_names <= cond_names
    assert dropped == {n for n in cond_names if n.startswith("time.") or ".emb." in n}

    def count(params, names):
        return sum(params[n].data.size for n in names)

    cond_params = cond.named_parameters()
    assert count(cond_params, cond_names) - count(cond_params, dropped) == count(
        plain.named_parameters(), plain_names
    )


def test_plain_forward_takes_only_image():
    model = build_plain_unet(tiny_cfg(time_conditioned=False), RngStream(13))
    x = RngStream(14).normal((2, 1, 16, 16))
    out = model.predict(x)
    assert out.shape == (2, 1, 16, 16)
    with pytest.raises(ConfigError):
        model.predict(x, t=3)


def test_builders_validate_conditioning_flag():
    with pytest.raises(ConfigError):
        build_noise_unet(tiny_cfg(time_conditioned=False), RngStream(1))
    with pytest.raises(ConfigError):
        build_plain_unet(tiny_cfg(), RngStream(1))


def test_attach_head_shapes_and_freshness():
    backbone = build_noise_unet(tiny_cfg(), RngStream(15))
    ck = checkpoint_of(backbone)
    head = ClassHead(backbone.cfg.feature_width, 16, 7, RngStream(16))
    seg = attach_head(backbone, head, max_step=1000)
    transfer_weights(ck, seg)
    fix_diffusion_step(seg, 0)
    x = RngStream(17).normal((2, 1, 16, 16))
    logits = seg.predict_labels(x)
    assert logits.shape == (2, 16, 16)
    # head params are freshly initialized, none of them came from the checkpoint
    for name in seg.named_parameters():
        if name.startswith("head."):
            assert name not in ck.tensors


def test_attach_head_channel_mismatch_names_widths():
    backbone = build_noise_unet(tiny_cfg(c=8), RngStream(18))
    head = ClassHead(16, 16, 5, RngStream(19))
    with pytest.raises(ConfigError, match="16.*8|8.*16"):
        attach_head(backbone, head)


def test_transfer_copies_backbone_bit_exact_and_reports():
    src = build_noise_unet(tiny_cfg(), RngStream(21))
    ck = checkpoint_of(src)
    dst = build_noise_unet(tiny_cfg(), RngStream(99))
    seg = attach_head(dst, ClassHead(dst.cfg.feature_width, 8, 5, RngStream(22)))
    report = transfer_weights(ck, seg)
    params = seg.named_parameters()
    for name, p in params.items():
        if not name.startswith("head."):
            assert p.data.tobytes() == ck.tensors[name].tobytes(), name
    assert report.missing == []
    assert all(s.startswith("out.") for s in report.skipped)
    assert set(report.loaded) == {n for n in params if not n.startswith("head.")}


def test_transfer_idempotent():
    src = build_noise_unet(tiny_cfg(), RngStream(23))
    ck = checkpoint_of(src)
    seg = attach_head(
        build_noise_unet(tiny_cfg(), RngStream(24)),
        ClassHead(8, 8, 5, RngStream(25)),
    )
    transfer_weights(ck, seg)
    once = {n: p.data.copy() for n, p in seg.named_parameters().items()}
    transfer_weights(ck, seg)
    for n, p in seg.named_parameters().items():
        assert p.data.tobytes() == once[n].tobytes()


def test_transfer_rejects_architecture_mismatch():
    small = build_noise_unet(tiny_cfg(c=8), RngStream(26))
    big = attach_head(
        build_noise_unet(tiny_cfg(c=16), RngStream(27)),
        ClassHead(16, 16, 5, RngStream(28)),
    )
    with pytest.raises((ConfigError, DataError)):
        transfer_weights(checkpoint_of(small), big)


def test_transfer_rejects_missing_backbone_tensor():
    src = build_noise_unet(tiny_cfg(), RngStream(29))
    ck = checkpoint_of(src)
    victim = next(n for n in ck.tensors if n.startswith("encoder."))
    del ck.tensors[victim]
    seg = attach_head(
        build_noise_unet(tiny_cfg(), RngStream(30)), ClassHead(8, 8, 5, RngStream(31))
    )
    with pytest.raises(DataError, match="missing"):
        transfer_weights(ck, seg)


def test_feature_tap_matches_pretrained_backbone():
    # transfer + fix_diffusion_step reproduces the checkpoint model's
    # pre-head features at the same step
    noise_model = build_noise_unet(tiny_cfg(c=8), RngStream(33))
    wake_zero_layers(noise_model)  # pretrained weights are not zero
    ck = checkpoint_of(noise_model)
    seg = attach_head(
        build_noise_unet(tiny_cfg(c=8), RngStream(77)),
        ClassHead(8, 8, 4, RngStream(34)),
        max_step=1000,
    )
    transfer_weights(ck, seg)
    x = RngStream(35).normal((2, 1, 16, 16))
    for t in (0, 300):
        fix_diffusion_step(seg, t)
        from diffseg.tensor import no_grad

        with no_grad():
            want = noise_model.features(Tensor(x), t=t).data
            got = seg.features(Tensor(x)).data
        assert np.max(np.abs(want - got)) < 1e-6


def test_fix_diffusion_step_changes_logits_and_validates_range():
    backbone = build_noise_unet(tiny_cfg(), RngStream(37))
    wake_zero_layers(backbone)  # emulate the post-pretraining state
    seg = attach_head(backbone, ClassHead(8, 8, 4, RngStream(38)))
    x = RngStream(39).normal((1, 1, 16, 16))
    fix_diffusion_step(seg, 0)
    with_t0 = seg.predict_labels(x)
    from diffseg.tensor import no_grad

    with no_grad():
        logits0 = seg.forward(Tensor(x)).data
        fix_diffusion_step(seg, 300)
        logits300 = seg.forward(Tensor(x)).data
    assert np.max(np.abs(logits0 - logits300)) > 1e-6
    assert with_t0.shape == (1, 16, 16)
    with pytest.raises(ConfigError):
        fix_diffusion_step(seg, 1001)
    with pytest.raises(ConfigError):
        fix_diffusion_step(seg, -1)


def test_sweep_grid_enumerates_eleven_steps():
    steps = list(range(0, 1001, 100))
    assert len(steps) == 11
    assert steps[0] == 0 and steps[-1] == 1000


def test_apply_freeze_plans():
    seg = attach_head(
        build_noise_unet(tiny_cfg(), RngStream(41)), ClassHead(8, 8, 4, RngStream(42))
    )
    plan = apply_freeze(seg, "linear")
    assert plan.trainable == {n for n in seg.named_parameters() if n.startswith("head.")}
    for n, p in seg.named_parameters().items():
        assert p.trainable == n.startswith("head.")

    plan = apply_freeze(seg, "decoder")
    want = {n for n in seg.named_parameters() if n.startswith(("head.", "decoder."))}
    assert plan.trainable == want
    frozen = set(seg.named_parameters()) - want
    assert frozen and all(n.startswith(("encoder.", "middle.", "time.")) for n in frozen)

    with pytest.raises(ConfigError):
        apply_freeze(seg, "scratch")
    with pytest.raises(ConfigError):
        apply_freeze(seg, "everything")


def test_apply_freeze_scratch_on_plain_variant():
    seg = attach_head(
        build_plain_unet(tiny_cfg(time_conditioned=False), RngStream(43)),
        ClassHead(8, 8, 4, RngStream(44)),
    )
    plan = apply_freeze(seg, "scratch")
    assert plan.trainable == set(seg.named_parameters())


def test_decoder_freeze_may_include_middle():
    seg = attach_head(
        build_noise_unet(tiny_cfg(), RngStream(45)), ClassHead(8, 8, 4, RngStream(46))
    )
    plan = apply_freeze(seg, "decoder", include_middle=True)
    assert any(n.startswith("middle.") for n in plan.trainable)


def test_model_scale_definitions():
    assert model_scale("S") == (128, 128)
    assert model_scale("M") == (128, 256)
    assert model_scale("L") == (256, 256)
    assert model_scale("S", desk=True) == (16, 16)
    assert model_scale("M", desk=True) == (16, 32)
    assert model_scale("L", desk=True) == (32, 32)
    with pytest.raises(ConfigError):
        model_scale("XL")


def test_config_meta_round_trip():
    cfg = tiny_cfg(c=16, levels=3)
    assert UNetConfig.from_meta(cfg.to_meta()) == cfg
