import numpy as np
import pytest

from accunet import ops
from accunet.model import ModelConfig, build, count_flops, count_params, summary
from accunet.tensor import DivisibilityError, Tape, Tensor
from accunet.training import combined_loss

SMALL = ModelConfig(channels=(4, 8, 8, 16, 16))


# -- closed-form parameter count, written from the architecture description only


def se(c, r=8):
    h = max(c // r, 1)
    return 2 * c * h + h + c


def hanc(c_in, c_out, k, f):
    ci = c_in * f
    return (c_in * ci + 2 * ci + 9 * ci + 2 * ci + ci * (2 * k - 1) * c_in + 2 * c_in
            + c_in * c_out + 2 * c_out + se(c_out))


def closed_form_params(ch=(32, 64, 128, 256, 512), ks=(3, 3, 3, 2, 1), f=3, f_dec3=34,
                       stacks=3, c_in=3):
    total = 0
    prev = c_in
    for c, k in zip(ch, ks):
        total += hanc(prev, c, k, f) + hanc(c, c, k, f)
        prev = c
    for c in ch[:4]:
        total += 9 * c * c + 2 * c + se(c)
    c_tot = sum(ch[:4])
    for c in ch[:4]:
        total += stacks * (c_tot * c + 2 * c + 2 * c * c + 2 * c + se(c))
    for level in range(4, 0, -1):
        c, below, k = ch[level - 1], ch[level], ks[level - 1]
        total += 4 * below * c + c
        total += hanc(2 * c, c, k, f) + hanc(c, c, k, f_dec3 if level == 3 else f)
    return total + ch[0] + 1


def test_params_match_closed_form():
    assert count_params(build()) == closed_form_params()


def test_params_match_closed_form_small():
    assert count_params(build(SMALL)) == closed_form_params(SMALL.channels)


def test_param_count_near_reported():
    n = count_params(build())
    assert abs(n - 16.77e6) / 16.77e6 < 0.08


def test_inv_fctr_override_is_the_34x_block():
    m = build()
    assert m.dec3.hanc2.inv_fctr == 34 and m.dec3.hanc2.c_inv == 128 * 34
    assert m.dec3.hanc1.inv_fctr == 3


def test_ablation_sizes():
    full = count_params(build())
    assert count_params(build(ModelConfig(variant="no_mlfc"))) < full
    base = count_params(build(ModelConfig(variant="base_half_unet")))
    assert base < full
    assert abs(base - 7.8e6) / 7.8e6 < 0.08


def test_no_mlfc_has_no_mlfc_rows():
    report = summary(build(ModelConfig(variant="no_mlfc")), (1, 3, 64, 64))
    assert not any(r.name.startswith("mlfc") for r in report.rows)
    body = report.to_text().split("\n", 1)[1]
    assert "mlfc" not in body


# -- FLOPs


def test_traced_flops_equal_executed_flops():
    model = build(SMALL).eval()
    with ops.FlopCounter() as fc:
        model(Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    assert count_flops(model, (1, 3, 32, 32)).total == fc.total


def test_flops_scale_by_four():
    model = build()
    a = summary(model, (1, 3, 112, 112))
    b = summary(model, (1, 3, 224, 224))
    conv = [(ra.flops, rb.flops) for ra, rb in zip(a.rows, b.rows) if ra.kind.startswith("conv")]
    assert conv and all(fb == 4 * fa for fa, fb in conv)
    # SE gates act on pooled vectors, so the total is only approximately quadratic
    assert b.total_flops / a.total_flops == pytest.approx(4, rel=1e-3)


def test_summary_totals_and_bottleneck_size():
    model = build()
    report = summary(model)
    assert report.total_params == count_params(model)
    assert report.total_flops == count_flops(model).total
    enc5 = [r for r in report.rows if r.name.startswith("enc5") and ".se." not in r.name]
    assert all(r.out_shape[2:] == (14, 14) for r in enc5)
    text = report.to_text()
    assert "2 FLOPs per multiply-accumulate" in text
    by_level = count_flops(model).by_level
    assert sum(by_level.values()) == report.total_flops


# -- forward behaviour


@pytest.mark.parametrize("hw", [16, 32, 48])
def test_shape_law(hw):
    out = build(SMALL).eval()(Tensor(np.zeros((2, 3, hw, hw), np.float32)))
    assert out.shape == (2, 1, hw, hw)


def test_non_multiple_input_is_rejected():
    with pytest.raises(DivisibilityError, match="50 is not a multiple of 16"):
        build(SMALL)(Tensor(np.zeros((1, 3, 50, 50), np.float32)))


def test_inference_is_deterministic():
    x = Tensor(np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32))
    a = build(SMALL, seed=3).eval()(x).data
    b = build(SMALL, seed=3).eval()(x).data
    assert a.tobytes() == b.tobytes()


def test_seed_changes_weights():
    a = build(SMALL, seed=0).enc1.hanc1.expand.conv.weight.data
    b = build(SMALL, seed=1).enc1.hanc1.expand.conv.weight.data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("variant", ["full", "no_mlfc", "no_hanc", "base_half_unet"])
def test_gradient_reaches_every_parameter(variant):
    # real widths: at toy widths an SE hidden layer has a single ReLU unit that can be dead
    model = build(ModelConfig(variant=variant)).train()
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 3, 32, 32), dtype=np.float32))
    y = (rng.random((2, 1, 32, 32)) > 0.7).astype(np.float32)
    with Tape() as tape:
        loss = combined_loss(model(x), y)
    grads = tape.backward(loss)
    dead = [n for n, p in model.named_parameters() if not np.any(grads.get(p.id, 0))]
    assert dead == []


def test_skip_order_flag_changes_output():
    x = Tensor(np.random.default_rng(0).random((1, 3, 32, 32), dtype=np.float32))
    a = build(SMALL, seed=0).eval()(x).data
    b = build(ModelConfig(channels=SMALL.channels, skip_order="mlfc_first"), seed=0).eval()(x).data
    assert not np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="bogus")
    with pytest.raises(ValueError):
        ModelConfig(k_schedule=(3, 3, 3, 2, 5))
