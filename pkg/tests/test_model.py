import numpy as np
import pytest

from conftest import tiny_config
from moe_lab import autodiff as ad
from moe_lab.errors import ConfigError, FormatError
from moe_lab.model import (ModelConfig, build, config_hash, count_flops, dumps_checkpoint, layout,
                           load_checkpoint, loads_checkpoint, save_checkpoint)
from moe_lab.rng import Rng

TABLE = dict(input_dim=512, backbone_hidden=(), feature_dim=512, num_classes=10)


@pytest.mark.parametrize("head, expected", [
    ("dense", 512 * 512 + 512 + 512 * 10 + 10),
    ("soft", 512 * 8 + 8 + 8 * (512 * 64 + 64 + 64 * 10 + 10)),
    ("sparse", 512 * 8 + 8 + 512 * 8 + 8 * (512 * 64 + 64 + 64 * 10 + 10)),
])
def test_head_parameter_counts(head, expected):
    cfg = ModelConfig(head=head, dense_hidden=512, num_experts=8, expert_hidden=64, k=2, **TABLE)
    m = build(cfg)
    assert m.head_param_count == expected
    assert m.num_params == expected   # identity backbone has no parameters
    assert cfg.identity_backbone


def test_layout_names_and_contiguity():
    cfg = tiny_config("sparse")
    names = [name for name, _ in layout(cfg)]
    assert names[:2] == ["backbone.0.weight", "backbone.0.bias"]
    assert "head.noise.weight" in names and "head.experts.2.fc2.bias" in names
    m = build(cfg)
    end = 0
    for name in names:
        off, shape = m.params.slices[name]
        assert off == end
        end += int(np.prod(shape))
    assert end == m.num_params


def test_init_is_seeded_and_bounded():
    a, b = build(tiny_config("soft", seed=1)), build(tiny_config("soft", seed=1))
    assert a.params.vector.tobytes() == b.params.vector.tobytes()
    assert not np.array_equal(a.params.vector, build(tiny_config("soft", seed=2)).params.vector)
    w = a.params.get("backbone.0.weight")
    assert np.abs(w).max() <= 1 / np.sqrt(4)
    assert not a.params.get("backbone.0.bias").any()


def test_noise_weights_start_at_zero():
    assert not build(tiny_config("sparse")).params.get("head.noise.weight").any()


def test_dense_head_initialises_like_single_expert():
    common = dict(input_dim=4, backbone_hidden=(3,), feature_dim=3, num_classes=2, seed=4)
    d = build(ModelConfig(head="dense", dense_hidden=5, **common))
    s = build(ModelConfig(head="soft", num_experts=1, expert_hidden=5, **common))
    np.testing.assert_array_equal(d.params.get("head.fc1.weight"), s.params.get("head.experts.0.fc1.weight"))


@pytest.mark.parametrize("head", ["dense", "soft", "sparse", "hard"])
def test_forward_shapes_and_routing(head):
    m = build(tiny_config(head))
    x = Rng(0).normal((7, 4))
    out = m.forward(x)
    assert out.logits.shape == (7, 3)
    assert (out.routing is None) == (head == "dense")
    if head in ("sparse", "hard"):
        assert (out.routing.decision.weights > 0).sum(axis=1).max() == m.config.k


def test_training_forward_uses_noise_and_eval_does_not():
    m = build(tiny_config("sparse"))
    vec = m.params.vector.copy()
    vec[slice(*_range(m, "head.noise.weight"))] = 1.0
    m = m.with_params(vec)
    x = Rng(0).normal((5, 4))
    ev = m.forward(x).routing.decision
    tr = m.forward(x, training=True, rng=Rng(3)).routing.decision
    assert np.array_equal(ev.noisy_logits, ev.clean_logits)
    assert not np.array_equal(tr.noisy_logits, tr.clean_logits)


def _range(m, name):
    off, shape = m.params.slices[name]
    return off, off + int(np.prod(shape))


def test_loss_aux_terms_by_head():
    x, y = Rng(0).normal((6, 4)), np.array([0, 1, 2, 0, 1, 2])
    assert build(tiny_config("dense")).loss(x, y).aux == {}
    assert set(build(tiny_config("soft")).loss(x, y).aux) == {"kl"}
    sp = build(tiny_config("sparse"))
    assert set(sp.loss(x, y).aux) == {"importance"}
    terms = sp.loss(x, y, training=True, rng=Rng(1))
    assert set(terms.aux) == {"importance", "load"}
    assert terms.total.item() == pytest.approx(terms.task.item() + sum(t.item() for t in terms.aux.values()))
    assert set(build(tiny_config("sparse", importance_weight=0.0)).loss(x, y).aux) == set()


def test_objective_is_deterministic_in_training_mode():
    m = build(tiny_config("sparse"))
    x, y = Rng(0).normal((6, 4)), np.arange(6) % 3
    fn = m.objective(x, y, training=True, noise_seed=5, include_aux=True)
    with ad.no_grad():
        assert fn(m.theta()).item() == fn(m.theta()).item()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(head="hard", k=2)
    with pytest.raises(ConfigError):
        ModelConfig(head="sparse", num_experts=2, k=3)
    with pytest.raises(ConfigError):
        ModelConfig(head="mixture")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"head": {"kind": "sparse", "experts": 4}})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_config_round_trip_and_hash():
    cfg = tiny_config("sparse")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.hash() == ModelConfig.from_dict(cfg.to_dict()).hash()
    assert cfg.hash() != tiny_config("sparse", seed=1).hash()
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert len(cfg.hash()) == 12


def test_flop_counts():
    sparse = count_flops(ModelConfig(head="sparse", num_experts=8, expert_hidden=64, k=2, **TABLE))
    dense = count_flops(ModelConfig(head="dense", dense_hidden=512, **TABLE))
    soft = count_flops(ModelConfig(head="soft", num_experts=8, expert_hidden=64, **TABLE))
    assert dense.experts_active == 512 * 512 + 512 * 10 == 267_264
    assert sparse.experts_total == soft.experts_active == 267_264
    assert sparse.experts_active == 66_816 and sparse.active_ratio == 0.25
    assert soft.active_ratio == 1.0 and sparse.gate == 512 * 8
    hard = count_flops(ModelConfig(head="hard", num_experts=8, expert_hidden=64, k=1, **TABLE))
    assert hard.active_ratio == 0.125


def test_checkpoint_round_trip(tmp_path):
    m = build(tiny_config("sparse"))
    m.extra = {"note": "x"}
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == m.config and back.extra == {"note": "x"}
    assert back.params.vector.tobytes() == m.params.vector.tobytes()
    assert dumps_checkpoint(back) == dumps_checkpoint(m)


@pytest.mark.parametrize("mangle, match", [
    (lambda r: b"NOTACKPT" + r[8:], "magic"),
    (lambda r: r[:8] + b"\x02" + r[9:], "version"),
    (lambda r: r[:-12], "truncated"),
    (lambda r: r[:-20] + bytes([r[-20] ^ 1]) + r[-19:], "CRC"),
])
def test_checkpoint_corruption_is_format_error(mangle, match):
    raw = dumps_checkpoint(build(tiny_config("dense")))
    with pytest.raises(FormatError, match=match):
        loads_checkpoint(mangle(raw))


def test_missing_checkpoint_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nope.ckpt")
