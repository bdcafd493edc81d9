import numpy as np
import pytest
import torch
from torch.nn import functional as F

from relpose_adapt.core.config import RelationsConfig, RenderStyle
from relpose_adapt.core.errors import (
    ConfigError,
    LengthError,
    RelationUnlearnableError,
    ShapeError,
    StageOrderError,
    UnknownRuleError,
)
from relpose_adapt.core.latent_models import LATENT_DIM, MOTION_DIM
from relpose_adapt.core.models import LatentDistanceReport
from relpose_adapt.core.relation_nets import (
    RelationNetwork,
    get_rule,
    latent_distance,
    rank_relations,
    registered_rules,
    relation_checksums,
    select_relations,
    train_motion_relation,
    train_pose_relation,
    train_relation,
)
from relpose_adapt.core.synth_world import render_pose, render_poses
from relpose_adapt.utils.numeric_checks import gradient_check


def relations_config(**overrides):
    values = dict(epochs=2, batch_size=32, pose_ceiling=5.0, motion_ceiling=50.0)
    values.update(overrides)
    return RelationsConfig(**values)


# =================== 规则注册 ===================

def test_rule_names():
    assert get_rule("inplane").name == "inplane-15"
    assert get_rule("flip+inplane", theta=5).name == "flip+inplane-5"
    assert get_rule("flip+inplane-backward").name == "flip+inplane-15-backward"
    assert get_rule("pose-flip").name == "pose-flip"
    assert get_rule("slow-backward").theta is None


def test_rule_names_with_explicit_angle():
    rule = get_rule("inplane-5")
    assert rule.kind == "inplane"
    assert rule.theta == 5.0
    backward = get_rule("flip+inplane-15-backward")
    assert backward.kind == "flip+inplane-backward"
    assert backward.space == "motion"
    assert get_rule(backward.name) == backward


def test_unknown_rule():
    with pytest.raises(UnknownRuleError):
        get_rule("backflip")
    with pytest.raises(KeyError):
        get_rule("inplane-backward")
    with pytest.raises(UnknownRuleError):
        get_rule("pose-flip; rm")


def test_rule_properties():
    assert get_rule("pose-flip").order == "lower"
    assert get_rule("flip-backward").order == "higher"
    assert get_rule("slow-backward").source_length == 60
    assert get_rule("flip-backward").source_length == 30
    assert get_rule("identity").is_diagnostic
    assert get_rule("motion-identity").is_diagnostic
    assert not get_rule("flip+inplane").is_diagnostic
    assert [rule.space for rule in registered_rules()] == ["pose"] * 3 + ["motion"] * 3


def test_rule_space_is_enforced(tiny_bank):
    with pytest.raises(ConfigError):
        get_rule("flip-backward").pose_transform(tiny_bank.poses[0])
    with pytest.raises(ConfigError):
        get_rule("pose-flip").sequence_pair(tiny_bank.sequences[0])


def test_sequence_pair_lengths(tiny_bank):
    with pytest.raises(LengthError):
        get_rule("slow-backward").sequence_pair(tiny_bank.sequences[0])
    with pytest.raises(ShapeError):
        get_rule("flip-backward").sequence_pair(tiny_bank.long_sequences[0])
    anchor, positive = get_rule("slow-backward").sequence_pair(tiny_bank.long_sequences[:2])
    assert anchor.shape == positive.shape == (2, 30, 17, 3)


@pytest.mark.parametrize("name", ["pose-flip", "flip+inplane-90", "inplane-180"])
def test_pose_rule_matches_image_rule(tiny_bank, name):
    rule = get_rule(name)
    style = RenderStyle()
    y = tiny_bank.poses[3]
    anchor, positive = rule.image_pair(render_pose(y, style))
    np.testing.assert_array_equal(anchor, render_pose(y, style))
    np.testing.assert_array_equal(positive, render_pose(rule.pose_transform(y), style))


@pytest.mark.parametrize("name", ["flip-backward", "flip+inplane-90-backward"])
def test_motion_rule_matches_clip_rule(tiny_bank, name):
    rule = get_rule(name)
    style = RenderStyle()
    Y = tiny_bank.sequences[0]
    _, positive = rule.image_pair(render_poses(Y, style))
    np.testing.assert_array_equal(positive, render_poses(rule.sequence_pair(Y)[1], style))


def test_slow_backward_clip_rule(tiny_bank):
    rule = get_rule("slow-backward")
    style = RenderStyle()
    Y = tiny_bank.long_sequences[0]
    anchor, positive = rule.image_pair(render_poses(Y, style))
    anchor_y, positive_y = rule.sequence_pair(Y)
    np.testing.assert_array_equal(anchor, render_poses(anchor_y, style))
    np.testing.assert_array_equal(positive, render_poses(positive_y, style))


# =================== 关系网络 ===================

def test_relation_network_starts_as_identity():
    pose_net = RelationNetwork(get_rule("pose-flip"))
    motion_net = RelationNetwork(get_rule("flip-backward"))
    assert pose_net.hparams["dim"] == LATENT_DIM and pose_net.hparams["hidden"] == 64
    assert motion_net.hparams["dim"] == MOTION_DIM and motion_net.hparams["hidden"] == 256
    x = torch.randn(5, LATENT_DIM)
    with torch.no_grad():
        assert torch.equal(pose_net(x), x)


def test_train_pose_relation(pose_coder, tiny_bank):
    network = train_relation(get_rule("flip+inplane"), pose_coder, None, tiny_bank, relations_config())
    assert network.frozen
    assert network.fit_report.rule == "flip+inplane-15"
    assert network.fit_report.n_heldout == 6
    assert network.fit_report.n_train == 58


def test_train_motion_relations(pose_coder, motion_coder, tiny_bank):
    config = relations_config()
    backward = train_relation(get_rule("flip-backward"), pose_coder, motion_coder, tiny_bank, config)
    slow = train_relation(get_rule("slow-backward"), pose_coder, motion_coder, tiny_bank, config)
    assert backward.fit_report.n_train + backward.fit_report.n_heldout == 12
    assert slow.fit_report.n_train + slow.fit_report.n_heldout == 8
    assert set(relation_checksums({"V3": slow, "V2": backward})) == {"V2", "V3"}
    assert list(relation_checksums({"V3": slow, "V2": backward})) == ["V2", "V3"]


def test_relation_training_is_deterministic(pose_coder, tiny_bank):
    rule = get_rule("pose-flip")
    a = train_pose_relation(rule, pose_coder, tiny_bank, relations_config())
    b = train_pose_relation(rule, pose_coder, tiny_bank, relations_config())
    assert a.checksum() == b.checksum()


def test_unlearnable_relation(pose_coder, tiny_bank):
    with pytest.raises(RelationUnlearnableError) as info:
        train_pose_relation(get_rule("pose-flip"), pose_coder, tiny_bank, relations_config(pose_ceiling=1e-9))
    assert info.value.exit_code == 4


def test_relation_training_guards(pose_coder, tiny_bank):
    with pytest.raises(StageOrderError):
        train_relation(get_rule("flip-backward"), pose_coder, None, tiny_bank, relations_config())
    with pytest.raises(ConfigError):
        train_pose_relation(get_rule("flip-backward"), pose_coder, tiny_bank, relations_config())
    with pytest.raises(ConfigError):
        train_motion_relation(get_rule("pose-flip"), pose_coder, None, tiny_bank, relations_config())


def test_relation_gradients():
    torch.manual_seed(0)
    network = RelationNetwork(get_rule("pose-flip"), hidden=8).double()
    torch.nn.init.normal_(network.net[-1].weight, std=0.1)
    x = torch.rand((6, LATENT_DIM), dtype=torch.float64) * 2.0 - 1.0
    target = torch.rand((6, LATENT_DIM), dtype=torch.float64) * 2.0 - 1.0

    def loss_fn():
        return F.mse_loss(network(x), target)

    result = gradient_check(loss_fn, list(network.parameters()), n_points=10, atol=1e-3)
    assert result["max_rel_error"] < 1e-4


# =================== 潜空间距离与排序 ===================

def test_identity_rules_have_zero_distance(pose_coder, motion_coder, tiny_bank):
    assert latent_distance(get_rule("identity"), pose_coder, None, tiny_bank).mean == 0.0
    report = latent_distance(get_rule("motion-identity"), pose_coder, motion_coder, tiny_bank)
    assert report.mean == 0.0
    assert report.space == "motion"
    assert report.n_samples == 12


def test_flip_distance_is_positive(pose_coder, tiny_bank):
    report = latent_distance(get_rule("pose-flip"), pose_coder, None, tiny_bank)
    assert report.mean > 0.0
    assert report.n_samples == 64


def test_motion_distance_needs_motion_coder(pose_coder, tiny_bank):
    with pytest.raises(StageOrderError):
        latent_distance(get_rule("slow-backward"), pose_coder, None, tiny_bank)


def _distances(values):
    return {
        name: LatentDistanceReport(rule=name, space=get_rule(name).space, mean=mean, std=0.0, n_samples=1)
        for name, mean in values.items()
    }


def test_rank_orders_each_space_by_distance():
    names = ["pose-flip", "inplane", "flip+inplane", "flip-backward", "flip+inplane-backward", "slow-backward"]
    rules = [get_rule(name) for name in names]
    distances = _distances({
        "pose-flip": 0.4, "inplane-15": 0.1, "flip+inplane-15": 0.5,
        "flip-backward": 2.0, "flip+inplane-15-backward": 3.0, "slow-backward": 1.0,
    })
    ranked = rank_relations(rules, None, None, None, distances)
    assert [rule.name for rule in ranked] == [
        "flip+inplane-15", "pose-flip", "inplane-15",
        "flip+inplane-15-backward", "flip-backward", "slow-backward",
    ]


def test_rank_ties_break_by_name():
    rules = [get_rule("pose-flip"), get_rule("inplane")]
    ranked = rank_relations(rules, None, None, None, _distances({"pose-flip": 0.3, "inplane-15": 0.3}))
    assert [rule.name for rule in ranked] == ["inplane-15", "pose-flip"]


def test_rank_needs_candidates():
    with pytest.raises(ConfigError):
        rank_relations([], None, None, None)


def test_select_skips_diagnostic_rules():
    rules = [get_rule(name) for name in ("identity", "flip+inplane", "pose-flip", "motion-identity",
                                         "flip+inplane-backward", "slow-backward")]
    selected = select_relations(rules)
    assert {slot: rule.name for slot, rule in selected.items()} == {
        "Z3": "flip+inplane-15", "V2": "flip+inplane-15-backward", "V3": "slow-backward",
    }


def test_select_limits():
    with pytest.raises(ConfigError):
        select_relations(registered_rules(), n_pose=2)
    assert select_relations(registered_rules(), n_pose=0, n_motion=1).keys() == {"V2"}
