import math

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from relpose_adapt.core.alignment import (
    AdaptResult,
    ContrastiveBatch,
    FrozenComponents,
    ImageEncoder,
    RuleBatch,
    TargetBatchSampler,
    adapt_target,
    contrastive_pose_loss,
    embed_clips,
    embed_images,
    equivariance_gap,
    images_to_tensor,
    infer_pose,
    infer_sequence,
    info_nce,
    nonlocal_motion_energy,
    nonlocal_pose_energy,
    predict_poses,
    train_source_encoder,
)
from relpose_adapt.core.config import AdaptConfig, SourceConfig
from relpose_adapt.core.errors import ConfigError, FrozenViolationError, ShapeError, StageOrderError
from relpose_adapt.core.latent_models import LATENT_DIM, MotionCoder, PoseCoder
from relpose_adapt.core.relation_nets import RelationNetwork, get_rule
from relpose_adapt.core.synth_world import UnlabeledTargetClips, image_rule_transform
from relpose_adapt.utils.numeric_checks import gradient_check


def random_images(shape, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=shape + (64, 64, 3), dtype=np.uint8)


def frozen_net(name, dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    network = RelationNetwork(get_rule(name), hidden=16).to(dtype)
    torch.nn.init.normal_(network.net[-1].weight, std=0.05)
    return network.freeze()


def toy_targets():
    return UnlabeledTargetClips(
        clips=random_images((6, 30), seed=1),
        long_clips=random_images((3, 60), seed=2),
        clip_sequence_ids=np.array([0, 0, 1, 1, 2, 2]),
        long_sequence_ids=np.array([0, 1, 2]),
    )


@pytest.fixture(scope="module")
def targets():
    return toy_targets()


@pytest.fixture(scope="module")
def frozen():
    torch.manual_seed(0)
    return FrozenComponents(
        pose_coder=PoseCoder(hidden=8).freeze(),
        motion_coder=MotionCoder(hidden=8).freeze(),
        relation_nets={
            "Z3": frozen_net("flip+inplane"),
            "V2": frozen_net("flip+inplane-backward"),
            "V3": frozen_net("slow-backward"),
        },
    )


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return ImageEncoder()


def adapt_config(**overrides):
    values = dict(iterations=5, batch_frames=4, batch_clips=2)
    values.update(overrides)
    return AdaptConfig(**values)


# =================== 图像编码器 ===================

def test_images_to_tensor_layout():
    x = np.zeros((2, 64, 64, 3), dtype=np.uint8)
    x[1] = 255
    t = images_to_tensor(x)
    assert t.shape == (2, 3, 64, 64)
    assert float(t[0].min()) == -0.5
    assert float(t[1].max()) == 0.5
    with pytest.raises(ShapeError):
        images_to_tensor(np.zeros((2, 32, 32, 3), dtype=np.uint8))


def test_encoder_output_range(encoder):
    with torch.no_grad():
        z = embed_images(encoder, random_images((2, 3)))
    assert z.shape == (2, 3, LATENT_DIM)
    assert float(z.abs().max()) <= 1.0


def test_adapt_mask_controls_gradients():
    G = ImageEncoder()
    G.set_adapt_mask(["mid"])
    names = {name for name, param in G.named_parameters() if param.requires_grad}
    assert names and all(name.startswith("mid.") for name in names)
    assert len(G.trainable_parameters()) == len(names)
    with pytest.raises(ConfigError):
        G.set_adapt_mask(["neck"])


def test_embed_clips_checks_length(encoder, frozen):
    with pytest.raises(ShapeError):
        embed_clips(encoder, frozen.motion_coder, random_images((1, 29)))


def test_inference_shapes(encoder, frozen):
    y = infer_pose(encoder, frozen.pose_coder, random_images(()))
    assert y.shape == (17, 3)
    np.testing.assert_array_equal(y[0], 0.0)
    assert infer_sequence(encoder, frozen.pose_coder, random_images((4,))).shape == (4, 17, 3)
    assert predict_poses(encoder, frozen.pose_coder, random_images((2, 3))).shape == (2, 3, 17, 3)
    with pytest.raises(ShapeError):
        infer_pose(encoder, frozen.pose_coder, random_images((2,)))
    with pytest.raises(ShapeError):
        infer_sequence(encoder, frozen.pose_coder, random_images((1,))[0])


def test_train_source_encoder(source_set, pose_coder):
    G, log = train_source_encoder(source_set, pose_coder, SourceConfig(epochs=1, batch_size=32))
    assert len(log.curves["regression"]) == 1
    assert {"train_mpjpe", "val_mpjpe"} <= set(log.metrics)
    assert predict_poses(G, pose_coder, source_set.images[:3]).shape == (3, 17, 3)


def test_train_source_encoder_needs_frozen_decoder(source_set):
    with pytest.raises(StageOrderError):
        train_source_encoder(source_set, PoseCoder(hidden=8), SourceConfig(epochs=1))


# =================== InfoNCE ===================

def _info_nce_oracle(a, p, tau, ids):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    logits = a @ p.T / tau
    losses = []
    for i in range(len(a)):
        keep = [j for j in range(len(a)) if j == i or ids[j] != ids[i]]
        losses.append(logsumexp(logits[i, keep]) - logits[i, i])
    return float(np.mean(losses))


@pytest.mark.parametrize("seed", range(4))
def test_info_nce_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, p = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    ids = [0, 0, 1, 2, 3, 3]
    value = info_nce(torch.as_tensor(a), torch.as_tensor(p), 0.1, sequence_ids=ids)
    assert float(value) == pytest.approx(_info_nce_oracle(a, p, 0.1, ids), abs=1e-9)


def test_info_nce_uniform_logits_is_log_batch_size():
    x = torch.ones((8, 5), dtype=torch.float64)
    assert float(info_nce(x, x, 0.1)) == pytest.approx(math.log(8), abs=1e-9)


def test_info_nce_rejects_bad_inputs():
    x = torch.randn(4, 3)
    with pytest.raises(ConfigError):
        info_nce(x, x, 0.0)
    with pytest.raises(ShapeError):
        info_nce(x, x, 0.1, sequence_ids=[7, 7, 7, 7])
    with pytest.raises(ShapeError):
        info_nce(x, x[:3], 0.1)


def test_info_nce_gradients():
    torch.manual_seed(0)
    a = torch.nn.Parameter(torch.randn(5, 4, dtype=torch.float64))
    p = torch.nn.Parameter(torch.randn(5, 4, dtype=torch.float64))
    result = gradient_check(lambda: info_nce(a, p, 0.2, sequence_ids=[0, 1, 1, 2, 3]), [a, p],
                            n_points=10, atol=1e-3)
    assert result["max_rel_error"] < 1e-5


def test_contrastive_pose_loss_is_finite(encoder):
    frames = random_images((4,))
    batch = ContrastiveBatch(frames, frames.copy(), np.arange(4))
    value = contrastive_pose_loss(encoder, batch, tau=0.1)
    assert torch.isfinite(value)
    assert float(value) >= 0.0


# =================== 非局部能量 ===================

def test_pose_energy_matches_definition():
    torch.manual_seed(0)
    G = ImageEncoder().double()
    network = frozen_net("flip+inplane", dtype=torch.float64)
    rule = network.rule
    images = random_images((3,), seed=4)
    with torch.no_grad():
        value = float(nonlocal_pose_energy(G, network, images, rule))
        z = network(embed_images(G, images)).numpy()
        z_plus = embed_images(G, image_rule_transform("z3", images, theta=15.0)).numpy()
    assert value == pytest.approx(float(np.linalg.norm(z - z_plus, axis=-1).mean()), abs=1e-9)


def test_pose_energy_vanishes_for_constant_encoder():
    G = ImageEncoder().double()
    torch.nn.init.zeros_(G.head[-2].weight)
    network = RelationNetwork(get_rule("flip+inplane")).double().freeze()
    with torch.no_grad():
        value = float(nonlocal_pose_energy(G, network, random_images((3,)), network.rule))
    assert value == pytest.approx(1e-6, abs=1e-9)


def test_pose_energy_gradients():
    torch.manual_seed(0)
    G = ImageEncoder().double()
    network = frozen_net("flip+inplane", dtype=torch.float64)
    images = random_images((2,), seed=5)
    result = gradient_check(lambda: nonlocal_pose_energy(G, network, images, network.rule),
                            list(G.mid.parameters()), n_points=8, atol=1e-3)
    assert result["max_rel_error"] < 1e-4


def test_motion_energy_matches_definition():
    torch.manual_seed(0)
    G = ImageEncoder().double()
    motion_coder = MotionCoder(hidden=8).double().freeze()
    network = frozen_net("flip-backward", dtype=torch.float64)
    clips = random_images((2, 30), seed=6)
    value = nonlocal_motion_energy(G, motion_coder, network, clips, network.rule)
    value.backward()
    assert G.mid[0].weight.grad is not None and float(G.mid[0].weight.grad.abs().sum()) > 0.0
    with torch.no_grad():
        v = network(embed_clips(G, motion_coder, clips)).numpy()
        v_plus = embed_clips(G, motion_coder, image_rule_transform("v1", clips)).numpy()
    assert float(value) == pytest.approx(float(np.linalg.norm(v - v_plus, axis=-1).mean()), abs=1e-9)


def test_energy_guards(encoder, frozen):
    images = random_images((2,))
    with pytest.raises(ConfigError):
        nonlocal_pose_energy(encoder, frozen.relation_nets["V2"], images, get_rule("flip+inplane-backward"))
    with pytest.raises(ConfigError):
        nonlocal_pose_energy(encoder, frozen.relation_nets["Z3"], images, get_rule("pose-flip"))
    unfrozen = RelationNetwork(get_rule("flip+inplane"))
    with pytest.raises(StageOrderError):
        nonlocal_pose_energy(encoder, unfrozen, images, unfrozen.rule)


def test_equivariance_gap_is_float(encoder, frozen):
    gap = equivariance_gap(encoder, frozen.relation_nets["Z3"], frozen.relation_nets["Z3"].rule, random_images((3,)))
    assert isinstance(gap, float) and gap >= 0.0


# =================== 批采样 ===================

def test_sampler_batches_use_distinct_sequences(targets):
    sampler = TargetBatchSampler(targets, adapt_config(), long_terms=["V3"], seed=0)
    lcr = sampler.sample("LCR")
    assert isinstance(lcr, ContrastiveBatch)
    assert lcr.anchors.shape == (3, 64, 64, 3)
    assert len(set(lcr.sequence_ids.tolist())) == 3
    hcr = sampler.sample("HCR")
    assert hcr.anchors.shape == (2, 30, 64, 64, 3)
    v3 = sampler.sample("V3")
    assert isinstance(v3, RuleBatch)
    assert v3.inputs.shape == (2, 60, 64, 64, 3)
    assert sampler.sample("V2").inputs.shape == (2, 30, 64, 64, 3)
    with pytest.raises(ConfigError):
        sampler.sample("XYZ")


def test_sampler_needs_two_sequences():
    single = UnlabeledTargetClips(
        clips=random_images((2, 30)),
        long_clips=random_images((1, 60)),
        clip_sequence_ids=np.array([5, 5]),
        long_sequence_ids=np.array([5]),
    )
    with pytest.raises(ShapeError):
        TargetBatchSampler(single, adapt_config()).sample("LCR")


def test_prefetch_stream_matches_serial(targets):
    schedule = ["LCR", "HCR", "Z3", "V2", "V3", "LCR"]
    serial = list(TargetBatchSampler(targets, adapt_config(), long_terms=["V3"], seed=3).stream(schedule))
    prefetched = list(TargetBatchSampler(targets, adapt_config(prefetch=2), long_terms=["V3"], seed=3).stream(schedule))
    assert len(prefetched) == len(serial)
    for a, b in zip(serial, prefetched):
        first_a = a.anchors if isinstance(a, ContrastiveBatch) else a.inputs
        first_b = b.anchors if isinstance(b, ContrastiveBatch) else b.inputs
        np.testing.assert_array_equal(first_a, first_b)
        np.testing.assert_array_equal(a.sequence_ids, b.sequence_ids)


# =================== 适配 ===================

def test_adapt_updates_only_masked_block(encoder, targets, frozen):
    initial = encoder.checksum()
    before = frozen.checksums()
    result = adapt_target(encoder, targets, frozen, adapt_config(), expected_checksums=before)
    assert isinstance(result, AdaptResult)
    assert encoder.checksum() == initial
    assert frozen.checksums() == before
    old, new = encoder.block_checksums(), result.encoder.block_checksums()
    assert new["stem"] == old["stem"]
    assert new["head"] == old["head"]
    assert new["mid"] != old["mid"]


def test_adapt_traces_follow_rotation(encoder, targets, frozen):
    result = adapt_target(encoder, targets, frozen, adapt_config(iterations=7), seed=11)
    assert [row["term"] for row in result.traces] == ["LCR", "HCR", "Z3", "V2", "V3", "LCR", "HCR"]
    assert [row["iteration"] for row in result.traces] == list(range(7))
    assert {row["seed"] for row in result.traces} == {11}
    assert all(np.isfinite(row["value"]) for row in result.traces)


def test_adapt_energy_subset(encoder, targets, frozen):
    result = adapt_target(encoder, targets, frozen, adapt_config(iterations=3), energies=["Z3", "LCR"])
    assert [row["term"] for row in result.traces] == ["LCR", "Z3", "LCR"]


def test_adapt_is_deterministic_with_prefetch(encoder, targets, frozen):
    serial = adapt_target(encoder, targets, frozen, adapt_config())
    again = adapt_target(encoder, targets, frozen, adapt_config())
    prefetched = adapt_target(encoder, targets, frozen, adapt_config(prefetch=2))
    assert serial.encoder.checksum() == again.encoder.checksum() == prefetched.encoder.checksum()
    assert serial.traces == prefetched.traces


def test_adapt_zero_iterations_returns_copy(encoder, targets, frozen):
    result = adapt_target(encoder, targets, frozen, adapt_config(iterations=0))
    assert result.encoder is not encoder
    assert result.encoder.checksum() == encoder.checksum()
    assert result.traces == []


def test_adapt_requires_relation_networks(encoder, targets, frozen):
    bare = FrozenComponents(pose_coder=frozen.pose_coder, motion_coder=frozen.motion_coder)
    with pytest.raises(StageOrderError):
        adapt_target(encoder, targets, bare, adapt_config())
    result = adapt_target(encoder, targets, bare, adapt_config(iterations=2), energies=["LCR", "HCR"])
    assert len(result.traces) == 2


def test_adapt_rejects_changed_checksums(encoder, targets, frozen):
    expected = dict(frozen.checksums())
    expected["pose_coder"] = "0" * 64
    with pytest.raises(FrozenViolationError):
        adapt_target(encoder, targets, frozen, adapt_config(), expected_checksums=expected)


def test_adapt_requires_frozen_components(encoder, targets, frozen):
    loose = FrozenComponents(pose_coder=PoseCoder(hidden=8), motion_coder=frozen.motion_coder)
    with pytest.raises(StageOrderError):
        adapt_target(encoder, targets, loose, adapt_config(), energies=["LCR"])


def test_adapt_accepts_full_target_set(encoder, target_set, frozen):
    result = adapt_target(encoder, target_set, frozen, adapt_config(iterations=1), energies=["LCR"])
    assert [row["term"] for row in result.traces] == ["LCR"]
