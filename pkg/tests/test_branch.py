import math

import pytest
import torch

from fused_sfda.classes.exceptions import (
    CheckpointError,
    NonFiniteError,
    ShapeMismatchError,
)
from fused_sfda.classes.helper_classes import ModelSpec
from fused_sfda.classes.itemtypes import BranchRole, DType, Phase, View
from fused_sfda.model.branch import (
    ProbBatch,
    build_branch,
    encode,
    linear_view,
    lowest_argmax,
    set_phase_freezing,
)
from fused_sfda.model.checkpoint import (
    group_hashes,
    load_checkpoint,
    save_checkpoint,
    state_hash,
)
from fused_sfda.verification.self_checks import TINY_MODEL


def make_pair(dtype=DType.FLOAT32, model=TINY_MODEL):
    torch.manual_seed(0)
    fm = build_branch(BranchRole.FM, 3, 16, 3, model, dtype)
    sm = build_branch(BranchRole.SM, 3, 16, 3, model, dtype)
    return fm, sm


def test_feature_dims_follow_role():
    fm, sm = make_pair()
    x = torch.randn(4, 3, 16)
    assert encode(fm, x).shape == (4, TINY_MODEL.fm.feature_dim)
    assert encode(sm, x).shape == (4, TINY_MODEL.sm.feature_dim)
    assert fm(x).shape == (4, 3)


def test_default_dims():
    model = ModelSpec()
    assert model.fm.feature_dim == 200
    assert model.sm.feature_dim == 128


def test_encode_rejects_wrong_channels():
    _, sm = make_pair()
    with pytest.raises(ShapeMismatchError) as e:
        encode(sm, torch.randn(2, 4, 16))
    assert e.value.actual == (2, 4, 16)


def test_linear_view_rows_sum_to_one():
    fm, _ = make_pair()
    p = linear_view(fm, torch.randn(5, TINY_MODEL.fm.feature_dim))
    assert p.view == View.Linear
    assert p.branch_role == BranchRole.FM
    assert torch.allclose(p.values.sum(dim=1), torch.ones(5), atol=1e-6)


def test_linear_view_reports_nan_row():
    fm, _ = make_pair()
    features = torch.randn(4, TINY_MODEL.fm.feature_dim)
    features[2, 0] = float("nan")
    with pytest.raises(NonFiniteError) as e:
        linear_view(fm, features)
    assert e.value.row == 2


def test_linear_view_rejects_wrong_feature_dim():
    _, sm = make_pair()
    with pytest.raises(ShapeMismatchError):
        linear_view(sm, torch.randn(3, TINY_MODEL.sm.feature_dim + 1))


def test_prob_batch_rejects_unnormalised_rows():
    with pytest.raises(NonFiniteError) as e:
        ProbBatch(torch.tensor([[0.5, 0.5], [0.9, 0.3]]), View.Linear, BranchRole.SM)
    assert e.value.row == 1


def test_lowest_argmax_breaks_ties_low():
    values = torch.tensor([[0.2, 0.4, 0.4], [0.5, 0.5, 0.0], [0.1, 0.2, 0.7]])
    assert lowest_argmax(values).tolist() == [1, 0, 2]


def test_adapt_phase_freezing():
    fm, sm = make_pair()
    set_phase_freezing(fm, sm, Phase.Adapt)
    assert not fm.encoder_trainable and fm.classifier_trainable
    assert sm.encoder_trainable and not sm.classifier_trainable
    set_phase_freezing(fm, sm, Phase.Pretrain)
    assert all(p.requires_grad for p in fm.parameters())
    assert all(p.requires_grad for p in sm.parameters())


def test_float64_branch():
    fm, _ = make_pair(DType.FLOAT64)
    assert fm.classifier.weight.dtype == torch.float64


def test_checkpoint_round_trip(tmp_path):
    fm, sm = make_pair()
    path = tmp_path / "sm.ckpt"
    centroids = torch.eye(3, TINY_MODEL.sm.feature_dim)
    digest = save_checkpoint(sm, path, centroids, {"momentum": 0.9})

    loaded, stored, settings = load_checkpoint(path)
    assert loaded.role == BranchRole.SM
    assert state_hash(loaded) == digest == state_hash(sm)
    assert torch.equal(stored, centroids)
    assert settings == {"momentum": 0.9}


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_group_hashes_track_changes():
    fm, sm = make_pair()
    before = group_hashes(fm, sm)
    with torch.no_grad():
        sm.classifier.weight.add_(1.0)
    after = group_hashes(fm, sm)
    assert before["sm.classifier"] != after["sm.classifier"]
    assert before["fm.encoder"] == after["fm.encoder"]


def two_class_head(bias):
    torch.manual_seed(0)
    branch = build_branch(BranchRole.FM, 3, 16, 2, TINY_MODEL, DType.FLOAT64)
    with torch.no_grad():
        branch.classifier.weight.zero_()
        branch.classifier.bias.copy_(torch.tensor(bias, dtype=torch.float64))
    return branch


def test_linear_view_closed_form_from_bias():
    branch = two_class_head([math.log(2.0), 0.0])
    features = torch.randn(3, TINY_MODEL.fm.feature_dim, dtype=torch.float64)
    p = linear_view(branch, features)
    assert torch.allclose(p.values, torch.tensor([[2 / 3, 1 / 3]] * 3, dtype=torch.float64))


def test_linear_view_zero_logits_are_uniform():
    torch.manual_seed(0)
    branch = build_branch(BranchRole.SM, 3, 16, 4, TINY_MODEL, DType.FLOAT64)
    with torch.no_grad():
        branch.classifier.weight.zero_()
        branch.classifier.bias.zero_()
    p = linear_view(branch, torch.randn(2, TINY_MODEL.sm.feature_dim, dtype=torch.float64))
    assert torch.allclose(p.values, torch.full((2, 4), 0.25, dtype=torch.float64))


def test_linear_view_ignores_shared_logit_shift():
    fm, _ = make_pair(DType.FLOAT64)
    features = torch.randn(6, TINY_MODEL.fm.feature_dim, dtype=torch.float64)
    before = linear_view(fm, features).values
    with torch.no_grad():
        fm.classifier.bias.add_(123.0)
    assert torch.allclose(linear_view(fm, features).values, before, atol=1e-9)


def test_linear_view_matches_scalar_softmax():
    fm, _ = make_pair(DType.FLOAT64)
    features = torch.randn(5, TINY_MODEL.fm.feature_dim, dtype=torch.float64)
    ours = linear_view(fm, features).values.tolist()
    weight = fm.classifier.weight.tolist()
    bias = fm.classifier.bias.tolist()
    for z, p in zip(features.tolist(), ours):
        logits = [sum(w * v for w, v in zip(row, z)) + b for row, b in zip(weight, bias)]
        top = max(logits)
        exps = [math.exp(v - top) for v in logits]
        assert p == pytest.approx([v / sum(exps) for v in exps], abs=1e-10)


def test_encode_is_deterministic_in_eval_mode():
    fm, sm = make_pair()
    row = torch.randn(1, 3, 16)
    batch = row.repeat(4, 1, 1)
    for branch in (fm, sm):
        branch.eval()
        with torch.no_grad():
            features = encode(branch, batch)
            again = encode(branch, batch)
        assert torch.equal(features, again)
        assert torch.allclose(features, features[:1].expand_as(features))


def test_zero_weight_encoder_gives_zero_features():
    fm, sm = make_pair()
    for branch in (fm, sm):
        with torch.no_grad():
            for param in branch.encoder.parameters():
                param.zero_()
        branch.eval()
        with torch.no_grad():
            features = encode(branch, torch.randn(3, 3, 16))
        assert torch.equal(features, torch.zeros_like(features))


def test_reloaded_checkpoint_encodes_identically(tmp_path):
    _, sm = make_pair()
    path = tmp_path / "sm.ckpt"
    save_checkpoint(sm, path, torch.eye(3, TINY_MODEL.sm.feature_dim), {})
    loaded, _, _ = load_checkpoint(path)
    batch = torch.randn(4, 3, 16)
    sm.eval()
    loaded.eval()
    with torch.no_grad():
        assert torch.equal(encode(loaded, batch), encode(sm, batch))
