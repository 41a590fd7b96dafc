import math

import pandas as pd
import pytest
import torch

from fused_sfda.adaptation.prototypes import (
    PrototypeBank,
    confident,
    ema_update,
    export_centroids,
    init_from_classifier,
    margin,
    prototype_view,
    similarities,
)
from fused_sfda.classes.exceptions import (
    DegenerateClassifierError,
    ShapeMismatchError,
    ZeroNormError,
)
from fused_sfda.classes.itemtypes import BranchRole, View
from fused_sfda.model.branch import ProbBatch, build_branch
from fused_sfda.verification.self_checks import TINY_MODEL


def probs(rows):
    return ProbBatch(torch.tensor(rows, dtype=torch.float64), View.Linear, BranchRole.SM)


def bank_of(rows, **settings):
    return PrototypeBank(torch.tensor(rows, dtype=torch.float64), **settings)


def test_init_from_classifier_normalises_rows():
    torch.manual_seed(0)
    branch = build_branch(BranchRole.SM, 3, 16, 2, TINY_MODEL)
    with torch.no_grad():
        branch.classifier.weight.zero_()
        branch.classifier.weight[0, :2] = torch.tensor([3.0, 4.0])
        branch.classifier.weight[1, 2] = -2.0
    bank = init_from_classifier(branch)
    assert bank.centroids[0, :2].tolist() == pytest.approx([0.6, 0.8])
    assert bank.centroids[1, 2].item() == pytest.approx(-1.0)
    assert bank.owner_role == BranchRole.SM


def test_init_from_random_classifier_unit_norm():
    torch.manual_seed(1)
    branch = build_branch(BranchRole.FM, 3, 16, 3, TINY_MODEL)
    bank = init_from_classifier(branch)
    assert torch.allclose(bank.centroids.norm(dim=1), torch.ones(3), atol=1e-6)


def test_init_from_zero_row_raises():
    branch = build_branch(BranchRole.SM, 3, 16, 3, TINY_MODEL)
    with torch.no_grad():
        branch.classifier.weight[1].zero_()
    with pytest.raises(DegenerateClassifierError) as e:
        init_from_classifier(branch)
    assert e.value.row == 1


def test_margin_examples():
    m = margin(probs([[0.7, 0.2, 0.1], [0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]))
    assert m.tolist() == pytest.approx([0.5, 0.0, 1.0])


def test_ema_moves_confident_class_only():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]], momentum=0.9, margin_threshold=0.6)
    features = torch.tensor([[0.0, 2.0], [5.0, 0.0]], dtype=torch.float64)
    labels = torch.tensor([0, 0])
    margins = torch.tensor([0.8, 0.1], dtype=torch.float64)
    updated = ema_update(bank, features, labels, margins)

    expected = torch.tensor([0.9, 0.1], dtype=torch.float64)
    assert torch.allclose(updated.centroids[0], expected / expected.norm())
    assert torch.equal(updated.centroids[1], bank.centroids[1])
    assert torch.equal(bank.centroids[0], torch.tensor([1.0, 0.0], dtype=torch.float64))


def test_ema_margin_at_threshold_is_not_confident():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]], margin_threshold=0.5)
    updated = ema_update(
        bank,
        torch.tensor([[0.0, 1.0]], dtype=torch.float64),
        torch.tensor([0]),
        torch.tensor([0.5], dtype=torch.float64),
    )
    assert torch.equal(updated.centroids, bank.centroids)


def test_ema_keeps_unit_norm():
    torch.manual_seed(2)
    bank = bank_of(torch.nn.functional.normalize(torch.randn(4, 8), dim=1).tolist())
    features = torch.randn(64, 8, dtype=torch.float64)
    labels = torch.randint(0, 4, (64,))
    updated = ema_update(bank, features, labels, torch.ones(64, dtype=torch.float64))
    assert torch.allclose(updated.centroids.norm(dim=1), torch.ones(4, dtype=torch.float64))


def test_ema_rejects_wrong_dim():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ShapeMismatchError):
        ema_update(bank, torch.ones(1, 3), torch.tensor([0]), torch.tensor([0.9]))


def test_similarities_and_prototype_view():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]], temperature=10.0)
    features = torch.tensor([[2.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    sims = similarities(bank, features)
    assert sims[0].tolist() == pytest.approx([1.0, 0.0])
    assert sims[1].tolist() == pytest.approx([2**-0.5, 2**-0.5])

    view = prototype_view(bank, features)
    assert view.view == View.Prototype
    assert view.values[1].tolist() == pytest.approx([0.5, 0.5])
    assert view.values[0, 0] > 0.99


def test_similarity_zero_feature_raises():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ZeroNormError) as e:
        similarities(bank, torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64))
    assert e.value.row == 1


def test_bank_rejects_bad_settings():
    with pytest.raises(ValueError):
        bank_of([[1.0, 0.0], [0.0, 1.0]], margin_threshold=1.0)


def test_export_centroids(tmp_path):
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]])
    path = tmp_path / "centroids.csv"
    export_centroids(bank, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["class", "d0", "d1"]
    assert len(frame) == 2


def test_prototype_view_zero_temperature_is_uniform():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], temperature=0.0)
    view = prototype_view(bank, torch.tensor([[3.0, -1.0], [0.2, 0.9]], dtype=torch.float64))
    assert torch.allclose(view.values, torch.full((2, 3), 1 / 3, dtype=torch.float64))


def test_prototype_view_unit_temperature_closed_form():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]], temperature=1.0)
    view = prototype_view(bank, torch.tensor([[4.0, 0.0]], dtype=torch.float64))
    e = math.e
    assert view.values[0].tolist() == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-12)


def test_prototype_view_ignores_positive_rescaling():
    torch.manual_seed(3)
    bank = bank_of(torch.nn.functional.normalize(torch.randn(4, 6), dim=1).tolist())
    features = torch.randn(10, 6, dtype=torch.float64)
    scales = torch.rand(10, 1, dtype=torch.float64) * 100 + 0.01
    base = prototype_view(bank, features).values
    assert torch.allclose(prototype_view(bank, features * scales).values, base, atol=1e-12)
    # centroid scale is irrelevant as well
    stretched = PrototypeBank(bank.centroids * 7.5, temperature=bank.temperature)
    assert torch.allclose(prototype_view(stretched, features).values, base, atol=1e-12)


def test_prototype_view_matches_scalar_loop():
    torch.manual_seed(4)
    bank = bank_of(torch.randn(3, 5).tolist(), temperature=10.0)
    features = torch.randn(8, 5, dtype=torch.float64)
    ours = prototype_view(bank, features).values.tolist()
    rows = bank.centroids.tolist()
    for z, p in zip(features.tolist(), ours):
        z_norm = math.sqrt(sum(v * v for v in z))
        cosines = []
        for c in rows:
            c_norm = math.sqrt(sum(v * v for v in c))
            cosines.append(sum(a * b for a, b in zip(z, c)) / (z_norm * c_norm))
        top = max(cosines)
        exps = [math.exp(10.0 * (s - top)) for s in cosines]
        expected = [v / sum(exps) for v in exps]
        assert p == pytest.approx(expected, abs=1e-9)


def test_ema_zero_momentum_replaces_centroid_with_mean_direction():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]], momentum=0.0, margin_threshold=0.5)
    features = torch.tensor([[0.0, 3.0], [4.0, 4.0], [9.0, 0.0]], dtype=torch.float64)
    labels = torch.tensor([0, 0, 1])
    margins = torch.tensor([0.9, 0.9, 0.1], dtype=torch.float64)
    updated = ema_update(bank, features, labels, margins)

    mean = torch.tensor([0.5 * 2**-0.5, 0.5 + 0.5 * 2**-0.5], dtype=torch.float64)
    assert torch.allclose(updated.centroids[0], mean / mean.norm())
    assert torch.equal(updated.centroids[1], bank.centroids[1])


def test_confident_rows_shrink_as_threshold_rises():
    torch.manual_seed(5)
    margins = torch.rand(500, dtype=torch.float64)
    counts = [int(confident(margins, eta).sum()) for eta in (0.0, 0.2, 0.4, 0.6, 0.8, 0.99)]
    assert all(later <= earlier for earlier, later in zip(counts, counts[1:]))
    previous = confident(margins, 0.2)
    for eta in (0.4, 0.6, 0.8):
        current = confident(margins, eta)
        # each stricter gate keeps a subset of the looser one
        assert not (current & ~previous).any()
        previous = current
