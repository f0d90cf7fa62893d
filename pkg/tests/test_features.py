import numpy as np
import pytest
import torch

from sfae.exceptions import BackboneInitError, ContractError
from sfae.features import (
    Extractor,
    LayerSelection,
    build_backbone,
    extract,
    fuse,
    output_geometry,
    parse_selection,
)


@pytest.fixture(scope="module")
def backbone():
    return build_backbone(pretrained=False, seed=0)


def test_geometry_examples():
    assert output_geometry((0, 1, 2), 128) == (256, 32, 32)
    assert output_geometry((0, 1, 2, 3), 128) == (512, 32, 32)
    assert output_geometry((3,), 128) == (256, 8, 8)
    assert output_geometry((2,), 128) == (128, 16, 16)


@pytest.mark.parametrize("sel", [(0,), (1,), (0, 1), (0, 1, 2), (2, 3), (0, 1, 2, 3)])
def test_extract_matches_geometry(backbone, sel):
    x = torch.rand(2, 1, 64, 64)
    stack = extract(x, sel, backbone)
    assert stack.shape[1:] == output_geometry(sel, 64)
    assert torch.isfinite(stack.features).all()


def test_layer_boundaries(backbone):
    stack = extract(torch.rand(1, 1, 128, 128), (0, 1, 2), backbone)
    assert stack.shape == (1, 256, 32, 32)
    assert stack.layer_boundaries == (0, 64, 128)


def test_single_layer_is_unchanged(backbone):
    x = torch.rand(2, 1, 64, 64)
    stack = extract(x, (0,), backbone)
    assert torch.equal(stack.features, backbone(x, (0,))[0])


def test_fuse_bilinear():
    a = torch.rand(1, 2, 8, 8)
    b = torch.rand(1, 3, 4, 4)
    feats, bounds = fuse({0: a, 1: b})
    assert feats.shape == (1, 5, 8, 8) and bounds == (0, 2)
    assert torch.equal(feats[:, :2], a)
    ref = torch.nn.functional.interpolate(b, size=(8, 8), mode="bilinear", align_corners=False)
    assert torch.equal(feats[:, 2:], ref)


def test_deterministic_frozen_and_permutation(backbone):
    before = {k: v.clone() for k, v in backbone.state_dict().items()}
    x = torch.rand(4, 1, 64, 64)
    a = extract(x, (0, 1, 2), backbone).features
    backbone.train()
    b = extract(x, (0, 1, 2), backbone).features
    assert torch.equal(a, b)
    perm = torch.tensor([2, 0, 3, 1])
    c = extract(x[perm], (0, 1, 2), backbone).features
    assert torch.allclose(c, a[perm], rtol=1e-5, atol=1e-5)
    for k, v in backbone.state_dict().items():
        assert torch.equal(v, before[k])
    assert not any(p.requires_grad for p in backbone.parameters())


def test_random_backbone_seeded():
    a, b = build_backbone(False, seed=5), build_backbone(False, seed=5)
    assert torch.equal(a.stem[0].weight, b.stem[0].weight)


def test_missing_weights(tmp_path, monkeypatch):
    monkeypatch.setenv("SFAE_WEIGHTS_DIR", str(tmp_path))
    with pytest.raises(BackboneInitError):
        build_backbone(pretrained=True)
    with pytest.raises(BackboneInitError):
        build_backbone(pretrained=True, weights_path=tmp_path / "none.pth")
    (tmp_path / "resnet18-f37072fd.pth").write_bytes(b"garbage")
    with pytest.raises(BackboneInitError):
        build_backbone(pretrained=True)


def test_weights_from_env_dir(tmp_path, monkeypatch):
    import torchvision

    torch.manual_seed(0)
    torch.save(torchvision.models.resnet18(weights=None).state_dict(), tmp_path / "resnet18-f37072fd.pth")
    monkeypatch.setenv("SFAE_WEIGHTS_DIR", str(tmp_path))
    bb = build_backbone(pretrained=True)
    assert bb.stem[0].weight.shape == (64, 3, 7, 7)


def test_selection_validation():
    assert LayerSelection((2, 0, 1)) == (0, 1, 2)
    assert LayerSelection((0, 1, 2)).name == "layer0,1,2"
    assert parse_selection("layer0,1") == (0, 1)
    assert parse_selection(np.array([3])) == (3,)
    assert LayerSelection((1, 1, 0)) == (0, 1)
    for bad in [(), (4,), (-1,)]:
        with pytest.raises(ContractError):
            LayerSelection(bad)


def test_extract_rejects_out_of_range(backbone):
    with pytest.raises(ContractError):
        extract(torch.full((1, 1, 32, 32), 2.0), (0,), backbone)
    with pytest.raises(ContractError):
        extract(torch.rand(1, 2, 32, 32), (0,), backbone)


def test_extractor_chunks(backbone):
    ex = Extractor((0, 1), backbone=backbone, batch_size=3)
    x = torch.rand(7, 1, 32, 32)
    assert torch.allclose(ex(x).features, extract(x, (0, 1), backbone).features, rtol=1e-5, atol=1e-5)
    assert ex.geometry(32) == (128, 8, 8)
