import numpy as np
import pytest
import torch

from priorrecon.config import ModelConfig
from priorrecon.experiments import ablation_config, overfit_config, run_key
from priorrecon.geomcore import camera_points
from priorrecon.inference import predict, priors_for, scene_tensors
from priorrecon.model import ReconstructionModel
from priorrecon.synthdata import generate_scene

TINY = dict(token_dim=24, depth=2, heads=2, head_features=8, gs_feature_dim=4)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(1, 2, 32, 32)


def test_priors_for_subsets(scene):
    assert priors_for(scene, ()) is None
    b = priors_for(scene, ("pose", "depth"))
    assert b.intrinsics is None and len(b.poses) == 2 and len(b.depths) == 2
    with pytest.raises(ValueError):
        priors_for(scene, ("lidar",))


@pytest.mark.parametrize("embedding", ["single_token", "dense"])
def test_predict_outputs_and_facing_normals(scene, embedding):
    torch.manual_seed(0)
    model = ReconstructionModel(ModelConfig(patch_size=8, prior_embedding=embedding, **TINY))
    t = scene_tensors(scene)
    pred = predict(model, t.images, priors_for(scene, ("pose", "intrinsics", "depth")))
    assert pred["depth"].shape == (2, 32, 32) and pred["pointmap"].shape == (2, 32, 32, 3)
    assert len(pred["cameras"].poses) == 2
    for n, k in zip(pred["normals"], pred["cameras"].intrinsics):
        rays = camera_points(np.ones((32, 32)), k)
        assert np.all(np.einsum("hwc,hwc->hw", n, rays) <= 0)
    assert model.training


def test_run_key_tracks_config():
    a = run_key(overfit_config(), [0, 1, 2])
    assert a == run_key(overfit_config(), [0, 1, 2])
    assert a != run_key(overfit_config(lr_scale=2.0), [0, 1, 2])
    assert a != run_key(overfit_config(), [0, 1])
    assert ablation_config(prior_embedding="dense").model.prior_embedding == "dense"
