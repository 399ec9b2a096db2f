import json
from pathlib import Path

import numpy as np
import torch

from bmitrainer.export import export_model, load_artifact, read_artifact_metadata
from bmitrainer.fixtures import fixture_inputs, make_parity_fixtures, parity_image
from bmitrainer.model import ModelSpec, build_model

# committed alongside the curation pipeline's test suite
COMMITTED_FIXTURES = Path(__file__).parents[2] / "tests" / "fixtures"


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return build_model(ModelSpec(backbone="tiny", se_reduction=4)).eval()


class TestExport:
    def test_roundtrip_outputs_match_eager(self, tmp_path):
        model = tiny_model()
        path = export_model(model, tmp_path / "model.pt2")
        loaded = load_artifact(path)
        x = torch.randn(8, 3, 224, 224, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            eager = model(x)
            exported = loaded(x)
        assert (eager - exported).abs().max().item() < 1e-6

    def test_dynamic_batch_sizes(self, tmp_path):
        path = export_model(tiny_model(), tmp_path / "model.pt2")
        loaded = load_artifact(path)
        for n in (1, 3, 32):
            with torch.no_grad():
                out = loaded(torch.zeros(n, 3, 224, 224))
            assert out.shape == (n, 1)

    def test_metadata_roundtrip(self, tmp_path):
        model = tiny_model()
        path = export_model(model, tmp_path / "model.pt2", metadata={"note": "fixture"})
        meta = read_artifact_metadata(path)
        assert meta["backbone"] == "tiny"
        assert meta["se_reduction"] == 4
        assert meta["input_size"] == 224
        assert meta["note"] == "fixture"
        assert meta["pretrained_init"] is False


class TestFixtureGeneration:
    def test_regeneration_matches_committed_fixtures(self, tmp_path):
        committed = json.loads((COMMITTED_FIXTURES / "parity_outputs.json").read_text())
        make_parity_fixtures(tmp_path)
        regenerated = json.loads((tmp_path / "parity_outputs.json").read_text())
        assert regenerated["input_recipe"] == committed["input_recipe"]
        drift = np.abs(np.asarray(regenerated["outputs"])
                       - np.asarray(committed["outputs"])).max()
        assert drift < 1e-6
        tensor_new = np.load(tmp_path / "parity_tensor.npz")["tensor"]
        tensor_old = np.load(COMMITTED_FIXTURES / "parity_tensor.npz")["tensor"]
        assert np.array_equal(tensor_new, tensor_old)

    def test_fixture_inputs_are_deterministic(self):
        assert np.array_equal(fixture_inputs(), fixture_inputs())

    def test_parity_image_deterministic(self):
        a = np.asarray(parity_image())
        b = np.asarray(parity_image())
        assert np.array_equal(a, b)
        assert a.shape == (144, 192, 3)
