import pytest
import torch

from bmitrainer.model import BmiRegressor, ModelSpec, SqueezeExcite, build_model


class TestSqueezeExcite:
    def test_output_shape_equals_input(self):
        se = SqueezeExcite(16, reduction=4)
        x = torch.randn(2, 16, 7, 5)
        assert se(x).shape == x.shape

    def test_gate_weights_in_open_unit_interval(self):
        torch.manual_seed(0)
        se = SqueezeExcite(32, reduction=8)
        gate = se.gate(torch.randn(4, 32, 6, 6))
        assert gate.shape == (4, 32, 1, 1)
        assert torch.all(gate > 0) and torch.all(gate < 1)

    def test_forced_identity_is_exact_passthrough(self):
        se = SqueezeExcite(8)
        se.force_identity = True
        x = torch.randn(1, 8, 4, 4)
        assert torch.equal(se(x), x)

    def test_bottleneck_dimensions(self):
        se = SqueezeExcite(64, reduction=16)
        assert se.reduce.out_channels == 4
        assert se.expand.out_channels == 64
        # reduction larger than channels still leaves at least one unit
        assert SqueezeExcite(4, reduction=16).reduce.out_channels == 1


class TestBuildModel:
    def test_tiny_output_shape(self):
        torch.manual_seed(0)
        model = build_model(ModelSpec(backbone="tiny", se_reduction=4)).eval()
        out = model(torch.randn(2, 3, 64, 64))
        assert out.shape == (2, 1)
        assert torch.all(torch.isfinite(out))

    def test_densenet121_output_shape(self):
        torch.manual_seed(0)
        model = build_model(ModelSpec(backbone="densenet121")).eval()
        out = model(torch.randn(2, 3, 64, 64))
        assert out.shape == (2, 1)
        assert torch.all(torch.isfinite(out))

    def test_densenet_has_se_after_each_transition(self):
        model = build_model(ModelSpec(backbone="densenet121"))
        names = [name for name, _ in model.features.named_children()]
        for i in (1, 2, 3):
            assert f"transition{i}" in names
            assert names[names.index(f"transition{i}") + 1] == f"se{i}"
        assert len(model.se_modules()) == 3

    def test_unknown_backbone_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(backbone="resnet50")

    def test_bad_reduction_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(se_reduction=0)


class TestSeAblationOracle:
    @pytest.mark.parametrize("backbone,size", [("tiny", 64), ("densenet121", 64)])
    def test_forced_identity_matches_ungated_backbone(self, backbone, size):
        torch.manual_seed(1)
        model = build_model(ModelSpec(backbone=backbone, se_reduction=8)).eval()
        x = torch.randn(2, 3, size, size)
        with torch.no_grad():
            skipped = model.forward_without_se(x)
            model.set_se_identity(True)
            gated_off = model(x)
            model.set_se_identity(False)
            gated_on = model(x)
        assert torch.allclose(gated_off, skipped, atol=1e-5)
        # and the gate genuinely does something when enabled
        assert not torch.allclose(gated_on, skipped, atol=1e-5)
