import numpy as np
import pytest
import torch

from tempeq.encoder import (
    EncoderConfig,
    EquivarianceModel,
    VideoBackbone,
    load_model,
    save_model,
)

TINY = EncoderConfig(clip_len=8, input_resolution=16, stage_widths=(4, 4, 8, 8))


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return EquivarianceModel(TINY)


class TestBackbone:
    def test_shape_contract(self, tiny_model):
        clips = torch.rand(2, 3, 8, 16, 16)
        emb = tiny_model.backbone_forward(clips)
        assert emb.shape == (2, TINY.embed_dim)

    def test_default_embed_dim(self):
        assert EncoderConfig().embed_dim == 128

    def test_zero_input_finite(self, tiny_model):
        tiny_model.eval()
        emb = tiny_model.backbone_forward(torch.zeros(1, 3, 8, 16, 16))
        assert torch.isfinite(emb).all()

    def test_shape_mismatch(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.backbone_forward(torch.rand(3, 8, 16, 16))

    def test_deterministic_in_eval(self, tiny_model):
        tiny_model.eval()
        clips = torch.rand(2, 3, 8, 16, 16)
        a = tiny_model.backbone_forward(clips)
        b = tiny_model.backbone_forward(clips)
        assert torch.equal(a, b)

    def test_finite_outputs_random_seeds(self):
        for seed in range(3):
            torch.manual_seed(seed)
            model = EquivarianceModel(TINY)
            model.eval()
            clips = torch.rand(2, 3, 8, 16, 16)
            emb = model.backbone_forward(clips)
            assert torch.isfinite(emb).all()
            assert torch.isfinite(model.phi_forward(emb)).all()
            assert torch.isfinite(model.psi_forward(emb, emb.flip(0))).all()

    def test_translation_equivariance_by_total_stride(self):
        # the total spatial stride is 16; shifting the input by 16 px shifts
        # the pre-pool feature map by one position. Convs are bias-free and
        # batch-norm is identity at init in eval mode, so a zero background
        # stays exactly zero and the comparison is exact up to float error.
        torch.manual_seed(1)
        backbone = VideoBackbone(EncoderConfig(clip_len=8, input_resolution=64,
                                               stage_widths=(4, 8, 8, 8)))
        backbone.eval()
        stride = 16
        x = torch.zeros(1, 3, 8, 64, 96)
        content = torch.rand(3, 8, 64, 32)
        x[0, :, :, :, 16 : 16 + 32] = content
        x_shift = torch.zeros_like(x)
        x_shift[0, :, :, :, 16 + stride : 16 + stride + 32] = content
        with torch.no_grad():
            f = backbone.forward_features(x)
            f_shift = backbone.forward_features(x_shift)
        assert torch.allclose(f[..., :-1], f_shift[..., 1:], atol=2e-4)
        pooled = f.mean(dim=(2, 3, 4))
        pooled_shift = f_shift.mean(dim=(2, 3, 4))
        assert torch.allclose(pooled, pooled_shift, atol=2e-4)


class TestProjections:
    def test_psi_order_sensitive(self, tiny_model):
        torch.manual_seed(2)
        a = torch.rand(1, TINY.embed_dim)
        b = torch.rand(1, TINY.embed_dim)
        assert not torch.allclose(tiny_model.psi_forward(a, b),
                                  tiny_model.psi_forward(b, a))

    def test_zero_input_linearity(self):
        torch.manual_seed(3)
        model = EquivarianceModel(TINY)
        model.eval()
        for layer in list(model.psi) + list(model.phi):
            if hasattr(layer, "bias") and layer.bias is not None:
                torch.nn.init.zeros_(layer.bias)
        d = TINY.embed_dim
        zero = torch.zeros(1, d)
        assert torch.allclose(model.psi_forward(zero, zero), torch.zeros(1, d))
        assert torch.allclose(model.phi_forward(zero), torch.zeros(1, d))

    def test_no_parameter_sharing(self, tiny_model):
        ids = lambda module: {id(p) for p in module.parameters()}
        groups = [ids(tiny_model.psi), ids(tiny_model.phi), ids(tiny_model.speed_head),
                  ids(tiny_model.direction_head), ids(tiny_model.overlap_head)]
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                assert not (groups[i] & groups[j])

    @pytest.mark.parametrize("which", ["psi", "phi"])
    def test_jacobian_matches_finite_differences(self, which):
        torch.manual_seed(4)
        model = EquivarianceModel(TINY).double()
        model.eval()
        d = TINY.embed_dim

        if which == "psi":
            fn = lambda v: model.psi_forward(v[None, :d], v[None, d:])[0]
            x = torch.randn(2 * d, dtype=torch.float64)
        else:
            fn = lambda v: model.phi_forward(v[None, :])[0]
            x = torch.randn(d, dtype=torch.float64)

        jac = torch.autograd.functional.jacobian(fn, x)
        eps = 1e-6
        rng = np.random.default_rng(0)
        for _ in range(10):
            i = rng.integers(jac.shape[0])
            j = rng.integers(jac.shape[1])
            hi, lo = x.clone(), x.clone()
            hi[j] += eps
            lo[j] -= eps
            with torch.no_grad():
                fd = float(fn(hi)[i] - fn(lo)[i]) / (2 * eps)
            ana = float(jac[i, j])
            denom = max(abs(fd), abs(ana), 1e-6)
            assert abs(fd - ana) / denom < 1e-4


class TestHeads:
    def test_logit_lengths(self, tiny_model):
        e = torch.rand(3, TINY.embed_dim)
        assert tiny_model.head_speed(e).shape == (3, 4)
        assert tiny_model.head_direction(e).shape == (3, 2)
        assert tiny_model.head_overlap(e, e).shape == (3, 3)

    def test_softmax_normalized(self, tiny_model):
        e = torch.rand(5, TINY.embed_dim)
        for logits in (tiny_model.head_speed(e), tiny_model.head_direction(e),
                       tiny_model.head_overlap(e, e)):
            probs = torch.softmax(logits, dim=1)
            assert torch.allclose(probs.sum(dim=1), torch.ones(5), atol=1e-6)

    def test_cross_entropy_gradient_finite_differences(self):
        torch.manual_seed(5)
        model = EquivarianceModel(TINY).double()
        model.eval()
        e = torch.randn(4, TINY.embed_dim, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 1, 2, 3])
        loss = torch.nn.functional.cross_entropy(model.head_speed(e), labels)
        loss.backward()
        eps = 1e-6
        rng = np.random.default_rng(1)
        with torch.no_grad():
            for _ in range(8):
                i, j = rng.integers(4), rng.integers(TINY.embed_dim)
                hi, lo = e.clone(), e.clone()
                hi[i, j] += eps
                lo[i, j] -= eps
                fd = float(
                    torch.nn.functional.cross_entropy(model.head_speed(hi), labels)
                    - torch.nn.functional.cross_entropy(model.head_speed(lo), labels)
                ) / (2 * eps)
                ana = float(e.grad[i, j])
                assert abs(fd - ana) / max(abs(fd), abs(ana), 1e-8) < 1e-4


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, tiny_model):
        path = tmp_path / "model.pt"
        save_model(path, tiny_model, step=7)
        restored, payload = load_model(path)
        assert payload["step"] == 7
        for (n1, p1), (n2, p2) in zip(tiny_model.state_dict().items(),
                                      restored.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="corrupt"):
            load_model(path)
