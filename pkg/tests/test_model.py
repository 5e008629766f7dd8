import numpy as np
import pytest
import torch

from latrack.geometry import Grid
from latrack.model import (FeatureAggregation, LANonLocal, ModelConfig,
                           PositionEmbedding, SiamNet, STRIDE, bilinear_sample,
                           feature_size, load_checkpoint, preprocess,
                           save_checkpoint, xcorr_depthwise, xcorr_full)

TOY = ModelConfig(channels=2, template_size=23, search_size=55,
                  template_feat_crop=3, head_depth=1)


def toy_model(seed=0, **overrides) -> SiamNet:
    torch.manual_seed(seed)
    cfg = ModelConfig(**{**TOY.__dict__, **overrides})
    return SiamNet(cfg)


def brute_xcorr(x, kernel, depthwise):
    """Loop-based sliding-window dot product oracle."""
    b, c, hx, wx = x.shape
    hz, wz = kernel.shape[2:]
    ho, wo = hx - hz + 1, wx - wz + 1
    out = np.zeros((b, c if depthwise else 1, ho, wo))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                window = x[n, :, i:i + hz, j:j + wz]
                prod = window * kernel[n]
                if depthwise:
                    out[n, :, i, j] = prod.sum(axis=(1, 2))
                else:
                    out[n, 0, i, j] = prod.sum()
    return out


class TestShapes:
    def test_default_map_is_25(self):
        torch.manual_seed(0)
        model = SiamNet(ModelConfig())
        assert model.map_size == 25
        out = model(torch.rand(1, 3, 127, 127), torch.rand(1, 3, 255, 255))
        assert out.cls.shape == (1, 1, 25, 25)
        assert out.reg.shape == (1, 4, 25, 25)
        assert out.loc.shape == (1, 1, 25, 25)

    def test_feature_sizes(self):
        assert feature_size(127) == 16
        assert feature_size(255) == 32
        assert feature_size(55) == 7

    def test_wrong_input_sizes_rejected(self):
        model = toy_model()
        with pytest.raises(ValueError):
            model.template(torch.rand(1, 3, 31, 31))
        with pytest.raises(ValueError):
            model(torch.rand(1, 3, 23, 23), torch.rand(1, 3, 60, 60))

    def test_activation_ranges(self):
        model = toy_model()
        out = model(torch.rand(2, 3, 23, 23), torch.rand(2, 3, 55, 55))
        assert torch.all(out.cls > 0) and torch.all(out.cls < 1)
        assert torch.all(out.loc > 0) and torch.all(out.loc < 1)
        assert torch.all(out.reg > 0)

    def test_deterministic_forward(self):
        model = toy_model().eval()
        z, x = torch.rand(1, 3, 23, 23), torch.rand(1, 3, 55, 55)
        with torch.no_grad():
            a, b = model(z, x), model(z, x)
        assert torch.equal(a.cls, b.cls)
        assert torch.equal(a.reg, b.reg)
        assert torch.equal(a.loc, b.loc)


class TestXcorr:
    def test_constant_depthwise(self):
        x = torch.ones(1, 1, 9, 9, dtype=torch.float64)
        k = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        out = xcorr_depthwise(x, k)
        assert out.shape == (1, 1, 6, 6)
        assert torch.all(out == 16.0)

    def test_delta_kernel_reproduces_windows(self):
        x = torch.arange(36, dtype=torch.float64).reshape(1, 1, 6, 6)
        k = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        k[0, 0, 1, 1] = 1.0  # identity stencil
        out = xcorr_depthwise(x, k)
        assert torch.equal(out[0, 0], x[0, 0, 1:5, 1:5])

    def test_depthwise_matches_brute_force(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 8, 9))
        k = rng.normal(size=(2, 3, 4, 3))
        out = xcorr_depthwise(torch.tensor(x), torch.tensor(k)).numpy()
        assert out == pytest.approx(brute_xcorr(x, k, depthwise=True), abs=1e-12)

    def test_full_matches_brute_force(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(2, 3, 3, 3))
        out = xcorr_full(torch.tensor(x), torch.tensor(k)).numpy()
        assert out.shape == (2, 1, 6, 6)
        assert out == pytest.approx(brute_xcorr(x, k, depthwise=False), abs=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            xcorr_depthwise(torch.rand(1, 3, 8, 8), torch.rand(1, 2, 3, 3))
        with pytest.raises(ValueError):
            xcorr_full(torch.rand(1, 3, 8, 8), torch.rand(1, 2, 3, 3))


class TestPositionEmbedding:
    def test_zeroed_expansion_gives_zero_map(self):
        pe = PositionEmbedding(4).double()
        torch.nn.init.zeros_(pe.expand.weight)
        torch.nn.init.zeros_(pe.expand.bias)
        p = pe(torch.rand(1, 3, 3, 3, dtype=torch.float64),
               torch.rand(1, 3, 7, 7, dtype=torch.float64))
        assert torch.all(p == 0)

    def test_output_matches_fused_shape(self):
        model = toy_model()
        z = model.template(torch.rand(1, 3, 23, 23))
        x_feat = model.backbone(torch.rand(1, 3, 55, 55))
        p = model.pos_embed(z, x_feat)
        assert p.shape == (1, TOY.channels, model.map_size, model.map_size)


class TestLANonLocal:
    def test_zero_init_is_identity(self):
        block = LANonLocal(3).double()
        x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        p = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        assert torch.equal(block(x, p), x)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(0)
        block = LANonLocal(3).double()
        x = torch.rand(1, 3, 5, 5, dtype=torch.float64)
        p = torch.rand(1, 3, 5, 5, dtype=torch.float64)
        with torch.no_grad():
            _, attn = block(x, p, return_attn=True)
        assert attn.shape == (1, 25, 25)
        assert attn.sum(dim=-1).numpy() == pytest.approx(np.ones((1, 25)), abs=1e-12)

    @pytest.mark.parametrize("size", [2, 3, 7])
    def test_matches_dense_oracle(self, size):
        """Hand-rolled dense attention from the block's own weights."""
        torch.manual_seed(1)
        block = LANonLocal(2).double()
        torch.nn.init.normal_(block.out.weight)
        torch.nn.init.normal_(block.out.bias)
        x = torch.rand(1, 2, size, size, dtype=torch.float64)
        p = torch.rand(1, 2, size, size, dtype=torch.float64)

        def conv1x1(m, arr):  # arr (N, C) -> (N, C)
            w = m.weight.detach().numpy()[:, :, 0, 0]
            return arr @ w.T + m.bias.detach().numpy()

        n = size * size
        xf = x[0].reshape(2, n).T.numpy()     # (N, C)
        pf = p[0].reshape(2, n).T.numpy()
        q = conv1x1(block.query, xf + pf)
        k = conv1x1(block.key, xf + pf)
        v = conv1x1(block.value, xf)
        logits = q @ k.T
        attn = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn /= attn.sum(axis=1, keepdims=True)
        expected = conv1x1(block.out, attn @ v) + xf

        with torch.no_grad():
            got = block(x, p)[0].reshape(2, n).T.numpy()
        assert got == pytest.approx(expected, abs=1e-10)

    def test_shape_mismatch_rejected(self):
        block = LANonLocal(2)
        with pytest.raises(ValueError):
            block(torch.rand(1, 2, 4, 4), torch.rand(1, 2, 3, 3))


class TestFeatureAggregation:
    GRID = Grid(5, 5, 8.0, 11.0)

    def test_degenerate_box_uses_center_feature_five_times(self):
        torch.manual_seed(2)
        agg = FeatureAggregation(3).double()
        feat = torch.rand(1, 3, 5, 5, dtype=torch.float64)
        # all offsets zero: box collapses onto each grid point
        pts = np.stack(np.meshgrid(np.arange(5) * 8.0 + 11.0,
                                   np.arange(5) * 8.0 + 11.0), axis=-1)
        boxes = np.concatenate([pts, pts], axis=-1)  # (5, 5, 4), x1=x2, y1=y2
        out = agg(feat, torch.tensor(boxes).unsqueeze(0), self.GRID)
        stacked = feat.repeat(1, 5, 1, 1)  # five copies of the center feature
        expected = torch.nn.functional.conv2d(stacked, agg.fuse.weight, agg.fuse.bias)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_constant_feature_invariance(self):
        torch.manual_seed(3)
        agg = FeatureAggregation(2).double()
        feat = torch.full((1, 2, 5, 5), 0.7, dtype=torch.float64)
        rng = np.random.default_rng(4)
        boxes = rng.uniform(0, 50, size=(1, 5, 5, 4))
        boxes[..., 2:] = boxes[..., :2] + rng.uniform(1, 30, size=(1, 5, 5, 2))
        out_a = agg(feat, torch.tensor(boxes), self.GRID)
        pts = np.stack(np.meshgrid(np.arange(5) * 8.0 + 11.0,
                                   np.arange(5) * 8.0 + 11.0), axis=-1)
        degenerate = np.concatenate([pts, pts], axis=-1)[None]
        out_b = agg(feat, torch.tensor(degenerate), self.GRID)
        assert torch.allclose(out_a, out_b, atol=1e-12)

    def test_bilinear_matches_oracle(self):
        rng = np.random.default_rng(5)
        feat = rng.normal(size=(1, 3, 6, 7))
        px = rng.uniform(-2, 9, size=(1, 40))   # includes out-of-range coords
        py = rng.uniform(-2, 8, size=(1, 40))
        got = bilinear_sample(torch.tensor(feat), torch.tensor(px), torch.tensor(py)).numpy()

        def oracle_at(c, x, y):
            x = min(max(x, 0.0), 6.0)
            y = min(max(y, 0.0), 5.0)
            x0 = min(int(np.floor(x)), 5)
            y0 = min(int(np.floor(y)), 4)
            wx, wy = x - x0, y - y0
            f = feat[0, c]
            return (f[y0, x0] * (1 - wx) * (1 - wy) + f[y0, x0 + 1] * wx * (1 - wy)
                    + f[y0 + 1, x0] * (1 - wx) * wy + f[y0 + 1, x0 + 1] * wx * wy)

        for c in range(3):
            for n in range(40):
                assert got[0, c, n] == pytest.approx(oracle_at(c, px[0, n], py[0, n]),
                                                     abs=1e-12)

    def test_aggregation_matches_pointwise_oracle(self):
        torch.manual_seed(6)
        agg = FeatureAggregation(2).double()
        rng = np.random.default_rng(7)
        feat = rng.normal(size=(1, 2, 5, 5))
        boxes = np.zeros((1, 5, 5, 4))
        boxes[..., 0] = rng.uniform(5, 30, (1, 5, 5))
        boxes[..., 1] = rng.uniform(5, 30, (1, 5, 5))
        boxes[..., 2] = boxes[..., 0] + rng.uniform(4, 25, (1, 5, 5))
        boxes[..., 3] = boxes[..., 1] + rng.uniform(4, 25, (1, 5, 5))
        out = agg(torch.tensor(feat), torch.tensor(boxes), self.GRID).detach().numpy()

        w = agg.fuse.weight.detach().numpy()[:, :, 0, 0]
        bias = agg.fuse.bias.detach().numpy()
        ft = torch.tensor(feat)
        for i in range(5):
            for j in range(5):
                x1, y1, x2, y2 = boxes[0, i, j]
                pts = [((x1 + x2) / 2, (y1 + y2) / 2), (x1, y1), (x2, y1),
                       (x2, y2), (x1, y2)]
                gathered = []
                for px, py in pts:
                    u = (px - self.GRID.origin) / self.GRID.stride
                    v = (py - self.GRID.origin) / self.GRID.stride
                    s = bilinear_sample(ft, torch.tensor([[u]]), torch.tensor([[v]]))
                    gathered.append(s[0, :, 0].numpy())
                expected = w @ np.concatenate(gathered) + bias
                assert out[0, :, i, j] == pytest.approx(expected, abs=1e-12)


class TestWiring:
    # train mode: batch-stat BatchNorm keeps a fresh toy net's activations
    # alive, so the dependency checks are not vacuous

    def test_loc_branch_consumes_regression(self):
        model = toy_model().train()
        z, x = torch.rand(1, 3, 23, 23), torch.rand(1, 3, 55, 55)
        with torch.no_grad():
            before = model(z, x).loc.clone()
            model.reg_head.bias.add_(0.5)
            after = model(z, x).loc
        assert not torch.equal(before, after)

    def test_loc_branch_is_separate_from_cls(self):
        model = toy_model().train()
        z, x = torch.rand(1, 3, 23, 23), torch.rand(1, 3, 55, 55)
        with torch.no_grad():
            before = model(z, x).loc.clone()
            for p in model.cls_tower.parameters():
                p.zero_()
            model.cls_head.weight.zero_()
            model.cls_head.bias.zero_()
            after = model(z, x).loc
        assert torch.equal(before, after)

    def test_centerness_mode_shares_cls_tower(self):
        model = toy_model(loc_mode="centerness").train()
        z, x = torch.rand(1, 3, 23, 23), torch.rand(1, 3, 55, 55)
        with torch.no_grad():
            before = model(z, x).loc.clone()
            for p in model.cls_tower.parameters():
                p.add_(0.25)
            after = model(z, x).loc
        assert not torch.equal(before, after)

    def test_decode_boxes_matches_grid(self):
        model = toy_model()
        reg = torch.full((1, 4, model.map_size, model.map_size), 5.0)
        boxes = model.decode_boxes(reg)[0].numpy()
        px, py = model.grid.point(0, 0)
        assert boxes[0, 0].tolist() == [px - 5, py - 5, px + 5, py + 5]


class TestCheckpoint:
    def test_roundtrip_identical_outputs_and_bytes(self, tmp_path):
        model = toy_model(seed=11)
        path = str(tmp_path / "model.ckpt")
        rng = np.random.default_rng(3)
        save_checkpoint(path, model, {"note_key": 1}, rng={"torch": "00"})
        loaded, header = load_checkpoint(path)
        assert header["config"]["channels"] == TOY.channels
        assert header["config"]["note_key"] == 1

        z, x = torch.rand(1, 3, 23, 23), torch.rand(1, 3, 55, 55)
        model.eval(), loaded.eval()
        with torch.no_grad():
            a, b = model(z, x), loaded(z, x)
        assert torch.equal(a.cls, b.cls)
        assert torch.equal(a.reg, b.reg)
        assert torch.equal(a.loc, b.loc)

        path2 = str(tmp_path / "model2.ckpt")
        save_checkpoint(path2, loaded, {"note_key": 1}, rng={"torch": "00"})
        assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "model2.ckpt").read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(str(path))


class TestEndToEndGradients:
    def test_model_gradcheck_under_tolerance(self):
        from latrack.losses import gradient_suite

        rows = {row.name: row for row in gradient_suite(seed=3)}
        row = rows["total_objective_model"]
        assert row.max_rel_err < 1e-3


def test_preprocess_scales_and_orders_axes():
    img = np.zeros((4, 5, 3), dtype=np.uint8)
    img[1, 2] = (255, 0, 128)
    t = preprocess(img)
    assert t.shape == (1, 3, 4, 5)
    assert t[0, 0, 1, 2] == 1.0
    assert float(t[0, 2, 1, 2]) == pytest.approx(128 / 255)
