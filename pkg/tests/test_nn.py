import numpy as np
import pytest

from sim2real import autodiff as ad
from sim2real import nn
from sim2real.autodiff import Tensor


class TestLayers:
    def test_dense_identity(self):
        layer = nn.dense(3, 3, "none", seed=0, name="d")
        layer.params["w"].data = np.eye(3, dtype=np.float32)
        x = Tensor(np.random.default_rng(0).random((4, 3)).astype(np.float32))
        np.testing.assert_allclose(layer(x).data, x.data, rtol=1e-6)

    def test_conv_shape_rule(self):
        layer = nn.conv(4, 16, kernel=3, stride=2, padding=1, activation="relu", seed=0, name="c")
        x = Tensor(np.zeros((2, 4, 32, 64), np.float32))
        assert layer(x).shape == (2, 16, 16, 32)

    def test_deconv_inverts_conv_geometry(self):
        down = nn.conv(4, 8, 3, 2, 1, "none", seed=0, name="c")
        up = nn.deconv(8, 4, 3, 2, 1, output_padding=1, activation="none", seed=1, name="d")
        x = Tensor(np.zeros((1, 4, 32, 64), np.float32))
        y = down(x)
        assert y.shape == (1, 8, 16, 32)
        assert up(y).shape == (1, 4, 32, 64)

    @pytest.mark.parametrize("kernel", [1, 2, 3, 4])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("padding", [0, 1])
    def test_conv_deconv_shape_roundtrip(self, kernel, stride, padding):
        h, w = 12, 10
        if h + 2 * padding < kernel:
            pytest.skip("kernel larger than padded input")
        y_h = ad.conv_out_size(h, kernel, stride, padding)
        y_w = ad.conv_out_size(w, kernel, stride, padding)
        if y_h < 1 or y_w < 1:
            pytest.skip("degenerate output")
        down = nn.Layer(nn.LayerSpec("conv2d", in_channels=2, out_channels=3, kernel=kernel,
                                     stride=stride, padding=padding), 0, "c")
        op_h = (h + 2 * padding - kernel) % stride
        op_w = (w + 2 * padding - kernel) % stride
        if op_h != op_w:
            pytest.skip("anisotropic output padding not expressible in a square spec")
        up = nn.Layer(nn.LayerSpec("deconv2d", in_channels=3, out_channels=2, kernel=kernel,
                                   stride=stride, padding=padding, output_padding=op_h), 1, "d")
        x = Tensor(np.zeros((1, 2, h, w), np.float32))
        assert up(down(x)).shape == (1, 2, h, w)

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            nn.LayerSpec("dense", fan_in=3, fan_out=2, activation="gelu")
        with pytest.raises(ValueError):
            nn.LayerSpec("conv2d", kernel=0)
        with pytest.raises(ValueError):
            nn.LayerSpec("pool2d")

    def test_dense_input_mismatch(self):
        layer = nn.dense(3, 2, "none", seed=0, name="d")
        with pytest.raises(ad.ShapeMismatchError):
            layer(Tensor(np.zeros((4, 5), np.float32)))

    @pytest.mark.parametrize("seed", range(3))
    def test_layer_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3)).astype(np.float64), requires_grad=False)
        layer = nn.dense(3, 4, "tanh", seed=seed, name="d", dtype=np.float64)
        for p in layer.params.values():
            assert ad.grad_check(lambda t, p=p: ad.tsum(ad.square(layer(x))), p) < 1e-4

        xc = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float64), requires_grad=False)
        clayer = nn.conv(3, 4, 3, 2, 1, "sigmoid", seed=seed, name="c", dtype=np.float64)
        for p in clayer.params.values():
            assert ad.grad_check(lambda t, p=p: ad.tsum(ad.square(clayer(xc))), p) < 1e-4

        xd = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float64), requires_grad=False)
        dlayer = nn.deconv(4, 2, 3, 2, 1, 1, "relu", seed=seed, name="u", dtype=np.float64)
        for p in dlayer.params.values():
            assert ad.grad_check(lambda t, p=p: ad.tsum(ad.square(dlayer(xd))), p) < 1e-4


class TestLstm:
    def test_zero_params_zero_state(self):
        cell = nn.LstmCell(5, 4, seed=0)
        cell.params["w"].data[:] = 0
        cell.params["b"].data[:] = 0
        x = Tensor(np.zeros((2, 5), np.float32))
        h, (h2, c2) = cell(x, cell.zero_state(2))
        np.testing.assert_array_equal(h.data, 0)
        np.testing.assert_array_equal(c2.data, 0)

    def test_forget_gate_saturation_preserves_cell(self):
        cell = nn.LstmCell(3, 4, seed=0)
        cell.params["w"].data[:] = 0
        b = np.zeros(16, np.float32)
        b[4:8] = 50.0  # forget gate saturated at 1
        cell.params["b"].data = b
        c0 = np.random.default_rng(0).normal(size=(2, 4)).astype(np.float32)
        state = (Tensor(np.zeros((2, 4), np.float32)), Tensor(c0.copy()))
        x = Tensor(np.zeros((2, 3), np.float32))
        for _ in range(5):
            _, state = cell(x, state)
        np.testing.assert_allclose(state[1].data, c0, atol=1e-6)

    def test_gradients_through_unrolled_steps(self):
        rng = np.random.default_rng(3)
        cell = nn.LstmCell(3, 4, seed=3, dtype=np.float64)
        xs = [Tensor(rng.normal(size=(2, 3)).astype(np.float64)) for _ in range(3)]

        def loss_fn(_):
            state = cell.zero_state(2)
            out = None
            for x in xs:
                out, state = cell(x, state)
            return ad.tsum(ad.square(out))

        for p in cell.params.values():
            assert ad.grad_check(loss_fn, p) < 1e-4

    def test_dimension_mismatch(self):
        cell = nn.LstmCell(3, 4, seed=0)
        with pytest.raises(ad.ShapeMismatchError):
            cell(Tensor(np.zeros((2, 3), np.float32)),
                 (Tensor(np.zeros((5, 4), np.float32)), Tensor(np.zeros((5, 4), np.float32))))


class TestInit:
    def test_same_seed_bit_identical(self):
        a = nn.init_params(nn.LayerSpec("dense", fan_in=10, fan_out=20), 7)
        b = nn.init_params(nn.LayerSpec("dense", fan_in=10, fan_out=20), 7)
        np.testing.assert_array_equal(a["w"].data, b["w"].data)

    def test_weight_variance_matches_uniform_law(self):
        p = nn.init_params(nn.LayerSpec("dense", fan_in=100, fan_out=100), 0)
        expected = 2.0 / 200.0  # range^2/12 with range 2*sqrt(6/200)
        assert np.var(p["w"].data) == pytest.approx(expected, rel=0.2)

    def test_biases_exactly_zero(self):
        for spec in [nn.LayerSpec("dense", fan_in=4, fan_out=3),
                     nn.LayerSpec("conv2d", in_channels=2, out_channels=5, kernel=3),
                     nn.LayerSpec("lstm", fan_in=4, fan_out=3)]:
            p = nn.init_params(spec, 1)
            np.testing.assert_array_equal(p["b"].data, 0.0)


class TestAdam:
    def test_zero_gradient_no_update(self):
        p = Tensor(np.ones(4, np.float32), requires_grad=True)
        opt = nn.Adam({"p": p}, lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, np.ones(4))

    def test_first_step_is_lr_sized_sign_step(self):
        p = Tensor(np.zeros(3, np.float32), requires_grad=True)
        p._grad = np.array([0.5, -2.0, 10.0], np.float32)
        opt = nn.Adam({"p": p}, lr=1e-3)
        opt.step()
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3, -1e-3], rtol=1e-4)

    def test_second_identical_step_not_larger_than_lr(self):
        p = Tensor(np.zeros(3, np.float32), requires_grad=True)
        g = np.array([0.5, -2.0, 10.0], np.float32)
        opt = nn.Adam({"p": p}, lr=1e-3)
        p._grad = g.copy()
        opt.step()
        before = p.data.copy()
        p._grad = g.copy()
        opt.step()
        assert np.all(np.abs(p.data - before) <= 1e-3 * 1.001)

    def test_scalar_quadratic_convergence(self):
        x = Tensor(np.array([0.0], np.float32), requires_grad=True)
        opt = nn.Adam({"x": x}, lr=0.1)
        for _ in range(500):
            loss = ad.tsum(ad.square(ad.sub(x, 3.0)))
            ad.backward(loss)
            opt.step()
        assert abs(x.data[0] - 3.0) < 1e-2

    def test_grads_zeroed_after_step(self):
        p = Tensor(np.zeros(2, np.float32), requires_grad=True)
        p._grad = np.ones(2, np.float32)
        nn.Adam({"p": p}).step()
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_non_finite_gradient_aborts(self):
        p = Tensor(np.zeros(2, np.float32), requires_grad=True)
        p._grad = np.array([1.0, np.nan], np.float32)
        with pytest.raises(nn.TrainingDiverged):
            nn.Adam({"p": p}).step()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "enc.w": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
            "enc.b": rng.normal(size=4).astype(np.float32),
            "scalarish": rng.normal(size=(1,)).astype(np.float32),
        }
        path = tmp_path / "model.nnck"
        nn.save_checkpoint(path, tensors)
        loaded, cfg = nn.load_checkpoint(path)
        assert cfg is None
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert loaded[k].dtype == np.float32
            np.testing.assert_array_equal(loaded[k], tensors[k])

    def test_config_text_round_trip(self, tmp_path):
        path = tmp_path / "model.nnck"
        cfg = "train.lr = 0.001\nscene.board_w_cm = 45\n"
        nn.save_checkpoint(path, {"w": np.zeros(2, np.float32)}, config_text=cfg)
        _, loaded_cfg = nn.load_checkpoint(path)
        assert loaded_cfg == cfg

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.nnck"
        path.write_bytes(b"XRGB" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            nn.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "model.nnck"
        nn.save_checkpoint(path, {"w": np.arange(8, dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(ValueError, match="truncated"):
            nn.load_checkpoint(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "model.nnck"
        nn.save_checkpoint(path, {"w": np.zeros(2, np.float32)})
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            nn.load_checkpoint(path)

    def test_assign_state_validates_names_and_shapes(self, tmp_path):
        params = {"w": Tensor(np.zeros((2, 2), np.float32), requires_grad=True)}
        with pytest.raises(ValueError, match="missing"):
            nn.assign_state(params, {})
        with pytest.raises(ValueError, match="shape"):
            nn.assign_state(params, {"w": np.zeros((3, 3), np.float32)})
