import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from streetfield.dataset import Camera
from streetfield.field import AffineColorMap, FieldConfig, HashGridConfig, SceneField, identity_map
from streetfield.render import (
    SampleSet,
    composite,
    compute_weights,
    render_image,
    render_rays,
    sample_ray,
    transmittance,
)

densities = arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 50))


def single(t, deltas):
    t = torch.as_tensor(t, dtype=torch.float64)[None]
    d = torch.as_tensor(deltas, dtype=torch.float64)[None]
    return SampleSet(t=t, deltas=d, variance=(d / 2) ** 2)


class TestSampling:
    def test_midpoints(self):
        s = sample_ray(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64), 2)
        assert s.t.tolist() == [[0.25, 0.75]]
        assert s.deltas.tolist() == [[0.5, 0.5]]
        assert s.variance.tolist() == [[0.0625, 0.0625]]

    def test_zero_samples_rejected(self):
        with pytest.raises(ValueError):
            sample_ray(torch.zeros(1), torch.ones(1), 0)

    @given(st.floats(0, 10), st.floats(0.01, 10), st.integers(1, 64), st.integers(0, 2**31))
    def test_stratified_samples_stay_in_their_interval(self, near, length, k, seed):
        g = torch.Generator().manual_seed(seed)
        n = torch.tensor([near], dtype=torch.float64)
        s = sample_ray(n, n + length, k, g, stratified=True)
        edges = near + length * torch.arange(k + 1, dtype=torch.float64) / k
        assert torch.all(s.t[0] >= edges[:-1] - 1e-12) and torch.all(s.t[0] <= edges[1:] + 1e-12)
        assert torch.all(s.deltas > 0)
        assert torch.all(s.t[0, 1:] > s.t[0, :-1])

    def test_seeded_sampling_repeats(self):
        a = sample_ray(torch.zeros(3), torch.ones(3), 8, torch.Generator().manual_seed(1), True)
        b = sample_ray(torch.zeros(3), torch.ones(3), 8, torch.Generator().manual_seed(1), True)
        assert torch.equal(a.t, b.t)


class TestWeights:
    def test_empty_medium(self):
        w = compute_weights(torch.zeros(1, 5), torch.full((1, 5), 0.2))
        assert torch.all(w == 0)

    def test_single_sample_half(self):
        w = compute_weights(torch.tensor([[math.log(2.0)]], dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64))
        assert w.item() == pytest.approx(0.5, abs=1e-15)

    def test_homogeneous_unit_density(self):
        d = torch.full((1, 128), 1 / 128, dtype=torch.float64)
        w = compute_weights(torch.ones(1, 128, dtype=torch.float64), d)
        assert w.sum().item() == pytest.approx(1 - math.exp(-1), abs=1e-12)
        assert w.sum().item() == pytest.approx(0.632121, abs=1e-6)

    def test_negative_density_rejected(self):
        with pytest.raises(ValueError):
            compute_weights(torch.tensor([[0.1, -0.1]]), torch.ones(1, 2))

    @given(densities, st.floats(1e-3, 2.0))
    def test_telescoping_and_bounds(self, sig, width):
        s = torch.as_tensor(sig)[None]
        d = torch.full_like(s, width)
        w = compute_weights(s, d)
        assert torch.all(w >= 0)
        assert w.sum().item() <= 1 + 1e-12  # exact bound, up to 64-bit rounding
        assert w.sum().item() == pytest.approx(1 - math.exp(-(sig * width).sum()), abs=1e-12)
        tr = transmittance(s, d)[0]
        assert torch.all(tr[1:] <= tr[:-1])


class TestComposite:
    def test_empty_foreground_is_sky(self):
        s = single([0.2, 0.5, 0.8], [0.3, 0.3, 0.3])
        sky = torch.tensor([[0.1, 0.4, 0.9]], dtype=torch.float64)
        out = composite(s, torch.zeros(1, 3, dtype=torch.float64), torch.rand(1, 3, 3, dtype=torch.float64),
                        sky, identity_map(1, torch.float64), torch.tensor([1.0], dtype=torch.float64))
        assert torch.equal(out.color, sky)
        assert out.opacity.item() == 0 and out.depth.item() == 1.0

    def test_opaque_first_sample(self):
        s = single([0.2, 0.5], [0.3, 0.3])
        colors = torch.tensor([[[0.9, 0.1, 0.3], [0.0, 1.0, 0.0]]], dtype=torch.float64)
        sky = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        out = composite(s, torch.tensor([[1e3, 1.0]], dtype=torch.float64), colors, sky,
                        identity_map(1, torch.float64), torch.tensor([1.0], dtype=torch.float64))
        torch.testing.assert_close(out.color[0], colors[0, 0], atol=1e-6, rtol=0)
        assert out.depth.item() == pytest.approx(0.2, abs=1e-9)
        assert (1 - out.opacity.item()) < 1e-6

    def test_two_sample_hand_example(self):
        # weights (0.5, 0.25): tau1 = ln 2, then T2 = 0.5 and alpha2 = 0.5
        s = single([0.25, 0.75], [0.5, 0.5])
        sig = torch.tensor([[2 * math.log(2), 2 * math.log(2)]], dtype=torch.float64)
        colors = torch.tensor([[[1.0, 0, 0], [0, 1.0, 0]]], dtype=torch.float64)
        sky = torch.tensor([[0.0, 0, 1.0]], dtype=torch.float64)
        out = composite(s, sig, colors, sky, identity_map(1, torch.float64), torch.tensor([1.0], dtype=torch.float64))
        torch.testing.assert_close(out.weights[0], torch.tensor([0.5, 0.25], dtype=torch.float64))
        torch.testing.assert_close(out.color[0], torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64))

    def test_length_mismatch(self):
        s = single([0.2, 0.5], [0.3, 0.3])
        with pytest.raises(ValueError):
            composite(s, torch.zeros(1, 3), torch.zeros(1, 2, 3), torch.zeros(1, 3), identity_map(1),
                      torch.ones(1))

    @given(densities, st.integers(0, 1000))
    def test_zero_sky_identity_map_is_weighted_sum(self, sig, seed):
        g = torch.Generator().manual_seed(seed)
        k = len(sig)
        t = torch.linspace(0.1, 2.0, k, dtype=torch.float64)
        s = single(t, torch.full((k,), 0.05, dtype=torch.float64))
        c = torch.rand(1, k, 3, generator=g, dtype=torch.float64)
        out = composite(s, torch.as_tensor(sig)[None], c, torch.zeros(1, 3, dtype=torch.float64),
                        identity_map(1, torch.float64), torch.tensor([2.1], dtype=torch.float64))
        w = out.weights[0].numpy()
        want = sum(w[i] * c[0, i].numpy() for i in range(k))
        np.testing.assert_allclose(out.color[0].numpy(), want, atol=1e-13)
        if out.opacity.item() > 1e-8:
            assert t[0] - 1e-12 <= out.depth.item() <= t[-1] + 1e-12

    def test_affine_map_applies_to_foreground_only(self):
        s = single([0.25, 0.75], [0.5, 0.5])
        sig = torch.tensor([[0.7, 1.3]], dtype=torch.float64)
        colors = torch.rand(1, 2, 3, dtype=torch.float64)
        sky = torch.tensor([[0.3, 0.6, 0.9]], dtype=torch.float64)
        tm = torch.tensor([[[1.1, 0.1, 0.0], [0.0, 0.9, 0.2], [0.1, 0.0, 1.0]]], dtype=torch.float64)
        b = torch.tensor([[0.05, -0.02, 0.1]], dtype=torch.float64)
        out = composite(s, sig, colors, sky, AffineColorMap(tm, b), torch.tensor([1.0], dtype=torch.float64))
        w = out.weights[0]
        per_sample = sum(w[k] * (tm[0] @ colors[0, k] + b[0]) for k in range(2))
        want = per_sample + (1 - w.sum()) * sky[0]
        torch.testing.assert_close(out.color[0], want, atol=1e-14, rtol=0)

    def test_gradients_match_finite_differences(self):
        g = torch.Generator().manual_seed(0)
        s = single([0.2, 0.4, 0.6, 0.8], [0.2] * 4)
        sig = (torch.rand(1, 4, generator=g, dtype=torch.float64) * 3).requires_grad_(True)
        c = torch.rand(1, 4, 3, generator=g, dtype=torch.float64).requires_grad_(True)
        tm = (torch.eye(3, dtype=torch.float64) + 0.1 * torch.randn(3, 3, generator=g, dtype=torch.float64))[None].requires_grad_(True)
        b = (0.1 * torch.randn(1, 3, generator=g, dtype=torch.float64)).requires_grad_(True)
        sky = torch.rand(1, 3, generator=g, dtype=torch.float64)
        far = torch.tensor([1.0], dtype=torch.float64)
        fn = lambda a, bb, cc, dd: composite(s, a, bb, sky, AffineColorMap(cc, dd), far).color
        assert torch.autograd.gradcheck(fn, (sig, c, tm, b), eps=1e-5, atol=1e-8, rtol=1e-4)


def zero_density_field():
    grid = HashGridConfig(levels=2, table_size=2**8, resolution_min=4, resolution_max=8)
    f = SceneField(FieldConfig(grid=grid, num_images=1), [[-2, -2, -2], [2, 2, 2]], seed=0)
    with torch.no_grad():
        f.mlp_density.head.weight.zero_()
        f.mlp_density.head.bias[0] = -1e4  # softplus underflows to exactly 0
    return f


class TestRenderImage:
    def test_zero_density_renders_sky(self):
        f = zero_density_field()
        cam = Camera(8, 6, 5.0, 5.0, 4.0, 3.0, np.array([1.0, 0, 0, 0]), np.array([0.0, 0, 0]))
        color, depth, opacity = render_image(f, cam, 8)
        from streetfield.dataset import camera_rays

        rays = camera_rays(cam, f.scene_box)
        want = f.sky(rays.directions).clamp(0, 1).reshape(6, 8, 3)
        torch.testing.assert_close(color, want)
        assert torch.all(opacity == 0)
        assert torch.all((depth - rays.far.reshape(6, 8)).abs() < 1e-6)

    def test_zero_focal_rejected(self):
        with pytest.raises(ValueError):
            Camera(8, 6, 0.0, 5.0, 4.0, 3.0, np.array([1.0, 0, 0, 0]), np.zeros(3))

    def test_opacity_in_unit_interval(self):
        grid = HashGridConfig(levels=2, table_size=2**8, resolution_min=4, resolution_max=8)
        f = SceneField(FieldConfig(grid=grid, num_images=1, density_bias=2.0), [[-2, -2, -2], [2, 2, 2]])
        cam = Camera(8, 8, 6.0, 6.0, 4.0, 4.0, np.array([1.0, 0, 0, 0]), np.array([0.0, 0, 3.0]))
        color, depth, opacity = render_image(f, cam, 16)
        assert torch.all((opacity >= 0) & (opacity <= 1))
        assert torch.all((color >= 0) & (color <= 1))

    def test_render_is_deterministic(self):
        f = zero_density_field()
        with torch.no_grad():
            f.mlp_density.head.bias[0] = 0.5
        cam = Camera(6, 6, 5.0, 5.0, 3.0, 3.0, np.array([1.0, 0, 0, 0]), np.array([0.0, 0, 3.0]))
        a = render_image(f, cam, 8)
        b = render_image(f, cam, 8)
        assert all(torch.equal(x, y) for x, y in zip(a, b))
