import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lego.errors import ConfigError, ShapeError
from lego.patches import (
    PatchGrid,
    assemble,
    coord_grid,
    fill_missing,
    partition,
    patch_at,
    patch_mask_to_pixels,
    sample_patch_indices,
)


class TestCoordGrid:
    def test_corner_values_exact(self):
        g = coord_grid(2, 2)
        assert g[0, 0, 0] == -1.0 and g[0, 1, 0] == 1.0
        assert g[1, 0, 0] == -1.0 and g[1, 0, 1] == 1.0

    def test_center_pixel_is_origin(self):
        g = coord_grid(3, 3)
        assert g[0, 1, 1] == 0.0 and g[1, 1, 1] == 0.0

    def test_direct_substitution(self):
        g = coord_grid(64, 64)
        assert g[0, 16, 0].item() == pytest.approx(2 * 16 / 63 - 1, abs=1e-7)
        assert g[0, 16, 0].item() == pytest.approx(-0.4920634920634921, abs=1e-7)

    def test_degenerate_axis_is_zero(self):
        g = coord_grid(1, 5)
        assert (g[0] == 0).all()
        assert g[1, 0, 0] == -1.0 and g[1, 0, 4] == 1.0

    @given(H=st.integers(2, 40), W=st.integers(2, 40))
    @settings(max_examples=40, deadline=None)
    def test_affine_in_pixel_index(self, H, W):
        g = coord_grid(H, W, dtype=torch.float64)
        for p in (0, H - 1):
            assert g[0, p, 0].item() == pytest.approx(2 * p / (H - 1) - 1, abs=1e-12)
        diffs = g[0, 1:, 0] - g[0, :-1, 0]
        assert torch.allclose(diffs, diffs[0].expand_as(diffs), atol=1e-12)


class TestPartition:
    def test_four_patch_example(self):
        x = torch.arange(16.0).reshape(1, 4, 4)
        p = partition(x, 2)
        assert p.shape == (4, 1, 2, 2)
        # patch (1,1) covers pixel rows 1-2, cols 1-2 (1-based)
        assert torch.equal(p[0, 0], x[0, 0:2, 0:2])
        assert torch.equal(p[1, 0], x[0, 0:2, 2:4])

    def test_whole_image_patch(self):
        x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))
        p = partition(x, 8)
        assert p.shape == (1, 3, 8, 8)
        assert torch.equal(p[0], x)

    def test_round_trip_bit_identical(self):
        x = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(1))
        assert torch.equal(assemble(partition(x, 4), 8, 8), x)

    def test_non_divisible_raises_with_sizes(self):
        x = torch.zeros(1, 6, 6)
        with pytest.raises(ShapeError, match="6"):
            partition(x, 4)

    @given(
        gh=st.integers(1, 5),
        gw=st.integers(1, 5),
        r=st.sampled_from([1, 2, 3, 4]),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=50, deadline=None)
    def test_index_formula_fidelity(self, gh, gw, r, seed):
        # extracted patch equals a brute-force per-pixel copy of the slice
        H, W = gh * r, gw * r
        x = torch.randn(1, H, W, generator=torch.Generator().manual_seed(seed))
        grid = PatchGrid(H, W, r)
        p = partition(x, r)
        for i in range(1, gh + 1):
            for j in range(1, gw + 1):
                brute = torch.empty(1, r, r)
                for a in range(r):
                    for b in range(r):
                        brute[0, a, b] = x[0, (i - 1) * r + a, (j - 1) * r + b]
                assert torch.equal(p[grid.flat_index(i, j)], brute)
                assert torch.equal(patch_at(x, grid, i, j), brute)

    @given(gh=st.integers(1, 6), gw=st.integers(1, 6), r=st.integers(1, 4))
    @settings(max_examples=50, deadline=None)
    def test_tiling_bijection(self, gh, gw, r):
        # every pixel belongs to exactly one patch
        H, W = gh * r, gw * r
        count = torch.zeros(1, H, W)
        grid = PatchGrid(H, W, r)
        patches = partition(count.clone(), r)
        marked = assemble(patches + 1.0, H, W)
        assert (marked == 1.0).all()
        assert grid.num_patches * r * r == H * W

    def test_coordinate_slice_commutation(self):
        g = coord_grid(12, 12)
        grid = PatchGrid(12, 12, 4)
        p = partition(g, 4)
        for i in range(1, 4):
            for j in range(1, 4):
                assert torch.equal(p[grid.flat_index(i, j)], patch_at(g, grid, i, j))


class TestSamplePatchIndices:
    def test_exhaustive_case(self):
        grid = PatchGrid(8, 8, 2)
        idx = sample_patch_indices(grid, 1.0, torch.Generator().manual_seed(0))
        assert torch.equal(idx, torch.arange(16))

    def test_half_fraction_counts_over_seeds(self):
        grid = PatchGrid(16, 16, 4)  # 4x4 grid of patches
        for seed in range(1000):
            idx = sample_patch_indices(grid, 0.5, torch.Generator().manual_seed(seed))
            assert idx.shape == (8,)
            assert len(set(idx.tolist())) == 8
            assert (0 <= idx).all() and (idx < 16).all()

    def test_determinism(self):
        grid = PatchGrid(12, 12, 2)
        a = sample_patch_indices(grid, 0.4, torch.Generator().manual_seed(42))
        b = sample_patch_indices(grid, 0.4, torch.Generator().manual_seed(42))
        assert torch.equal(a, b)

    def test_fraction_validation(self):
        grid = PatchGrid(8, 8, 2)
        with pytest.raises(ConfigError, match="fraction"):
            sample_patch_indices(grid, 0.0, torch.Generator())

    def test_floor_at_one_patch(self):
        grid = PatchGrid(8, 8, 4)  # 4 patches
        idx = sample_patch_indices(grid, 0.01, torch.Generator().manual_seed(0))
        assert idx.shape == (1,)

    def test_round_half_up(self):
        grid = PatchGrid(8, 8, 4)  # 4 patches; 0.375 * 4 = 1.5 rounds up to 2
        idx = sample_patch_indices(grid, 0.375, torch.Generator().manual_seed(0))
        assert idx.shape == (2,)


class TestFillMissing:
    def _setup(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        grid = PatchGrid(8, 8, 4)
        prev = torch.randn(2, 3, 8, 8, generator=g)
        x0 = torch.randn(2, 3, 8, 8, generator=g)
        return grid, prev, x0

    def test_all_patches_present(self):
        grid, prev, x0 = self._setup()
        mask = torch.ones(4, dtype=torch.bool)
        assert torch.equal(fill_missing(prev, mask, x0, grid), prev)

    def test_no_patches_present(self):
        grid, prev, x0 = self._setup()
        mask = torch.zeros(4, dtype=torch.bool)
        assert torch.equal(fill_missing(prev, mask, x0, grid), x0)

    def test_half_present_pixelwise(self):
        grid, prev, x0 = self._setup(3)
        mask = torch.tensor([True, False, True, False])
        out = fill_missing(prev, mask, x0, grid)
        pix = patch_mask_to_pixels(mask, grid)
        for a in range(8):
            for b in range(8):
                want = prev[:, :, a, b] if pix[a, b] else x0[:, :, a, b]
                assert torch.equal(out[:, :, a, b], want)

    def test_mask_grid_mismatch(self):
        grid, prev, x0 = self._setup()
        with pytest.raises(ShapeError):
            fill_missing(prev, torch.ones(5, dtype=torch.bool), x0, grid)
