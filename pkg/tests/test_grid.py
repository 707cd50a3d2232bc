import json

import numpy as np
import pytest

from chemoctrl import (
    Field,
    Grid,
    GridMismatchError,
    chemotaxis_divergence,
    field_from_csv,
    field_to_csv,
    h1_seminorm,
    integrate,
    interpolation_diagnostic,
    laplacian_neumann,
    lp_norm,
)
from chemoctrl.grid import cell_gradient_sq, hessian_frobenius_sq, laplacian_array


def random_field(grid, seed, low=-1.0, high=1.0):
    rng = np.random.default_rng(seed)
    return Field(grid, rng.uniform(low, high, size=grid.dims))


class TestGridConstruction:
    def test_rejects_single_cell_axis(self):
        with pytest.raises(ValueError, match="at least 2 cells"):
            Grid((1, 4), (0.1, 0.1))

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            Grid((4,), (0.0,))

    def test_rejects_mask_shape_mismatch(self):
        with pytest.raises(ValueError, match="control_mask"):
            Grid((4,), (0.25,), control_mask=np.ones(5, dtype=bool))

    def test_default_mask_covers_domain(self):
        g = Grid.unit_box((8, 8))
        assert g.control_mask.all()
        assert g.n_cells == 64
        assert g.cell_volume == pytest.approx(1.0 / 64)

    def test_box_mask_selects_half(self):
        g = Grid.unit_box((10,))
        mask = g.box_mask([(0.0, 0.5)])
        assert mask.sum() == 5

    def test_field_size_mismatch(self):
        g = Grid.unit_box((4,))
        with pytest.raises(ValueError, match="values"):
            Field(g, np.zeros(5))

    def test_field_rejects_nan(self):
        g = Grid.unit_box((4,))
        with pytest.raises(ValueError, match="non-finite"):
            Field(g, [0.0, np.nan, 0.0, 0.0])


class TestLaplacian:
    def test_constant_maps_to_zero(self):
        g = Grid.unit_box((16, 16))
        out = laplacian_neumann(Field.full(g, 3.7))
        assert np.abs(out.values).max() == 0.0

    def test_hand_stencil_four_cells(self):
        # mirror ghosts reproduce (1, -1, -1, 1) for phi = (0, 1, 1, 0), h = 1
        g = Grid((4,), (1.0,))
        out = laplacian_neumann(Field(g, [0.0, 1.0, 1.0, 0.0]))
        assert out.values == pytest.approx([1.0, -1.0, -1.0, 1.0], abs=1e-14)

    def test_cosine_eigenfunction(self):
        g = Grid.unit_box((256,))
        x = g.axis_centers(0)
        phi = Field(g, np.cos(np.pi * x))
        out = laplacian_neumann(phi)
        err = np.abs(out.values + np.pi**2 * phi.values).max()
        assert err < 1e-2 * np.pi**2

    @pytest.mark.parametrize("dims", [(32,), (16, 16)])
    def test_integral_vanishes(self, dims):
        g = Grid.unit_box(dims)
        phi = random_field(g, seed=11)
        total = integrate(laplacian_neumann(phi))
        scale = np.abs(laplacian_neumann(phi).values).max() * g.volume
        assert abs(total) <= 1e-12 * max(scale, 1.0)

    @pytest.mark.parametrize("dims", [(24,), (8, 8), (4, 5, 6)])
    def test_symmetric_negative_semidefinite(self, dims):
        g = Grid.unit_box(dims)
        for seed in range(3):
            a = random_field(g, seed=seed)
            b = random_field(g, seed=seed + 100)
            la = laplacian_neumann(a).values
            lb = laplacian_neumann(b).values
            lhs = (la * b.values).sum()
            rhs = (a.values * lb).sum()
            scale = max(abs(lhs), abs(rhs), 1.0)
            assert abs(lhs - rhs) <= 1e-11 * scale
            quad = (la * a.values).sum()
            assert quad <= 1e-11 * abs(quad + 1.0)

    def test_second_order_convergence(self):
        # Neumann-compatible smooth profile; observed order >= 1.9
        errors = []
        for n in (16, 32, 64, 128):
            g = Grid.unit_box((n,))
            x = g.axis_centers(0)
            phi = Field(g, np.cos(2 * np.pi * x))
            out = laplacian_neumann(phi)
            errors.append(np.abs(out.values + (2 * np.pi) ** 2 * phi.values).max())
        orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert orders.min() >= 1.9

    def test_second_order_convergence_2d(self):
        errors = []
        for n in (16, 32, 64):
            g = Grid.unit_box((n, n))
            cx, cy = g.cell_centers()
            phi = Field(g, np.cos(np.pi * cx) * np.cos(2 * np.pi * cy))
            exact = -(np.pi**2 + (2 * np.pi) ** 2) * phi.values
            errors.append(np.abs(laplacian_neumann(phi).values - exact).max())
        orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert orders.min() >= 1.9


class TestChemotaxisDivergence:
    def test_constant_v_gives_zero(self):
        g = Grid.unit_box((12,))
        out = chemotaxis_divergence(random_field(g, 0, 0.0, 2.0), Field.full(g, 4.2))
        assert np.abs(out.values).max() == 0.0

    def test_zero_mobility_gives_zero(self):
        g = Grid.unit_box((12,))
        out = chemotaxis_divergence(Field.zeros(g), random_field(g, 1))
        assert np.abs(out.values).max() == 0.0

    def test_hand_fluxes_three_cells(self):
        # uphill v: donor cells are on the left, fluxes 1 at both inner faces
        g = Grid((3,), (1.0,))
        out = chemotaxis_divergence(Field(g, [1.0, 1.0, 1.0]), Field(g, [0.0, 1.0, 2.0]))
        assert out.values == pytest.approx([-1.0, 0.0, 1.0], abs=1e-14)

    @pytest.mark.parametrize("dims", [(32,), (9, 7)])
    def test_integral_vanishes(self, dims):
        g = Grid.unit_box(dims)
        u = random_field(g, 5, 0.0, 3.0)
        v = random_field(g, 6, 0.0, 1.0)
        out = chemotaxis_divergence(u, v)
        scale = max(np.abs(out.values).max() * g.volume, 1.0)
        assert abs(integrate(out)) <= 1e-12 * scale

    def test_rejects_negative_mobility(self):
        g = Grid.unit_box((4,))
        with pytest.raises(ValueError, match="nonnegative"):
            chemotaxis_divergence(Field(g, [-0.1, 0, 0, 0]), Field.zeros(g))

    def test_rejects_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            chemotaxis_divergence(Field.zeros(Grid.unit_box((4,))),
                                  Field.zeros(Grid.unit_box((5,))))


class TestNormsAndIntegrals:
    def test_integrate_measures_domain(self):
        g = Grid.unit_box((10, 10))
        assert integrate(Field.full(g, 1.0)) == pytest.approx(1.0)
        assert integrate(Field.zeros(g)) == 0.0

    def test_integrate_half_indicator(self):
        g = Grid.unit_box((10,))
        vals = np.zeros(10)
        vals[:5] = 1.0
        assert integrate(Field(g, vals)) == pytest.approx(0.5)

    def test_lp_norm_constant(self):
        g = Grid.unit_box((8,))
        assert lp_norm(Field.full(g, 2.0), 2.0) == pytest.approx(2.0)
        assert lp_norm(Field.full(g, -3.5), np.inf) == pytest.approx(3.5)

    def test_lp_norm_three_four_five(self):
        g = Grid((2,), (1.0,))
        assert lp_norm(Field(g, [3.0, 4.0]), 2.0) == pytest.approx(5.0)

    def test_lp_norm_rejects_small_p(self):
        g = Grid.unit_box((4,))
        with pytest.raises(ValueError, match="p >= 1"):
            lp_norm(Field.zeros(g), 0.5)

    def test_h1_constant_is_zero(self):
        g = Grid.unit_box((6, 6))
        assert h1_seminorm(Field.full(g, 9.0)) == 0.0

    def test_h1_two_cells(self):
        g = Grid((2,), (1.0,))
        assert h1_seminorm(Field(g, [0.0, 1.0])) == pytest.approx(1.0)

    def test_h1_linear_ramp(self):
        a = 2.5
        g = Grid.unit_box((512,))
        phi = Field(g, a * g.axis_centers(0))
        assert h1_seminorm(phi) == pytest.approx(a, rel=2e-3)

    def test_interpolation_diagnostic_finite(self):
        g = Grid.unit_box((32,))
        for seed in range(3):
            ratio = interpolation_diagnostic(random_field(g, seed))
            assert np.isfinite(ratio) and ratio > 0
        assert interpolation_diagnostic(Field.zeros(g)) == 0.0


class TestDerivedQuantities:
    def test_cell_gradient_matches_ramp(self):
        g = Grid.unit_box((64,))
        a = 3.0 * g.axis_centers(0)
        gsq = cell_gradient_sq(g, a)
        # interior cells see the exact slope; boundary cells the half-stencil
        assert gsq[1:-1] == pytest.approx(9.0, rel=1e-12)

    def test_hessian_of_quadratic(self):
        g = Grid.unit_box((64,))
        x = g.axis_centers(0)
        h = hessian_frobenius_sq(g, x**2)
        assert h[1:-1] == pytest.approx(4.0, rel=1e-10)

    def test_hessian_cross_term_2d(self):
        g = Grid.unit_box((32, 32))
        cx, cy = g.cell_centers()
        a = cx * cy
        h = hessian_frobenius_sq(g, a)
        # d2/dxdy = 1 counted twice; pure second derivatives vanish
        assert h[1:-1, 1:-1] == pytest.approx(2.0, rel=1e-10)

    def test_laplacian_array_matches_field_op(self):
        g = Grid.unit_box((8, 8))
        phi = random_field(g, 3)
        assert np.allclose(laplacian_array(g, phi.values),
                           laplacian_neumann(phi).values, atol=1e-14)


class TestSerialization:
    def test_field_csv_roundtrip(self, tmp_path):
        g = Grid.unit_box((5, 4))
        phi = random_field(g, 7)
        path = tmp_path / "field.csv"
        field_to_csv(phi, path)
        back = field_from_csv(g, path)
        assert np.array_equal(back.values, phi.values)

    def test_grid_json_roundtrip(self, tmp_path):
        mask = np.zeros((6,), dtype=bool)
        mask[2:4] = True
        g = Grid((6,), (0.5,), control_mask=mask)
        path = tmp_path / "grid.json"
        g.to_json(path)
        back = Grid.from_json(path)
        assert back.compatible_with(g)
        with open(path) as fh:
            header = json.load(fh)
        assert header["dims"] == [6]
