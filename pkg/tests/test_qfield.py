import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qstrat.aq_space import QPoint, g_distance
from qstrat.errors import FieldFormatError, OutOfDomainError, SizeMismatchError, UnsupportedDimensionError
from qstrat.qfield import (
    BallSpec,
    Grid,
    QField,
    ball_weights,
    boundary_h,
    constant_field,
    decompose_local,
    dirichlet_energy,
    interpolate,
    linear_field,
    load_field,
    make_branch_field,
    restrict_to_ball,
    save_field,
    sphere_trace,
    total_energy,
    _box_slices,
)

ORIGIN = np.zeros(2)


def test_branch_identity_field(grid65):
    f = make_branch_field(1, 1, 1.0, grid65)
    pos = f.positions()
    assert np.allclose(f.values[..., 0, :], pos)


def test_branch_values_at_one_and_minus_one(grid65):
    f = make_branch_field(2, 1, 1.0, grid65)
    assert g_distance(f.at(f.node_index((1.0, 0.0))), QPoint.parse("1,0;-1,0")) < 1e-15
    assert g_distance(f.at(f.node_index((-1.0, 0.0))), QPoint.parse("0,1;0,-1")) < 1e-15


def test_branch_value_at_origin_is_exact_zero(grid65):
    f = make_branch_field(3, 2, 0.7 - 0.2j, grid65)
    assert np.all(f.values[f.node_index(ORIGIN)] == 0.0)


@pytest.mark.parametrize("q,p", [(2, 1), (3, 1), (3, 2), (2, 3)])
def test_branch_field_is_centered_when_q_does_not_divide_p(grid65, q, p):
    f = make_branch_field(q, p, 1.0, grid65)
    assert np.abs(f.values.mean(axis=-2)).max() < 1e-12


def test_branch_field_needs_the_plane(grid65):
    with pytest.raises(UnsupportedDimensionError):
        make_branch_field(2, 1, 1.0, Grid.square(1.0, 9, 3))
    with pytest.raises(UnsupportedDimensionError):
        make_branch_field(2, 1, 1.0, grid65, m=3)


def test_constant_field_has_zero_energy(grid65):
    f = constant_field(QPoint.parse("1,2;3,4"), grid65)
    assert dirichlet_energy(f, BallSpec(ORIGIN, 0.5)) == 0.0


@pytest.mark.parametrize("s", [0.25, 0.5, 0.9])
def test_branch_energy_is_two_pi_s(branch129, s):
    assert dirichlet_energy(branch129, BallSpec(ORIGIN, s)) == pytest.approx(2 * math.pi * s, rel=0.04)


def test_linear_energy_on_unit_disk(grid129):
    f = linear_field([[1.0, 0.0]], grid129)
    assert dirichlet_energy(f, BallSpec(ORIGIN, 1.0)) == pytest.approx(math.pi, rel=0.01)


def test_ball_outside_grid_raises(branch65):
    with pytest.raises(OutOfDomainError):
        dirichlet_energy(branch65, BallSpec((0.5, 0.0), 0.6))
    with pytest.raises(OutOfDomainError):
        boundary_h(branch65, BallSpec((0.5, 0.0), 0.6))


def test_boundary_h_examples(grid129, branch129):
    zero = constant_field(QPoint.zero(2, 2), grid129)
    assert boundary_h(zero, BallSpec(ORIGIN, 0.5)) == 0.0
    for s in (0.2, 0.7):
        assert boundary_h(branch129, BallSpec(ORIGIN, s)) == pytest.approx(4 * math.pi * s**2, rel=1e-3)
        lin = linear_field([[1.0, 0.0]], grid129)
        assert boundary_h(lin, BallSpec(ORIGIN, s)) == pytest.approx(math.pi * s**3, rel=1e-3)


def test_sphere_trace_of_constant(grid65):
    c = QPoint.parse("1,2;-3,0.5")
    _, vals, w = sphere_trace(constant_field(c, grid65), BallSpec(ORIGIN, 0.5), 32)
    assert all(g_distance(QPoint(v), c) < 1e-14 for v in vals)
    assert w.sum() == pytest.approx(2 * math.pi * 0.5)


def test_sphere_trace_four_samples(branch65):
    pts, vals, _ = sphere_trace(branch65, BallSpec(ORIGIN, 1.0), 4)
    for p, v in zip(pts, vals):
        z = complex(*p)
        r = np.sqrt(z)
        expect = QPoint([[r.real, r.imag], [-r.real, -r.imag]])
        assert g_distance(QPoint(v), expect) < 1e-12


def test_sphere_trace_rejects_zero_samples(branch65):
    with pytest.raises(ValueError):
        sphere_trace(branch65, BallSpec(ORIGIN, 0.5), 0)


def test_interpolation_reproduces_nodes_and_linear_data(grid65):
    f = linear_field([[1.0, 2.0], [-0.5, 0.25]], grid65)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (50, 2))
    assert np.allclose(interpolate(f, pts)[:, 0, :], pts @ np.array([[1.0, 2.0], [-0.5, 0.25]]).T)
    nodes = f.positions()[::7, ::5].reshape(-1, 2)
    assert np.array_equal(interpolate(f, nodes), f.values[::7, ::5].reshape(-1, 1, 2))


def test_interpolation_outside_raises(grid65):
    f = linear_field([[1.0, 0.0]], grid65)
    with pytest.raises(OutOfDomainError):
        interpolate(f, [[1.5, 0.0]])


# ------------------------------------------------------------ decomposition

def test_decompose_constant_pair(grid65):
    f = constant_field(QPoint.parse("1,0;-1,0"), grid65)
    parts = decompose_local(f, BallSpec((0.1, 0.2), 0.2), 1e-6)
    assert parts is not None and len(parts) == 2
    assert all(p.q == 1 for p in parts)
    centers = sorted(float(p.values[..., 0, 0].mean()) for p in parts)
    assert centers == [-1.0, 1.0]


def test_decompose_branch_point_is_inseparable(branch129):
    assert decompose_local(branch129, BallSpec(ORIGIN, 0.1), 1e-6) is None


def test_decompose_branch_away_from_origin(branch129):
    ball = BallSpec((1.0 - 0.25, 0.0), 0.1)
    parts = decompose_local(branch129, ball, 1e-3)
    assert parts is not None and len(parts) == 2
    for part in parts:
        pos = part.positions()
        z = pos[..., 0] + 1j * pos[..., 1]
        sheet = part.values[..., 0, 0] + 1j * part.values[..., 0, 1]
        ratio = sheet / np.sqrt(z)
        assert np.allclose(ratio, ratio.flat[0], atol=1e-12)
        assert abs(abs(ratio.flat[0]) - 1) < 1e-12
    # pieces recompose to the original values at every node of the box
    sl = _box_slices(branch129, ball.center, ball.radius)
    orig = branch129.values[sl]
    joined = np.concatenate([p.values for p in parts], axis=-2)
    for idx in np.ndindex(orig.shape[:2]):
        assert QPoint(joined[idx]) == QPoint(orig[idx])


def test_decompose_needs_positive_tol(branch65):
    with pytest.raises(ValueError):
        decompose_local(branch65, BallSpec(ORIGIN, 0.1), 0.0)


# --------------------------------------------------------------------- I/O

def test_round_trip(tmp_path, branch65):
    f = restrict_to_ball(make_branch_field(3, 2, 0.3 + 1j, branch65.grid), ORIGIN, 0.8)
    path = save_field(f, tmp_path / "f.qfld")
    assert (tmp_path / "f.qfld.json").exists()
    assert load_field(path) == f


def test_truncated_file(tmp_path, branch65):
    path = save_field(branch65, tmp_path / "f.qfld")
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(SizeMismatchError):
        load_field(path)
    path.write_bytes(data[:30])
    with pytest.raises(SizeMismatchError):
        load_field(path)


def _patch_spacing(data: bytes, n: int, value: float) -> bytes:
    import struct
    off = 20 + 4 * n + 8 * n
    return data[:off] + struct.pack("<d", value) + data[off + 8:]


@pytest.mark.parametrize("spacing", [0.0, -0.5, float("nan")])
def test_bad_spacing_in_header(tmp_path, branch65, spacing):
    path = save_field(branch65, tmp_path / "f.qfld")
    path.write_bytes(_patch_spacing(path.read_bytes(), 2, spacing))
    with pytest.raises(FieldFormatError):
        load_field(path)


def test_bad_magic_and_non_finite(tmp_path, branch65):
    path = save_field(branch65, tmp_path / "f.qfld")
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FieldFormatError):
        load_field(path)
    off = 20 + 12 * 2 + 8
    path.write_bytes(data[:off] + np.array([np.inf]).tobytes() + data[off + 8:])
    with pytest.raises(FieldFormatError):
        load_field(path)


def test_fields_reject_non_finite_values(grid65):
    vals = np.zeros(grid65.dims + (1, 1))
    vals[3, 3] = np.nan
    with pytest.raises(FieldFormatError):
        QField(grid65, vals)


# --------------------------------------------------------------- invariants

def test_energy_is_additive_over_disjoint_balls(branch129):
    a, b = BallSpec((-0.4, 0.0), 0.3), BallSpec((0.4, 0.1), 0.35)
    dens = branch129.energy_density
    total = 0.0
    for ball in (a, b):
        sl = _box_slices(branch129, ball.center, ball.radius)
        total += np.sum(ball_weights(branch129, ball.center, ball.radius, sl) * dens[sl])
    total *= branch129.spacing**2
    assert dirichlet_energy(branch129, a) + dirichlet_energy(branch129, b) == pytest.approx(total, rel=1e-12)
    assert total_energy(branch129) >= total


@settings(max_examples=60, deadline=None)
@given(cx=st.floats(-0.3, 0.3), cy=st.floats(-0.3, 0.3), r=st.floats(0.05, 0.6))
def test_ball_weights_recover_the_disk_area(grid65, cx, cy, r):
    f = make_branch_field(1, 1, 1.0, grid65)
    c = np.array([cx, cy])
    w = ball_weights(f, c, r, _box_slices(f, c, r))
    assert np.all((w >= 0) & (w <= 1))
    # cut cells are resolved on a sub-lattice, so the error is a small fraction of perimeter * h
    assert abs(w.sum() * f.spacing**2 - math.pi * r * r) <= 0.02 * 2 * math.pi * r * f.spacing


def test_energy_invariant_under_target_rotation(branch65):
    c, s = math.cos(0.7), math.sin(0.7)
    rot = np.array([[c, -s], [s, c]])
    turned = branch65.replace(values=branch65.values @ rot.T)
    ball = BallSpec((0.1, -0.2), 0.6)
    assert dirichlet_energy(turned, ball) == pytest.approx(dirichlet_energy(branch65, ball), rel=1e-12)


def _homogeneity_radii(f):
    return np.geomspace(4 * f.spacing, 0.5, 8)


def test_h_over_s_squared_is_constant(branch129):
    ratios = [boundary_h(branch129, BallSpec(ORIGIN, s)) / s**2 for s in _homogeneity_radii(branch129)]
    assert max(ratios) / min(ratios) - 1 < 0.05


@pytest.mark.xfail(strict=True, reason="grid quadrature of the 1/|z| density overshoots by about "
                                       "0.4 h/s near the branch node; see the decisions ledger")
def test_d_over_s_is_constant_down_to_four_cells(branch129):
    ratios = [dirichlet_energy(branch129, BallSpec(ORIGIN, s)) / s for s in _homogeneity_radii(branch129)]
    assert max(ratios) / min(ratios) - 1 < 0.05


def test_d_over_s_is_constant_from_eight_cells(branch129):
    radii = np.geomspace(8 * branch129.spacing, 0.5, 8)
    ratios = [dirichlet_energy(branch129, BallSpec(ORIGIN, s)) / s for s in radii]
    assert max(ratios) / min(ratios) - 1 < 0.05


@pytest.mark.parametrize("field_name", ["branch", "linear"])
def test_sqrt_h_continuity(grid129, branch129, field_name):
    f = branch129 if field_name == "branch" else linear_field([[1.0, -0.5]], grid129)
    h = f.spacing
    rng = np.random.default_rng(5)
    for _ in range(10):
        y = rng.uniform(-0.2, 0.2, 2)
        x = y + rng.uniform(-0.05, 0.05, 2)
        s = rng.uniform(0.2, 0.4)
        d = float(np.linalg.norm(x - y))
        lhs = abs(math.sqrt(boundary_h(f, BallSpec(x, s))) - math.sqrt(boundary_h(f, BallSpec(y, s))))
        annulus = dirichlet_energy(f, BallSpec(y, s + d)) - dirichlet_energy(f, BallSpec(y, max(s - d, h)))
        sl = _box_slices(f, y, s + d)
        local = float(f.energy_density[sl].max())
        assert lhs <= d * math.sqrt(max(annulus, 0.0)) + 10 * h * local
