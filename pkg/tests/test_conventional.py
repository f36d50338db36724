import numpy as np
import pytest
from scipy import ndimage

from oracles import graph_traveltime
from wavetomo.acquisition import ring_array
from wavetomo.conventional import (FmcTraces, Pulse, ToftConfig, ToftProblem, TrappedRayError,
                                   das_beamform, eikonal_solve, synth_fmc_traces, toft_invert,
                                   trace_ray, traveltimes)
from wavetomo.errors import StructuralError
from wavetomo.grid import Grid2D


def rel_max(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_eikonal_source_node_zero_and_homogeneous_accuracy():
    g = Grid2D.centered(128, 128, 1e-3)
    X, Y = g.mesh()
    for src in [(0.0, 0.0), (0.0123, -0.0377)]:
        m = eikonal_solve(np.full(g.shape, 1500.0), src, g)
        exact = np.hypot(X - src[0], Y - src[1]) / 1500
        assert rel_max(m.T, exact) <= 0.02
        assert np.all(m.T >= 0) and np.all(np.isfinite(m.T))
    m = eikonal_solve(np.full(g.shape, 1500.0), (0.0, 0.0), g)
    assert m.T[64, 64] == 0.0


def test_eikonal_two_layer_matches_graph_oracle():
    g = Grid2D.centered(64, 64, 1e-3)
    X, Y = g.mesh()
    c = np.where(Y > 0.005, 2500.0, 1500.0)
    m = eikonal_solve(c, (0.0, -0.02), g)
    ref = graph_traveltime(1 / c, g.dx, (12, 32))
    assert rel_max(m.T, ref) <= 0.03


def test_straight_ray_length_and_time():
    g = Grid2D.centered(64, 64, 1e-3)
    c = np.full(g.shape, 1500.0)
    src, rcv = (-0.02, -0.013), (0.025, 0.02)
    m = eikonal_solve(c, src, g)
    path, L = trace_ray(m, rcv, g)
    d = np.hypot(rcv[0] - src[0], rcv[1] - src[1])
    assert L.sum() == pytest.approx(d, rel=0.01)
    # the polyline stays on the chord
    rel, chord = path - np.array(src), np.array(rcv) - np.array(src)
    t = (rel[:, 0] * chord[1] - rel[:, 1] * chord[0]) / d
    assert np.abs(t).max() < g.dx
    np.testing.assert_allclose(path[-1], src)
    np.testing.assert_allclose(path[0], rcv)


def test_ray_time_consistency_in_smooth_medium(rng):
    g = Grid2D.centered(64, 64, 1e-3)
    f = ndimage.gaussian_filter(rng.standard_normal(g.shape), 6)
    c = 1500 + 100 * f / np.abs(f).max()
    src = (-0.025, 0.003)
    m = eikonal_solve(c, src, g)
    r, cidx = g.to_index(0.027, -0.01)
    path, L = trace_ray(m, (0.027, -0.01), g)
    t_ray = np.sum(L / c)
    t_rcv = ndimage.map_coordinates(m.T, [[r], [cidx]], order=1)[0]
    assert t_ray == pytest.approx(t_rcv, rel=0.02)
    # traveltime is non-decreasing from source to receiver along the ray
    rr, cc = g.to_index(path[::-1, 0], path[::-1, 1])
    T_along = ndimage.map_coordinates(m.T, [rr, cc], order=1)
    assert np.all(np.diff(T_along) >= -1e-3 * T_along.max())


def test_degenerate_ray():
    g = Grid2D.centered(32, 32, 1e-3)
    m = eikonal_solve(np.full(g.shape, 1500.0), (0.0, 0.0), g)
    path, L = trace_ray(m, (0.001, 0.0), g)
    assert len(path) == 2 and L.sum() == pytest.approx(1e-3)


def test_trapped_ray():
    g = Grid2D.centered(32, 32, 1e-3)
    m = eikonal_solve(np.full(g.shape, 1500.0), (0.0, 0.0), g)
    m.T = np.zeros_like(m.T)  # flat map: no descent direction
    with pytest.raises(TrappedRayError):
        trace_ray(m, (0.01, 0.01), g)
    with pytest.raises(StructuralError):
        trace_ray(m, (1.0, 0.0), g)


def test_toft_fixed_point():
    g = Grid2D.centered(32, 32, 1e-3)
    geom = ring_array(12, 0.026)
    c = np.full(g.shape, 1500.0)
    t_obs, _ = traveltimes(c, geom, g)
    res = toft_invert(t_obs, geom, g, c, ToftConfig(iterations=3))
    np.testing.assert_array_equal(res.c, c)
    assert res.converged and res.misfit == [0.0]


def test_toft_gradient_finite_difference(rng):
    g = Grid2D.centered(32, 32, 1e-3)
    geom = ring_array(16, 0.026)
    X, Y = g.mesh()
    c_true = 1500 * (1 + 0.03 * np.exp(-(X ** 2 + Y ** 2) / (2 * 0.005 ** 2)))
    t_obs, _ = traveltimes(c_true, geom, g)
    prob = ToftProblem(t_obs, geom, g)
    c = np.full(g.shape, 1500.0)
    J, grad = prob.value_and_grad(c)
    dc = 10 * np.exp(-((X - 0.002) ** 2 + Y ** 2) / (2 * 0.006 ** 2))
    h = 0.1
    fd = (prob.value(c + h * dc) - prob.value(c - h * dc)) / (2 * h)
    analytic = np.sum(grad * dc) * g.dx ** 2
    assert abs(analytic - fd) <= 0.05 * abs(fd)


def test_fmc_synthesis_cases():
    geom = ring_array(8, 0.04)
    pulse = Pulse(1e6)
    empty = synth_fmc_traces([], geom, pulse, 1500.0, 60e-6, 20e6)
    assert not np.any(empty.data)
    one = synth_fmc_traces([(0.005, 0.0, 1.0)], geom, pulse, 1500.0, 60e-6, 20e6)
    tau = (np.hypot(*(geom.positions[0] - [0.005, 0])) + np.hypot(*(geom.positions[3] - [0.005, 0]))) / 1500
    k = np.argmax(one.data[0, 3])
    assert abs(k / 20e6 - tau) <= 1 / 20e6
    two = synth_fmc_traces([(0.005, 0.0, 1.0), (-0.004, 0.006, 0.5)], geom, pulse, 1500.0, 60e-6, 20e6)
    other = synth_fmc_traces([(-0.004, 0.006, 0.5)], geom, pulse, 1500.0, 60e-6, 20e6)
    np.testing.assert_allclose(two.data, one.data + other.data, atol=1e-12)
    with pytest.raises(StructuralError):
        synth_fmc_traces([(0.0, 0.0, 1.0)], geom, pulse, 1500.0, 1e-6, 20e6)
    with pytest.raises(StructuralError):
        FmcTraces(np.zeros((8, 8, 4)), 1e6, pulse, geom.source_indices)


def test_das_linear_and_zero():
    g = Grid2D.centered(24, 24, 0.5e-3)
    geom = ring_array(8, 0.03)
    pulse = Pulse(1e6)
    tr = synth_fmc_traces([(0.001, 0.0, 1.0)], geom, pulse, 1500.0, 50e-6, 20e6)
    zero = FmcTraces(np.zeros_like(tr.data), tr.rate, pulse, tr.sources)
    assert not np.any(das_beamform(zero, geom, 1500.0, g))
    doubled = FmcTraces(2 * tr.data, tr.rate, pulse, tr.sources)
    np.testing.assert_allclose(das_beamform(doubled, geom, 1500.0, g), 2 * das_beamform(tr, geom, 1500.0, g))
