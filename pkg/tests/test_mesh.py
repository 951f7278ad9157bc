import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ridg.errors import ConfigError
from ridg.mesh import build_mesh, decompose, neighbor_offsets, pad_periodic


def test_periodic_neighbors_1d():
    m = build_mesh(1, 3)
    nb = m.face_neighbors(0)
    assert nb[(0, -1)] == 2
    assert nb[(0, 1)] == 1


@pytest.mark.parametrize("d,count", [(1, 2), (2, 8), (3, 26)])
def test_vertex_neighbor_count(d, count):
    m = build_mesh(d, 4)
    assert len(set(m.vertex_neighbors(3))) == count


def test_region_size_3d():
    assert len(build_mesh(3, 4).region(0)) == 27


def test_spacing_and_counts():
    m = build_mesh(2, (10, 20), domain=((0, 0), (2, 1)))
    assert m.h == (0.2, 0.05)
    assert m.n_elements == 200
    assert m.cell_volume == pytest.approx(0.01)
    assert m.shape == (20, 10)


def test_rejects_empty_axis():
    with pytest.raises((ConfigError, ValueError)):
        build_mesh(1, 0)


def test_region_support_requires_three_cells():
    with pytest.raises(ConfigError):
        build_mesh(2, (3, 2)).require_region_support()
    build_mesh(2, 3).require_region_support()


def test_flat_multi_roundtrip_axis_one_fastest():
    m = build_mesh(3, (2, 3, 4))
    assert m.flat_index((1, 0, 0)) == 1
    assert m.flat_index((0, 1, 0)) == 2
    for k in range(m.n_elements):
        assert m.flat_index(m.multi_index(k)) == k


@pytest.mark.parametrize("cells,tasks,block", [((60, 60), (6, 6), (10, 10)), ((48, 48, 48), (3, 3, 3), (16, 16, 16))])
def test_block_sizes(cells, tasks, block):
    dec = decompose(build_mesh(len(cells), cells), tasks)
    assert dec.block == block
    assert sum(int(np.prod(t.local_cells)) for t in dec.tasks) == int(np.prod(cells))


def test_single_task_is_its_own_neighbor():
    dec = decompose(build_mesh(2, 6), 1)
    assert set(dec.tasks[0].neighbors.values()) == {0}
    assert len(dec.tasks[0].neighbors) == 8


def test_non_divisible_rejected():
    with pytest.raises(ConfigError, match="evenly divide"):
        decompose(build_mesh(2, 10), (3, 3))


def test_neighbor_symmetry():
    dec = decompose(build_mesh(2, 12), (3, 4))
    for t in dec.tasks:
        for off, nb in t.neighbors.items():
            back = tuple(-o for o in off)
            assert dec.tasks[nb].neighbors[back] == t.task_id


def test_send_list_matches_receive_list():
    mesh = build_mesh(2, 12)
    dec = decompose(mesh, (3, 2))
    for t in dec.tasks:
        for off, nb in t.neighbors.items():
            back = tuple(-o for o in off)
            assert dec.send_cells(t.task_id, off) == dec.recv_cells(nb, back)


@given(st.sampled_from([(1, 6, 1), (1, 6, 2), (1, 6, 3), (2, 6, 2), (2, 6, 3), (2, 6, 1), (3, 4, 2), (3, 4, 1)]),
       st.integers(0, 2**32 - 1))
def test_halo_roundtrip_reproduces_periodic_padding(cfg, seed):
    d, n, p = cfg
    mesh = build_mesh(d, n)
    dec = decompose(mesh, p)
    field = np.random.default_rng(seed).standard_normal(mesh.shape + (2,))
    locs = dec.scatter(field)
    for t in dec.tasks:
        for off, nb in t.neighbors.items():
            # nb receives from t what t sends toward off
            locs[nb][dec.recv_slice(tuple(-o for o in off))] = locs[t.task_id][dec.send_slice(off)]
    full = pad_periodic(field, d)
    for t, loc in zip(dec.tasks, locs):
        sl = tuple(slice(s, e + 2) for s, e in zip(t.start[::-1], t.stop[::-1]))
        np.testing.assert_array_equal(loc, full[sl])
    np.testing.assert_array_equal(dec.gather(locs), field)


def test_neighbor_offsets_center_in_middle():
    for d in (1, 2, 3):
        offs = neighbor_offsets(d, include_center=True)
        assert offs[len(offs) // 2] == (0,) * d
        assert len(offs) == 3**d
        assert offs[1][0] == 0 and offs[0][0] == -1  # axis 1 fastest
