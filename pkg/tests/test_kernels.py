import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adllab import kernels

numba_only = pytest.mark.skipif(kernels.numba is None, reason="numba not installed")


def test_label_two_blobs_raster_order():
    fg = np.array([
        [0, 0, 1, 1],
        [1, 0, 0, 0],
        [1, 0, 0, 0],
    ], dtype=bool)
    labels, n = kernels.label_components(fg)
    assert n == 2
    # the blob touched first in raster order gets label 1
    assert labels[0, 2] == labels[0, 3] == 1
    assert labels[1, 0] == labels[2, 0] == 2


def test_label_diagonal_is_connected():
    fg = np.eye(4, dtype=bool)
    labels, n = kernels.label_components(fg)
    assert n == 1
    assert set(np.unique(labels)) == {0, 1}


def test_label_empty():
    labels, n = kernels.label_components(np.zeros((3, 5), dtype=bool))
    assert n == 0 and not labels.any()


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_label_partition_properties(fg):
    labels, n = kernels.label_components(fg)
    assert ((labels > 0) == fg).all()
    assert set(np.unique(labels[fg])) == set(range(1, n + 1))
    # no two 8-neighbours carry different nonzero labels
    h, w = fg.shape
    for dy, dx in [(0, 1), (1, -1), (1, 0), (1, 1)]:
        for y in range(h):
            for x in range(w):
                y2, x2 = y + dy, x + dx
                if 0 <= y2 < h and 0 <= x2 < w and labels[y, x] and labels[y2, x2]:
                    assert labels[y, x] == labels[y2, x2]


def test_maxpool_first_max_wins():
    x = np.zeros((1, 2, 2, 1))
    out, arg = kernels.maxpool2x2(x)
    assert out[0, 0, 0, 0] == 0.0 and arg[0, 0, 0, 0] == 0
    x[0, 1, 0, 0] = 5.0
    out, arg = kernels.maxpool2x2(x)
    assert out[0, 0, 0, 0] == 5.0 and arg[0, 0, 0, 0] == 2


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(3)
    xp = rng.normal(size=(2, 7, 7, 3))
    cols = kernels.im2col(xp, 3, 2, 3, 3)
    d = rng.normal(size=cols.shape)
    back = kernels.col2im(d, 7, 7, 2)
    assert np.isclose((cols * d).sum(), (xp * back).sum(), rtol=1e-12)


@numba_only
def test_numba_and_numpy_paths_agree_bitwise():
    rng = np.random.default_rng(0)
    xp = rng.normal(size=(3, 10, 10, 4))
    pairs = [
        (kernels._im2col_numpy(xp, 3, 1, 8, 8), kernels._im2col_numba(xp, 3, 1, 8, 8)),
        (kernels._im2col_numpy(xp, 5, 2, 3, 3), kernels._im2col_numba(xp, 5, 2, 3, 3)),
    ]
    d = rng.normal(size=(3, 8, 8, 3, 3, 4))
    pairs.append((kernels._col2im_numpy(d, 10, 10, 1), kernels._col2im_numba(d, 10, 10, 1)))
    x = rng.normal(size=(2, 6, 8, 3))
    x[0, 0, 0, 0] = x[0, 0, 1, 0]  # a tie
    out_a, arg_a = kernels._maxpool_numpy(x)
    out_b, arg_b = kernels._maxpool_numba(x)
    pairs += [(out_a, out_b), (arg_a, arg_b)]
    g = rng.normal(size=out_a.shape)
    pairs.append((kernels._maxpool_backward_numpy(g, arg_a, 6, 8), kernels._maxpool_backward_numba(g, arg_a, 6, 8)))
    fg = rng.random((20, 20)) < 0.4
    la, na = kernels._label_numpy(fg)
    lb, nb = kernels._label_numba(fg)
    assert na == nb
    pairs.append((la, lb))
    for a, b in pairs:
        assert a.shape == b.shape
        assert np.array_equal(a, b)


@numba_only
def test_env_flag_selects_numpy_backend_with_identical_training():
    # a short training run must give the same bytes under both backends
    script = (
        "import sys, hashlib, numpy as np\n"
        "from adllab import kernels\n"
        "from adllab.model import BlockSpec, ModelConfig, SGDConfig, build_model, train\n"
        "from adllab.adl import AdlConfig\n"
        "from adllab.rng import Rng\n"
        "r = np.random.default_rng(1)\n"
        "x = r.random((16, 8, 8, 3)); y = r.integers(0, 2, 16)\n"
        "cfg = ModelConfig([BlockSpec('a', 4, 3, 'max2x2'), BlockSpec('b', 4, 3, 'none')], 2, adl={'b': AdlConfig()})\n"
        "net = build_model(cfg, Rng(5))\n"
        "train(net, x, y, SGDConfig(lr=0.05, epochs=2, batch_size=8), Rng(6))\n"
        "h = hashlib.sha256(b''.join(net.params[k].tobytes() for k in sorted(net.params))).hexdigest()\n"
        "print(kernels.BACKEND, h)\n"
    )
    outs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ADLLAB_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
        backend, digest = res.stdout.split()
        outs[backend] = digest
    assert set(outs) == {"numba", "numpy"}
    assert outs["numba"] == outs["numpy"]
