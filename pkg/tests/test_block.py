import numpy as np
import pytest

from stgssm import block
from stgssm.tensor import ContractError, Tensor

from helpers import assert_gradients_match


def _tiny_block(rng, dim=2, n_nodes=3, d_state=2, expansion=1, gru_hidden=3):
    return block.init_block(rng, dim, n_nodes, d_state=d_state,
                            expansion_factor=expansion, gru_hidden=gru_hidden)


def _zero_linear_paths(w):
    for t in (w.lin_a_w, w.lin_a_b, w.lin_b_w, w.lin_b_b,
              w.lin_out_w, w.lin_out_b, w.proj.w_b, w.proj.b_b,
              w.proj.w_c, w.proj.b_c, w.proj.w_delta, w.proj.b_delta):
        t.data = np.zeros_like(t.data)


def test_all_linear_weights_zero_gives_exact_identity():
    rng = np.random.default_rng(0)
    w = _tiny_block(rng)
    _zero_linear_paths(w)
    x = rng.normal(size=(2, 4, 3, 2))
    y, _ = block.block_forward(x, w)
    assert np.array_equal(y.data, x)


def test_fresh_block_is_identity_bitwise():
    # zero output projection at init -> residual path only
    rng = np.random.default_rng(1)
    w = _tiny_block(rng)
    x = rng.normal(size=(1, 5, 3, 2))
    for variant in block.VARIANTS:
        y, _ = block.block_forward(x, w, variant=variant)
        assert np.array_equal(y.data, x)


@pytest.mark.parametrize("shape", [(1, 2, 3, 2), (3, 7, 3, 2), (2, 1, 3, 2)])
def test_shape_contract(shape):
    rng = np.random.default_rng(2)
    w = _tiny_block(rng)
    w.lin_out_w.data = rng.normal(size=w.lin_out_w.data.shape)
    x = rng.normal(size=shape)
    for variant in block.VARIANTS:
        y, alphas = block.block_forward(x, w, variant=variant)
        assert y.shape == shape
        assert alphas.shape[-2:] == (3, 3)


def test_closing_gate_branch_restores_input():
    rng = np.random.default_rng(3)
    w = _tiny_block(rng)
    w.lin_out_w.data = rng.normal(size=w.lin_out_w.data.shape)
    w.lin_b_w.data = np.zeros_like(w.lin_b_w.data)
    w.lin_b_b.data = np.full_like(w.lin_b_b.data, -40.0)
    x = rng.normal(size=(1, 4, 3, 2))
    y, _ = block.block_forward(x, w)
    assert np.max(np.abs(y.data - x)) < 1e-10


def _force_uniform_filter(w):
    """Zero transition/observation heads so the filter emits exactly the
    uniform adjacency at every step."""
    for t in (w.kfgn.f_diag_w, w.kfgn.f_diag_b, w.kfgn.f_low_u, w.kfgn.f_low_v,
              w.kfgn.h_w, w.kfgn.h_b, w.kfgn.alpha0_logits):
        t.data = np.zeros_like(t.data)


def test_kfgn_off_equals_full_with_uniform_filter():
    rng = np.random.default_rng(4)
    w = _tiny_block(rng)
    w.lin_out_w.data = rng.normal(size=w.lin_out_w.data.shape)
    _force_uniform_filter(w)
    x = rng.normal(size=(2, 3, 3, 2))
    y_full, _ = block.block_forward(x, w, variant="full")
    y_off, _ = block.block_forward(x, w, variant="kfgn_off", static_alpha=None)
    assert np.array_equal(y_full.data, y_off.data)


def test_gss_off_scan_decouples_nodes():
    """With the graph gating ablated the scan is the standard per-node
    selective scan: make every other path node-local (diagonal gate on the
    graph convolution, input-independent filter) and node outputs must not
    react to other nodes' inputs."""
    rng = np.random.default_rng(5)
    w = _tiny_block(rng)
    w.lin_out_w.data = rng.normal(size=w.lin_out_w.data.shape)
    _force_uniform_filter(w)
    w.omega_gc.data = np.eye(3)
    x = rng.normal(size=(1, 4, 3, 2))
    base, _ = block.block_forward(x, w, variant="gss_off")
    bumped_x = x.copy()
    bumped_x[0, 2, 1, 0] += 0.5  # one feature: layer norm absorbs row-constant shifts
    bumped, _ = block.block_forward(bumped_x, w, variant="gss_off")
    assert np.array_equal(base.data[:, :, 0], bumped.data[:, :, 0])
    assert np.array_equal(base.data[:, :, 2], bumped.data[:, :, 2])
    assert np.abs(base.data[:, :, 1] - bumped.data[:, :, 1]).max() > 0

    # the full variant's filtered gating does mix nodes
    y_full, _ = block.block_forward(x, w, variant="full")
    y_full2, _ = block.block_forward(bumped_x, w, variant="full")
    assert np.abs(y_full.data[:, :, 0] - y_full2.data[:, :, 0]).max() > 0


def test_variants_differ_in_general():
    rng = np.random.default_rng(6)
    w = _tiny_block(rng)
    w.lin_out_w.data = rng.normal(size=w.lin_out_w.data.shape)
    x = rng.normal(size=(1, 4, 3, 2))
    y_full, _ = block.block_forward(x, w, variant="full")
    y_kfgn, _ = block.block_forward(x, w, variant="kfgn_off")
    y_gss, _ = block.block_forward(x, w, variant="gss_off")
    assert np.abs(y_full.data - y_kfgn.data).max() > 1e-9
    assert np.abs(y_full.data - y_gss.data).max() > 1e-9


def test_unknown_variant_rejected():
    rng = np.random.default_rng(7)
    w = _tiny_block(rng)
    with pytest.raises(ContractError, match="variant"):
        block.block_forward(rng.normal(size=(1, 2, 3, 2)), w, variant="nope")


def test_static_alpha_is_row_normalized():
    rng = np.random.default_rng(8)
    w = _tiny_block(rng)
    raw = np.array([[2.0, 1.0, 1.0], [0.0, 3.0, 1.0], [1.0, 1.0, 2.0]])
    x = rng.normal(size=(1, 2, 3, 2))
    y, alphas = block.block_forward(x, w, variant="kfgn_off", static_alpha=raw)
    sums = alphas.data.sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-12)


def test_residual_keeps_input_gradient_alive():
    rng = np.random.default_rng(9)
    w = _tiny_block(rng)
    w.lin_out_w.data = rng.normal(size=w.lin_out_w.data.shape) * 0.3
    x = Tensor(rng.normal(size=(1, 3, 3, 2)), trainable=True)
    from stgssm.tensor import Tape
    tape = Tape()
    with tape:
        tape.watch(x)
        y, _ = block.block_forward(x, w)
        loss = (y * y).mean()
    grads = tape.backward(loss)
    assert np.abs(grads[x]).min() > 0


@pytest.mark.parametrize("variant", block.VARIANTS)
def test_block_gradients_all_variants(variant):
    # loss kept small so the finite-difference noise floor (~machine eps
    # times loss over 2*eps) stays below the tolerance's 1e-8 denominator
    rng = np.random.default_rng(10)
    w = _tiny_block(rng, dim=2, n_nodes=2, d_state=1, expansion=1, gru_hidden=2)
    w.lin_out_w.data = rng.normal(size=w.lin_out_w.data.shape) * 0.5
    x = Tensor(0.5 * rng.normal(size=(1, 3, 2, 2)), trainable=True)

    def build():
        y, _ = block.block_forward(x, w, variant=variant)
        return (y * y).mean() * 0.01

    leaves = dict(block.named_parameters(w))
    leaves["x"] = x
    assert_gradients_match(build, leaves)
