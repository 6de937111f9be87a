import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from aurora_gan.moe import (
    ExpertPool, MoEFFN, Router, RoutingDecision, RoutingStats, dispatch_experts,
    export_routing_maps, load_balance_loss, render_routing_map, route_from_logits, routing_map,
)


def test_single_expert_routes_everything_with_unit_gate():
    router = Router(4, 3, 1)
    d = router(torch.randn(10, 4), torch.randn(10, 3))
    assert torch.equal(d.index, torch.zeros(10, dtype=torch.long))
    assert torch.equal(d.gate, torch.ones(10))


def test_route_hand_softmax():
    d = route_from_logits(torch.tensor([[0.9, 0.3]]))
    assert d.index.item() == 0
    expected = 1 / (1 + math.exp(-0.6))
    assert abs(d.gate.item() - expected) < 1e-6
    assert abs(d.gate.item() - 0.6457) < 1e-4


def test_route_ties_go_to_lower_index():
    d = route_from_logits(torch.tensor([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]))
    assert d.index.tolist() == [0, 1]


def test_route_depends_on_style():
    torch.manual_seed(0)
    router = Router(4, 4, 4)
    points = torch.randn(64, 4)
    d1 = router(points, torch.randn(1, 4).expand(64, 4))
    d2 = router(points, torch.randn(1, 4).expand(64, 4))
    assert (d1.index != d2.index).any()
    torch.testing.assert_close(d1.probs.sum(-1), torch.ones(64))


def test_router_deterministic():
    router = Router(4, 4, 4)
    p, w = torch.randn(16, 4), torch.randn(16, 4)
    a, b = router(p, w), router(p, w)
    assert torch.equal(a.index, b.index) and torch.equal(a.probs, b.probs)


def test_dispatch_identity_with_zero_output_layers():
    pool = ExpertPool(4, 3)
    x = torch.randn(12, 4)
    d = route_from_logits(torch.randn(12, 3))
    assert torch.equal(dispatch_experts(x, d, pool), x)


def dense_ffn(pool, j, x):
    h = F.leaky_relu(x @ (pool.w1[j] * pool.scale1) + pool.b1[j], 0.2)
    return h @ (pool.w2[j] * pool.scale2) + pool.b2[j]


def test_clone_experts_equal_gated_dense_ffn():
    torch.manual_seed(0)
    pool = ExpertPool(4, 5, zero_init_output=False)
    with torch.no_grad():
        for j in range(1, 5):
            pool.w1[j] = pool.w1[0]
            pool.b1[j] = pool.b1[0]
            pool.w2[j] = pool.w2[0]
            pool.b2[j] = pool.b2[0]
    x = torch.randn(40, 4)
    d = route_from_logits(torch.randn(40, 5))
    expected = x + d.gate[:, None] * dense_ffn(pool, 0, x)
    torch.testing.assert_close(dispatch_experts(x, d, pool), expected, rtol=0, atol=1e-5)


def test_single_point_identity_expert_doubles_input():
    pool = ExpertPool(1, 1, ratio=4)
    with torch.no_grad():
        pool.w1.zero_()
        pool.w2.zero_()
        pool.w1[0, 0, 0] = 1.0 / pool.scale1
        pool.w2[0, 0, 0] = 1.0 / pool.scale2
    x = torch.tensor([[1.5]])
    d = route_from_logits(torch.zeros(1, 1))
    torch.testing.assert_close(dispatch_experts(x, d, pool), torch.tensor([[3.0]]))


def test_single_expert_layer_bitwise_dense():
    torch.manual_seed(0)
    moe = MoEFFN(6, 3, 1, zero_init_output=False)
    x, w = torch.randn(2, 9, 6), torch.randn(2, 3)
    out, d = moe(x, w)
    flat = x.reshape(-1, 6)
    dense = (flat + dense_ffn(moe.pool, 0, flat)).reshape(2, 9, 6)
    assert torch.equal(out, dense)


@pytest.mark.parametrize("n", [1, 2, 8])
def test_top1_invocation_count_independent_of_n(n):
    moe = MoEFFN(4, 3, n)
    moe.pool.reset_counters()
    moe(torch.randn(3, 20, 4), torch.randn(3, 3))
    assert int(moe.pool.invocations.sum()) == 60


def test_dispatch_rejects_bad_index():
    pool = ExpertPool(2, 2)
    d = RoutingDecision(torch.tensor([0, 2]), torch.ones(2), torch.ones(2, 2) / 2)
    with pytest.raises(RuntimeError):
        dispatch_experts(torch.randn(2, 2), d, pool)


def test_load_balance_uniform_and_collapse():
    alpha = 0.01
    for n in (1, 2, 4, 8):
        uniform = RoutingStats(torch.full((n,), 1 / n), torch.full((n,), 1 / n))
        assert abs(load_balance_loss(uniform, alpha).item() - alpha) < 1e-8
        onehot = torch.zeros(n)
        onehot[0] = 1
        assert load_balance_loss(RoutingStats(onehot, onehot), alpha).item() == pytest.approx(alpha * n, rel=1e-6)


def test_load_balance_gradient_only_through_mean_probs():
    f = torch.tensor([0.5, 0.5], requires_grad=True)
    p = torch.tensor([0.3, 0.7], requires_grad=True)
    load_balance_loss(RoutingStats(f, p), 0.01).backward()
    assert f.grad is None
    torch.testing.assert_close(p.grad, torch.tensor([0.01, 0.01]))


def test_load_balance_lower_bound_random_distributions():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 10))
        f = torch.tensor(rng.dirichlet(np.ones(n)))
        loss = load_balance_loss(RoutingStats(f, f), 1.0).item()
        assert loss >= 1 - 1e-9


def test_routing_stats_sum_to_one():
    d = route_from_logits(torch.randn(100, 6))
    s = d.stats()
    assert abs(s.fractions.sum().item() - 1) < 1e-6
    assert abs(s.mean_probs.sum().item() - 1) < 1e-6


def test_expert_gradient_liveness():
    torch.manual_seed(0)
    moe = MoEFFN(8, 4, 4)
    x, w = torch.randn(4, 64, 8), torch.randn(4, 4)
    out, d = moe(x, w)
    (out.square().mean() + load_balance_loss(d.stats())).backward()
    for j in range(4):
        g = sum(p.grad[j].abs().sum() for p in (moe.pool.w1, moe.pool.b1, moe.pool.w2, moe.pool.b2))
        assert g > 0
    assert moe.router.proj.weight.grad.abs().sum() > 0


def decision_from(index, n):
    index = torch.as_tensor(index)
    probs = F.one_hot(index, n).float()
    return RoutingDecision(index, torch.ones(len(index)), probs)


def test_routing_map_constant_and_checkerboard():
    assert (routing_map(decision_from([2] * 16, 4), 4, 4) == 2).all()
    board = [(i + j) % 2 for i in range(4) for j in range(4)]
    m = routing_map(decision_from(board, 2), 4, 4)
    assert m[0, 0] == 0 and m[0, 1] == 1 and m[1, 0] == 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=12, max_size=12))
def test_routing_map_round_trip(index):
    m = routing_map(decision_from(index, 8), 3, 4)
    assert m.flatten().tolist() == index


def test_routing_map_size_mismatch():
    with pytest.raises(ValueError):
        routing_map(decision_from([0] * 10, 2), 3, 3)


def test_render_palette_is_lossless():
    m = np.array([[0, 1], [2, 3]])
    img = render_routing_map(m, 4)
    assert img.mode == "P"
    assert np.array_equal(np.asarray(img), m)


def test_export_routing_maps(tmp_path):
    decisions = [decision_from([0, 1, 1, 2] * 4, 3), decision_from([1] * 64, 3)]
    paths = export_routing_maps(decisions, [4, 8], tmp_path)
    assert len(paths) == 3
    from PIL import Image

    with Image.open(paths[0]) as im:
        assert np.array_equal(np.asarray(im).flatten(), decisions[0].index.numpy())
    rows = paths[-1].read_text().splitlines()[1:]
    for row in rows:
        fracs = [float(v) for v in row.split("\t")[2:]]
        assert abs(sum(fracs) - 1) < 1e-6
