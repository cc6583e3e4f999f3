import numpy as np
import pytest

from ldae import autodiff as ad
from ldae.clustering import ElementPartition
from ldae.integration import (
    DegeneratePartitionError,
    IntegrationConfig,
    IntegrationModule,
    analytic_param_count,
    correct_partition_mass,
    integrate_forward,
    integrate_graph,
    load_module,
    reference_loss,
    reference_loss_graph,
    save_module,
    total_loss,
)


def _partition(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return ElementPartition(labels=labels, members=[[] for _ in labels])


def _balanced_partition(k):
    return _partition([1] * (k // 2) + [0] * (k - k // 2))


def test_uniform_reference_loss_is_one_over_k():
    for k in (4, 50, 200):
        attn = np.full((3, k), 1.0 / k)
        part = _balanced_partition(k)
        value = reference_loss(attn, part, np.array([1, 0, 1]))
        assert value == pytest.approx(1.0 / k, rel=1e-12)


def test_reference_loss_zero_when_mass_correct():
    part = _partition([1, 1, 0, 0])
    attn = np.array([[0.7, 0.3, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]])
    assert reference_loss(attn, part, np.array([1, 0])) == 0.0


def test_reference_loss_hand_case():
    part = _partition([1, 1, 0, 0])
    attn = np.array([[0.4, 0.3, 0.2, 0.1]])
    assert reference_loss(attn, part, np.array([1])) == pytest.approx(0.15, abs=1e-15)


def test_reference_loss_degenerate_partitions():
    with pytest.raises(DegeneratePartitionError):
        reference_loss(np.full((1, 3), 1 / 3), _partition([1, 1, 1]), np.array([1]))
    with pytest.raises(DegeneratePartitionError):
        reference_loss(np.full((1, 3), 1 / 3), _partition([0, 0, 0]), np.array([0]))
    # Inactive branch is fine.
    reference_loss(np.full((1, 3), 1 / 3), _partition([1, 1, 1]), np.array([0]))


def test_reference_loss_graph_matches_plain():
    rng = ad.RngStream(2)
    attn = np.abs(rng.normal(5, 6)) + 0.01
    attn /= attn.sum(axis=1, keepdims=True)
    part = _partition([1, 0, 1, 0, 1, 0])
    is_ped = np.array([1, 1, 0, 0, 1])
    graph_value = reference_loss_graph(ad.Tensor(attn), part, is_ped).item()
    assert graph_value == pytest.approx(reference_loss(attn, part, is_ped), rel=1e-12)


def test_total_loss():
    assert total_loss(1.5, 0.25, 2.0) == 2.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -1.0)


def test_correct_partition_mass_hand_case():
    part = _partition([1, 1, 0, 0])
    attn = np.array([[0.4, 0.3, 0.2, 0.1], [0.4, 0.3, 0.2, 0.1]])
    mass = correct_partition_mass(attn, part, np.array([1, 0]))
    assert mass == pytest.approx((0.7 + 0.3) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegrationConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        IntegrationConfig(ref_weight=-1.0)


def test_strict_equals_head_mean_at_one_head():
    rng = ad.RngStream(3)
    config = IntegrationConfig(d_visual=8, d_model=8, heads=1)
    module = IntegrationModule.init(12, config, seed=0)
    queries, elements = rng.normal(5, 8), rng.normal(7, 12)
    _, attn_mean = integrate_forward(queries, elements, module, config)
    strict = IntegrationConfig(d_visual=8, d_model=8, heads=1, strict_single_softmax=True)
    _, attn_strict = integrate_forward(queries, elements, module, strict)
    assert np.array_equal(attn_mean, attn_strict)


def test_attention_rows_are_distributions():
    rng = ad.RngStream(4)
    config = IntegrationConfig(d_visual=8, d_model=8, heads=4)
    module = IntegrationModule.init(10, config, seed=1)
    fused, attn = integrate_forward(rng.normal(6, 8), rng.normal(9, 10), module)
    assert fused.shape == (6, 8)
    assert attn.shape == (6, 9)
    assert np.allclose(attn.sum(axis=1), 1.0)
    assert np.all(attn >= 0)


def test_forward_shape_checks():
    config = IntegrationConfig(d_visual=8, d_model=8, heads=2)
    module = IntegrationModule.init(10, config, seed=0)
    with pytest.raises(ValueError):
        integrate_forward(np.zeros((2, 9)), np.zeros((4, 10)), module)
    with pytest.raises(ValueError):
        integrate_forward(np.zeros((2, 8)), np.zeros((4, 11)), module)


def test_param_count_matches_analytic():
    for element_dim, config in [
        (128, IntegrationConfig(d_visual=64, d_model=64, heads=8)),
        (16, IntegrationConfig(d_visual=8, d_model=8, heads=2)),
        (16, IntegrationConfig(d_visual=8, d_model=8, heads=2, biases=False)),
    ]:
        module = IntegrationModule.init(element_dim, config, seed=0)
        assert module.param_count() == analytic_param_count(element_dim, config)


def test_gradcheck_through_module_and_loss():
    rng = ad.RngStream(6)
    config = IntegrationConfig(d_visual=8, d_model=8, heads=2, ref_weight=3.0)
    module = IntegrationModule.init(6, config, seed=2)
    queries, elements = rng.normal(4, 8), rng.normal(5, 6)
    part = _partition([1, 0, 1, 0, 1])
    is_ped = np.array([1.0, 0.0, 1.0, 0.0])
    w_cls = rng.normal(8, 1)

    def loss(leaves):
        fused, attn = integrate_graph(queries, elements, leaves[:-1], config)
        logits = ad.matmul(fused, leaves[-1])
        task = ad.bce_with_logits(logits, is_ped.reshape(-1, 1))
        ref = reference_loss_graph(attn, part, is_ped)
        return ad.add(task, ad.scale(ref, config.ref_weight))

    assert ad.finite_diff_check(loss, module.params() + [w_cls]) <= 1e-4


def test_reference_loss_descent_routes_attention():
    """Minimizing L_ref alone should push attention mass onto the correct
    partition within a few hundred SGD steps."""
    rng = ad.RngStream(9)
    config = IntegrationConfig(d_visual=8, d_model=8, heads=2)
    module = IntegrationModule.init(12, config, seed=3)
    queries, elements = rng.normal(16, 8), rng.normal(10, 12)
    part = _partition([1, 0, 1, 0, 1, 0, 1, 0, 1, 0])
    is_ped = (np.arange(16) % 2).astype(float)
    for _ in range(500):
        leaves = [ad.Tensor(p, requires_grad=True) for p in module.params()]
        _, attn = integrate_graph(queries, elements, leaves, config)
        loss = reference_loss_graph(attn, part, is_ped)
        loss.backward()
        for param, leaf in zip(module.params(), leaves):
            if leaf.grad is not None:  # value/output path does not feed attention
                param -= 2.0 * leaf.grad
    _, attn = integrate_forward(queries, elements, module)
    final = reference_loss(attn, part, is_ped)
    assert final < 0.01
    assert correct_partition_mass(attn, part, is_ped) > 0.9


def test_module_serialization_roundtrip(tmp_path):
    config = IntegrationConfig(d_visual=8, d_model=8, heads=2, ref_weight=7.5, biases=True)
    module = IntegrationModule.init(10, config, seed=4)
    path = tmp_path / "module.ldaw"
    save_module(module, path)
    loaded = load_module(path)
    assert loaded.config == config
    for name in IntegrationModule.PARAM_NAMES:
        assert np.array_equal(getattr(loaded, name), getattr(module, name)), name


def test_module_serialization_bad_magic(tmp_path):
    path = tmp_path / "module.ldaw"
    path.write_bytes(b"XXXX" + b"\0" * 30)
    with pytest.raises(ValueError):
        load_module(path)
