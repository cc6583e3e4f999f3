import numpy as np
import pytest

from ldae import autodiff as ad
from ldae.clustering import assign_all, kmeans, label_elements
from ldae.prompting import (
    ClassifierHead,
    PromptSet,
    TuneConfig,
    classify_element,
    compose_elements,
    prompt_tune,
    tuning_loss,
)


def _tuned(small_knowledge, epochs=8, **kwargs):
    centroid_set = kmeans(small_knowledge, 10, seed=0)
    assignments = assign_all(np.asarray(small_knowledge.data, dtype=np.float64), centroid_set)
    config = TuneConfig(epochs=epochs, seed=0, **kwargs)
    prompts, head, curve = prompt_tune(small_knowledge, centroid_set, assignments, config)
    return centroid_set, assignments, prompts, head, curve


def test_epochs_zero_is_identity(small_knowledge):
    centroid_set, _, prompts, head, curve = _tuned(small_knowledge, epochs=0)
    assert np.array_equal(prompts.prompts, np.zeros_like(centroid_set.centroids))
    assert prompts.steps_trained == 0
    assert curve == []
    fresh = ClassifierHead.init(centroid_set.dim, 256, seed=0)
    for got, want in zip(head.params(), fresh.params()):
        assert np.array_equal(got, want)


def test_bce_descends_and_prompts_move(small_knowledge):
    centroid_set, _, prompts, _, curve = _tuned(small_knowledge, epochs=20)
    assert curve[-1] < curve[0] - 0.02
    assert np.any(prompts.prompts != 0)
    assert prompts.steps_trained > 0


def test_centroids_stay_frozen(small_knowledge):
    centroid_set, _, _, _, _ = _tuned(small_knowledge)
    digest_before = centroid_set.digest()
    _tuned(small_knowledge)
    assert centroid_set.digest() == digest_before


def test_elements_recoverable_from_parts(small_knowledge):
    centroid_set, assignments, prompts, _, _ = _tuned(small_knowledge)
    partition = label_elements(assignments, small_knowledge.labels, centroid_set.k)
    elements = compose_elements(centroid_set, prompts, partition)
    assert np.array_equal(elements.elements, centroid_set.centroids + prompts.prompts)
    assert elements.centroid_digest == centroid_set.digest()
    assert elements.prompt_digest == prompts.digest()


def test_head_agreement_with_element_labels(small_knowledge):
    centroid_set, assignments, prompts, head, _ = _tuned(small_knowledge, epochs=25)
    partition = label_elements(assignments, small_knowledge.labels, centroid_set.k)
    elements = compose_elements(centroid_set, prompts, partition)
    predictions = [
        int(classify_element(elements.elements[j], head) > 0.5) for j in range(elements.k)
    ]
    assert predictions == partition.labels.tolist()


def test_strict_prompts_only_freezes_head(small_knowledge):
    centroid_set, _, prompts, head, _ = _tuned(small_knowledge, strict_prompts_only=True)
    fresh = ClassifierHead.init(centroid_set.dim, 256, seed=0)
    for got, want in zip(head.params(), fresh.params()):
        assert np.array_equal(got, want)
    assert np.any(prompts.prompts != 0)


def test_tune_deterministic(small_knowledge):
    _, _, a, _, curve_a = _tuned(small_knowledge, epochs=3)
    _, _, b, _, curve_b = _tuned(small_knowledge, epochs=3)
    assert np.array_equal(a.prompts, b.prompts)
    assert curve_a == curve_b


def test_compose_shape_mismatch(small_knowledge):
    centroid_set, assignments, _, _, _ = _tuned(small_knowledge, epochs=0)
    partition = label_elements(assignments, small_knowledge.labels, centroid_set.k)
    bad = PromptSet(np.zeros((centroid_set.k + 1, centroid_set.dim)))
    with pytest.raises(ValueError):
        compose_elements(centroid_set, bad, partition)


def test_config_validation(small_knowledge):
    centroid_set = kmeans(small_knowledge, 4, seed=0)
    assignments = assign_all(np.asarray(small_knowledge.data, dtype=np.float64), centroid_set)
    with pytest.raises(ValueError):
        prompt_tune(small_knowledge, centroid_set, assignments, TuneConfig(lr=0.0))
    with pytest.raises(ValueError):
        prompt_tune(small_knowledge, centroid_set, assignments[:-1], TuneConfig())


def test_classify_element_matches_graph():
    rng = ad.RngStream(5)
    head = ClassifierHead.init(6, 4, seed=3)
    element = rng.normal(1, 6).ravel()
    graph_logit = (
        np.maximum(element @ head.w1 + head.b1, 0.0) @ head.w2 + head.b2
    )
    expected = 1.0 / (1.0 + np.exp(-graph_logit[0]))
    assert classify_element(element, head) == pytest.approx(float(expected))


def test_tuning_loss_gradcheck():
    rng = ad.RngStream(11)
    k, d, h, n = 4, 6, 5, 24
    centroids = rng.normal(k, d)
    assignments = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    labels = (rng.normal(n, 1) > 0).astype(float).ravel()
    params = [rng.normal(k, d), rng.normal(d, h), rng.normal(1, h), rng.normal(h, 1), rng.normal(1, 1)]
    err = ad.finite_diff_check(
        lambda leaves: tuning_loss(labels, centroids, assignments, leaves), params
    )
    assert err <= 1e-4
