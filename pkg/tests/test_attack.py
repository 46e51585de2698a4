import math

import numpy as np
import pytest

from vlmrobust import attack as A
from vlmrobust import data
from vlmrobust import tensor as T
from vlmrobust.model import CaptionModel, ModelConfig, PromptLayout
from vlmrobust.tensor import Tensor


@pytest.fixture(scope="module")
def model():
    m = CaptionModel(ModelConfig(), seed=4)
    for k in m.params:
        if k.endswith(".gate"):
            m.params[k] = np.array(0.9)
    return m


@pytest.fixture(scope="module")
def ds():
    return data.make_dataset(60, 1)


def objective(model, rec, mode="untargeted", context=()):
    v = model.vocab
    text = rec.references[0] if mode == "untargeted" else "a purple triangle"
    layout = PromptLayout.captioning(v, [c.references[0] for c in context])
    return A.AttackObjective(mode, v.encode(text), layout, rec.image, [c.image for c in context])


def spec_for(model, recs, mode="untargeted", context=()):
    v = model.vocab
    target = "a purple triangle" if mode == "targeted" else None
    seqs = [v.encode(target or r.references[0]) for r in recs]
    return A.BatchSpec(mode, list(recs), seqs, [c.image for c in context],
                       [c.references[0] for c in context], target)


# ---------------------------------------------------------------- projection

def test_project_examples():
    eps = 1 / 255
    assert A.project(np.array([0.02]), np.array([0.5]), eps)[0] == pytest.approx(eps)
    assert A.project(np.array([eps]), np.array([1.0]), eps)[0] == 0.0
    assert A.project(np.array([-0.3]), np.array([0.0]), 0.1)[0] == 0.0
    with pytest.raises(ValueError):
        A.project(np.zeros(2), np.zeros(2), -1.0)
    with pytest.raises(T.ShapeError):
        A.project(np.zeros(2), np.zeros(3), 0.1)


def test_project_is_idempotent_and_feasible():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.random(500)
        x[rng.random(500) < 0.2] = 1.0
        x[rng.random(500) < 0.2] = 0.0
        eps = float(rng.choice([1 / 255, 4 / 255, rng.random()]))
        d = A.project(rng.normal(size=500), x, eps)
        assert np.array_equal(A.project(d, x, eps), d)
        assert np.all(np.abs(d) <= eps)
        assert np.all(x + d >= 0.0) and np.all(x + d <= 1.0)


def test_threat_model_validation():
    with pytest.raises(ValueError):
        A.ThreatModel(-0.1)
    tm = A.ThreatModel(0.1, 0.0)
    assert tm.query_only and list(tm.radii(3)) == [0.0, 0.0, 0.1]


# ---------------------------------------------------------------- sparsify

def brute_sparsify(d, f):
    flat = d.reshape(-1)
    k = math.ceil(f * flat.size)
    order = sorted(range(flat.size), key=lambda i: (-abs(flat[i]), i))
    out = np.zeros_like(flat)
    for i in order[:k]:
        out[i] = flat[i]
    return out.reshape(d.shape)


def test_sparsify_examples():
    d = np.array([0.1, -0.3, 0.2, 0.05])
    assert np.array_equal(A.sparsify(d, 0.5), [0.0, -0.3, 0.2, 0.0])
    assert np.array_equal(A.sparsify(d, 1.0), d)
    assert np.array_equal(A.sparsify(d, 0.0), np.zeros(4))
    with pytest.raises(ValueError):
        A.sparsify(d, 1.5)


def test_sparsify_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        shape = tuple(rng.integers(1, 5, size=3))
        # quantized values produce ties
        d = rng.integers(-3, 4, size=shape) / 255.0
        for f in (0.0, 0.1, 0.25, 0.5, 0.6, 0.99, 1.0, float(rng.random())):
            assert np.array_equal(A.sparsify(d, f), brute_sparsify(d, f))


def test_sparsify_ties_go_to_lowest_index():
    d = np.array([0.1, -0.1, 0.1, 0.1])
    assert np.array_equal(A.sparsify(d, 0.5), [0.1, -0.1, 0.0, 0.0])


# ---------------------------------------------------------------- checkpoints and config

@pytest.mark.parametrize("n", [1, 2, 10, 37, 100, 500, 5000])
def test_checkpoint_schedule(n):
    w = A.checkpoints(n)
    assert w[0] == 0 and w[1] == math.ceil(0.22 * n)
    assert all(b > a for a, b in zip(w, w[1:]))
    assert w[-1] <= n
    for j in range(1, len(w) - 1):
        step = max(w[j] - w[j - 1] - math.ceil(0.03 * n), math.ceil(0.06 * n))
        assert w[j + 1] == w[j] + step


def test_checkpoint_schedule_example():
    assert A.checkpoints(100) == [0, 22, 41, 57, 70, 80, 87, 93, 99]


def test_apgd_config_validation():
    with pytest.raises(ValueError):
        A.APGDConfig(iterations=0)
    with pytest.raises(ValueError):
        A.APGDConfig(momentum=1.0)


# ---------------------------------------------------------------- objective

def test_objective_at_zero_is_clean_nll(model, ds):
    obj = objective(model, ds.records[0])
    val = A.objective_value(model, obj, np.zeros((32, 32, 3)))
    ll = model.sequence_log_likelihood(obj.sequence, obj.layout, [Tensor(obj.query)])
    assert val.item() == -ll.item()
    assert val.item() >= 0.0


def test_objective_rejects_infeasible_perturbation(model, ds):
    obj = objective(model, ds.records[0])
    tm = A.ThreatModel(1 / 255)
    with pytest.raises(A.FeasibilityError):
        A.objective_value(model, obj, np.full((32, 32, 3), 0.1), tm=tm)


def test_objective_gradient_matches_finite_differences(model, ds):
    rng = np.random.default_rng(2)
    for mode in ("untargeted", "targeted"):
        rec = ds.records[3]
        obj = objective(model, rec, mode)
        obj.query = np.clip(rec.image, 0.05, 0.95)
        d0 = rng.uniform(-0.01, 0.01, size=(32, 32, 3))
        leaf = Tensor(d0, requires_grad=True)
        g = T.backward(A.objective_value(model, obj, leaf))[leaf]
        coords = rng.choice(d0.size, size=4, replace=False)
        fd = T.finite_difference_gradient(lambda t: A.objective_value(model, obj, t), d0, coords=coords)
        got, want = g.reshape(-1)[coords], fd.reshape(-1)[coords]
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-4


# ---------------------------------------------------------------- APGD

def test_apgd_trace_is_monotone_and_feasible(model, ds):
    cfg = A.APGDConfig(iterations=12)
    for mode in ("untargeted", "targeted"):
        obj = objective(model, ds.records[5], mode)
        tm = A.ThreatModel(4 / 255)
        res = A.apgd(model, obj, tm, cfg)
        bt = np.array(res.best_trace)
        assert len(res.trace) == len(bt) == 13
        if mode == "untargeted":
            assert np.all(np.diff(bt) >= 0) and res.best_objective == max(res.trace)
            assert res.best_objective >= res.trace[0]
        else:
            assert np.all(np.diff(bt) <= 0) and res.best_objective == min(res.trace)
        assert A.feasible(res.delta_q, obj.query, tm.eps_q)


def test_targeted_step_lowers_objective(model, ds):
    obj = objective(model, ds.records[7], "targeted")
    res = A.apgd(model, obj, A.ThreatModel(8 / 255), A.APGDConfig(iterations=3))
    assert res.best_objective < res.trace[0]


def test_zero_radius_leaves_input_clean(model, ds):
    rec = ds.records[2]
    obj = objective(model, rec)
    res = A.apgd(model, obj, A.ThreatModel(0.0), A.APGDConfig(iterations=4))
    assert not np.any(res.delta_q)
    clean = model.generate(obj.layout, [Tensor(rec.image)]).text
    assert res.caption == clean


def test_query_only_keeps_context_at_zero(model, ds):
    ctx = ds.records[:4]
    spec = spec_for(model, ds.records[10:13], context=ctx)
    res = A.attack_batch(model, spec, A.ThreatModel(4 / 255, 0.0), A.APGDConfig(iterations=3))
    for r in res:
        assert len(r.delta_c) == 4 and all(not np.any(d) for d in r.delta_c)
    both = A.attack_batch(model, spec, A.ThreatModel(4 / 255, 4 / 255), A.APGDConfig(iterations=3))
    assert any(np.any(d) for r in both for d in r.delta_c)
    for r, rec in zip(both, spec.records):
        assert A.feasible(r.delta_q, rec.image, 4 / 255)
        assert all(A.feasible(d, c.image, 4 / 255) for d, c in zip(r.delta_c, ctx))


def test_zero_shot_all_and_query_modes_coincide(model, ds):
    spec = spec_for(model, ds.records[20:24])
    a = A.attack_batch(model, spec, A.ThreatModel(4 / 255, 4 / 255), A.APGDConfig(iterations=5))
    b = A.attack_batch(model, spec, A.ThreatModel(4 / 255, 0.0), A.APGDConfig(iterations=5))
    for x, y in zip(a, b):
        assert np.array_equal(x.delta_q, y.delta_q)
        assert x.trace == y.trace and x.caption == y.caption


def test_attack_batch_is_deterministic_across_workers(model, ds):
    spec = spec_for(model, ds.records[30:35], "targeted")
    cfg = A.APGDConfig(iterations=4)
    a = A.attack_batch(model, spec, A.ThreatModel(2 / 255), cfg, chunk_size=2, workers=1)
    b = A.attack_batch(model, spec, A.ThreatModel(2 / 255), cfg, chunk_size=2, workers=3)
    assert [r.record_id for r in a] == [r.record_id for r in spec.records]
    for x, y in zip(a, b):
        assert x.delta_q.tobytes() == y.delta_q.tobytes()
        assert x.trace == y.trace and x.caption == y.caption and x.success == y.success


def test_batched_attack_matches_single_run(model, ds):
    rec = ds.records[40]
    single = A.apgd(model, objective(model, rec), A.ThreatModel(4 / 255), A.APGDConfig(iterations=6))
    batch = A.attack_batch(model, spec_for(model, [rec]), A.ThreatModel(4 / 255), A.APGDConfig(iterations=6))
    assert np.allclose(single.trace, batch[0].trace, atol=1e-9)


def test_attack_batch_rejects_empty(model):
    with pytest.raises(ValueError):
        A.attack_batch(model, A.BatchSpec("untargeted", [], []), A.ThreatModel(0.1), A.APGDConfig(1))


def test_non_finite_objective_aborts(ds):
    m = CaptionModel(ModelConfig(), seed=0)
    m.params["head.b"] = np.full_like(m.params["head.b"], np.nan)
    with pytest.raises(A.AttackDivergence):
        A.attack_batch(m, spec_for(m, ds.records[:2]), A.ThreatModel(0.1), A.APGDConfig(2))


def test_audit_flags_infeasible_results(model, ds):
    spec = spec_for(model, ds.records[:1])
    bad = A.AttackResult(0, np.full((32, 32, 3), 0.5), [], [0.0], [0.0], 0.0)
    with pytest.raises(A.FeasibilityError):
        A.audit([bad], spec, A.ThreatModel(1 / 255))
