import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgnas import kernel as K
from hgnas.design_space import (
    IDENTITY,
    SKIP,
    Aggregate,
    Combine,
    Sample,
    SpaceConfig,
    canonical_form,
    genotype,
    random_genotype,
)
from hgnas.device_model import InputSpec, builtin_profiles, oracle_latency
from hgnas.predictor import (
    FUNCTIONS,
    KINDS,
    Batch,
    LatencySample,
    PredictorModel,
    encode,
    evaluate_predictor,
    predict,
    ranking_accuracy,
    report_from_predictions,
    train_predictor,
)

SPACE = SpaceConfig()
PROFILES = builtin_profiles()
GPU = PROFILES["gpu_like"]


def test_one_position_graph_structure():
    ag = encode(genotype([Combine(16)]), InputSpec(), GPU)
    assert ag.num_nodes == 4
    assert ag.kinds == ["input", "combine", "output", "global"]
    chain = {(0, 1), (1, 2)}
    glob = {(3, 0), (0, 3), (3, 1), (1, 3), (3, 2), (2, 3)}
    assert ag.edge_set() == chain | glob


def test_one_hot_layout():
    g = genotype([Sample("knn", 16), Aggregate("max", "full"), Combine(64), SKIP, IDENTITY])
    ag = encode(g, InputSpec(), GPU)
    nk, nf = len(KINDS), len(FUNCTIONS)
    assert np.all(ag.features[:, :nk].sum(axis=1) == 1)
    for i, kind in enumerate(ag.kinds):
        hot = ag.features[i, nk : nk + nf]
        if kind in ("input", "output", "global"):
            assert not hot.any()
        else:
            assert hot.sum() == 1
    assert ag.num_nodes == len(canonical_form(g)) + 3


def test_global_node_adjacent_to_all():
    ag = encode(random_genotype(SPACE, 5), InputSpec(), GPU)
    gi = ag.kinds.index("global")
    edges = ag.edge_set()
    for j in range(ag.num_nodes):
        if j != gi:
            assert (gi, j) in edges and (j, gi) in edges
    assert ag.kinds.count("input") == ag.kinds.count("output") == ag.kinds.count("global") == 1


def test_device_changes_only_global_feature():
    g = random_genotype(SPACE, 2)
    a = encode(g, InputSpec(), GPU)
    b = encode(g, InputSpec(), PROFILES["constrained_like"])
    assert a.kinds == b.kinds and a.edge_set() == b.edge_set()
    gi = a.kinds.index("global")
    others = [i for i in range(a.num_nodes) if i != gi]
    assert np.array_equal(a.features[others], b.features[others])
    assert not np.array_equal(a.features[gi], b.features[gi])


def test_strict_mode_is_narrower_and_mismatch_rejected():
    g = random_genotype(SPACE, 1)
    strict = encode(g, InputSpec(), GPU, mode="strict")
    ext = encode(g, InputSpec(), GPU)
    assert strict.features.shape[1] == ext.features.shape[1] - 13
    with pytest.raises(ValueError):
        predict(PredictorModel.init(0), strict)
    predict(PredictorModel.init(0, mode="strict"), strict)


def test_predict_deterministic_nonnegative_and_zero_model():
    m = PredictorModel.init(3, out_bias=5.0)
    ag = encode(random_genotype(SPACE, 9), InputSpec(), GPU)
    a, b = predict(m, ag), predict(m, ag)
    assert a == b and a >= 0
    assert predict(m.zero(), ag) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["mean", "global"]))
def test_readout_invariant_to_node_order(seed, readout):
    m = PredictorModel.init(1, readout=readout, out_bias=4.0)
    ag = encode(random_genotype(SPACE, seed), InputSpec(), GPU)
    perm = np.random.default_rng(seed).permutation(ag.num_nodes)
    assert abs(predict(m, ag.permute(perm)) - predict(m, ag)) <= 1e-9 * max(1.0, predict(m, ag))


def _predictor_gradcheck(model, graphs, labels, per_tensor=6, seed=0):
    batch = Batch.of(graphs, model.readout)
    _, grads = model.loss_and_grads(batch, labels)
    rng = np.random.default_rng(seed)

    def f():
        return model.loss_and_grads(batch, labels)[0]

    worst = 0.0
    for name, p in model.params.items():
        picks = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(per_tensor)]
        num = K.numerical_grad(f, p, eps=1e-5, index=picks)
        for ix in picks:
            a, n = grads[name][ix], num[ix]
            denom = max(abs(a), abs(n), 1e-8)
            worst = max(worst, abs(a - n) / denom)
    return worst


def test_full_predictor_gradient_matches_finite_differences():
    # 4-node graphs: input, one operation, output, global
    graphs = [encode(genotype([f]), InputSpec(), GPU) for f in (Combine(16), Sample("knn", 8))]
    model = PredictorModel.init(0, out_bias=3.0)
    # labels far from the predictions keep the MAPE kink out of the stencil
    pred = model.predict_graphs(graphs)
    worst = _predictor_gradcheck(model, graphs, pred * np.array([3.0, 0.2]))
    assert worst <= 1e-4


def _samples(n, seed, profiles=None, spec=InputSpec()):
    rng = np.random.default_rng(seed)
    profiles = profiles or list(PROFILES.values())
    out = []
    for i in range(n):
        g = random_genotype(SPACE, int(rng.integers(2**31)))
        p = profiles[i % len(profiles)]
        out.append(LatencySample(g, p, oracle_latency(g, spec, p, check_memory=False).total, spec))
    return out


def test_constant_labels_converge():
    data = [LatencySample(s.genotype, s.profile, 7.5) for s in _samples(40, 0)]
    m = train_predictor(data, epochs=40, seed=0, batch_size=20, gcn_widths=(32, 32, 32), mlp_widths=(16, 8))
    assert evaluate_predictor(m, data).mape < 0.01


def test_rejects_bad_labels():
    s = _samples(3, 0)
    with pytest.raises(ValueError):
        train_predictor([LatencySample(s[0].genotype, GPU, 0.0)], epochs=1)
    with pytest.raises(ValueError):
        train_predictor([], epochs=1)


def test_training_beats_shuffled_labels_and_is_deterministic():
    data = _samples(240, 1, [GPU])
    train, val = data[:180], data[180:]
    kw = dict(epochs=30, batch_size=30, gcn_widths=(64, 64, 64), mlp_widths=(32, 16))
    m = train_predictor(train, seed=0, **kw)
    m2 = train_predictor(train, seed=0, **kw)
    assert all(np.array_equal(m.params[k], m2.params[k]) for k in m.params)
    labels = np.random.default_rng(0).permutation([s.ms for s in train])
    shuffled = [LatencySample(s.genotype, s.profile, float(ms)) for s, ms in zip(train, labels)]
    control = train_predictor(shuffled, seed=0, **kw)
    good, bad = evaluate_predictor(m, val), evaluate_predictor(control, val)
    assert good.mape < 0.5 * bad.mape
    assert good.ranking > bad.ranking


def test_report_edge_cases():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    r = report_from_predictions(y, y)
    assert (r.mape, r.within_bound, r.ranking) == (0.0, 1.0, 1.0)
    r = report_from_predictions(2 * y, y)
    assert (r.mape, r.within_bound, r.ranking) == (1.0, 0.0, 1.0)
    assert ranking_accuracy(y[::-1], y) == 0.0
    assert ranking_accuracy(np.array([1.0, 5.0]), np.array([2.0, 2.0])) == 1.0
    with pytest.raises(ValueError):
        report_from_predictions([], [])


def test_report_resampling_reproducible():
    data = _samples(30, 4)
    m = PredictorModel.init(0, gcn_widths=(16, 16, 16), mlp_widths=(8, 4), out_bias=8.0)
    a = evaluate_predictor(m, data, resample_seed=3)
    assert a == evaluate_predictor(m, data, resample_seed=3)
    for v in (a.mape, a.within_bound, a.ranking):
        assert v >= 0
    assert 0 <= a.within_bound <= 1 and 0 <= a.ranking <= 1


def test_checkpoint_roundtrip(tmp_path):
    m = PredictorModel.init(2, out_bias=6.0, gcn_widths=(16, 32, 32), mlp_widths=(8, 4))
    m.meta = {"epochs": 3}
    m.save(tmp_path / "pred")
    m2 = PredictorModel.load(tmp_path / "pred")
    ag = encode(random_genotype(SPACE, 0), InputSpec(), GPU)
    assert predict(m, ag) == predict(m2, ag)
    assert m2.meta == {"epochs": 3} and m2.gcn_widths == (16, 32, 32)
