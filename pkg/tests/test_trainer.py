import math

import numpy as np
import pytest
from conftest import groups_for, small_splits

from wblab.classifier import is_etf
from wblab.dataset import LabeledSet, assign_groups
from wblab.linalg import ContractError, RngStream
from wblab.losses import RegConfig, ce_loss
from wblab.network import LinearLayer, NetSpec, Network, backward, forward, init_network
from wblab.trainer import (
    BASE_PRESETS,
    PRESET_ORDER,
    PresetParams,
    SgdConfig,
    StageSpec,
    TrainingDiverged,
    _batches,
    build_preset,
    cosine_lr,
    evaluate,
    run_preset,
    train_stage,
)


def test_cosine_lr_endpoints():
    assert cosine_lr(0.1, 0, 10) == 0.1
    assert cosine_lr(0.1, 10, 10) == 0.0
    assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05, abs=1e-17)
    with pytest.raises(ContractError):
        cosine_lr(0.1, 11, 10)


def test_batches_fold_lone_sample():
    sizes = [b.size for b in _batches(np.arange(9), 4)]
    assert sizes == [4, 5]
    assert [b.size for b in _batches(np.arange(10), 4)] == [4, 4, 2]


def test_sgd_config_validation():
    with pytest.raises(ContractError):
        SgdConfig(lr0=0.0)
    with pytest.raises(ContractError):
        SgdConfig(momentum=1.0)


def test_zero_epochs_leave_net_unchanged(splits):
    net = init_network(NetSpec(splits.train.p, 4, depth=1, width=5), RngStream(0))
    before = {k: v.copy() for k, v in net.params().items()}
    train_stage(net, splits.train, StageSpec(), SgdConfig(epochs=0), RngStream(0))
    assert all(np.array_equal(before[k], v) for k, v in net.params().items())


def test_two_steps_by_hand():
    W0 = np.array([[0.5, -0.2], [0.1, 0.3]])
    X = np.array([[1.0, 2.0], [-1.0, 0.5]])
    y = np.array([0, 1])
    data = LabeledSet(X, y, 2)
    net = Network(NetSpec(2, 2, depth=0), [], LinearLayer(W0.copy()))
    lr0, m = 0.4, 0.9
    train_stage(net, data, StageSpec(), SgdConfig(lr0=lr0, momentum=m, batch_size=2, epochs=2), RngStream(0))

    def grad(Wt):  # Wt is (C, d): dL/dWt = (softmax - onehot)^T X / N
        z = X @ Wt.T
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        return (p - np.eye(2)[y]).T @ X / 2

    g1 = grad(W0)
    W1 = W0 - lr0 * g1
    v2 = m * g1 + grad(W1)
    W2 = W1 - (lr0 / 2) * v2
    np.testing.assert_allclose(net.head.weight, W2, rtol=0, atol=1e-15)


def _plain_sgd(net, data, sgd, rng):
    """Independent minibatch SGD-with-momentum loop over every parameter."""
    vel = {}
    for epoch in range(sgd.epochs):
        lr = sgd.lr0 * (1 + math.cos(math.pi * epoch / sgd.epochs)) / 2
        order = rng.split(epoch).permutation(data.N)
        for start in range(0, data.N, sgd.batch_size):
            idx = order[start:start + sgd.batch_size]
            _, logits, cache = forward(net, data.X[idx], "train")
            grads = backward(net, cache, ce_loss(logits, data.y[idx])[1])
            for slot in net.param_slots():
                v = vel.setdefault(slot.name, np.zeros_like(slot.value))
                vel[slot.name] = sgd.momentum * v + grads[slot.name]
                setattr(slot.owner, slot.attr, slot.value - lr * vel[slot.name])
            net.touch()
    return net


def test_unregularized_stage_is_plain_sgd(splits):
    spec = NetSpec(splits.train.p, 4, depth=2, width=5)
    sgd = SgdConfig(lr0=0.05, batch_size=16, epochs=3)
    a = train_stage(init_network(spec, RngStream(1)), splits.train, StageSpec(), sgd, RngStream(2))[0]
    b = _plain_sgd(init_network(spec, RngStream(1)), splits.train, sgd, RngStream(2))
    assert splits.train.N % 16 != 1  # no folded batch, so both loops see the same batches
    for name, v in a.params().items():
        np.testing.assert_allclose(v, b.params()[name], rtol=0, atol=1e-12)


def test_convex_head_stage_reaches_stationarity(splits):
    net = init_network(NetSpec(splits.train.p, 4, depth=1, width=5), RngStream(3))
    lam = 0.1
    stage = StageSpec(scope="head", reg=RegConfig(lambda_wd=lam))
    train_stage(net, splits.train, stage, SgdConfig(lr0=0.5, batch_size=splits.train.N, epochs=3000), RngStream(0))
    F = forward(net, splits.train.X, "eval")[0]
    _, dlogits = ce_loss(F @ net.W, splits.train.y)
    grad = dlogits.T @ F + lam * net.head.weight
    assert np.linalg.norm(grad) <= 1e-8


def test_head_stage_isolates_extractor(splits):
    net = init_network(NetSpec(splits.train.p, 4, depth=2, width=5), RngStream(0))
    train_stage(net, splits.train, StageSpec(), SgdConfig(epochs=2), RngStream(0))
    before = {k: v.copy() for k, v in net.params().items() if not k.startswith("head")}
    running = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in net.bn_layers()]
    W0 = net.W.copy()
    stage = StageSpec(scope="head", loss="cb", reg=RegConfig(0.1, maxnorm_eta=(1.0,)))
    train_stage(net, splits.train, stage, SgdConfig(epochs=3), RngStream(1))
    for k, v in before.items():
        assert np.array_equal(net.params()[k], v)
    for bn, (m, v) in zip(net.bn_layers(), running):
        assert np.array_equal(bn.running_mean, m) and np.array_equal(bn.running_var, v)
    assert not np.array_equal(net.W, W0)
    assert np.all(np.linalg.norm(net.W, axis=0) <= 1 + 1e-12)


def test_etf_head_is_never_updated(splits):
    net = init_network(NetSpec(splits.train.p, 4, depth=2, width=6), RngStream(0))
    stage = StageSpec(scope="extractor", reg=RegConfig(5e-3, 1e-2), head_policy="etf")
    train_stage(net, splits.train, stage, SgdConfig(epochs=1), RngStream(0))
    W = net.W.copy()
    assert is_etf(W)
    train_stage(net, splits.train, stage, SgdConfig(epochs=2), RngStream(1))
    assert np.array_equal(net.W, W)


def test_fixed_gamma_policy(splits):
    net = init_network(NetSpec(splits.train.p, 4, depth=2, width=6), RngStream(0))
    stage = StageSpec(reg=RegConfig(5e-3), bn_policy="fixed_gamma", bn_gamma=0.05)
    train_stage(net, splits.train, stage, SgdConfig(epochs=2), RngStream(0))
    for bn in net.bn_layers():
        assert np.all(bn.gamma == 0.05) and np.all(bn.beta == 0.0)
    with pytest.raises(ContractError):
        train_stage(net, splits.train, StageSpec(bn_policy="fixed_gamma"), SgdConfig(epochs=1), RngStream(0))


@pytest.mark.parametrize("policy,moves", [("normal", True), ("no_wd", False)])
def test_bn_weight_decay_policy(splits, policy, moves):
    net = init_network(NetSpec(splits.train.p, 4, depth=1, width=5), RngStream(0))
    (bn,) = net.bn_layers()
    bn.gamma[:] = 2.0
    bn.beta[:] = -100.0  # every unit is dead, so only weight decay can move gamma
    stage = StageSpec(reg=RegConfig(0.5), bn_policy=policy)
    assert stage.wd_subset == ("all" if moves else "exclude_bn")
    train_stage(net, splits.train, stage, SgdConfig(epochs=2), RngStream(0))
    assert np.all(bn.gamma < 2.0) if moves else np.all(bn.gamma == 2.0)


def test_divergence_reports_location(splits):
    net = init_network(NetSpec(splits.train.p, 4, depth=0), RngStream(0))
    with pytest.raises(TrainingDiverged) as err, np.errstate(all="ignore"):
        train_stage(net, splits.train, StageSpec(), SgdConfig(lr0=1e308, epochs=5, batch_size=8), RngStream(0))
    assert err.value.epoch == 0 and err.value.lr == 1e308
    assert "epoch 0, batch" in str(err.value)


def test_training_deterministic(splits):
    spec = NetSpec(splits.train.p, 4, depth=2, width=5)
    runs = [train_stage(init_network(spec, RngStream(0)), splits.train,
                        StageSpec(reg=RegConfig(5e-3, 1e-2)), SgdConfig(epochs=3), RngStream(4)) for _ in range(2)]
    for name, v in runs[0][0].params().items():
        assert v.tobytes() == runs[1][0].params()[name].tobytes()
    assert np.array_equal(runs[0][1].correct, runs[1][1].correct)
    assert runs[0][1].correct.shape == (3, splits.train.N)


def test_evaluate_constant_logits_and_average():
    data = LabeledSet(np.zeros((6, 2)), [0, 0, 1, 1, 2, 2], 3)
    net = Network(NetSpec(2, 3, depth=0), [], LinearLayer(np.zeros((3, 2))))
    rep = evaluate(net, data, assign_groups([2, 2, 2], (0, 0)))
    assert rep.per_class.tolist() == [1.0, 0.0, 0.0]
    assert rep.average == pytest.approx(1 / 3)
    assert rep.fdr_test is None


def test_evaluate_average_is_mean_of_per_class(splits):
    net = init_network(NetSpec(splits.train.p, 4, depth=1, width=5), RngStream(0))
    rep = evaluate(net, splits.test, groups_for(splits.train), splits.train)
    pred = np.argmax(forward(net, splits.test.X, "eval")[1], 1)
    per = [np.mean(pred[splits.test.y == k] == k) for k in range(4)]
    assert rep.average == pytest.approx(float(np.mean(per)), abs=1e-15)
    assert set(rep.to_dict()) >= {"per_class", "groups", "average", "fdr_train", "fdr_test"}


def test_degenerate_clusters_reach_full_accuracy():
    sp = small_splits(cov_scale=0.0, separation=5.0)
    net, rep, _ = run_preset(build_preset("ce"), sp, SgdConfig(lr0=0.05, epochs=40, batch_size=16),
                             NetSpec(sp.train.p, 4, depth=1, width=16), groups_for(sp.train))
    assert rep.average == 1.0


def test_well_separated_blobs_high_accuracy():
    sp = small_splits(C=4, N1=100, rho=10, p=8, separation=10.0, cov_scale=1.0)
    _, rep, _ = run_preset(build_preset("ce"), sp, SgdConfig(lr0=0.05, epochs=30, batch_size=32),
                           NetSpec(8, 4, depth=2, width=32), groups_for(sp.train))
    assert rep.average >= 0.95


def test_preset_catalogue():
    for base in BASE_PRESETS:
        for suffix in ("", "+add", "+mult"):
            p = build_preset(base + suffix)
            assert len(p.stages) >= 1
    assert len(PRESET_ORDER) == len(set(PRESET_ORDER)) == 36
    table_rows = [f"{b}{s}" for b in ("ce", "cb", "wd", "wb", "wd_etf", "wd_fr_etf") for s in ("", "+add", "+mult")]
    assert set(table_rows) <= set(PRESET_ORDER)
    assert {"wd_no_bn", "wd_fixed_bn"} <= set(PRESET_ORDER)
    with pytest.raises(ContractError):
        build_preset("focal")


def test_preset_shapes():
    p = PresetParams()
    wb = build_preset("wb", p)
    s1, s2 = wb.stages
    assert (s1.scope, s1.loss, s1.reg.lambda_wd) == ("whole", "ce", p.lambda1)
    assert (s2.scope, s2.loss, s2.reg.lambda_wd, s2.reg.maxnorm_eta) == ("head", "cb", p.lambda2, (1.0,))
    assert build_preset("wb_renorm").stages[1].renormalize
    e = build_preset("wd_fr_etf+mult")
    (st,) = e.stages
    assert (st.scope, st.head_policy, st.reg.zeta_fr) == ("extractor", "etf", p.zeta)
    assert e.post_hoc.kind == "multiplicative" and e.grid()[0] == 0.0
    assert build_preset("ce+add").grid()[0] == 1.0
    assert build_preset("wd_fixed_bn").stages[0].bn_policy == "fixed_gamma"


def test_ce_preset_equals_single_stage(splits):
    spec = NetSpec(splits.train.p, 4, depth=1, width=5)
    sgd = SgdConfig(epochs=3, seed=2)
    net, rep, art = run_preset(build_preset("ce"), splits, sgd, spec, groups_for(splits.train))
    direct = init_network(spec, RngStream(2, (0,)))
    train_stage(direct, splits.train, build_preset("ce").stages[0], sgd, RngStream(2, (1, 0)))
    for name, v in direct.params().items():
        assert np.array_equal(v, net.params()[name])
    assert art.la_search is None and len(art.log_records()) == 3


def test_post_hoc_la_and_gamma_search(splits):
    spec = NetSpec(splits.train.p, 4, depth=1, width=5)
    g = groups_for(splits.train)
    net, rep, art = run_preset(build_preset("wd+mult"), splits, SgdConfig(epochs=2), spec, g)
    assert art.la_search is not None and art.la_search.best in [r["parameter"] for r in art.la_search.rows]
    assert len(art.la_search.rows) == 21
    net, rep, art = run_preset(build_preset("wd+add"), splits, SgdConfig(epochs=2), spec, g)
    assert net.logit_offset is not None
    net, rep, art = run_preset(build_preset("wd_fixed_bn", bn_gamma_grid=(0.05, 0.2)), splits,
                               SgdConfig(epochs=2), spec, g)
    assert art.bn_gamma in (0.05, 0.2) and [r[0] for r in art.bn_gamma_search] == [0.05, 0.2]
    assert all(np.all(bn.gamma == art.bn_gamma) for bn in net.bn_layers())


def test_stage_count_mismatch(splits):
    with pytest.raises(ContractError):
        run_preset(build_preset("wb"), splits, [SgdConfig()], NetSpec(splits.train.p, 4, depth=1, width=4),
                   groups_for(splits.train))
