import json

import numpy as np
import pytest
import torch

from fedgca import classifier as clf
from fedgca.dataset_store import partition_dirichlet
from fedgca.federation import (
    ClientState,
    FederationError,
    ServerState,
    client_update,
    run_federation,
    server_aggregate,
)
from fedgca.objectives import LossBreakdown, PredictionSet, loss_ce, loss_gc, loss_oc
from fedgca.streams import derive_seed, make_rng
from fedgca.style_complement import style_complement

from conftest import TINY_SPEC, make_dataset, tiny_config, tiny_source

D = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731


def server(w, lam, alpha, K):
    return ServerState(0, D(*w), D(*lam), 0.1, alpha, 1, 1, K)


def quadratic_stub(w, images, labels, snapshot, lambda_i, seed):
    loss = 0.5 * ((w - 3.0) ** 2).sum()
    return LossBreakdown(ce=loss, total=loss)


def one_param_client(lam=0.0):
    shard = make_dataset(n=4, classes=2, shape=(1, 2, 2))
    return ClientState(0, shard, D(lam))


def test_zero_epochs_returns_snapshot():
    cfg = tiny_config(I=0)
    snap = clf.init_params(TINY_SPEC, 0, torch.float64)
    client = ClientState(0, tiny_source(8), torch.ones(TINY_SPEC.D, dtype=torch.float64))
    w, lam = client_update(client, snap, cfg)
    assert torch.equal(w, snap)
    assert torch.equal(lam, client.lambda_i)


def test_quadratic_stub_single_step():
    cfg = tiny_config(I=1, eta=0.1, alpha=0.1, batch_size=64)
    res = client_update(one_param_client(0.2), D(0.0), cfg, objective=quadratic_stub)
    assert res.params.item() == pytest.approx(0.3, abs=1e-15)
    assert res.lambda_i.item() == pytest.approx(0.2 - 0.1 * 0.3, abs=1e-15)
    assert len(res.losses) == 1 and res.losses[0].total == pytest.approx(4.5)


def test_non_finite_loss_reports_coordinates():
    def bad(w, *args):
        return LossBreakdown(total=(w * float("nan")).sum())

    with pytest.raises(FederationError, match="round 3, client 0, epoch 0, batch 0"):
        client_update(one_param_client(), D(1.0), tiny_config(), round_idx=3, objective=bad)


def test_aggregate_hand_arithmetic():
    out = server_aggregate(server([2.0], [0.0], 0.1, 2), [D(1.0), D(3.0)])
    assert out.lambda_.tolist() == [0.0] and out.global_params.tolist() == [2.0]
    out = server_aggregate(server([2.0], [0.5], 0.1, 2), [D(1.0), D(3.0)])
    assert out.lambda_.tolist() == [0.5] and out.global_params.tolist() == [-3.0]
    assert out.round == 1


def test_aggregate_fixed_point():
    w = torch.from_numpy(np.random.default_rng(11).normal(size=7))
    s = ServerState(0, w, torch.zeros(7, dtype=torch.float64), 0.1, 0.1, 1, 1, 3)
    out = server_aggregate(s, [w.clone() for _ in range(3)])
    assert torch.equal(out.global_params, w) and torch.all(out.lambda_ == 0)


def test_aggregate_fedavg_path_and_weights():
    s = server([0.0], [0.0], 0.0, 2)
    assert server_aggregate(s, [D(1.0), D(3.0)]).global_params.item() == 2.0
    s.weighted_aggregation = True
    assert server_aggregate(s, [D(1.0), D(3.0)], [3, 1]).global_params.item() == 1.5


def test_aggregate_errors():
    s = server([0.0], [0.0], 0.1, 2)
    with pytest.raises(FederationError, match="expected 2"):
        server_aggregate(s, [D(1.0)])
    with pytest.raises(FederationError, match="client 1"):
        server_aggregate(s, [D(1.0), D(1.0, 2.0)])


def test_dual_average_identity():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K, n = int(rng.integers(1, 8)), int(rng.integers(1, 20))
        alpha = float(rng.uniform(0.01, 10))
        w_t, lam = torch.from_numpy(rng.normal(size=n)), torch.from_numpy(rng.normal(size=n))
        ws = [torch.from_numpy(rng.normal(size=n)) for _ in range(K)]
        out = server_aggregate(ServerState(0, w_t, lam, 0.1, alpha, 1, 1, K), ws)
        expected = -(alpha / K) * sum(w - w_t for w in ws)
        assert (out.lambda_ - lam - expected).abs().max() < 1e-12


def test_zero_rounds():
    cfg = tiny_config(T=0)
    init = clf.init_params(TINY_SPEC, cfg.master_seed, torch.float64)
    final, hist = run_federation(cfg, tiny_source())
    assert torch.equal(final, init) and hist == []


def test_zero_epochs_single_client_keeps_params():
    cfg = tiny_config(T=1, K=1, I=0)
    final, hist = run_federation(cfg, tiny_source())
    assert torch.equal(final, clf.init_params(TINY_SPEC, cfg.master_seed, torch.float64))
    assert len(hist) == 1


def test_history_and_checkpoints(tmp_path):
    cfg = tiny_config(T=2, checkpoint_every=1)
    calls = []

    def evaluator(p):
        calls.append(p.clone())
        return {"tgt": 0.5}

    _, hist = run_federation(cfg, tiny_source(), evaluator, tmp_path / "h.ndjson", tmp_path / "ck")
    lines = [json.loads(l) for l in (tmp_path / "h.ndjson").read_text().splitlines()]
    assert [l["round"] for l in lines] == [1, 2]
    assert lines[-1]["eval"] == {"tgt": 0.5}
    assert len(lines[0]["per_client_losses"]) == 2
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["round_0001.json", "round_0002.json"]
    _, params, extra = clf.load_checkpoint(tmp_path / "ck" / "round_0002.json")
    assert extra["round"] == 2 and len(extra["lambda"]) == TINY_SPEC.D
    assert torch.equal(params, calls[-1])


def test_shape_mismatch_rejected():
    with pytest.raises(FederationError, match="do not match"):
        run_federation(tiny_config(), make_dataset(n=10, classes=2, shape=(1, 8, 8)))


def test_deterministic():
    cfg = tiny_config()
    a, _ = run_federation(cfg, tiny_source())
    b, _ = run_federation(cfg, tiny_source())
    assert torch.equal(a, b)


# Straight-line replay of the round loop. It shares only the loss/classifier
# primitives and the keyed generator with the implementation.

def replay(cfg, source):
    spec = cfg.classifier_spec
    w = clf.init_params(spec, cfg.master_seed, torch.float64)
    lam_server = torch.zeros_like(w)
    plan = partition_dirichlet(source, cfg.K, cfg.dirichlet_concentration, cfg.master_seed)
    shards = [(source.images[a], source.labels[a]) for a in plan.assignments]
    lams = [torch.zeros_like(w) for _ in shards]
    for t in range(cfg.T):
        snap = w.clone()
        uploads = []
        for k, (X, Y) in enumerate(shards):
            v = snap.clone()
            for e in range(cfg.I):
                order = make_rng((cfg.master_seed, 1, t, k, e)).permutation(len(Y))
                for b, s in enumerate(range(0, len(Y), cfg.batch_size)):
                    idx = order[s : s + cfg.batch_size]
                    x, y = X[idx], Y[idx]
                    seed = derive_seed(cfg.master_seed, 2, t, k, e, b)
                    views = style_complement(x, y, cfg.augment, seed).views
                    V, n = len(views), len(y)
                    xs = np.stack(views).reshape(V * n, *x.shape[1:])
                    v.requires_grad_(True)
                    logits, feats = clf.forward(spec, v, xs)
                    p = clf.softmax(logits).view(V, n, -1)
                    loss = loss_ce(p, y)
                    if cfg.beta > 0:
                        with torch.no_grad():
                            gl, gf = clf.forward(spec, snap, xs)
                            gp = clf.softmax(gl).view(V, n, -1)
                        cls = p[0].detach().argmax(-1).repeat(V)
                        lc = clf.normalize_cam(clf.raw_cam(clf.unflatten(spec, v)["fc.weight"], feats, cls))
                        gc_ = clf.normalize_cam(clf.raw_cam(clf.unflatten(spec, snap)["fc.weight"], gf, cls))
                        lc, gc_ = lc.view(V, n, *lc.shape[1:]), gc_.view(V, n, *gc_.shape[1:])
                        loss = loss + cfg.alpha * loss_oc(v, snap, lams[k], cfg.alpha)
                        loss = loss + cfg.beta * loss_gc(PredictionSet(p, gp), lc, gc_)[0]
                    elif cfg.alpha > 0:
                        loss = loss + cfg.alpha * loss_oc(v, snap, lams[k], cfg.alpha)
                    (g,) = torch.autograd.grad(loss, v)
                    v = v.detach() - cfg.eta * g
            if cfg.alpha > 0:
                lams[k] = lams[k] - cfg.alpha * (v - snap)
            uploads.append(v)
        step = (torch.stack(uploads) - snap).sum(0)
        avg = snap + step / cfg.K
        if cfg.alpha > 0:
            lam_server = lam_server - (cfg.alpha / cfg.K) * step
            w = avg - lam_server / cfg.alpha
        else:
            w = avg
    return w


def test_fedgca_matches_replay():
    cfg = tiny_config(T=2, K=2, I=2)
    got, _ = run_federation(cfg, tiny_source())
    want = replay(cfg, tiny_source())
    assert torch.equal(got, want), (got - want).abs().max()


def test_fedavg_reduction_matches_plain_sgd():
    cfg = tiny_config(preset="fedavg", T=2, K=2)
    assert cfg.alpha == 0 and cfg.beta == 0 and cfg.J == 0
    got, _ = run_federation(cfg, tiny_source())
    assert torch.equal(got, replay(cfg, tiny_source()))
