import numpy as np
import pytest

from fmgan import losses as L
from fmgan import tensor as T
from fmgan import trainers as TR
from fmgan.datasets import ImageDataset, RingDataset
from fmgan.models import ModelConfig

TOY = ModelConfig(scale="toy2d", latent_dim=2, num_classes=1)
SMALL = ModelConfig(side=8, channels=1, latent_dim=4, num_classes=3,
                    conv_widths=(4, 4, 4), gen_widths=(4, 4, 4), feature_dim=8)


def _images(n=24, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 8, 8, 1)).astype(np.float32)
    return ImageDataset(x, np.arange(n) % 3)


def _cvae(**kw):
    cfg = TR.TrainRunConfig(method="cvae_gan", batch_size=6, max_iterations=3, optimizer="adam",
                            lr=1e-3, **kw)
    return cfg, TR.init_state(cfg, SMALL)


def _params(state):
    return {n: p.data.copy() for n, p in state.named_parameters()}


def test_config_validation():
    with pytest.raises(ValueError):
        TR.TrainRunConfig(batch_size=1)
    with pytest.raises(ValueError):
        TR.TrainRunConfig(method="wgan", clamp=0)
    with pytest.raises(ValueError):
        TR.TrainRunConfig(method="vae")
    with pytest.raises(ValueError):
        TR.TrainRunConfig(pairwise_terms=("img", "E"))


def test_toy_settings():
    cfg = TR.TrainRunConfig()
    assert (cfg.batch_size, cfg.optimizer, cfg.lr) == (64, "rmsprop", 5e-5)
    state = TR.init_state(cfg, TOY)
    assert set(state.models.nets()) == {"G", "D"}


def test_cvae_step_reports_all_terms_and_moves_every_net():
    cfg, state = _cvae()
    before = _params(state)
    batch = _images().sample(np.random.default_rng(0), 6)
    report = TR.cvae_gan_step(state, batch.x, batch.c)
    for col in TR.LOSS_COLUMNS + TR.METRIC_EXTRAS["cvae_gan"]:
        assert np.isfinite(report[col])
    after = _params(state)
    for net in ("E", "G", "D", "C"):
        names = [n for n in before if n.startswith(net + ".")]
        assert any(not np.array_equal(before[n], after[n]) for n in names), net
    assert state.iteration == 1


def test_partition_each_net_gets_only_its_terms():
    _, state = _cvae()
    batch = _images().sample(np.random.default_rng(1), 6)
    # seed the centers so every mean-matching term is live
    TR.cvae_gan_step(state, batch.x, batch.c)
    fwd = TR.cvae_gan_losses(state, batch.x, batch.c)
    p, w, models = fwd["parts"], state.weights, state.models
    got = TR.cvae_gan_gradients(state, p)

    def ref(terms, params):
        total = None
        for t, k in terms:
            total = T.mul(t, k) if total is None else T.add(total, T.mul(t, k))
        return T.grad(total, params)

    want = {
        "C": ref([(p["C"], 1.0)], models.C.parameters()),
        "D": ref([(p["D"], 1.0)], models.D.parameters()),
        "G": ref([(p["G"], w.pairwise), (p["GD"], w.mean_d), (p["GC"], w.mean_c)],
                 models.G.parameters()),
        "E": ref([(p["KL"], w.kl), (p["G"], w.pairwise)], models.E.parameters()),
    }
    for net in want:
        for a, b in zip(got[net], want[net]):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)


def test_ablation_mask_drops_pairwise_term():
    batch = _images().sample(np.random.default_rng(2), 6)
    _, full = _cvae()
    _, masked = _cvae(pairwise_terms=("img", "C"))
    f = TR.cvae_gan_losses(full, batch.x, batch.c)
    m = TR.cvae_gan_losses(masked, batch.x, batch.c)
    assert set(m["terms"]) == {"img", "C"}
    expected = f["terms"]["img"].item() + f["terms"]["C"].item()
    assert m["parts"]["G"].item() == pytest.approx(expected, rel=1e-6)
    # G gradient equals the gradient of the remaining terms alone
    g_masked = T.grad(m["parts"]["G"], masked.models.G.parameters())
    g_rebuilt = T.grad(T.add(f["terms"]["img"], f["terms"]["C"]), full.models.G.parameters())
    for a, b in zip(g_masked, g_rebuilt):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-8)


def test_classifier_pairwise_gradient_is_zero_when_masked():
    _, state = _cvae(pairwise_terms=("img", "D"))
    batch = _images().sample(np.random.default_rng(3), 6)
    fwd = TR.cvae_gan_losses(state, batch.x, batch.c)
    assert "C" not in fwd["terms"]
    grads = T.grad(fwd["parts"]["G"], state.models.C.parameters())
    assert all(np.all(g == 0) for g in grads)


def test_without_encoder_and_without_gc():
    _, state = _cvae(use_encoder=False)
    assert state.models.E is None
    batch = _images().sample(np.random.default_rng(4), 6)
    rep = TR.cvae_gan_step(state, batch.x, batch.c)
    assert rep["loss_KL"] == 0 and rep["loss_G"] == 0
    cfg, st = _cvae()
    st.weights = L.LossWeights(mean_c=0.0)
    fwd = TR.cvae_gan_losses(st, batch.x, batch.c)
    objs = L.composite_objective({**fwd["parts"], "GC": 1e9}, st.weights)
    base = L.composite_objective(fwd["parts"], st.weights)
    assert objs["G"].item() == base["G"].item()


def test_cvae_determinism():
    def trace():
        cfg, state = _cvae()
        ds = _images()
        return [TR.train_step(state, ds.sample(state.rng, 6)) for _ in range(3)]
    assert trace() == trace()


@pytest.mark.parametrize("method", ["gan", "fm_gan", "wgan"])
def test_toy_step_determinism(method):
    def trace():
        cfg = TR.TrainRunConfig(method=method, max_iterations=5, seed=3)
        state = TR.run(cfg, RingDataset(), model_cfg=TOY)
        return _params(state)
    a, b = trace(), trace()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_wgan_clamps_critic():
    cfg = TR.TrainRunConfig(method="wgan", clamp=0.01, max_iterations=2)
    state = TR.run(cfg, RingDataset(), model_cfg=TOY)
    assert max(np.abs(p.data).max() for p in state.models.D.parameters()) <= 0.01


def test_wgan_infinite_clamp_leaves_params():
    cfg = TR.TrainRunConfig(method="wgan", clamp=float("inf"), max_iterations=1)
    state = TR.run(cfg, RingDataset(), model_cfg=TOY)
    assert max(np.abs(p.data).max() for p in state.models.D.parameters()) > 0.01


def test_fm_zero_gradient_when_centers_match():
    cfg = TR.TrainRunConfig(method="fm_gan")
    state = TR.init_state(cfg, TOY)
    f = T.Tensor(np.ones((4, 3)), requires_grad=True)
    c = state.bank.update("global", "real", np.ones((4, 3)))
    d = state.bank.update("global", "fake", f)
    (g,) = T.grad(L.loss_GD_mean_match(c, d), [f])
    assert np.all(g == 0)


def test_gan_discriminator_separates_toy_data():
    cfg = TR.TrainRunConfig(method="gan", optimizer="adam", lr=0.0, lr_d=1e-2, max_iterations=300)
    state = TR.run(cfg, RingDataset(), model_cfg=TOY)
    x = RingDataset().sample(np.random.default_rng(9), 256).x
    with T.no_grad():
        d_real = state.models.D(T.Tensor(x)).prob.data
    assert np.median(d_real) > 0.9


def test_max_iterations_zero_returns_initial():
    cfg = TR.TrainRunConfig(max_iterations=0)
    fresh = TR.init_state(cfg, TOY)
    state = TR.run(cfg, RingDataset(), model_cfg=TOY)
    assert state.iteration == 0
    for (n, a), (_, b) in zip(fresh.named_parameters(), state.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_run_resume_matches_uninterrupted():
    cfg = TR.TrainRunConfig(method="fm_gan", max_iterations=20, seed=1)
    full = TR.run(cfg, RingDataset(), model_cfg=TOY)
    part = TR.run(cfg, RingDataset(), model_cfg=TOY, until=8)
    part = TR.run(cfg, RingDataset(), state=part)
    for (n, a), (_, b) in zip(full.named_parameters(), part.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_scale_mismatch_rejected():
    cfg = TR.TrainRunConfig(method="fm_gan", max_iterations=1)
    with pytest.raises(ValueError, match="scale"):
        TR.run(cfg, _images(), model_cfg=TOY)


def test_non_finite_loss_aborts():
    cfg = TR.TrainRunConfig(method="fm_gan", max_iterations=1)
    state = TR.init_state(cfg, TOY)
    x = np.full((64, 2), np.nan)
    with pytest.raises(TR.TrainingDiverged) as err:
        TR.fm_gan_step(state, x)
    assert err.value.iteration == 0
    assert state.iteration == 0


def test_dataset_not_mutated():
    ds = _images()
    before = ds.x.copy()
    cfg, state = _cvae()
    TR.run(cfg, ds, state=state)
    np.testing.assert_array_equal(ds.x, before)


@pytest.mark.slow
def test_toy_losses_stay_finite_long_run():
    cfg = TR.TrainRunConfig(method="fm_gan", max_iterations=50_000)
    rows = []

    class Watch(TR.Sink):
        def step(self, state, report, wall_ms):
            rows.append(report["loss_GD"])

    TR.run(cfg, RingDataset(), sinks=[Watch()], model_cfg=TOY)
    assert np.all(np.isfinite(rows))
