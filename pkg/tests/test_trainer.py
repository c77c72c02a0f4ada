import numpy as np
import pytest

from perturbgan import ops
from perturbgan.data import load_dataset
from perturbgan.models import ParamStore
from perturbgan.presets import TINY_CONFIG
from perturbgan.tape import Tape, gradient
from perturbgan.trainer import (AdamHyper, AdamState, ConfigError, HistoryRecord, TrainConfig,
                                TrainHistory, TrainingError, adam_step, iteration_noise,
                                parse_config, read_ppm, image_grid, train, wgan_gp_losses,
                                write_ppm)

FAST = TINY_CONFIG.replace(iterations=10, n_critic=2, n_data=64)


def _store(**arrays):
    return ParamStore({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


def test_adam_zero_gradient_is_a_no_op():
    store = _store(w=[1.0, -2.0])
    new, st = adam_step(store, {"w": np.zeros(2)}, AdamState.zeros(store))
    np.testing.assert_array_equal(new["w"], store["w"])
    assert not np.any(st.m["w"]) and not np.any(st.v["w"])
    assert st.step == 1


def test_adam_first_step_closed_form():
    store = _store(theta=[0.0])
    hyper = AdamHyper(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    new, _ = adam_step(store, {"theta": np.array([0.5])}, AdamState.zeros(store), hyper)
    # bias correction makes m_hat = g and v_hat = g^2 on the first step
    assert new["theta"][0] == pytest.approx(-1e-3 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    assert new["theta"][0] == pytest.approx(-9.99987e-4, abs=1e-7)


def test_adam_is_deterministic_over_100_steps():
    def run():
        store = _store(w=np.linspace(-1, 1, 7))
        st = AdamState.zeros(store)
        r = np.random.default_rng(3)
        for _ in range(100):
            store, st = adam_step(store, {"w": r.normal(size=7)}, st, AdamHyper(lr=1e-2))
        return store["w"]
    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_bad_gradients():
    store = _store(w=[0.0, 0.0])
    with pytest.raises(ValueError, match="shape"):
        adam_step(store, {"w": np.zeros(3)}, AdamState.zeros(store))
    with pytest.raises(TrainingError, match="iteration 17"):
        adam_step(store, {"w": np.array([np.nan, 0.0])}, AdamState.zeros(store), iteration=17)


def _linear_critic(tape, w):
    def critic(x):
        return ops.matmul(ops.reshape(x, (x.shape[0], -1)), w)
    return critic


def _batches(seed=0, n=4, shape=(2, 3)):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, *shape)), r.normal(size=(n, *shape)), r.random(n)


def test_constant_critic_losses():
    real, fake, eps = _batches()
    t = Tape()
    c = 1.7

    def critic(x):
        # the zero-weighted term keeps x on the graph so the penalty sees a zero gradient
        flat = ops.reshape(x, (x.shape[0], -1))
        return ops.add_scalar(ops.matmul(flat, t.const(np.zeros((6, 1)))), c)

    d_loss, g_loss, gp = wgan_gp_losses(critic, real, fake, eps, 10.0, t)
    assert d_loss.item() == pytest.approx(10.0)
    assert g_loss.item() == pytest.approx(-c)
    assert gp.item() == pytest.approx(10.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_critic_penalty_is_analytic(seed):
    real, fake, eps = _batches(seed, n=2 + seed)
    wv = np.random.default_rng(10 + seed).normal(size=(6, 1))
    t = Tape()
    _, _, gp = wgan_gp_losses(_linear_critic(t, t.param(wv)), real, fake, eps, 3.0, t)
    assert gp.item() == pytest.approx(3.0 * (np.linalg.norm(wv) - 1) ** 2, rel=1e-12)


def test_penalty_gradient_for_linear_critic():
    # d/dw (|w| - 1)^2 = 2 (|w| - 1) w / |w|
    real, fake, eps = _batches(4)
    wv = np.random.default_rng(5).normal(size=(6, 1))
    t = Tape()
    w = t.param(wv)
    _, _, gp = wgan_gp_losses(_linear_critic(t, w), real, fake, eps, 1.0, t)
    g = gradient(t, gp, [w])[w.id].value
    n = np.linalg.norm(wv)
    np.testing.assert_allclose(g, 2 * (n - 1) * wv / n, rtol=1e-10)


def test_lambda_zero_linear_critic_gradient_is_moment_difference():
    real, fake, eps = _batches(6, n=5)
    t = Tape()
    w = t.param(np.random.default_rng(7).normal(size=(6, 1)))
    d_loss, _, gp = wgan_gp_losses(_linear_critic(t, w), real, fake, eps, 0.0, t)
    assert gp.item() == 0.0
    wv = w.value.ravel()
    expect = (fake.reshape(5, -1) @ wv).mean() - (real.reshape(5, -1) @ wv).mean()
    assert d_loss.item() == expect
    g = gradient(t, d_loss, [w])[w.id].value.ravel()
    np.testing.assert_allclose(g, fake.reshape(5, -1).mean(0) - real.reshape(5, -1).mean(0),
                               atol=1e-10, rtol=0)


def test_loss_preconditions():
    real, fake, eps = _batches()
    t = Tape()
    critic = _linear_critic(t, t.param(np.ones((6, 1))))
    with pytest.raises(ValueError, match="differ"):
        wgan_gp_losses(critic, real, fake[:3], eps, 1.0, t)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        wgan_gp_losses(critic, real, fake, eps + 1.0, 1.0, t)


def test_config_parsing():
    cfg = parse_config("# comment\nbatch_size = 16  # inline\nlr = 2e-4\ndataset = synth:bars\n")
    assert (cfg.batch_size, cfg.lr, cfg.dataset) == (16, 2e-4, "synth:bars")
    assert parse_config(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("batch_sise = 16")
    with pytest.raises(ConfigError):
        parse_config("batch_size = many")
    with pytest.raises(ConfigError):
        parse_config("no equals sign")


@pytest.mark.parametrize("bad", [dict(batch_size=1), dict(n_critic=0), dict(generator="G9"),
                                 dict(dtype="float16"), dict(n_eval=1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_iteration_noise_shapes_and_purity():
    critic, zg = iteration_noise(FAST, 3)
    assert len(critic) == FAST.n_critic
    z, eps = critic[0]
    assert z.shape == (FAST.batch_size, FAST.latent_dim) and eps.shape == (FAST.batch_size,)
    assert np.all((eps >= 0) & (eps < 1))
    again, zg2 = iteration_noise(FAST, 3)
    np.testing.assert_array_equal(zg, zg2)
    assert not np.array_equal(zg, iteration_noise(FAST, 4)[1])


def test_ten_iterations_give_ten_records():
    _, hist, st = train(FAST)
    assert [r.iteration for r in hist.records] == list(range(1, 11))
    assert st.g_adam.step == 10 and st.d_adam.step == 10 * FAST.n_critic
    assert all(np.isfinite([r.d_loss, r.g_loss, r.gp]).all() for r in hist.records)


def test_same_config_twice_gives_identical_losses():
    cfg = FAST.replace(iterations=4)
    a = train(cfg)[1].to_csv()
    b = train(cfg)[1].to_csv()
    assert a == b


def test_history_must_advance():
    h = TrainHistory()
    h.append(HistoryRecord(1, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        h.append(HistoryRecord(1, 0.0, 0.0, 0.0))
    back = TrainHistory.from_array(h.to_array())
    assert back.to_csv() == h.to_csv()


def test_outputs_written(tmp_path):
    cfg = FAST.replace(iterations=4, checkpoint_every=2, sample_every=2)
    train(cfg, tmp_path)
    for name in ("arch.json", "config.txt", "history.csv", "checkpoint_2.bin",
                 "checkpoint_4.bin", "samples/iter_4.ppm"):
        assert (tmp_path / name).exists(), name
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "iteration,d_loss,g_loss,gp,metric"
    assert read_ppm(tmp_path / "samples" / "iter_2.ppm").shape == (8 * 32, 8 * 32, 3)


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    data = load_dataset("synth:two-mode", 64, 0)
    data.images.flags.writeable = True
    data.images[:] = np.nan
    with pytest.raises(TrainingError, match="iteration 1"):
        train(FAST, tmp_path, data=data)
    assert (tmp_path / "checkpoint_0.bin").exists()


def test_ppm_roundtrip(tmp_path):
    imgs = np.random.default_rng(0).uniform(-1, 1, size=(5, 3, 4, 4))
    grid = image_grid(imgs, cols=3)
    assert grid.shape == (8, 12, 3)
    write_ppm(tmp_path / "g.ppm", grid)
    np.testing.assert_array_equal(read_ppm(tmp_path / "g.ppm"), grid)
