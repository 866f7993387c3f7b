"""Diffusion trainer: schedules, losses, samplers, optimizer, evaluation."""

import dataclasses

import numpy as np
import pytest

from polymix import diffusion as D
from polymix.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_config(**kw):
    base = dict(loss=D.LOSS_FLOW_MATCHING, dataset="mixture2d", lr=3e-3, steps=40,
                cooldown=0.1, batch=32, seed=0, depth=1, d=16, k=2, expand=2,
                ffw_expand=2, n_classes=2, cond_dropout=0.1)
    base.update(kw)
    return D.TrainConfig(**base)


class StubModel:
    """Velocity/noise stub for sampler and loss unit tests."""

    def __init__(self, fn, family=D.LOSS_FLOW_MATCHING, n_tokens=1, token_dim=2):
        self.fn = fn
        self.loss_family = family
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        self.null_index = 0

    def encode(self, x):
        return np.asarray(x)[:, None, :]

    def decode(self, tokens):
        return np.asarray(tokens)[:, 0, :]

    def forward(self, x_t, labels, t):
        return Tensor(self.fn(np.asarray(x_t.data), np.asarray(labels), np.asarray(t)))


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------

def test_linear_path_endpoints():
    path = D.linear_path()
    path.validate()
    x0 = rng(1).standard_normal((4, 1, 2))
    eps = rng(2).standard_normal((4, 1, 2))
    np.testing.assert_array_equal(D.noised_sample(x0, np.zeros(4), eps, path), x0)
    np.testing.assert_array_equal(D.noised_sample(x0, np.ones(4), eps, path), eps)


def test_bad_schedule_rejected():
    bad = D.FlowPath(alpha=lambda t: 1.0, gamma=lambda t: t)
    with pytest.raises(ValueError):
        bad.validate()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_diffusion_loss_cheating_model_is_zero():
    r = rng(3)
    x0 = r.standard_normal((64, 2))
    holder = {}

    def cheat(x_t, labels, t):
        x0_tok = holder["x0"]
        tt = t.reshape(-1, 1, 1)
        return (x_t - (1.0 - tt) * x0_tok) / tt

    model = StubModel(cheat)
    holder["x0"] = model.encode(x0)
    loss = D.diffusion_loss(model, x0, np.zeros(64, dtype=int), rng(4), cond_dropout=0.0)
    assert float(loss.data) < 1e-12


def test_diffusion_loss_zero_model_is_dimension():
    x0 = rng(5).standard_normal((4096, 2)) * 0.0
    model = StubModel(lambda x_t, labels, t: np.zeros_like(x_t))
    loss = D.diffusion_loss(model, x0, np.zeros(4096, dtype=int), rng(6), cond_dropout=0.0)
    assert abs(float(loss.data) - 2.0) < 0.2  # E||eps||^2 per sample = token dims


def test_flow_matching_zero_data_targets_noise():
    x0 = np.zeros((64, 2))

    def cheat(x_t, labels, t):
        tt = t.reshape(-1, 1, 1)
        return x_t / tt  # x_t = t * eps when x0 = 0

    loss = D.flow_matching_loss(StubModel(cheat), x0, np.zeros(64, dtype=int),
                                rng(7), cond_dropout=0.0)
    assert float(loss.data) < 1e-12


def test_flow_matching_exact_velocity_is_zero_loss():
    r = rng(8)
    x0 = r.standard_normal((64, 2))
    holder = {}

    def cheat(x_t, labels, t):
        tt = t.reshape(-1, 1, 1)
        return (x_t - holder["x0"]) / tt  # (x_t - x0)/t == eps - x0 on the linear path

    model = StubModel(cheat)
    holder["x0"] = model.encode(x0)
    loss = D.flow_matching_loss(model, x0, np.zeros(64, dtype=int), rng(9),
                                cond_dropout=0.0)
    assert float(loss.data) < 1e-10


def test_flow_matching_constant_predictor_matches_analytic():
    # symmetric 2-component mixture: E[v] = 0, so the best constant is 0 and
    # its loss is E||v||^2 = E||eps||^2 + E||x0||^2 = 2 + (4 + 2*0.3^2)
    ds = D.GaussianMixture2D(n_classes=2, radius=2.0, std=0.3)
    x0, labels = ds.sample(rng(10), 8192)
    model = StubModel(lambda x_t, l, t: np.zeros_like(x_t))
    loss = D.flow_matching_loss(model, x0, labels, rng(11), cond_dropout=0.0)
    want = 2.0 + 4.0 + 2 * 0.3 ** 2
    assert abs(float(loss.data) - want) < 0.3


def test_loss_determinism_bitwise():
    config = tiny_config()
    model = D.ToyModel(config, rng=rng(12))
    ds = D.make_dataset("mixture2d", 2)

    def run():
        r = rng(99)
        x0, labels = ds.sample(r, 16)
        return float(D.flow_matching_loss(model, x0, labels, r).data)

    assert run() == run()


def test_non_finite_model_output_raises_with_context():
    model = StubModel(lambda x_t, l, t: np.full_like(x_t, np.nan))
    with pytest.raises(D.TrainingError, match="step 7"):
        D.diffusion_loss(model, np.zeros((4, 2)), np.zeros(4, dtype=int), rng(13),
                         cond_dropout=0.0, context="step 7")


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def test_euler_constant_velocity_closed_form():
    v = rng(14).standard_normal((1, 2))
    model = StubModel(lambda x_t, l, t: np.broadcast_to(v[None], x_t.shape).copy())
    for steps in (1, 7, 50):
        got = D.sample(model, 8, steps=steps, method="euler", rng=rng(15))
        noise = rng(15).standard_normal((8, 1, 2))[:, 0, :]
        np.testing.assert_allclose(got, noise - v, atol=1e-12)


def test_heun_equals_euler_on_constant_field():
    v = rng(16).standard_normal((1, 2))
    model = StubModel(lambda x_t, l, t: np.broadcast_to(v[None], x_t.shape).copy())
    a = D.sample(model, 8, steps=13, method="euler", rng=rng(17))
    b = D.sample(model, 8, steps=13, method="heun", rng=rng(17))
    np.testing.assert_array_equal(a, b)


def test_ddim_constant_noise_prediction_closed_form():
    c = rng(18).standard_normal((1, 2))
    model = StubModel(lambda x_t, l, t: np.broadcast_to(c[None], x_t.shape).copy(),
                      family=D.LOSS_DIFFUSION)
    steps = 10
    got = D.sample(model, 8, steps=steps, method="ddim", rng=rng(19))
    # with a constant eps-hat the implied x0 after the first step never moves
    noise = rng(19).standard_normal((8, 1, 2))
    t0 = 1.0 - 1.0 / steps
    want = (noise - t0 * c[None]) / (1.0 - t0)
    np.testing.assert_allclose(got, want[:, 0, :], atol=1e-9)


def test_method_family_mismatch_raises():
    fm = StubModel(lambda x, l, t: x)
    dd = StubModel(lambda x, l, t: x, family=D.LOSS_DIFFUSION)
    with pytest.raises(ValueError):
        D.sample(fm, 4, steps=5, method="ddim")
    with pytest.raises(ValueError):
        D.sample(dd, 4, steps=5, method="euler")
    with pytest.raises(ValueError):
        D.sample(fm, 4, steps=5, method="leapfrog")


def test_cfg_zero_weight_bitwise_unconditional():
    config = tiny_config()
    model = D.ToyModel(config, rng=rng(20))
    # give the zero-initialized output head some signal
    model.out_w.data[:] = rng(21).standard_normal(model.out_w.shape) * 0.1
    with_labels = D.sample(model, 16, steps=8, cfg_weight=0.0,
                           labels=np.zeros(16, dtype=int), rng=rng(22))
    uncond = D.sample(model, 16, steps=8, rng=rng(22))
    np.testing.assert_array_equal(with_labels, uncond)


def test_cfg_combine_properties():
    r = rng(23)
    uncond = r.standard_normal((8, 2))
    cond = r.standard_normal((8, 2))
    np.testing.assert_array_equal(D.cfg_combine(uncond, cond, 0.0), uncond)
    np.testing.assert_allclose(D.cfg_combine(uncond, cond, 1.0), cond, atol=1e-15)
    deltas = [np.linalg.norm(D.cfg_combine(uncond, cond, w) - uncond)
              for w in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(deltas, deltas[1:]))


# ---------------------------------------------------------------------------
# optimizer, schedule, training loop
# ---------------------------------------------------------------------------

def test_lr_schedule_constant_then_sqrt_decay():
    config = tiny_config(steps=100, cooldown=0.2, lr=1e-3)
    assert D.lr_at(1, config) == 1e-3
    assert D.lr_at(80, config) == 1e-3
    assert D.lr_at(81, config) == 1e-3  # first cooldown step keeps full rate
    tail = [D.lr_at(s, config) for s in range(81, 101)]
    assert all(b < a for a, b in zip(tail, tail[1:]))
    assert tail[-1] == pytest.approx(1e-3 * (1 / 20) ** 0.5)


def test_adamw_moves_toward_minimum():
    p = Tensor(np.array([5.0]), requires_grad=True, name="p")
    opt = D.AdamW({"p": p}, weight_decay=0.0)
    for _ in range(300):
        opt.step({"p": 2 * p.data}, lr=0.05)  # d/dp p^2
    assert abs(p.data[0]) < 0.1


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = D.clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = sum(float((g * g).sum()) for g in grads.values())
    assert total == pytest.approx(1.0)


def test_one_step_training_changes_parameters():
    config = tiny_config(steps=1)
    model, rows = D.train(config)
    fresh = D.ToyModel(config, rng=rng(config.seed))
    moved = any(not np.array_equal(a.data, b.data)
                for a, b in zip(model.tensors().values(), fresh.tensors().values()))
    assert moved
    assert len(rows) == 1 and rows[0][0] == 1


def test_training_reduces_loss():
    config = tiny_config(steps=150, lr=5e-3)
    _, rows = D.train(config)
    early = np.mean([r[1] for r in rows[:10]])
    late = np.mean([r[1] for r in rows[-10:]])
    assert late < early


def test_training_determinism():
    config = tiny_config(steps=12)
    _, rows1 = D.train(config)
    _, rows2 = D.train(config)
    assert [(s, l, lr) for s, l, lr, _ in rows1] == [(s, l, lr) for s, l, lr, _ in rows2]


def test_divergence_aborts_with_diagnostics():
    config = tiny_config(steps=60, lr=3e4, cond_dropout=0.0)
    with pytest.raises(D.TrainingError, match="step"):
        D.train(config)


def test_metrics_csv_format(tmp_path):
    config = tiny_config(steps=5)
    path = tmp_path / "metrics.csv"
    D.train(config, metrics_path=path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "step,loss,lr,wall_ms"
    assert len(lines) == 6
    first = lines[1].split(",")
    assert first[0] == "1" and len(first) == 4


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        tiny_config(lr=0.0).validate()
    with pytest.raises(ValueError):
        tiny_config(cooldown=1.0).validate()
    with pytest.raises(ValueError):
        tiny_config(loss="score_matching").validate()


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    config = tiny_config(steps=3)
    path = tmp_path / "model.pom"
    model, _ = D.train(config, checkpoint_path=path)
    loaded = D.load_model(path)
    for (name, a), (name2, b) in zip(model.tensors().items(),
                                     loaded.tensors().items()):
        assert name == name2
        assert np.array_equal(a.data, b.data), name
    x0, labels = D.make_dataset("mixture2d", 2).sample(rng(30), 8)
    t = np.full(8, 0.5)
    ya = model.forward(Tensor(model.encode(x0)), labels, t).data
    yb = loaded.forward(Tensor(loaded.encode(x0)), labels, t).data
    np.testing.assert_array_equal(ya, yb)


def test_checkpoint_rejects_garbage(tmp_path):
    from polymix.checkpoint import CheckpointError, load_checkpoint
    path = tmp_path / "junk.pom"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_energy_distance_identical_sets_zero():
    x = rng(31).standard_normal((64, 2))
    assert D.energy_distance(x, x.copy()) == 0.0


def test_energy_distance_two_point_masses():
    x = np.zeros((4, 2))
    y = np.zeros((4, 2))
    y[:, 0] = 2.0
    assert D.energy_distance(x, y) == pytest.approx(2.0, abs=1e-12)


def test_energy_distance_separates_distributions():
    r = rng(32)
    ds = D.GaussianMixture2D()
    a, _ = ds.sample(r, 512)
    b, _ = ds.sample(r, 512)
    c = r.standard_normal((512, 2))
    assert D.energy_distance(a, c) > 5 * D.energy_distance(a, b)


def test_evaluate_samples_guards_and_per_class(tmp_path):
    r = rng(33)
    ds = D.GaussianMixture2D()
    a, la = ds.sample(r, 300)
    b, lb = ds.sample(r, 300)
    with pytest.raises(ValueError):
        D.evaluate_samples(a[:10], b)
    out = D.evaluate_samples(a, b, labels=la, ref_labels=lb)
    assert out["energy_distance"] < 0.5
    assert set(out["per_class_mean_error"]) == {0, 1}
    for err in out["per_class_mean_error"].values():
        assert err < 0.5


# ---------------------------------------------------------------------------
# datasets and model plumbing
# ---------------------------------------------------------------------------

def test_mixture_dataset_structure():
    ds = D.GaussianMixture2D(n_classes=2)
    x, labels = ds.sample(rng(34), 2000)
    for cls, sign in ((0, 1.0), (1, -1.0)):
        sel = x[labels == cls]
        assert np.sign(sel[:, 0].mean()) == sign
        assert abs(np.linalg.norm(sel.mean(axis=0)) - 2.0) < 0.1


def test_pattern_dataset_structure():
    ds = D.PatternDataset(n_classes=4, noise=0.05)
    x, labels = ds.sample(rng(35), 64)
    assert x.shape == (64, 8, 8, 1)
    tpl = ds.class_templates()
    for i in range(64):
        err = np.abs(x[i] - tpl[labels[i]]).mean()
        assert err < 0.2
    with pytest.raises(ValueError):
        D.PatternDataset(n_classes=3)


def test_dataset_determinism():
    ds = D.PatternDataset()
    a = ds.sample(rng(36), 8)
    b = ds.sample(rng(36), 8)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_pattern_model_roundtrip_and_forward():
    config = tiny_config(dataset="patterns", n_classes=4, d=16, patch=2)
    model = D.ToyModel(config, rng=rng(37))
    imgs, labels = D.make_dataset("patterns", 4).sample(rng(38), 4)
    tokens = model.encode(imgs)
    assert tokens.shape == (4, 16, 4)
    np.testing.assert_array_equal(model.decode(tokens), imgs)
    out = model.forward(Tensor(tokens), labels, np.full(4, 0.3))
    assert out.shape == tokens.shape


# ---------------------------------------------------------------------------
# degree ablation
# ---------------------------------------------------------------------------

def test_degree_ablation_rows_and_budget():
    base = tiny_config(steps=3, batch=8, d=6)
    notices = []
    rows = D.degree_ablation(base, degrees=(1, 2, 3, 4, 6), budget=12,
                             eval_samples=16, notices=notices)
    assert [(r[0], r[1]) for r in rows] == [(1, 12), (2, 6), (3, 4), (4, 3), (6, 2)]
    assert notices == []
    counts = {r[3] for r in rows}
    assert len(counts) == 1  # identical projection parameter count by construction


def test_degree_ablation_skips_non_divisor():
    base = tiny_config(steps=2, batch=8, d=6)
    notices = []
    rows = D.degree_ablation(base, degrees=(5,), budget=12, eval_samples=16,
                             notices=notices)
    assert rows == []
    assert len(notices) == 1 and "5" in notices[0]


def test_ablation_csv(tmp_path):
    rows = [(1, 12, 72, 1000, 0.5, 0.1)]
    path = tmp_path / "ablate.csv"
    D.write_ablation(path, rows)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == D.ABLATION_HEADER
    assert lines[1].startswith("1,12,72,1000,")
