import numpy as np
import pytest

from spikedt.data import ClipBatch
from spikedt.model import (
    MODES,
    CheckpointFormatError,
    ModelConfig,
    SpikingDT,
    batch_loss,
    load_checkpoint,
    save_checkpoint,
)
from spikedt.optim import AdamW
from spikedt.tape import backward


def config(mode="full", **kw):
    base = dict(
        state_dim=3, action_dim=2, action_space="discrete", mode=mode,
        d=8, heads=4, layers=2, window=3, context=4, router_hidden=3,
    )
    base.update(kw)
    return ModelConfig(**base)


def make_batch(cfg, rng, batch=2, pad_front=0):
    n = cfg.context
    if cfg.discrete:
        actions = rng.integers(0, cfg.action_dim, size=(batch, n)).astype(np.int64)
    else:
        actions = rng.uniform(-1, 1, size=(batch, n, cfg.action_dim))
    mask = np.zeros((batch, n), dtype=bool)
    mask[:, :pad_front] = True
    states = rng.normal(size=(batch, n, cfg.state_dim))
    states[mask] = 0.0
    return ClipBatch(
        states=states,
        actions=actions,
        rtg=rng.uniform(0, 1, size=(batch, n)),
        timesteps=np.tile(np.arange(1, n + 1, dtype=np.int64), (batch, 1)),
        pad_mask=mask,
    )


class TestInterleave:
    def test_token_order_cycles_g_s_a(self):
        # with zero weights the three modalities reduce to their biases, so
        # the normalized token rows must repeat with period 3 in g, s, a order
        cfg = config("pos-only", context=2)  # no timestep table in the sum
        model = SpikingDT(cfg, seed=0)
        for name in ("w_g", "w_s", "w_a"):
            model.params[f"embed.{name}"][:] = 0.0
        rng = np.random.default_rng(0)
        model.params["embed.b_g"][:] = rng.normal(size=cfg.d)
        model.params["embed.b_s"][:] = rng.normal(size=cfg.d)
        model.params["embed.b_a"][:] = rng.normal(size=cfg.d)

        captured = {}
        original = model._block

        def spy(x, *args, **kw):
            captured.setdefault("tokens", x.data.copy())
            return original(x, *args, **kw)

        model._block = spy
        batch = make_batch(cfg, np.random.default_rng(1), batch=1)
        model.forward(batch, model.bind(None))
        tokens = captured["tokens"][0]
        assert tokens.shape == (3 * cfg.context, cfg.d)

        def ln(v):
            return (v - v.mean()) / np.sqrt(v.var() + 1e-5)

        np.testing.assert_allclose(tokens[0], ln(model.params["embed.b_g"]), atol=1e-12)
        np.testing.assert_allclose(tokens[1], ln(model.params["embed.b_s"]), atol=1e-12)
        np.testing.assert_allclose(tokens[2], ln(model.params["embed.b_a"]), atol=1e-12)
        np.testing.assert_allclose(tokens[3], tokens[0], atol=1e-12)

    def test_reference_dims_give_60x128_sequence(self):
        cfg = ModelConfig(state_dim=4, action_dim=2, mode="full")
        assert cfg.d == 128 and cfg.heads == 4 and cfg.layers == 2
        assert cfg.window == 10 and cfg.context == 20
        model = SpikingDT(cfg, seed=0)
        batch = make_batch(cfg, np.random.default_rng(0), batch=1)
        out = model.forward(batch, model.bind(None))
        assert out.gates[0].shape == (1, 60, 4)  # batch x tokens x heads
        assert out.state_feats.shape == (1, 20, 128)

    def test_misaligned_clip_rejected(self):
        cfg = config()
        model = SpikingDT(cfg, seed=0)
        batch = make_batch(config(context=5), np.random.default_rng(0))
        with pytest.raises(ValueError):
            model.forward(batch, model.bind(None))


class TestForward:
    @pytest.mark.parametrize("mode", MODES)
    def test_discrete_head_is_distribution(self, mode, rng):
        cfg = config(mode)
        model = SpikingDT(cfg, seed=1)
        out = model.forward(make_batch(cfg, rng), model.bind(None))
        sums = out.decoded.data.sum(axis=-1)
        np.testing.assert_allclose(sums, np.ones_like(sums), rtol=0, atol=1e-12)

    def test_continuous_head_strictly_inside_unit_box(self, rng):
        cfg = config(action_space="continuous", action_dim=1, action_scale=2.0)
        model = SpikingDT(cfg, seed=1)
        out = model.forward(make_batch(cfg, rng), model.bind(None))
        assert np.all(np.abs(out.decoded.data) < 1.0)

    @pytest.mark.parametrize("mode", MODES)
    def test_future_tokens_cannot_leak(self, mode, rng):
        # modifying a_t or anything later leaves the prediction for t intact
        cfg = config(mode)
        model = SpikingDT(cfg, seed=2)
        batch = make_batch(cfg, rng)
        base = model.forward(batch, model.bind(None)).logits.data
        cut = 1  # predictions up to step index cut must be invariant
        batch2 = ClipBatch(
            states=batch.states.copy(), actions=batch.actions.copy(),
            rtg=batch.rtg.copy(), timesteps=batch.timesteps,
            pad_mask=batch.pad_mask,
        )
        batch2.actions[:, cut:] = (batch2.actions[:, cut:] + 1) % cfg.action_dim
        batch2.states[:, cut + 1:] += 1.0
        batch2.rtg[:, cut + 1:] += 0.5
        out2 = model.forward(batch2, model.bind(None)).logits.data
        assert np.array_equal(base[:, : cut + 1], out2[:, : cut + 1])
        assert not np.array_equal(base[:, cut + 1:], out2[:, cut + 1:])

    def test_non_finite_inputs_rejected(self, rng):
        cfg = config()
        model = SpikingDT(cfg, seed=0)
        batch = make_batch(cfg, rng)
        batch.states[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            model.forward(batch, model.bind(None))


class TestLoss:
    def test_uniform_prediction_gives_log2(self, rng):
        cfg = config()
        model = SpikingDT(cfg, seed=0)
        model.params["head.w"][:] = 0.0
        model.params["head.b"][:] = 0.0
        batch = make_batch(cfg, rng)
        out = model.forward(batch, model.bind(None))
        loss = model.loss(out, batch)
        assert abs(loss.item() - np.log(2.0)) < 1e-12

    def test_perfect_onehot_prediction_near_zero(self, rng):
        cfg = config()
        model = SpikingDT(cfg, seed=0)
        batch = make_batch(cfg, rng)
        out = model.forward(batch, model.bind(None))
        # drive the correct logit far above the other via the bias path
        logits = out.logits.data.copy()
        onehot = np.eye(cfg.action_dim)[batch.actions]
        shaped = 50.0 * onehot
        from spikedt.tape import cross_entropy_logits, Tensor as T

        ce = cross_entropy_logits(
            T(shaped.reshape(-1, cfg.action_dim)), batch.actions.ravel()
        )
        assert ce.item() < 1e-12

    def test_mse_identical_vectors_zero(self, rng):
        cfg = config(action_space="continuous", action_dim=2, action_scale=2.0)
        model = SpikingDT(cfg, seed=0)
        batch = make_batch(cfg, rng)
        out = model.forward(batch, model.bind(None))
        batch_matched = ClipBatch(
            states=batch.states,
            actions=out.decoded.data * cfg.action_scale,
            rtg=batch.rtg, timesteps=batch.timesteps, pad_mask=batch.pad_mask,
        )
        assert model.loss(out, batch_matched).item() == 0.0

    def test_padded_steps_excluded(self, rng):
        cfg = config()
        model = SpikingDT(cfg, seed=3)
        batch = make_batch(cfg, rng, pad_front=2)
        out = model.forward(batch, model.bind(None))
        # hand-computed cross-entropy over unpadded steps only
        logits = out.logits.data
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        picked = np.take_along_axis(z, batch.actions[..., None], axis=-1)[..., 0]
        nll = lse - picked
        keep = ~batch.pad_mask
        expected = nll[keep].sum() / keep.sum()
        assert abs(model.loss(out, batch).item() - expected) < 1e-12


class TestActGreedy:
    def test_argmax_and_tie_break(self):
        cfg = config()
        model = SpikingDT(cfg, seed=0)
        # force logits through the bias: zero head weight, fixed bias
        model.params["head.w"][:] = 0.0
        model.params["head.b"][:] = np.array([2.0, -1.0])
        action = model.act_greedy([np.zeros(3)], [], [1.0])
        assert action == 0
        model.params["head.b"][:] = np.array([0.7, 0.7])  # tie -> lowest index
        assert model.act_greedy([np.zeros(3)], [], [1.0]) == 0

    def test_continuous_action_scaled_to_bounds(self, rng):
        cfg = config(action_space="continuous", action_dim=1, action_scale=2.0)
        model = SpikingDT(cfg, seed=4)
        action = model.act_greedy([rng.normal(size=3)], [], [0.5])
        assert action.shape == (1,)
        assert np.all(np.abs(action) < 2.0)

    def test_long_history_windows_last_context(self, rng):
        cfg = config()
        model = SpikingDT(cfg, seed=5)
        states = [rng.normal(size=3) for _ in range(10)]
        actions = [int(rng.integers(2)) for _ in range(9)]
        rtgs = list(np.linspace(1, 0.1, 10))
        a = model.act_greedy(states, actions, rtgs)
        assert a in (0, 1)


class TestParameterAccounting:
    def test_counts_differ_only_by_router(self):
        counts = {m: SpikingDT(config(m), seed=0).parameter_count() for m in MODES}
        assert counts["baseline"] == counts["pos-only"]
        assert counts["route-only"] == counts["full"]
        router = counts["full"] - counts["baseline"]
        assert router > 0
        cfg = config()
        m = cfg.router_hidden
        expected = cfg.layers * (
            cfg.heads * cfg.d_head * m + m + m * cfg.heads + cfg.heads
        )
        assert router == expected

    def test_router_size_stays_small_at_reference_dims(self):
        cfg = ModelConfig(state_dim=4, action_dim=2, mode="full")
        base = ModelConfig(state_dim=4, action_dim=2, mode="baseline")
        router = (
            SpikingDT(cfg, seed=0).parameter_count()
            - SpikingDT(base, seed=0).parameter_count()
        )
        assert 0 < router <= 5000

    def test_phase_bank_is_two_scalars_per_head(self):
        cfg = config()
        model = SpikingDT(cfg, seed=0)
        assert model.params["pos.omega"].size == cfg.heads
        assert model.params["pos.phi"].size == cfg.heads


@pytest.mark.parametrize("mode", MODES)
def test_single_adamw_step_decreases_loss(mode, rng):
    cfg = config(mode)
    model = SpikingDT(cfg, seed=6)
    batch = make_batch(cfg, rng, batch=4)
    loss0, bound, _ = batch_loss(model, batch)
    gm = backward(loss0, wrt=bound.values())
    opt = AdamW(model.params, lr=1e-4, weight_decay=0.0)
    opt.step(model.params, {k: gm.grad(t) for k, t in bound.items()})
    model.project()
    loss1, _, _ = batch_loss(model, batch)
    assert loss1.item() < loss0.item()


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path, rng):
        cfg = config("full")
        model = SpikingDT(cfg, seed=7)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        assert sorted(loaded.params) == sorted(model.params)
        for name in model.params:
            assert np.array_equal(loaded.params[name], model.params[name])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        cfg = config()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, SpikingDT(cfg, seed=0))
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # version byte
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = config()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, SpikingDT(cfg, seed=0))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


class TestConfigValidation:
    def test_bad_mode(self):
        with pytest.raises(ValueError):
            config(mode="everything")

    def test_heads_must_divide_d(self):
        with pytest.raises(ValueError):
            config(d=10, heads=4)

    def test_bad_action_space(self):
        with pytest.raises(ValueError):
            config(action_space="hybrid")
