import json
import math

import numpy as np
import pytest

from teethseg.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from teethseg.config import ConfigError, RunConfig
from teethseg.data import generate_synthetic, make_split, write_dataset
from teethseg.optim import AdamState, ScheduleState, adam_step, plateau_schedule
from teethseg.trainer import (
    LOG_COLUMNS,
    DataError,
    TrainingError,
    evaluate,
    init_state,
    make_batch,
    overlay,
    per_class_csv,
    predict_mask,
    read_log,
    train,
    train_step,
)


def tiny_run(**kw):
    base = dict(depth=2, base_width=4, height=16, width=32, epochs=2, batch=2, lr=1e-2, seed=3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    samples = generate_synthetic(6, seed=9, w=32, h=16)
    write_dataset(root, samples, make_split([s.id for s in samples], 9))
    return root


class TestAdam:
    def test_zero_gradient(self):
        p = {"a": np.array([1.0, -2.0])}
        new, st = adam_step(p, {"a": np.zeros(2)}, AdamState.for_params(p), 1e-3)
        assert np.array_equal(new["a"], p["a"])
        assert st.step == 1

    def test_first_step_sign(self):
        p = {"w": np.zeros((3, 2))}
        g = np.array([[0.5, -2.0], [1e-2, -1e-2], [3.0, 7.0]])
        lr = 1e-3
        new, _ = adam_step(p, {"w": g}, AdamState.for_params(p), lr)
        assert np.abs(new["w"] - (-lr * np.sign(g))).max() < lr * 1e-6

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(0)
        p = {"x": rng.normal(size=4)}
        st = AdamState.for_params(p)
        m = v = np.zeros(4)
        x = p["x"].copy()
        for t in range(1, 6):
            g = rng.normal(size=4)
            p, st = adam_step(p, {"x": g}, st, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(p["x"], x, rtol=0, atol=1e-15)

    def test_replay_equals_two_steps(self):
        rng = np.random.default_rng(1)
        p = {"x": rng.normal(size=3)}
        g1, g2 = rng.normal(size=3), rng.normal(size=3)
        a, sa = adam_step(p, {"x": g1}, AdamState.for_params(p), 0.1)
        a, sa = adam_step(a, {"x": g2}, sa, 0.1)
        b, sb = adam_step(p, {"x": g1}, AdamState.for_params(p), 0.1)
        b2, _ = adam_step({"x": b["x"].copy()}, {"x": g2}, AdamState({"x": sb.m["x"].copy()}, {"x": sb.v["x"].copy()}, sb.step), 0.1)
        assert a["x"].tobytes() == b2["x"].tobytes()

    def test_errors(self):
        p = {"x": np.zeros(2)}
        with pytest.raises(ValueError, match="shape"):
            adam_step(p, {"x": np.zeros(3)}, AdamState.for_params(p), 0.1)
        with pytest.raises(ValueError, match="positive"):
            adam_step(p, {"x": np.zeros(2)}, AdamState.for_params(p), 0.0)
        with pytest.raises(ValueError, match="names"):
            adam_step(p, {"y": np.zeros(2)}, AdamState.for_params(p), 0.1)


class TestSchedule:
    def test_decreasing_keeps_lr(self):
        st = ScheduleState.starting_at(1e-4)
        for v in np.linspace(1.0, 0.1, 20):
            st, improved = plateau_schedule(st, float(v))
            assert improved
        assert st.lr == 1e-4

    def test_five_stagnant_epochs(self):
        st, _ = plateau_schedule(ScheduleState.starting_at(1e-4), 0.5)
        for i in range(4):
            st, _ = plateau_schedule(st, 0.5)
            assert st.lr == 1e-4 and st.counter == i + 1
        st, _ = plateau_schedule(st, 0.5)
        assert st.lr == 9e-05
        assert st.counter == 0

    def test_clamps_at_floor(self):
        st, _ = plateau_schedule(ScheduleState.starting_at(1e-4), 0.5)
        lrs = []
        for _ in range(5 * 80):
            st, _ = plateau_schedule(st, 0.6)
            lrs.append(st.lr)
        assert lrs[-1] == 1e-7
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert min(lrs) == 1e-7

    def test_tiny_improvement_is_stagnation(self):
        st, _ = plateau_schedule(ScheduleState.starting_at(1e-4), 0.5)
        st, improved = plateau_schedule(st, 0.5 - 1e-10)
        assert not improved and st.counter == 1

    def test_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            plateau_schedule(ScheduleState(), math.nan)


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.epochs, cfg.batch, cfg.lr, cfg.eps, cfg.radii, cfg.loss) == (50, 2, 1e-4, 1e-6, [1, 2, 3], "squared-dice")
        assert (cfg.depth, cfg.base_width, cfg.num_classes, cfg.swin_window, cfg.dropout_p) == (4, 8, 33, 2, 0.1)

    def test_roundtrip_stable(self):
        cfg = tiny_run(radii=[2, 4], loss="eq1-verbatim")
        text = cfg.to_json()
        assert RunConfig.from_json(text) == cfg
        assert RunConfig.from_json(text).to_json() == text

    def test_partial_document_uses_defaults(self):
        assert RunConfig.from_json('{"epochs": 3}') == RunConfig(epochs=3)

    def test_all_problems_listed(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_json('{"bogus": 1, "other": 2, "lr": "fast", "use_tab": 1}')
        msgs = exc.value.problems
        assert any("'bogus'" in m for m in msgs) and any("'other'" in m for m in msgs)
        assert any(m.startswith("lr:") for m in msgs) and any(m.startswith("use_tab:") for m in msgs)

    def test_value_problems(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_dict({"height": 30, "batch": 0, "loss": "l2"})
        joined = " | ".join(exc.value.problems)
        assert "30x128" in joined and "batch" in joined and "'l2'" in joined

    def test_invalid_json(self):
        with pytest.raises(ConfigError, match="invalid JSON"):
            RunConfig.from_json("{")

    def test_model_view(self):
        m = tiny_run().model
        assert (m.depth, m.height, m.width) == (2, 16, 32)


class TestCheckpoint:
    def test_byte_exact_roundtrip(self, tmp_path):
        state = init_state(tiny_run())
        save_checkpoint(tmp_path / "a.ckpt", state)
        again = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", again)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_state_restored(self):
        state = init_state(tiny_run())
        state.rng.normal(size=3)
        back = decode_checkpoint(encode_checkpoint(state))
        assert back.run == state.run and back.epoch == state.epoch
        assert back.sched == state.sched
        assert all(np.array_equal(back.net.params[k], v) for k, v in state.net.params.items())
        assert back.rng.normal() == state.rng.normal()

    def test_layout(self):
        buf = encode_checkpoint(init_state(tiny_run()))
        assert buf[:8] == b"TSEGCKPT"
        assert int.from_bytes(buf[8:12], "little") == 1
        mlen = int.from_bytes(buf[12:20], "little")
        manifest = json.loads(buf[20 : 20 + mlen])
        assert len(buf) == 20 + mlen + manifest["payload_bytes"]
        first = manifest["arrays"][0]
        assert first["name"].startswith("param/") and first["offset"] == 0

    def test_bad_magic(self):
        buf = bytearray(encode_checkpoint(init_state(tiny_run())))
        buf[:8] = b"NOTACKPT"
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(bytes(buf))

    def test_version_mismatch(self):
        buf = bytearray(encode_checkpoint(init_state(tiny_run())))
        buf[8:12] = (2).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version 2"):
            decode_checkpoint(bytes(buf))

    def test_truncated(self):
        buf = encode_checkpoint(init_state(tiny_run()))
        mlen = int.from_bytes(buf[12:20], "little")
        payload = len(buf) - 20 - mlen
        with pytest.raises(CheckpointError, match=f"expected {payload} bytes, got {payload - 8}"):
            decode_checkpoint(buf[:-8])

    def test_manifest_payload_disagreement(self):
        buf = encode_checkpoint(init_state(tiny_run()))
        mlen = int.from_bytes(buf[12:20], "little")
        manifest = json.loads(buf[20 : 20 + mlen])
        manifest["arrays"][0]["shape"] = [10**6]
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        bad = buf[:12] + len(blob).to_bytes(8, "little") + blob + buf[20 + mlen :]
        with pytest.raises(CheckpointError, match="disagrees"):
            decode_checkpoint(bad)


class TestTrainLoop:
    def test_epochs_zero(self, tiny_data, tmp_path):
        state = train(tiny_run(epochs=0), tiny_data, tmp_path)
        assert state.epoch == 0
        assert (tmp_path / "last.ckpt").is_file()
        assert (tmp_path / "log.csv").read_text() == ",".join(LOG_COLUMNS) + "\n"

    def test_log_and_checkpoints(self, tiny_data, tmp_path):
        state = train(tiny_run(epochs=3), tiny_data, tmp_path)
        rows = read_log(tmp_path / "log.csv")
        assert [r["epoch"] for r in rows] == [1, 2, 3]
        assert all(r["lr"] == 1e-2 for r in rows)
        assert all(0 <= r["val_dsc"] <= 1 and 0 <= r["val_ji"] <= r["val_dsc"] for r in rows)
        assert (tmp_path / "best.ckpt").is_file()
        assert load_checkpoint(tmp_path / "last.ckpt").epoch == state.epoch == 3

    def test_deterministic(self, tiny_data, tmp_path):
        train(tiny_run(), tiny_data, tmp_path / "a")
        train(tiny_run(), tiny_data, tmp_path / "b")
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
        assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()

    def test_resume_equals_uninterrupted(self, tiny_data, tmp_path):
        train(tiny_run(epochs=3), tiny_data, tmp_path / "full")
        train(tiny_run(epochs=1), tiny_data, tmp_path / "split")
        train(tiny_run(epochs=3), tiny_data, tmp_path / "split", resume=tmp_path / "split" / "last.ckpt")
        for name in ("last.ckpt", "log.csv"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "split" / name).read_bytes()

    def test_extent_mismatch_before_training(self, tiny_data, tmp_path):
        with pytest.raises(DataError, match="s0000.*does not match"):
            train(tiny_run(height=32, width=64), tiny_data, tmp_path)
        assert not (tmp_path / "last.ckpt").exists()

    def test_resume_model_mismatch(self, tiny_data, tmp_path):
        train(tiny_run(epochs=1), tiny_data, tmp_path)
        with pytest.raises(DataError, match="different model"):
            train(tiny_run(epochs=2, base_width=8), tiny_data, tmp_path, resume=tmp_path / "last.ckpt")

    def test_non_finite_loss_names_batch(self, tiny_data):
        run = tiny_run()
        state = init_state(run)
        samples = generate_synthetic(2, seed=9, w=32, h=16)
        batch = make_batch(samples, run)
        state.net.params["head.w"] = np.full_like(state.net.params["head.w"], np.nan)
        with pytest.raises(TrainingError, match="s0000"):
            train_step(state.net, state.opt, 0.01, batch, state.rng)


class TestEvaluate:
    def test_oracle_all_ones(self, tiny_data):
        from teethseg.data import load_dataset

        ds = load_dataset(tiny_data)
        state = init_state(tiny_run())
        macro = evaluate(state.net, state.run, ds.split("train"), oracle=True).macro()
        assert all(v == 1.0 for v in macro.values())

    def test_untrained_bounds_and_repeatability(self, tiny_data):
        from teethseg.data import load_dataset

        ds = load_dataset(tiny_data)
        state = init_state(tiny_run())
        a = evaluate(state.net, state.run, ds.split("train"))
        b = evaluate(state.net, state.run, ds.split("train"))
        text = per_class_csv(a, "PROPOSED")
        assert text == per_class_csv(b, "PROPOSED")
        assert len(text.splitlines()) == 34
        for v in a.macro().values():
            assert 0 <= v <= 1

    def test_rejects_bad_sample(self):
        from teethseg.data import Sample

        state = init_state(tiny_run())
        with pytest.raises(DataError, match="odd"):
            evaluate(state.net, state.run, [Sample("odd", np.zeros((8, 8)), np.zeros((8, 8), dtype=np.uint8))])

    def test_predict_and_overlay(self):
        run = tiny_run()
        state = init_state(run)
        img = generate_synthetic(1, seed=9, w=32, h=16)[0].image
        mask = predict_mask(state.net, run, img)
        assert mask.shape == (16, 32) and mask.dtype == np.uint8 and mask.max() <= 32
        ov = overlay(img, mask)
        assert ov.dtype == np.uint8 and ov.shape == mask.shape
        with pytest.raises(DataError, match="does not match"):
            predict_mask(state.net, run, np.zeros((8, 8)))
