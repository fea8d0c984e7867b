import io
import struct
import zlib

import numpy as np
import pytest

from dygait import synthgait as sg
from dygait.core import Tensor
from dygait.model import ModelConfig
from dygait.train import (
    SGD,
    Adam,
    ChecksumError,
    ClipSource,
    DatasetTooSmallError,
    DivergenceError,
    TrainBatch,
    TrainConfig,
    VersionError,
    checkpoint_name,
    decode_checkpoint,
    encode_checkpoint,
    init_params,
    load_checkpoint,
    load_training_sequences,
    new_state,
    pk_sample,
    prefetched,
    save_checkpoint,
    train,
    train_step,
)
from oracles import adam_loop

MICRO = ModelConfig(stage_channels=(4, 8), pool_after=(0,), strips=4, embed_dim=8, input_size=(32, 22))


@pytest.fixture(scope="module")
def sequences(small_dataset):
    _, manifest = small_dataset
    return load_training_sequences(manifest, MICRO, "resize")


def micro_state(sequences, **kw):
    cfg = dict(P=2, K=2, clip_len=6, iterations=10, optimizer="adam", lr=3e-3, seed=7)
    cfg.update(kw)
    return new_state(MICRO, TrainConfig(**cfg), sorted(sequences))


def param_bytes(state):
    return {k: t.data.tobytes() for k, t in state.params.items()}


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(P=1), dict(K=1), dict(clip_len=2), dict(lr=0.0), dict(margin=0.0),
                                    dict(optimizer="rmsprop"), dict(momentum=1.0), dict(seed=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestPKSample:
    groups = {"b": ["b0", "b1", "b2"], "a": ["a0"], "c": ["c0", "c1", "c2", "c3"]}

    def test_every_subject_once(self, rng):
        picks = pk_sample(self.groups, 3, 2, rng)
        assert sorted({s for s, _ in picks}) == ["a", "b", "c"]
        assert all(sum(s == x for s, _ in picks) == 2 for x in "abc")

    def test_with_replacement(self, rng):
        picks = pk_sample({"a": ["a0"], "b": ["b0", "b1"]}, 2, 4, rng)
        assert [k for s, k in picks if s == "a"] == ["a0"] * 4

    def test_without_replacement_when_possible(self, rng):
        for _ in range(20):
            picks = pk_sample(self.groups, 3, 3, rng)
            keys = [k for s, k in picks if s in "bc"]
            assert len(set(keys)) == len(keys)

    def test_deterministic_and_order_free(self):
        reordered = dict(reversed(list(self.groups.items())))
        a = [pk_sample(self.groups, 2, 4, r) for r in [np.random.default_rng(1)] * 5]
        b = [pk_sample(reordered, 2, 4, r) for r in [np.random.default_rng(1)] * 5]
        assert a == b

    def test_label_multiset(self, rng):
        picks = pk_sample(self.groups, 2, 3, rng)
        counts = {}
        for s, _ in picks:
            counts[s] = counts.get(s, 0) + 1
        assert len(counts) == 2 and set(counts.values()) == {3}

    def test_too_few_subjects(self, rng):
        with pytest.raises(DatasetTooSmallError):
            pk_sample(self.groups, 4, 2, rng)


class TestInit:
    def test_seeded(self):
        a, b, c = (init_params(MICRO, s, n_classes=3) for s in (1, 1, 2))
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert all(not np.array_equal(a[k].data, c[k].data) for k in a if k != "cls.bias")

    def test_bounds_and_mean(self):
        params = init_params(MICRO, 0, n_classes=5, dtype=np.float64)
        for name, t in params.items():
            if name == "cls.bias":
                assert not t.data.any()
                continue
            shape = t.data.shape
            fan_in = np.prod(shape[1:]) if len(shape) == 5 else shape[-1]
            bound = 1 / np.sqrt(fan_in)
            assert np.abs(t.data).max() <= bound
            sigma = bound / np.sqrt(3) / np.sqrt(t.data.size)  # std of the mean of U(-b, b)
            assert abs(t.data.mean()) < 3 * sigma, name


def quadratic(p):
    t = Tensor(np.array([p]), requires_grad=True)
    t.grad = 2 * t.data
    return {"p": t}


class TestOptimisers:
    def test_sgd_hand_arithmetic(self):
        named = quadratic(1.0)
        SGD(0.1, momentum=0.0).step(named)
        assert named["p"].data[0] == pytest.approx(0.8, abs=1e-15)

    def test_sgd_converges_on_quadratic(self):
        opt, p = SGD(0.1, momentum=0.9), 5.0
        for _ in range(400):
            named = quadratic(p)
            opt.step(named)
            p = named["p"].data[0]
        assert abs(p) < 1e-6

    def test_adam_matches_loop_oracle(self, rng):
        opt = Adam(1e-2, (0.9, 0.999))
        p = rng.standard_normal(7)
        m, v = np.zeros(7), np.zeros(7)
        t = Tensor(p.copy(), requires_grad=True)
        for step in range(1, 30):
            g = rng.standard_normal(7)
            t.grad = g
            opt.step({"p": t})
            p, m, v = adam_loop(p, g, m, v, step, 1e-2, 0.9, 0.999, 1e-8)
            np.testing.assert_allclose(t.data, p, rtol=0, atol=1e-12)

    def test_lr_zero_leaves_params(self, sequences):
        state = micro_state(sequences)
        state.optimizer.lr = 0.0
        before = param_bytes(state)
        train(state, sequences, iterations=3)
        assert param_bytes(state) == before


class TestTrainStep:
    def test_moving_average_decreases(self, tmp_path):
        manifest = sg.generate_dataset(str(tmp_path), n_identities=2, seqs_per_id=4, n_frames=12, seed=0,
                                       size=(32, 22), n_gallery=0, n_probe=0)
        seqs = load_training_sequences(manifest, MICRO, "resize")
        state = new_state(MICRO, TrainConfig(P=2, K=4, clip_len=9, iterations=50, lr=3e-3, seed=0), sorted(seqs))
        losses = np.array([r.loss_all for r in train(state, seqs)])
        moving = np.convolve(losses, np.ones(10) / 10, "valid")
        assert np.all(np.diff(moving) < 0)

    def test_divergence_names_step(self, sequences):
        state = micro_state(sequences)
        batch = ClipSource(sequences, state.classes, state.train_config, state.rng).draw()
        batch.frames[0, 0, 0, 0] = np.nan
        before = param_bytes(state)
        with pytest.raises(DivergenceError) as exc:
            train_step(state, batch, step=12)
        assert exc.value.step == 12 and "step 12" in str(exc.value)
        assert param_bytes(state) == before

    def test_log_rows(self, sequences):
        log = io.StringIO()
        train(micro_state(sequences), sequences, log, iterations=3)
        lines = log.getvalue().splitlines()
        assert lines[0] == "step,loss_all,loss_tri,loss_cse,active_frac"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "2", "3"]

    def test_deterministic(self, sequences):
        a, b = micro_state(sequences), micro_state(sequences)
        train(a, sequences, iterations=4)
        train(b, sequences, iterations=4)
        assert param_bytes(a) == param_bytes(b)

    def test_prefetch_matches_inline(self, sequences):
        a, b = micro_state(sequences), micro_state(sequences)
        train(a, sequences, iterations=6)
        train(b, sequences, iterations=6, prefetch=3)
        assert param_bytes(a) == param_bytes(b)

    def test_prefetched_surfaces_errors(self):
        def draw():
            raise RuntimeError("boom")

        with pytest.raises(RuntimeError, match="boom"):
            list(prefetched(draw, 3, 2))


class TestCheckpoint:
    @pytest.mark.parametrize("optimizer", ["sgd", "adam"])
    def test_round_trip_byte_identical(self, sequences, tmp_path, optimizer):
        state = micro_state(sequences, optimizer=optimizer, lr=1e-2)
        state.extra = {"normalize": "resize"}
        train(state, sequences, iterations=2)
        first = save_checkpoint(state, str(tmp_path / "a.dygt"))
        again = load_checkpoint(first)
        save_checkpoint(again, str(tmp_path / "b.dygt"))
        assert (tmp_path / "a.dygt").read_bytes() == (tmp_path / "b.dygt").read_bytes()
        assert again.iteration == 2 and again.classes == state.classes and again.extra == state.extra

    def test_truncated(self, sequences, tmp_path):
        data = encode_checkpoint(micro_state(sequences))
        for cut in (len(data) - 1, len(data) // 2, 10):
            with pytest.raises(ChecksumError):
                decode_checkpoint(data[:cut])

    def test_flipped_byte(self, sequences):
        data = bytearray(encode_checkpoint(micro_state(sequences)))
        data[len(data) // 2] ^= 0x40
        with pytest.raises(ChecksumError):
            decode_checkpoint(bytes(data))

    def test_version_mismatch(self, sequences):
        body = encode_checkpoint(micro_state(sequences))[:-4]
        body = body[:4] + struct.pack("<I", 99) + body[8:]
        with pytest.raises(VersionError):
            decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_header_layout(self, sequences):
        state = micro_state(sequences)
        state.iteration = 1234
        data = encode_checkpoint(state)
        assert data[:4] == b"DYGT"
        assert struct.unpack("<IQ", data[4:16]) == (1, 1234)

    @pytest.mark.parametrize("optimizer,prefetch", [("adam", 0), ("sgd", 2)])
    def test_resume_is_bit_exact(self, sequences, tmp_path, optimizer, prefetch):
        straight = micro_state(sequences, optimizer=optimizer, lr=1e-2, iterations=100, checkpoint_every=50)
        train(straight, sequences, out_dir=str(tmp_path), prefetch=prefetch)
        resumed = load_checkpoint(str(tmp_path / checkpoint_name(50)))
        assert resumed.iteration == 50
        train(resumed, sequences, prefetch=prefetch)
        assert resumed.iteration == 100
        assert param_bytes(resumed) == param_bytes(straight)
        assert (tmp_path / "last.dygt").exists()

    def test_batch_carries_rng_state(self, sequences):
        state = micro_state(sequences)
        batch = ClipSource(sequences, state.classes, state.train_config, state.rng).draw()
        assert isinstance(batch, TrainBatch) and batch.rng_state == state.rng.bit_generator.state
