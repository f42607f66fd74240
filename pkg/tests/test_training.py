"""Cost model, corpus handling, optimizer, checkpoints, and the train loop."""

import json
import math
import os

import numpy as np
import pytest

from growloop.engine import Tensor, count_matmul_flops
from growloop.loops import LoopDirective
from growloop.model.config import ConfigError, ModelConfig
from growloop.model.params import ParamStore, init_parameters
from growloop.model.transformer import model_forward
from growloop.schemas import read_csv, read_growth_events
from growloop.training import (
    AdamW,
    CheckpointError,
    Corpus,
    TrainSettings,
    TrainingAbort,
    evaluate_perplexity,
    flops_per_step,
    forward_flops,
    ingest_corpus,
    load_checkpoint,
    long_context_eval,
    loop_overhead_ratio,
    paper_shaped_config,
    parse_config_text,
    save_checkpoint,
    settings_from_pairs,
    synthesize_corpus,
    train,
)
from growloop.training import restore_model
from growloop.training.data import CorpusError
from growloop.training.flops import TRAINING_MULTIPLIER
from growloop.training.runner import _select_ablation_heads


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        n_layer=2, n_head=2, d_model=8, d_head=4, d_ff=16,
        vocab_size=16, max_seq_len=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestAnalyticFlops:
    def test_hand_counted_single_layer(self):
        cfg = ModelConfig(
            n_layer=1, n_head=1, d_model=4, d_head=4, d_ff=8,
            vocab_size=3, max_seq_len=2,
        )
        # per head: QKV+output projections 8*N*d*d_h, scores+mix 4*N^2*d_h
        head = 8 * 2 * 4 * 4 + 4 * 2 * 2 * 4
        ffn = 6 * 2 * 4 * 8
        lm = 2 * 2 * 4 * 3
        assert forward_flops(cfg) == head + ffn + lm

    def test_paper_shape_bands(self):
        cfg = paper_shaped_config()
        # full-schedule endpoint: three looped layers, two heads each, K=3
        sgt = loop_overhead_ratio(
            cfg,
            {l: LoopDirective.head_loop([0, 1], 3) for l in (13, 14, 15)},
        )
        block = loop_overhead_ratio(
            cfg, {l: LoopDirective.block_loop(1) for l in (13, 14, 15)}
        )
        assert 0.01 <= sgt <= 0.04
        assert 0.15 <= block <= 0.21

    def test_empty_head_set_matches_vanilla(self):
        cfg = tiny_config()
        plain = forward_flops(cfg)
        looped = forward_flops(cfg, directives={1: LoopDirective.head_loop([], 3)})
        assert looped == plain

    def test_step_cost_is_three_forwards(self):
        cfg = tiny_config()
        assert flops_per_step(cfg, {}, batch_size=4) == 3 * 4 * forward_flops(cfg)
        assert TRAINING_MULTIPLIER == 3

    def test_directive_orderings(self):
        cfg = tiny_config()
        base = forward_flops(cfg)
        masked = forward_flops(cfg, directives={0: LoopDirective.mask([0])})
        head = forward_flops(cfg, directives={0: LoopDirective.head_loop([0], 2)})
        block = forward_flops(cfg, directives={0: LoopDirective.block_loop(2)})
        assert masked < base < head < block


class TestInstrumentedFlops:
    CONFIGS = [
        dict(n_layer=1, n_head=2, d_model=8, d_head=4, d_ff=12,
             vocab_size=11, max_seq_len=4),
        dict(n_layer=2, n_head=1, d_model=6, d_head=6, d_ff=8,
             vocab_size=7, max_seq_len=6),
        dict(n_layer=3, n_head=4, d_model=16, d_head=4, d_ff=20,
             vocab_size=19, max_seq_len=5),
    ]

    @pytest.mark.parametrize("spec_kwargs", CONFIGS)
    def test_forward_counter_matches_analytic(self, spec_kwargs):
        cfg = ModelConfig(**spec_kwargs)
        params = init_parameters(cfg, seed=3)
        rng = np.random.default_rng(9)
        ids = rng.integers(0, cfg.vocab_size, size=(2, cfg.max_seq_len))
        with count_matmul_flops() as counter:
            model_forward(params, cfg, ids, want_loss=False)
        assert counter.total == 2 * forward_flops(cfg)

    def test_forward_counter_matches_analytic_with_loops(self):
        cfg = ModelConfig(**self.CONFIGS[2])
        params = init_parameters(cfg, seed=3)
        ids = np.random.default_rng(10).integers(0, cfg.vocab_size, size=(1, 5))
        directives = {
            0: LoopDirective.block_loop(1),
            1: LoopDirective.head_loop([1, 3], 2),
            2: LoopDirective.mask([0]),
        }
        with count_matmul_flops() as counter:
            model_forward(params, cfg, ids, directives=directives, want_loss=False)
        assert counter.total == forward_flops(cfg, directives=directives)

    def test_train_step_counter_matches_analytic(self):
        # Backward re-counts two gradient matmuls per forward matmul, so a
        # full step lands exactly on the 3x-forward accounting.
        cfg = ModelConfig(**self.CONFIGS[0])
        params = init_parameters(cfg, seed=5, dtype=np.float64)
        ids = np.random.default_rng(11).integers(0, cfg.vocab_size, size=(3, 4))
        directives = {0: LoopDirective.head_loop([0], 2)}
        with count_matmul_flops() as counter:
            _, loss = model_forward(params, cfg, ids, directives=directives)
            loss.backward()
        assert counter.total == flops_per_step(cfg, directives, batch_size=3)


class TestCorpus:
    def test_ingest_split_and_windows(self):
        data = bytes(range(256)) * 13  # 3328 bytes
        corpus = ingest_corpus(data, max_seq_len=32, train_fraction=0.9)
        split = int(len(data) * 0.9)
        assert corpus.train.tobytes() == data[:split]
        assert corpus.validation.tobytes() == data[split:]
        assert corpus.n_windows == split // 32
        window = corpus.window(1)
        assert window.dtype == np.int64
        assert window.tolist() == list(data[32:64])

    def test_ingest_rejects_small_corpus(self):
        with pytest.raises(CorpusError):
            ingest_corpus(b"x" * 100, max_seq_len=32)

    def test_batches_are_deterministic_and_step_dependent(self):
        corpus = ingest_corpus(synthesize_corpus(8000, seed=0), max_seq_len=32)
        a = corpus.sample_batch(seed=7, step=3, batch_size=4)
        b = corpus.sample_batch(seed=7, step=3, batch_size=4)
        c = corpus.sample_batch(seed=7, step=4, batch_size=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (4, 32)

    def test_synthesizer_output_shape(self):
        text = synthesize_corpus(50_000, seed=2)
        assert len(text) >= 50_000
        assert text == synthesize_corpus(50_000, seed=2)
        assert text != synthesize_corpus(50_000, seed=3)
        decoded = text.decode("ascii")
        assert "\n\n" in decoded
        assert decoded.count(".") > 50

    def test_validation_windows_for_eval_length(self):
        corpus = ingest_corpus(synthesize_corpus(20_000, seed=1), max_seq_len=32)
        windows = corpus.validation_windows(64)
        assert windows.shape[1] == 64
        assert windows.shape[0] == corpus.validation.size // 64


class TestAdamW:
    def make_store(self) -> ParamStore:
        store = ParamStore()
        store.add("a", Tensor(np.ones((3, 2)), requires_grad=True))
        store.add("b", Tensor(np.full((4,), 2.0), requires_grad=True))
        return store

    def test_zero_grad_step_is_pure_decay(self):
        store = self.make_store()
        before = {name: t.data.copy() for name, t in store.items()}
        opt = AdamW(store, lr=1e-2, weight_decay=0.1)
        for _, tensor in store.items():
            tensor.grad = np.zeros_like(tensor.data)
        opt.step()
        for name, tensor in store.items():
            expect = before[name] * (1.0 - 1e-2 * 0.1)
            assert np.max(np.abs(tensor.data - expect)) < 1e-10

    def test_single_step_closed_form(self):
        store = ParamStore()
        store.add("w", Tensor(np.array([1.0]), requires_grad=True))
        opt = AdamW(store, lr=3e-4, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
        store.tensors()[0].grad = np.array([2.0])
        opt.step()
        # m_hat = 2, v_hat = 4 after bias correction; update = 2/(2+eps)
        expect = 1.0 - 3e-4 * (2.0 / (2.0 + 1e-8)) - 3e-4 * 0.1 * 1.0
        assert store.tensors()[0].data[0] == pytest.approx(expect, abs=1e-12)

    def test_clip_rescales_large_gradients(self):
        store = self.make_store()
        opt = AdamW(store)
        for _, tensor in store.items():
            tensor.grad = np.full_like(tensor.data, 3.0)
        total = math.sqrt(sum(t.grad.size * 9.0 for t in store.tensors()))
        norm = opt.clip_gradients(1.0)
        assert norm == pytest.approx(total, rel=1e-12)
        clipped = math.sqrt(sum(float(np.sum(t.grad**2)) for t in store.tensors()))
        assert clipped == pytest.approx(1.0, rel=1e-9)

    def test_clip_leaves_small_gradients_alone(self):
        store = self.make_store()
        opt = AdamW(store)
        for _, tensor in store.items():
            tensor.grad = np.full_like(tensor.data, 1e-4)
        kept = [t.grad.copy() for t in store.tensors()]
        opt.clip_gradients(1.0)
        for tensor, orig in zip(store.tensors(), kept):
            assert np.array_equal(tensor.grad, orig)

    def test_state_round_trip(self):
        store = self.make_store()
        opt = AdamW(store, lr=1e-3)
        for _, tensor in store.items():
            tensor.grad = np.ones_like(tensor.data) * 0.5
        opt.step()
        snapshot = opt.state()
        other = AdamW(self.make_store(), lr=1e-3)
        other.load_state(snapshot)
        assert other.step_count == 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "state.ckpt")
        arrays = {
            "w": np.arange(6, dtype=np.float32).reshape(2, 3),
            "m": np.linspace(0, 1, 4).astype(np.float64),
            "ids": np.array([3, 1, 4], dtype=np.int64),
        }
        meta = {"step": 12, "note": "smoke"}
        save_checkpoint(path, meta, arrays)
        loaded_meta, loaded = load_checkpoint(path)
        assert loaded_meta["step"] == 12
        assert loaded_meta["note"] == "smoke"
        for name, arr in arrays.items():
            assert loaded[name].dtype == arr.dtype
            assert np.array_equal(loaded[name], arr)

    def test_rejects_corrupted_payload(self, tmp_path):
        path = str(tmp_path / "state.ckpt")
        save_checkpoint(path, {"step": 1}, {"w": np.ones(8, dtype=np.float32)})
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_truncation_and_bad_magic(self, tmp_path):
        path = str(tmp_path / "state.ckpt")
        save_checkpoint(path, {"step": 1}, {"w": np.ones(8, dtype=np.float32)})
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) - 5])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        open(path, "wb").write(b"XXXX" + blob[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_future_version(self, tmp_path):
        import hashlib
        import struct

        path = str(tmp_path / "state.ckpt")
        save_checkpoint(path, {"step": 1}, {"w": np.ones(2, dtype=np.float32)})
        blob = open(path, "rb").read()
        body = bytearray(blob[:-32])
        body[4:8] = struct.pack("<I", 99)
        body += hashlib.sha256(bytes(body)).digest()
        open(path, "wb").write(bytes(body))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestRunSettings:
    def test_parse_config_text(self):
        text = "\n".join([
            "# comment",
            "variant = vanilla",
            "steps = 20",
            "lr = 1e-3",
            "",
            "excluded_layers = 0,1",
        ])
        settings = settings_from_pairs(parse_config_text(text))
        assert settings.variant == "vanilla"
        assert settings.steps == 20
        assert settings.lr == 1e-3
        assert settings.excluded_layers == (0, 1)

    def test_rejects_unknown_and_duplicate_keys(self):
        with pytest.raises(ConfigError):
            settings_from_pairs(parse_config_text("nonsense = 1"))
        with pytest.raises(ConfigError):
            parse_config_text("steps = 1\nsteps = 2")
        with pytest.raises(ConfigError):
            settings_from_pairs(parse_config_text("steps = banana"))

    def test_pairs_round_trip(self):
        settings = TrainSettings(variant="block_loop", steps=33, heads_per_layer=1)
        again = settings_from_pairs(settings.to_pairs())
        assert again == settings

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainSettings(variant="mystery")
        with pytest.raises(ConfigError):
            TrainSettings(steps=0)


def tiny_settings(**overrides) -> TrainSettings:
    base = dict(
        variant="sgt", seed=4, steps=14, batch_size=2, lr=1e-3,
        probe_every=5, n_layer=3, n_head=2, d_model=16, d_head=8,
        d_ff=32, max_seq_len=32, vocab_size=256,
        t_start=4, delta_t=3, target_layers=2, k_max=2, heads_per_layer=1,
    )
    base.update(overrides)
    return TrainSettings(**base)


@pytest.fixture(scope="module")
def tiny_corpus() -> Corpus:
    return ingest_corpus(synthesize_corpus(8000, seed=1), max_seq_len=32)


class TestTrainLoop:
    def test_sgt_run_emits_consistent_logs(self, tiny_corpus, tmp_path):
        out = str(tmp_path / "run")
        result = train(tiny_settings(), tiny_corpus, out)
        assert result.steps == 14
        assert math.isfinite(result.final_loss)

        name, rows = read_csv(result.metrics_path)
        assert name == "metrics"
        assert [int(r["step"]) for r in rows] == list(range(1, 15))
        for row in rows:
            assert float(row["ppl"]) == pytest.approx(
                math.exp(float(row["loss"])), rel=1e-6
            )
        running = 0
        for row in rows:
            running += int(row["flops_step"])
            assert int(row["flops_cum"]) == running
        phases = [r["phase"] for r in rows]
        assert phases[0] == "warmup"
        assert set(phases) <= {"warmup", "growing", "fixed"}

        events = read_growth_events(result.growth_log_path)
        assert events == result.events
        assert events, "growth schedule should fire in 14 steps"
        decision_steps = {4, 7, 10, 13}
        assert all(e["step"] in decision_steps for e in events)
        assert events[0]["event"] == "activate"
        kinds = {e["event"] for e in events}
        assert kinds <= {"activate", "deepen", "stall", "freeze"}

        # growth must not touch the parameter count
        cfg = tiny_settings().model_config()
        fresh = init_parameters(cfg, seed=4)
        assert result.parameter_count == fresh.total_parameters()

    def test_flops_shift_lands_on_step_after_event(self, tiny_corpus, tmp_path):
        result = train(tiny_settings(), tiny_corpus, str(tmp_path / "run"))
        _, rows = read_csv(result.metrics_path)
        by_step = {int(r["step"]): int(r["flops_step"]) for r in rows}
        first = next(e for e in result.events if e["event"] == "activate")
        t = first["step"]
        assert by_step[t] == by_step[t - 1]
        assert by_step[t + 1] > by_step[t]

    def test_probe_tables_logged_on_cadence(self, tiny_corpus, tmp_path):
        result = train(tiny_settings(), tiny_corpus, str(tmp_path / "run"))
        out = result.out_dir
        _, head_rows = read_csv(os.path.join(out, "probe_heads.csv"))
        _, layer_rows = read_csv(os.path.join(out, "probe_layers.csv"))
        probe_steps = {int(r["step"]) for r in head_rows}
        assert probe_steps == {5, 10}
        assert len(head_rows) == 2 * 3 * 2
        assert len(layer_rows) == 2 * 3
        for row in head_rows:
            assert 0.0 <= float(row["entropy_mean"]) <= 1.0
        for row in layer_rows:
            assert float(row["intra_layer_variance"]) >= 0.0

    def test_repeat_runs_are_byte_identical(self, tiny_corpus, tmp_path):
        a = train(tiny_settings(), tiny_corpus, str(tmp_path / "a"))
        b = train(tiny_settings(), tiny_corpus, str(tmp_path / "b"))
        assert open(a.metrics_path, "rb").read() == open(b.metrics_path, "rb").read()
        assert a.events == b.events

    def test_vanilla_run_has_flat_cost_and_no_growth_log(self, tiny_corpus, tmp_path):
        result = train(
            tiny_settings(variant="vanilla"), tiny_corpus, str(tmp_path / "run")
        )
        assert result.growth_log_path is None
        assert not os.path.exists(os.path.join(result.out_dir, "growth_events.jsonl"))
        assert result.events == []
        _, rows = read_csv(result.metrics_path)
        assert len({r["flops_step"] for r in rows}) == 1
        assert {r["phase"] for r in rows} == {"fixed"}
        assert {r["active_layers"] for r in rows} == {""}

    def test_block_loop_baseline_activates_at_start(self, tiny_corpus, tmp_path):
        result = train(
            tiny_settings(variant="block_loop"), tiny_corpus, str(tmp_path / "run")
        )
        events = result.events
        assert len(events) == 2  # target_layers blocks chosen at once
        assert {e["event"] for e in events} == {"activate"}
        assert all(e["step"] == 4 and e["S_l"] == [] for e in events)
        _, rows = read_csv(result.metrics_path)
        phases = [r["phase"] for r in rows]
        assert phases[:4] == ["warmup"] * 4
        assert set(phases[4:]) == {"fixed"}
        by_step = {int(r["step"]): int(r["flops_step"]) for r in rows}
        assert by_step[5] > by_step[4]

    def test_resume_is_bit_exact(self, tiny_corpus, tmp_path):
        full = train(
            tiny_settings(checkpoint_every=7),
            tiny_corpus,
            str(tmp_path / "full"),
        )
        mid = os.path.join(full.out_dir, "checkpoints", "step000007.ckpt")
        assert os.path.exists(mid)
        resumed = train(
            tiny_settings(checkpoint_every=7),
            tiny_corpus,
            str(tmp_path / "resumed"),
            resume_from=mid,
        )
        meta_a, arrays_a = load_checkpoint(full.checkpoint_path)
        meta_b, arrays_b = load_checkpoint(resumed.checkpoint_path)
        assert meta_a["step"] == meta_b["step"] == 14
        assert meta_a["flops_cum"] == meta_b["flops_cum"]
        assert meta_a["arch_state"] == meta_b["arch_state"]
        assert sorted(arrays_a) == sorted(arrays_b)
        for name in arrays_a:
            assert arrays_a[name].tobytes() == arrays_b[name].tobytes(), name
        assert full.events == resumed.events

        # the overlapping metric rows must agree exactly
        _, rows_full = read_csv(full.metrics_path)
        _, rows_resumed = read_csv(resumed.metrics_path)
        tail_full = [r for r in rows_full if int(r["step"]) > 7]
        assert tail_full == rows_resumed

    def test_resume_rejects_changed_settings(self, tiny_corpus, tmp_path):
        full = train(
            tiny_settings(checkpoint_every=7), tiny_corpus, str(tmp_path / "full")
        )
        mid = os.path.join(full.out_dir, "checkpoints", "step000007.ckpt")
        with pytest.raises(ConfigError):
            train(
                tiny_settings(checkpoint_every=7, lr=5e-3),
                tiny_corpus,
                str(tmp_path / "other"),
                resume_from=mid,
            )

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_step(self, tiny_corpus, tmp_path):
        settings = tiny_settings(lr=1e6, steps=6)
        with pytest.raises(TrainingAbort) as excinfo:
            train(settings, tiny_corpus, str(tmp_path / "run"))
        assert excinfo.value.step >= 1


class TestAblationArms:
    def arm_settings(self, arm: str, **over) -> TrainSettings:
        base = dict(
            variant="ablation", ablate_arm=arm, ablate_layer=1,
            seed=4, steps=8, batch_size=2, lr=1e-3, probe_every=4,
            n_layer=3, n_head=4, d_model=16, d_head=4, d_ff=32,
            max_seq_len=32, vocab_size=256,
            t_start=3, heads_per_layer=2, k_max=2,
        )
        base.update(over)
        return TrainSettings(**base)

    def test_selection_helper_per_arm(self):
        means = {(1, 0): 0.9, (1, 1): 0.1, (1, 2): 0.8, (1, 3): 0.5}
        pick = lambda arm, **over: _select_ablation_heads(
            self.arm_settings(arm, **over), means
        )
        assert pick("high_entropy")["heads"] == [0, 2]
        assert pick("low_entropy")["heads"] == [1, 3]
        assert pick("attention_loop")["heads"] == [0, 1, 2, 3]
        assert pick("block_loop") == {
            "arm": "block_loop", "layer": 1, "kind": "block_loop",
            "heads": [], "depth": 2,
        }
        masked = pick("mask_high")
        assert masked["kind"] == "mask"
        assert masked["heads"] == [0, 2]
        assert masked["depth"] == 0
        # two-stage: shortlist the 3 highest first, then the 2 lowest inside
        assert pick("low_entropy", ablate_pool=3)["heads"] == [2, 3]

    def test_flops_ordering_across_arms(self, tiny_corpus, tmp_path):
        totals = {}
        for arm in ("block_loop", "attention_loop", "high_entropy", "low_entropy"):
            result = train(
                self.arm_settings(arm), tiny_corpus, str(tmp_path / arm)
            )
            totals[arm] = result.flops_total
        assert totals["high_entropy"] == totals["low_entropy"]
        assert totals["high_entropy"] < totals["attention_loop"]
        assert totals["attention_loop"] < totals["block_loop"]

    def test_loop_arm_logs_activation_event(self, tiny_corpus, tmp_path):
        result = train(
            self.arm_settings("high_entropy"), tiny_corpus, str(tmp_path / "run")
        )
        assert len(result.events) == 1
        event = result.events[0]
        assert event["step"] == 3
        assert event["event"] == "activate"
        assert event["layer"] == 1
        assert event["K_l"] == 2
        assert len(event["S_l"]) == 2

    def test_mask_arm_cuts_cost_without_events(self, tiny_corpus, tmp_path):
        result = train(
            self.arm_settings("mask_low"), tiny_corpus, str(tmp_path / "run")
        )
        assert result.events == []
        _, rows = read_csv(result.metrics_path)
        by_step = {int(r["step"]): int(r["flops_step"]) for r in rows}
        assert by_step[4] < by_step[3]
        assert rows[-1]["active_layers"] == "1"

    def test_settings_validation(self):
        with pytest.raises(ConfigError):
            TrainSettings(variant="ablation", ablate_arm="nonsense", ablate_layer=1)
        with pytest.raises(ConfigError):
            TrainSettings(variant="ablation", ablate_arm="block_loop", ablate_layer=9)
        with pytest.raises(ConfigError):
            TrainSettings(variant="sgt", ablate_arm="block_loop")

    def test_restore_model_round_trip(self, tiny_corpus, tmp_path):
        result = train(
            self.arm_settings("high_entropy"), tiny_corpus, str(tmp_path / "run")
        )
        restored = restore_model(result.checkpoint_path)
        assert restored.step == 8
        assert restored.settings.ablate_arm == "high_entropy"
        directives = restored.directives()
        assert list(directives) == [1]
        assert directives[1].kind == "head_loop"
        assert directives[1].depth == 2
        _, arrays = load_checkpoint(result.checkpoint_path)
        stored = dict(restored.params.items())
        for name in stored:
            assert np.array_equal(arrays[f"param:{name}"], stored[name].data)


class TestEvaluation:
    def test_uniform_logits_give_vocab_perplexity(self):
        cfg = ModelConfig(
            n_layer=1, n_head=1, d_model=8, d_head=8, d_ff=16,
            vocab_size=256, max_seq_len=16,
        )
        params = init_parameters(cfg, seed=0)
        lm = dict(params.items())["lm_head.weight"]
        lm.data[:] = 0.0
        corpus = ingest_corpus(synthesize_corpus(4000, seed=5), max_seq_len=16)
        ppl = evaluate_perplexity(params, cfg, corpus)
        assert ppl == pytest.approx(256.0, abs=1e-6)

    def test_perplexity_is_exp_of_mean_nats(self, tiny_corpus):
        cfg = tiny_settings().model_config()
        params = init_parameters(cfg, seed=2)
        windows = tiny_corpus.validation_windows(32)
        with np.errstate(all="ignore"):
            _, loss = model_forward(params, cfg, windows[:8], want_loss=True)
        ppl = evaluate_perplexity(params, cfg, corpus_like(windows[:8]), batch_size=8)
        assert ppl == pytest.approx(math.exp(loss.item()), rel=1e-6)

    def test_long_context_multipliers(self, tiny_corpus):
        cfg = tiny_settings().model_config()
        params = init_parameters(cfg, seed=2)
        table = long_context_eval(params, cfg, tiny_corpus, multipliers=(2, 3))
        assert [row["multiplier"] for row in table] == [2, 3]
        for row in table:
            assert row["context_length"] == 32 * row["multiplier"]
            assert math.isfinite(row["ppl"])


def corpus_like(windows: np.ndarray) -> Corpus:
    """Corpus whose validation stream is exactly the given windows."""
    flat = windows.astype(np.uint8).reshape(-1)
    return Corpus(
        train=flat, validation=flat, max_seq_len=int(windows.shape[1])
    )
