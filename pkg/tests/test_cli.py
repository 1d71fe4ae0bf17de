import json

import pytest
import torch

from bytelm import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint
from bytelm.cli import build_configs, main, parse_args, read_config_file
from bytelm.model import ByteTransformer
from bytelm.training import desk_model_config, desk_train_config
from conftest import FIXTURES, TINY, random_text

TINY_OVERRIDES = [
    "--set", "num_layers=2", "--set", "hidden_size=16", "--set", "filter_size=32",
    "--set", "num_heads=2", "--set", "embed_dim=8", "--set", "context_len=32",
    "--set", "window_len=32", "--set", "batch_size=2", "--set", "dropout_rate=0.0",
]


@pytest.fixture()
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(random_text(4000, seed=0))
    return path


@pytest.fixture()
def tiny_ckpt(tmp_path):
    model = ByteTransformer(TINY, seed=7)
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(Checkpoint.from_model(model, TrainConfig(), 0), path)
    return path


@pytest.fixture()
def zero_head_ckpt(tmp_path):
    model = ByteTransformer(TINY, seed=7)
    with torch.no_grad():
        model.output_head.zero_()
        model.output_head_bias.zero_()
    path = tmp_path / "zero.ckpt"
    save_checkpoint(Checkpoint.from_model(model, TrainConfig(), 0), path)
    return path


class TestParsing:
    def test_stats_command(self):
        command = parse_args(["stats", "--data", "corpus.txt"])
        assert command.verb == "stats"
        assert command.options.data == ["corpus.txt"]

    def test_eval_command_with_stride(self):
        command = parse_args(
            ["eval", "--checkpoint", "m.ckpt", "--data", "test.txt", "--stride", "1"]
        )
        assert command.verb == "eval"
        assert command.options.stride == 1
        assert command.options.checkpoint == "m.ckpt"

    def test_unknown_verb_exits_nonzero(self):
        with pytest.raises(SystemExit) as excinfo:
            parse_args(["frobnicate"])
        assert excinfo.value.code != 0

    def test_unknown_flag_exits_nonzero(self):
        with pytest.raises(SystemExit) as excinfo:
            parse_args(["stats", "--data", "x", "--frobnicate"])
        assert excinfo.value.code != 0

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            parse_args(["--help"])
        assert excinfo.value.code == 0
        assert "bytelm" in capsys.readouterr().out

    def test_named_flags_become_overrides(self):
        command = parse_args(
            ["train", "--data", "c.txt", "--steps", "3", "--seed", "9", "--set", "batch_size=2"]
        )
        assert command.overrides == {"batch_size": "2", "total_steps": "3", "seed": "9"}

    def test_malformed_set_rejected(self):
        with pytest.raises(ValueError):
            parse_args(["train", "--data", "c.txt", "--set", "nonsense"])


class TestConfigPrecedence:
    def test_flags_beat_file_beats_defaults(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("batch_size=4\ntotal_steps=7\nhidden_size=64  # comment\n")
        file_values = read_config_file(config)
        model_cfg, train_cfg = build_configs(file_values, {"batch_size": "2"})
        assert train_cfg.batch_size == 2          # override beats file
        assert train_cfg.total_steps == 7         # file beats default
        assert model_cfg.hidden_size == 64        # file beats default
        assert model_cfg.num_layers == desk_model_config().num_layers  # default

    def test_defaults_are_desk_scale(self):
        model_cfg, train_cfg = build_configs({}, {})
        assert model_cfg == desk_model_config()
        assert train_cfg == desk_train_config()

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError) as excinfo:
            build_configs({"hidden_dims": "64"}, {})
        assert "hidden_dims" in str(excinfo.value)

    def test_shipped_desk_config_matches_defaults(self):
        values = read_config_file(FIXTURES.parent.parent / "configs" / "desk.cfg")
        model_cfg, train_cfg = build_configs(values, {})
        assert model_cfg == desk_model_config()
        assert train_cfg == desk_train_config()


class TestStatsVerb:
    def test_prints_text_and_record(self, capsys, tmp_path):
        path = tmp_path / "c.txt"
        path.write_bytes(b"hello world\n")
        assert main(["stats", "--data", str(path)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "sentences=1 words=3 bytes=12"
        assert json.loads(out[1]) == {"sentences": 1, "words": 3, "bytes": 12}

    def test_missing_file_is_error(self, capsys, tmp_path):
        assert main(["stats", "--data", str(tmp_path / "nope.txt")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and "nope.txt" in err


class TestEvalVerb:
    def test_zero_head_reports_eight_bits(self, capsys, corpus_file, zero_head_ckpt):
        code = main(
            ["eval", "--checkpoint", str(zero_head_ckpt), "--data", str(corpus_file),
             "--stride", "16", "--context", "32"]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "bpb=8.0" in out
        record = json.loads(out.splitlines()[1])
        assert record["bpb"] == 8.0
        assert record["ppl"] is not None

    def test_stride_zero_is_argument_error(self, capsys, corpus_file, zero_head_ckpt):
        code = main(
            ["eval", "--checkpoint", str(zero_head_ckpt), "--data", str(corpus_file),
             "--stride", "0"]
        )
        assert code == 1
        assert capsys.readouterr().err.startswith("error: ValueError:")

    def test_context_defaults_to_model_limit(self, capsys, corpus_file, zero_head_ckpt):
        # model context is 32 < 512, so the default must clamp
        code = main(
            ["eval", "--checkpoint", str(zero_head_ckpt), "--data", str(corpus_file),
             "--stride", "32"]
        )
        assert code == 0
        assert "context=32" in capsys.readouterr().out

    def test_multiple_files_score_joined_stream(self, capsys, tmp_path, zero_head_ckpt):
        a = tmp_path / "a.txt"
        b = tmp_path / "b.txt"
        a.write_bytes(b"first shard\n")
        b.write_bytes(b"second shard\n")
        code = main(
            ["eval", "--checkpoint", str(zero_head_ckpt), "--data", str(a), str(b),
             "--stride", "8", "--context", "16"]
        )
        assert code == 0
        record = json.loads(capsys.readouterr().out.splitlines()[1])
        assert record["bytes"] == 12 + 1 + 13  # files joined by one newline


class TestTrainVerb:
    def test_smoke_run_decreasing_loss(self, capsys, tmp_path, corpus_file):
        out_ckpt = tmp_path / "out.ckpt"
        code = main(
            ["train", "--data", str(corpus_file), "--steps", "30", "--seed", "1",
             "--out", str(out_ckpt), "--log-every", "10", "--threads", "1",
             *TINY_OVERRIDES]
        )
        assert code == 0
        assert out_ckpt.exists()
        out = capsys.readouterr().out
        logged = [line for line in out.splitlines() if line.startswith("step=")]
        assert len(logged) == 3
        first = float(logged[0].split("bpb=")[1].split()[0])
        last = float(logged[-1].split("bpb=")[1].split()[0])
        assert last < first
        ckpt = load_checkpoint(out_ckpt)
        assert ckpt.step == 30
        assert ckpt.optimizer is not None

    def test_seeded_runs_bit_identical(self, tmp_path, corpus_file):
        paths = [tmp_path / "a.ckpt", tmp_path / "b.ckpt"]
        for path in paths:
            code = main(
                ["train", "--data", str(corpus_file), "--steps", "3", "--seed", "5",
                 "--out", str(path), "--log-every", "0", "--threads", "1",
                 *TINY_OVERRIDES]
            )
            assert code == 0
        a = load_checkpoint(paths[0])
        b = load_checkpoint(paths[1])
        for name, tensor in a.parameters.items():
            assert torch.equal(tensor, b.parameters[name]), name

    def test_different_seeds_differ(self, tmp_path, corpus_file):
        paths = [tmp_path / "a.ckpt", tmp_path / "b.ckpt"]
        for seed, path in zip((1, 2), paths):
            main(
                ["train", "--data", str(corpus_file), "--steps", "2", "--seed", str(seed),
                 "--out", str(path), "--log-every", "0", "--threads", "1",
                 *TINY_OVERRIDES]
            )
        a = load_checkpoint(paths[0])
        b = load_checkpoint(paths[1])
        assert not torch.equal(a.parameters["output_head"], b.parameters["output_head"])

    def test_bad_config_key_fails(self, capsys, tmp_path, corpus_file):
        code = main(
            ["train", "--data", str(corpus_file), "--set", "bogus_key=1"]
        )
        assert code == 1
        assert "bogus_key" in capsys.readouterr().err

    def test_desk_config_end_to_end(self, capsys, tmp_path):
        # shipped desk-scale config on a ~100 KB corpus, shortened run
        corpus = tmp_path / "big.txt"
        corpus.write_bytes(random_text(100_000, seed=3))
        out_ckpt = tmp_path / "desk.ckpt"
        code = main(
            ["train", "--config", str(FIXTURES.parent.parent / "configs" / "desk.cfg"),
             "--data", str(corpus), "--steps", "40", "--out", str(out_ckpt),
             "--log-every", "10"]
        )
        assert code == 0
        assert out_ckpt.exists()
        logged = [
            float(line.split("bpb=")[1].split()[0])
            for line in capsys.readouterr().out.splitlines()
            if line.startswith("step=")
        ]
        assert len(logged) >= 4
        assert logged[-1] < logged[0]
        assert load_checkpoint(out_ckpt).model_config == desk_model_config()


class TestProbeVerb:
    def test_writes_sweep_csv(self, capsys, tmp_path):
        out = tmp_path / "sweep.csv"
        code = main(
            ["probe", "--checkpoint", str(FIXTURES / "tiny.ckpt"),
             "--pairs", str(FIXTURES / "pairs_sample.tsv"), "--out", str(out)]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "layer,dataset,rho"
        assert len(lines) == 1 + 2  # 2 layers x 1 dataset

    def test_layer_subset_and_multiple_files(self, tmp_path):
        extra = tmp_path / "extra.tsv"
        extra.write_text("cat\tdog\t1.0\nking\tqueen\t2.0\n")
        out = tmp_path / "sweep.csv"
        code = main(
            ["probe", "--checkpoint", str(FIXTURES / "tiny.ckpt"),
             "--pairs", str(FIXTURES / "pairs_sample.tsv"), str(extra),
             "--layers", "2", "--out", str(out)]
        )
        assert code == 0
        lines = out.read_text().splitlines()[1:]
        assert len(lines) == 2  # 1 layer x 2 datasets
        assert all(line.startswith("2,") for line in lines)

    def test_bad_layers_flag_fails(self, capsys, tmp_path):
        code = main(
            ["probe", "--checkpoint", str(FIXTURES / "tiny.ckpt"),
             "--pairs", str(FIXTURES / "pairs_sample.tsv"),
             "--layers", "7", "--out", str(tmp_path / "s.csv")]
        )
        assert code == 1
        assert capsys.readouterr().err.startswith("error: IndexError:")
