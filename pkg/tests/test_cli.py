import json
import os

import numpy as np
import pytest
import yaml

from warpdistill.cli import main
from warpdistill.config import RunConfig
from warpdistill.tokenizers import PairTokenizer, Vocab, load_merges


@pytest.fixture(scope="module")
def micro_config_path(tmp_path_factory):
    cfg = RunConfig(
        seed=3, corpus_size=300, num_merges=48,
        teacher_width=32, teacher_layers=1, teacher_heads=2,
        teacher_epochs=2, teacher_ppl_ratio=0.9,
        student_width=16, student_layers=1, student_heads=2,
        epochs=1, batch_size=8, train_limit=32, lambda_dtw=0.05,
        eval_seeds=2, eval_max_new=8, eval_limit=10,
    )
    path = tmp_path_factory.mktemp("cfg") / "micro.yaml"
    cfg.to_yaml(path)
    return str(path)


@pytest.fixture(scope="module")
def prepared(tmp_path_factory, micro_config_path):
    out = str(tmp_path_factory.mktemp("ws"))
    assert main(["prepare", "--config", micro_config_path, "--out", out]) == 0
    assert main(["pretrain-teacher", "--config", micro_config_path, "--out", out]) == 0
    return out


class TestPrepare:
    def test_reruns_are_byte_identical(self, tmp_path, micro_config_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["prepare", "--config", micro_config_path, "--out", a]) == 0
        assert main(["prepare", "--config", micro_config_path, "--out", b]) == 0
        for name in ("train.tsv", "valid.tsv", "test.tsv", "char_vocab.txt",
                     "pair_vocab.txt", "merges.txt"):
            fa = open(os.path.join(a, "corpus", name), "rb").read()
            fb = open(os.path.join(b, "corpus", name), "rb").read()
            assert fa == fb, name

    def test_split_sizes_follow_floor_rule(self, prepared, micro_config_path):
        cfg = RunConfig.from_yaml(micro_config_path)
        lines = lambda n: len(open(os.path.join(prepared, "corpus", n)).readlines())
        assert lines("valid.tsv") == int(cfg.corpus_size * cfg.valid_frac)
        assert lines("test.tsv") == int(cfg.corpus_size * cfg.test_frac)
        assert lines("train.tsv") == cfg.corpus_size - lines("valid.tsv") - lines("test.tsv")

    def test_vocab_files_reload(self, prepared):
        base = os.path.join(prepared, "corpus")
        vocab = Vocab.load(os.path.join(base, "pair_vocab.txt"))
        merges = load_merges(os.path.join(base, "merges.txt"))
        tok = PairTokenizer(vocab, merges)
        assert tok.encode("copy ab = ab").ids == tok.encode("copy ab = ab").ids
        assert vocab.size > 4

    def test_refuses_nonempty_dir_without_force(self, prepared, micro_config_path):
        assert main(["prepare", "--config", micro_config_path, "--out", prepared]) == 1

    def test_manifest_written(self, prepared):
        with open(os.path.join(prepared, "corpus", "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["command"] == "prepare"
        assert manifest["end_time"] is not None


class TestExitCodes:
    def test_usage_error_is_one(self):
        assert main(["distill", "--mode", "bogus"]) == 1

    def test_missing_artifact_is_three(self, tmp_path, micro_config_path):
        out = str(tmp_path / "empty")
        os.makedirs(out)
        assert main(["distill", "--config", micro_config_path, "--out", out]) == 3

    def test_missing_teacher_is_three(self, tmp_path, micro_config_path):
        out = str(tmp_path / "half")
        assert main(["prepare", "--config", micro_config_path, "--out", out]) == 0
        assert main(["distill", "--config", micro_config_path, "--out", out]) == 3

    def test_unknown_component_is_one(self, tmp_path, micro_config_path):
        out = str(tmp_path / "gc")
        code = main(["gradcheck", "--config", micro_config_path, "--out", out,
                     "--component", "nonsense", "--seeds", "1"])
        assert code == 1


class TestDistillAndEvaluate:
    def test_full_workflow(self, prepared, micro_config_path):
        assert main(["distill", "--config", micro_config_path, "--out", prepared,
                     "--mode", "dwa"]) == 0
        run_dir = os.path.join(prepared, "runs", "dwa")
        assert os.path.exists(os.path.join(run_dir, "student.bin"))
        assert os.path.exists(os.path.join(run_dir, "losses.csv"))
        assert os.path.exists(os.path.join(run_dir, "config.yaml"))
        with open(os.path.join(run_dir, "losses.csv")) as fh:
            header = fh.readline().strip().split(",")
        assert header == ["step", "lr_scale", "ce", "kd_student", "kd_teacher",
                          "ce_projected", "ndtw_embed", "ndtw_hidden", "total"]

        assert main(["evaluate", "--config", micro_config_path, "--out", prepared,
                     "--mode", "dwa"]) == 0
        report = open(os.path.join(prepared, "eval", "dwa", "report.csv")).read()
        assert report.startswith("seed,rouge_l")
        assert "mean," in report

    def test_sft_mode_has_zero_kd_columns(self, prepared, micro_config_path):
        assert main(["distill", "--config", micro_config_path, "--out", prepared,
                     "--mode", "sft", "--force"]) == 0
        rows = open(os.path.join(prepared, "runs", "sft", "losses.csv")).readlines()[1:]
        for row in rows:
            cells = row.strip().split(",")
            assert all(float(v) == 0.0 for v in cells[3:8])

    def test_config_snapshot_matches_input(self, prepared, micro_config_path):
        with open(micro_config_path) as fh:
            original = yaml.safe_load(fh)
        with open(os.path.join(prepared, "runs", "dwa", "config.yaml")) as fh:
            snapshot = yaml.safe_load(fh)
        assert snapshot == original


class TestGradcheckCommand:
    def test_report_lists_all_terms(self, tmp_path, micro_config_path, capsys):
        out = str(tmp_path / "gc")
        code = main(["gradcheck", "--config", micro_config_path, "--out", out,
                     "--seeds", "2"])
        assert code == 0
        text = capsys.readouterr().out
        for term in ("ce", "kd_student", "kd_teacher", "ce_projected",
                     "ndtw_embed", "ndtw_hidden", "total"):
            assert term in text
        report = open(os.path.join(out, "gradcheck", "report.txt")).read()
        assert report.count("ok") == 7

    def test_component_filter_softdtw(self, tmp_path, micro_config_path, capsys):
        out = str(tmp_path / "gc2")
        code = main(["gradcheck", "--config", micro_config_path, "--out", out,
                     "--component", "softdtw", "--seeds", "2"])
        assert code == 0
        text = capsys.readouterr().out
        assert "softdtw-grad" in text and "kd_student" not in text

    def test_single_component_filter(self, tmp_path, micro_config_path, capsys):
        out = str(tmp_path / "gc3")
        code = main(["gradcheck", "--config", micro_config_path, "--out", out,
                     "--component", "kd-student", "--seeds", "1"])
        assert code == 0
        assert "kd_student" in capsys.readouterr().out


class TestDumpAlignment:
    def test_dump_contracts(self, prepared, micro_config_path):
        assert main(["dump-alignment", "--config", micro_config_path, "--out", prepared,
                     "--mode", "dwa", "--example", "1"]) == 0
        dump_dir = os.path.join(prepared, "dumps", "example1")
        cost = np.loadtxt(os.path.join(dump_dir, "embed_cost.csv"), delimiter=",")
        banded = np.loadtxt(os.path.join(dump_dir, "embed_cost_banded.csv"), delimiter=",")
        diff = banded - cost
        cfg = RunConfig.from_yaml(micro_config_path)
        ok = (np.abs(diff) <= 1e-12) | (np.abs(diff - cfg.band_penalty) <= 1e-12)
        assert ok.all()
        grad = np.loadtxt(os.path.join(dump_dir, "hidden_alignment_grad.csv"), delimiter=",")
        assert grad.min() >= -1e-12 and grad.max() <= 1.0 + 1e-12
        band = open(os.path.join(dump_dir, "band.csv")).readlines()
        assert band[0].strip() == "row,center,width"
        assert len(band) == cost.shape[0] + 1

    def test_redump_byte_identical(self, prepared, micro_config_path):
        dump_dir = os.path.join(prepared, "dumps", "example1")
        before = {
            name: open(os.path.join(dump_dir, name), "rb").read()
            for name in os.listdir(dump_dir) if name.endswith(".csv")
        }
        assert main(["dump-alignment", "--config", micro_config_path, "--out", prepared,
                     "--mode", "dwa", "--example", "1", "--force"]) == 0
        for name, blob in before.items():
            assert open(os.path.join(dump_dir, name), "rb").read() == blob, name

    def test_out_of_range_example_is_usage_error(self, prepared, micro_config_path):
        assert main(["dump-alignment", "--config", micro_config_path, "--out", prepared,
                     "--mode", "dwa", "--example", "99999", "--force"]) == 1
