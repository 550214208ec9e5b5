import numpy as np
import pytest

from protomixer.cli import main, read_config_file
from protomixer.data_io import read_manifest
from protomixer.model import MixerConfig, param_count

TINY = ["--ds", "4", "--dc", "8", "--m", "1", "--domain-hidden", "5"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "raw"), "--bags", "12",
                 "--classes", "2", "--n", "6", "--patches-min", "6",
                 "--patches-max", "12", "--seed", "3"]) == 0
    assert main(["reduce", "--manifest", str(root / "raw" / "manifest.tsv"),
                 "--k", "3", "--out", str(root / "k3")]) == 0
    return root


def _train(corpus, out, *extra):
    return main(["train", "--manifest", str(corpus / "k3" / "manifest.tsv"),
                 "--out", str(out), "--epochs", "3", "--lr", "1e-3", *TINY, *extra])


def test_gen_and_reduce_outputs(corpus):
    assert (corpus / "raw" / "record.txt").exists()
    man = read_manifest(corpus / "k3" / "manifest.tsv")
    assert man.kind == "prototype" and len(man.entries) == 12
    report = (corpus / "k3" / "report.csv").read_text().splitlines()
    assert len(report) == 13


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["gen-synthetic", "--bags", "3"],
    ["reduce", "--manifest", "m.tsv", "--k", "x", "--out", "o"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2


def test_train_then_eval_reproduces(corpus, tmp_path):
    assert _train(corpus, tmp_path / "run") == 0
    run = tmp_path / "run"
    for name in ("record.txt", "metrics.csv", "losses.csv", "checkpoint.pmx"):
        assert (run / name).exists(), name
    losses = (run / "losses.csv").read_text().splitlines()
    assert losses[0] == "epoch,class_loss,domain_loss,lambda"
    assert len(losses) == 4
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pmx"),
                 "--manifest", str(corpus / "k3" / "manifest.tsv"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "metrics.csv").read_text() == (run / "metrics.csv").read_text()


def test_metrics_deterministic(corpus, tmp_path):
    assert _train(corpus, tmp_path / "a") == 0
    assert _train(corpus, tmp_path / "b") == 0
    for name in ("metrics.csv", "losses.csv", "checkpoint.pmx"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_record_contents(corpus, tmp_path):
    _train(corpus, tmp_path / "r")
    text = (tmp_path / "r" / "record.txt").read_text()
    for needle in ("command: protomixer train", "seed: 0", "input_sha256: ",
                   "epochs = 3", "checkpoint.pmx", "started:", "finished:"):
        assert needle in text


def test_config_file_and_flag_precedence(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 2\nlr=5e-4\nno-adversarial = true\n")
    assert read_config_file(cfg)["no_adversarial"] == "true"
    assert _train(corpus, tmp_path / "r", "--config", str(cfg)) == 0
    text = (tmp_path / "r" / "record.txt").read_text()
    assert "epochs = 3" in text          # flag wins
    assert "lr = 0.001" in text
    assert "no_adversarial = True" in text  # from file
    bad = tmp_path / "bad.cfg"
    bad.write_text("warp = 9\n")
    assert _train(corpus, tmp_path / "r2", "--config", str(bad)) == 2


def test_config_supplies_required(corpus, tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text(f"manifest={corpus / 'k3' / 'manifest.tsv'}\nout={tmp_path / 'o'}\n"
                   "epochs=1\nds=4\ndc=8\nm=1\ndomain_hidden=5\n")
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "checkpoint.pmx").exists()


def test_profile_columns_only_with_flag(corpus, tmp_path, capsys):
    _train(corpus, tmp_path / "plain")
    header = (tmp_path / "plain" / "metrics.csv").read_text().splitlines()[0]
    assert "param_count" not in header
    assert _train(corpus, tmp_path / "prof", "--profile") == 0
    header = (tmp_path / "prof" / "metrics.csv").read_text().splitlines()[0]
    assert header.endswith("param_count,peak_resident_bytes,seconds_per_epoch")
    assert "token_mixing" in (tmp_path / "prof" / "profile.txt").read_text()
    assert "param_count:" in capsys.readouterr().out


def test_dry_run_profile_only(corpus, tmp_path, capsys):
    assert main(["train", "--manifest", str(corpus / "k3" / "manifest.tsv"),
                 "--out", str(tmp_path / "d"), "--dry-run"]) == 0
    out = capsys.readouterr().out
    count = int(out.split("param_count: ")[1].split()[0])
    cfg = MixerConfig(k=3, N=6, num_classes=2, num_domains=12)
    assert count == param_count(cfg)
    assert not (tmp_path / "d" / "checkpoint.pmx").exists()


def test_eval_shape_mismatch_and_missing(corpus, tmp_path, capsys):
    _train(corpus, tmp_path / "r")
    assert main(["reduce", "--manifest", str(corpus / "raw" / "manifest.tsv"),
                 "--k", "2", "--out", str(tmp_path / "k2")]) == 0
    code = main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.pmx"),
                 "--manifest", str(tmp_path / "k2" / "manifest.tsv")])
    assert code == 3
    assert "k=3" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pmx"),
                 "--manifest", str(corpus / "k3" / "manifest.tsv")]) == 3


def test_embedding_manifest_needs_k(corpus, tmp_path):
    raw = str(corpus / "raw" / "manifest.tsv")
    assert main(["train", "--manifest", raw, "--out", str(tmp_path / "a"),
                 "--epochs", "1", *TINY]) == 2
    assert main(["train", "--manifest", raw, "--out", str(tmp_path / "b"),
                 "--epochs", "1", "--k", "3", *TINY]) == 0


def test_bad_data_exit_code(tmp_path):
    (tmp_path / "m.tsv").write_text("garbage\n")
    assert main(["train", "--manifest", str(tmp_path / "m.tsv"),
                 "--out", str(tmp_path / "o")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_exit_code(corpus, tmp_path, capsys):
    code = _train(corpus, tmp_path / "nan", "--optimizer", "sgd_momentum",
                  "--lr", "1e300")
    assert code == 4
    assert "parameter block" in capsys.readouterr().err


def test_crossval_rows(corpus, tmp_path):
    assert main(["crossval", "--manifest", str(corpus / "k3" / "manifest.tsv"),
                 "--out", str(tmp_path / "cv"), "--epochs", "2", "--folds", "3",
                 "--repeats", "2", *TINY]) == 0
    rows = (tmp_path / "cv" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 6
    losses = (tmp_path / "cv" / "losses.csv").read_text().splitlines()
    assert len(losses) == 1 + 6 * 2


def test_sweep_k(corpus, tmp_path):
    assert main(["sweep-k", "--manifest", str(corpus / "raw" / "manifest.tsv"),
                 "--out", str(tmp_path / "sw"), "--k-list", "1,3", "--epochs", "1",
                 "--folds", "2", *TINY]) == 0
    table = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in table[1:]] == ["1", "3"]
    assert main(["sweep-k", "--manifest", str(corpus / "raw" / "manifest.tsv"),
                 "--out", str(tmp_path / "sw2"), "--k-list", "0"]) == 2
    f1 = np.array([float(r.split(",")[1]) for r in table[1:]])
    assert np.all((0 <= f1) & (f1 <= 1))
