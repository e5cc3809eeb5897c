import csv

import numpy as np
import pytest

from oracles import brute_auc, brute_eer
from pseudodist import io as pio
from pseudodist.cli import main
from pseudodist.models import DistanceConfig, EncoderConfig, distance_score, init_models
from pseudodist.numeric import make_rng

TINY = """
enc_hidden = 6
embedding_dim = 2
dist_depth = 2
dist_width = 16
aux_kind = standard
max_iterations = 60
classes_per_batch = 2
examples_per_class = 4
eval_every = 20
valid_trials = 100
valid_fraction = 0.2
oracle_means = 2,0; -2,0
oracle_n_per_class = 60
oracle_n_mc = 2000
oracle_n_pairs = 400
"""


def rows(path, delimiter=","):
    with open(path, newline="") as fh:
        return list(csv.reader(fh, delimiter=delimiter))


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_option_is_usage_error():
    assert main(["trials", "--bogus"]) == 1
    assert main(["eval"]) == 1


def test_help_exits_cleanly():
    assert main(["--help"]) == 0


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.conf").write_text("learnin_rate = 3\n")
    assert main(["synth", "--spec", str(tmp_path / "c.conf"), "--out", str(tmp_path / "o")]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_missing_data_is_data_error(tmp_path):
    (tmp_path / "c.conf").write_text(TINY)
    code = main(["train", "--config", str(tmp_path / "c.conf"), "--data",
                 str(tmp_path / "missing.csv"), "--out", str(tmp_path / "run")])
    assert code == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    last = out.strip().splitlines()[-1]
    assert last.startswith("max rel error") and last.endswith("(ok)")
    assert float(last.split()[3]) < 1e-4


@pytest.fixture
def six_trials(tmp_path):
    """Four 2-d examples, a hand-perturbed bundle and six trials."""
    x = np.array([[0.0, 1.0], [0.2, 0.9], [1.0, -0.5], [-1.0, 0.3]])
    y = np.array([0, 0, 1, 1])
    pio.write_csv_dataset(tmp_path / "data.csv", x, y)
    bundle = init_models(EncoderConfig(2, 2, identity_init=True), DistanceConfig(2, 1, 4, 0.0), 2, 0)
    bundle.distance[-1][0].value[...] = make_rng(1).normal(size=(4, 1))
    pio.save_checkpoint(bundle, tmp_path / "m.ckpt")
    pairs = [(0, 1, 1), (2, 3, 1), (0, 2, 0), (1, 3, 0), (3, 0, 0), (2, 1, 0)]
    (tmp_path / "trials.txt").write_text("".join(f"{a};{b};{t}\n" for a, b, t in pairs))
    probs, _ = distance_score(bundle, x[[a for a, _, _ in pairs]], x[[b for _, b, _ in pairs]])
    return tmp_path, probs[:, 0], np.array([t for _, _, t in pairs])


def test_eval_six_trials(six_trials):
    tmp, e2e, labels = six_trials
    code = main(["eval", "--checkpoint", str(tmp / "m.ckpt"), "--trials", str(tmp / "trials.txt"),
                 "--data", str(tmp / "data.csv"), "--scores-out", str(tmp / "scores.txt"),
                 "--report-out", str(tmp / "report.csv"), "--roc-out", str(tmp / "roc.csv")])
    assert code == 0
    scores = rows(tmp / "scores.txt", ";")
    assert scores[0][3:] == ["score_e2e", "score_cos", "score_fused"]
    assert len(scores) == 7
    np.testing.assert_array_equal([float(r[3]) for r in scores[1:]], e2e)
    report = {r[0]: r for r in rows(tmp / "report.csv")[1:]}
    assert float(report["e2e"][1]) == pytest.approx(float(brute_eer(e2e, labels)), abs=1e-12)
    assert float(report["e2e"][3]) == float(1 - brute_auc(e2e, labels))
    assert {r[0] for r in rows(tmp / "roc.csv")[1:]} == {"e2e", "cos", "fused"}


def test_eval_rejects_corrupt_checkpoint(six_trials):
    tmp, _, _ = six_trials
    raw = bytearray((tmp / "m.ckpt").read_bytes())
    raw[40] ^= 0xFF
    (tmp / "m.ckpt").write_bytes(bytes(raw))
    code = main(["eval", "--checkpoint", str(tmp / "m.ckpt"), "--trials", str(tmp / "trials.txt"),
                 "--data", str(tmp / "data.csv"), "--scores-out", str(tmp / "s"),
                 "--report-out", str(tmp / "r")])
    assert code == 2


def test_pipeline(tmp_path, capsys):
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY)
    data = tmp_path / "synth.csv"
    run = tmp_path / "run"
    assert main(["synth", "--spec", str(conf), "--out", str(data)]) == 0
    assert len(pio.load_csv_dataset(data)) == 120

    assert main(["train", "--config", str(conf), "--data", str(data), "--out", str(run)]) == 0
    log = pio.read_train_log(run / "train_log.csv")
    assert len(log) == 60 and log[0].loss_pair == pytest.approx(np.log(4), abs=1e-12)
    assert pio.RunConfig.load(run / "config.txt") == pio.RunConfig.load(conf)
    ckpt = str(run / "best.ckpt")

    assert main(["trials", "--data", str(data), "--mode", "sampled", "--n", "200",
                 "--out", str(tmp_path / "trials.txt")]) == 0
    trials = pio.read_trials(tmp_path / "trials.txt")
    assert len(trials) == 200 and sum(t.label for t in trials) == 100

    assert main(["eval", "--checkpoint", ckpt, "--trials", str(tmp_path / "trials.txt"),
                 "--data", str(data), "--scores-out", str(tmp_path / "scores.txt"),
                 "--report-out", str(tmp_path / "report.csv")]) == 0

    assert main(["embed", "--checkpoint", ckpt, "--data", str(data),
                 "--out", str(tmp_path / "emb.csv")]) == 0
    emb = pio.load_csv_dataset(tmp_path / "emb.csv")
    assert emb.features.shape == (120, 2)

    assert main(["audit", "--checkpoint", ckpt, "--data", str(data), "--config", str(conf),
                 "--out", str(tmp_path / "audit")]) == 0
    summary = rows(tmp_path / "audit" / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["self_distance", "symmetry_gap", "triangle_slack"]
    hist = rows(tmp_path / "audit" / "triangle_slack.csv")
    assert len(hist) == 21

    out = tmp_path / "oracle.csv"
    assert main(["oracle", "--spec", str(conf), "--out", str(out)]) == 0
    assert [r[0] for r in rows(out)[1:]] == ["oracle_eer", "oracle_eer_stderr"]


def test_oracle_against_identity_checkpoint(tmp_path):
    conf = tmp_path / "g.conf"
    conf.write_text(TINY.replace("aux_kind = standard", "aux_kind = none")
                    + "enc_identity = true\nfreeze_encoder = true\n")
    data = tmp_path / "synth.csv"
    assert main(["synth", "--spec", str(conf), "--out", str(data)]) == 0
    assert main(["train", "--config", str(conf), "--data", str(data),
                 "--out", str(tmp_path / "run")]) == 0
    out = tmp_path / "oracle.csv"
    assert main(["oracle", "--spec", str(conf), "--checkpoint", str(tmp_path / "run" / "best.ckpt"),
                 "--out", str(out)]) == 0
    got = {r[0]: float(r[1]) for r in rows(out)[1:]}
    assert 0.0 <= got["mae"] <= 0.5 and 0.0 <= got["trained_eer"] <= 1.0


def test_divergence_is_numeric_abort(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text(TINY + "lr = 1e12\n")
    data = tmp_path / "synth.csv"
    assert main(["synth", "--spec", str(conf), "--out", str(data)]) == 0
    code = main(["train", "--config", str(conf), "--data", str(data), "--out", str(tmp_path / "r")])
    assert code == 3
    assert "numeric abort" in capsys.readouterr().err
