"""Command-line pipeline: synth -> train -> eval -> coldstart, plus the
gradient checker and config/error handling. Commands run in-process."""

import csv
import json
import subprocess
import sys

import pytest

from seqrank import cli

SYNTH = {"users": 8, "items": 24, "clusters": 3, "seq_len": 10,
         "f_dim_visual": 2, "f_dim_textual": 2, "noise_sigma": 0.3,
         "seed": 5}


def write_config(path, extra):
    path.write_text(json.dumps(extra))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth corpus plus rnn and vtrnn checkpoints, shared read-only."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    cfg_synth = write_config(root / "synth.json", {"synth": SYNTH})
    assert cli.main(["synth", "--config", cfg_synth, "--out", str(data)]) == 0

    paths = {"sequences": str(data / "sequences.tsv"),
             "visual": str(data / "visual.tsv"),
             "textual": str(data / "textual.tsv")}
    out = {}
    for kind in ("rnn", "vtrnn"):
        cfg = write_config(root / f"{kind}.json", {
            "kind": kind,
            "data": paths,
            "hyper": {"d": 3},
            "train": {"epochs": 2},
        })
        assert cli.main(["train", "--config", cfg, "--seed", "2",
                         "--out", str(root / kind)]) == 0
        out[kind] = root / kind / f"{kind}.ckpt"
    return root, paths, out


def test_synth_writes_parseable_files(pipeline):
    root, paths, _ = pipeline
    lines = open(paths["sequences"]).read().strip().split("\n")
    assert len(lines) == SYNTH["users"]
    head = open(paths["visual"]).readline()
    assert head == "#dims 2\n"


def test_train_outputs(pipeline):
    root, _, ckpts = pipeline
    assert ckpts["rnn"].exists()
    log = (root / "rnn" / "train_rnn.log").read_text().strip().split("\n")
    assert len(log) == 2
    assert log[0].split("\t")[0] == "1"


def test_eval_writes_reports(pipeline, capsys, tmp_path):
    root, paths, ckpts = pipeline
    cfg = write_config(tmp_path / "eval.json",
                       {"data": paths, "eval": {"cutoffs": [5, 10]}})
    code = cli.main(["eval", str(ckpts["vtrnn"]), "--config", cfg,
                     "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "eval_vtrnn.json").read_text())
    assert report["kind"] == "vtrnn"
    assert set(report["cutoffs"]) == {"5", "10"}
    assert 0.0 <= report["auc"] <= 1.0
    with open(tmp_path / "eval_vtrnn.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ranker", "metric", "k", "value", "value_x100"]
    assert len(rows) == 1 + 2 * 4 + 1
    assert "users evaluated" in capsys.readouterr().out


def test_coldstart_reports(pipeline, capsys, tmp_path):
    root, paths, ckpts = pipeline
    cfg = write_config(tmp_path / "cs.json", {
        "data": paths,
        "eval": {"bins": [1, 2, 4], "coldstart_k": 5},
        "pairs": [["vtrnn", "rnn"]],
    })
    code = cli.main(["coldstart", str(ckpts["vtrnn"]), str(ckpts["rnn"]),
                     "--config", cfg, "--out", str(tmp_path)])
    assert code == 0
    js = json.loads((tmp_path / "coldstart.json").read_text())
    assert js["bins"] == ["1-1", "1-2", "1-4", "all"]
    assert set(js["recalls"]) == {"vtrnn", "rnn"}
    assert "vtrnn_over_rnn" in js["growth"]
    assert "growth vtrnn_over_rnn:" in capsys.readouterr().out


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert "max relative error" in out


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"kidn": "rnn"})
    assert cli.main(["gradcheck", "--config", cfg]) == cli.EXIT_CONFIG
    assert "kidn" in capsys.readouterr().err


def test_unknown_kind_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json",
                       {"kind": "transformer",
                        "data": {"sequences": "nope.tsv"}})
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_CONFIG
    assert "transformer" in capsys.readouterr().err


def test_missing_sequences_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json",
                       {"kind": "pop", "data": {"sequences": "missing.tsv"}})
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_CONFIG
    assert "missing.tsv" in capsys.readouterr().err


def test_malformed_data_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("useronly-no-tab\n")
    cfg = write_config(tmp_path / "c.json",
                       {"kind": "pop", "data": {"sequences": str(bad)}})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == \
        cli.EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_eval_checkpoint_corpus_mismatch(pipeline, tmp_path, capsys):
    root, paths, ckpts = pipeline
    other = tmp_path / "seq.tsv"
    other.write_text("u1\ta,b,c,d\nu2\tb,c,d,a\n")
    cfg = write_config(tmp_path / "c.json",
                       {"kind": "rnn", "data": {"sequences": str(other)}})
    code = cli.main(["eval", str(ckpts["rnn"]), "--config", cfg,
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_DATA
    assert "mismatch" in capsys.readouterr().err


def test_train_divergence_exit_code(pipeline, tmp_path, capsys):
    root, paths, _ = pipeline
    cfg = write_config(tmp_path / "c.json", {
        "kind": "rnn", "data": paths,
        "hyper": {"d": 2, "alpha": 1e150, "lam_theta": 0.01},
        "train": {"epochs": 8},
    })
    import numpy as np
    with np.errstate(all="ignore"):
        code = cli.main(["train", "--config", cfg, "--out", str(tmp_path)])
    assert code == cli.EXIT_DIVERGE
    assert "divergence" in capsys.readouterr().err


def test_config_echo_is_json(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"synth": SYNTH})
    assert cli.main(["synth", "--config", cfg, "--seed", "7",
                     "--out", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    echoed = json.loads(out[:out.rindex("}") + 1])
    assert echoed["seed"] == 7
    assert echoed["synth"]["users"] == SYNTH["users"]


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "seqrank.cli"],
                          capture_output=True, text=True)
    assert proc.returncode != 0  # no subcommand given
    proc = subprocess.run(["seqrank", "gradcheck", "--seed", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "max relative error" in proc.stdout
