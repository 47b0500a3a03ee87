import shutil
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from gradleak import cli, lab
from gradleak.attack import AttackConfig, tgias_ro
from gradleak.config import load_config, parse_sections
from gradleak.data_io import read_image, read_log, read_metrics_csv, write_image
from gradleak.errors import ConfigError
from gradleak.fl_sim import evaluation_batch
from gradleak.metrics import match_batch

BASE = """
[federation]
clients = {clients}
client_fraction = {fraction}
rounds = {rounds}
batch_size = {b}
lr = 0.1
seed = 3

[model]
descriptor = mlp:64-12-5:sigmoid

[data]
source = synth
shape = 1x8x8
samples_per_client = {per}

[attack]
T = {T}
R_g = 3
R_l = 10
label_steps = 150
"""


def write_cfg(tmp_path, name="exp.ini", clients=1, fraction=1.0, rounds=3, b=1, per=None, T=1, extra=""):
    text = BASE.format(clients=clients, fraction=fraction, rounds=rounds, b=b, per=per or b, T=T) + extra
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


# -- config ------------------------------------------------------------------------

def test_config_parsing_and_paths(tmp_path):
    (tmp_path / "sub").mkdir()
    path = write_cfg(tmp_path / "sub", extra="\n[output]\ncsv = ../m.csv\nrun_id = demo\n")
    cfg = load_config(path)
    assert cfg.get("output", "csv") == (tmp_path / "m.csv").resolve()
    assert cfg.federation().clients == 1 and cfg.attack().T == 1 and cfg.attack().batch_size == 1
    assert cfg.model().num_classes == 5
    assert len(cfg.client_data(cfg.model())) == 1


@pytest.mark.parametrize("raw, msg", [
    ({"federation": {"clientz": "1"}}, "unknown key"),
    ({"network": {}}, "unknown section"),
    ({"federation": {"rounds": "three"}}, "rounds"),
])
def test_config_rejections(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_sections(raw)


def test_config_file_errors(tmp_path):
    (tmp_path / "bad.ini").write_text("rounds = 3\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini")
    cfg = parse_sections({"model": {"descriptor": "mlp:4-2:none"}, "data": {"source": "cifar"}})
    with pytest.raises(ConfigError):
        cfg.dataset(cfg.model())
    with pytest.raises(ConfigError):
        parse_sections({}).model()


# -- simulate ----------------------------------------------------------------------

def test_simulate_minimal_and_reproducible(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a.log")]) == 0
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b.log")]) == 0
    assert len(read_log(tmp_path / "a.log")[1]) == 3
    assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()
    assert "records 3" in capsys.readouterr().out


def test_simulate_client_sampling(tmp_path):
    cfg = write_cfg(tmp_path, clients=4, fraction=0.5, rounds=10, b=2)
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a.log")]) == 0
    assert len(read_log(tmp_path / "a.log")[1]) == 20


# -- attack ------------------------------------------------------------------------

def test_attack_dlg_on_single_record(tmp_path):
    cfg = write_cfg(tmp_path, rounds=1)
    cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "g.log")])
    out = tmp_path / "out"
    assert cli.main(["attack", "--config", str(cfg), "--log", str(tmp_path / "g.log"), "--method", "dlg",
                     "--out", str(out)]) == 0
    for sub in ("recon", "truth", "pairs"):
        assert (out / sub / "b0_0.pgm").exists()
    assert read_image(out / "pairs" / "b0_0.pgm").shape == (1, 8, 16)
    rows = read_metrics_csv(out / "metrics.csv")
    assert rows[0]["method"] == "dlg" and rows[0]["T"] == "1" and rows[0]["model"] == "mlp:64-12-5:sigmoid"


def test_attack_tgias_batch_tag_and_negative_control(tmp_path, capsys):
    cfg = write_cfg(tmp_path, rounds=6, b=2, per=4, T=3)
    cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "g.log")])
    args = ["attack", "--config", str(cfg), "--log", str(tmp_path / "g.log"), "--out", str(tmp_path / "o")]
    assert cli.main(args + ["--batch-tag", "0:1", "--csv", str(tmp_path / "m.csv")]) == 0
    assert read_metrics_csv(tmp_path / "m.csv")[0]["T"] == "3"
    big = write_cfg(tmp_path, "big.ini", rounds=6, b=2, per=4, T=4)
    args[2] = str(big)
    assert cli.main(args) == 2
    err = capsys.readouterr().err
    assert "no cluster has T=4 members" in err and "cluster sizes" in err
    assert cli.main(args + ["--batch-tag", "0:1"]) == 2


def test_attack_results_match_after_log_round_trip(tmp_path):
    cfg_path = write_cfg(tmp_path, rounds=4, b=2, T=4)
    cfg = load_config(cfg_path)
    spec, fed = cfg.model(), cfg.federation()
    data = cfg.client_data(spec)
    from gradleak.fl_sim import run_fedsgd
    _, direct = run_fedsgd(fed, spec, data)
    cli.main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "g.log")])
    _, logged = read_log(tmp_path / "g.log")
    x, y = evaluation_batch(direct[0], fed, data)
    att = AttackConfig(batch_size=2, T=4, R_g=10, R_l=20, seed=1)
    scores = [match_batch(tgias_ro(obs, spec, att, labels=y).x.reshape(2, 1, 8, 8),
                          x.reshape(2, 1, 8, 8)).mean_psnr for obs in (direct, logged)]
    assert abs(scores[0] - scores[1]) <= 0.1


# -- lab ---------------------------------------------------------------------------

def test_lab_writes_traces_and_summary(tmp_path, monkeypatch):
    monkeypatch.setattr(lab, "theorem2_sweep", lambda **kw: lab.SweepResult("theorem2", 1, 1, 1.0))
    out = tmp_path / "lab"
    assert cli.main(["lab", "--sweep", "default", "--out", str(out), "--families", "6"]) == 0
    assert len(list(out.glob("theorem1_family*.csv"))) == 6
    assert (out / "summary.csv").read_text().startswith("check,passed,total,worst_margin")


def test_lab_bound_violation_exit_code(tmp_path, monkeypatch):
    bad = lab.SweepResult("theorem2", 49, 50, -0.1, [3])
    monkeypatch.setattr(lab, "theorem2_sweep", lambda **kw: bad)
    assert cli.main(["lab", "--out", str(tmp_path), "--families", "3"]) == 3
    assert cli.main(["lab", "--sweep", "huge", "--out", str(tmp_path)]) == 1


# -- eval --------------------------------------------------------------------------

def _images(tmp_path, name, imgs):
    d = tmp_path / name
    d.mkdir()
    for i, img in enumerate(imgs):
        write_image(d / f"b0_{i}.pgm", img)
    return d


def test_eval_identical_permuted_and_missing(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(3, 1, 8, 8))
    truth = _images(tmp_path, "truth", imgs)
    same = _images(tmp_path, "same", imgs)
    perm = _images(tmp_path, "perm", imgs[[2, 0, 1]])
    assert cli.main(["eval", "--recon", str(same), "--truth", str(truth), "--out", str(tmp_path / "a.csv")]) == 0
    rows = (tmp_path / "a.csv").read_text().splitlines()[1:]
    assert [float(r.split(",")[3]) for r in rows] == [0.0] * 3
    assert cli.main(["eval", "--recon", str(perm), "--truth", str(truth), "--out", str(tmp_path / "b.csv")]) == 0
    metrics = lambda p: sorted(tuple(r.split(",")[3:]) for r in p.read_text().splitlines()[1:])
    assert metrics(tmp_path / "a.csv") == metrics(tmp_path / "b.csv")
    (perm / "b0_1.pgm").unlink()
    assert cli.main(["eval", "--recon", str(perm), "--truth", str(truth), "--out", str(tmp_path / "c.csv")]) == 2


# -- process-level behaviour -------------------------------------------------------

@pytest.mark.parametrize("sub", ["simulate", "attack", "lab", "eval"])
def test_help_for_every_subcommand(sub):
    res = subprocess.run([sys.executable, "-m", "gradleak", sub, "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "usage" in res.stdout


def test_usage_errors_exit_1():
    res = subprocess.run([sys.executable, "-m", "gradleak", "attack", "--config"], capture_output=True, text=True)
    assert res.returncode == 1
    res = subprocess.run([sys.executable, "-m", "gradleak", "nope"], capture_output=True, text=True)
    assert res.returncode == 1


def test_workers_env_default(monkeypatch):
    monkeypatch.setenv("GRADLEAK_WORKERS", "3")
    args = cli.build_parser().parse_args(["attack", "--config", "c", "--log", "l", "--out", "o"])
    assert args.workers == 3


def test_console_script_installed():
    assert shutil.which("gradleak") is not None
