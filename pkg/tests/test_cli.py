import json
import subprocess
import sys

import numpy as np
import pytest

from trafficqc import checkpoint as ck
from trafficqc import cli, metrics

TINY = {
    "data": {"n_positive": 30, "n_negative": 30, "n_mixed_normal": 25, "n_mixed_faulty": 25, "n_stations": 5},
    "vae": {"max_epochs": 1, "batch_size": 16},
    "classifier": {"epochs": 2, "batch_size": 8, "d_model": 8, "hidden": 4, "lr": 1e-3},
}


def run(root, *args):
    return cli.main(["--out", str(root), *args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--out", str(root)]
    assert cli.main(base + ["gen-data"]) == 0
    assert cli.main(base + ["render-cwt", "--dump-pgm", "2"]) == 0
    for which in ("positive", "negative"):
        assert cli.main(base + ["train-vae", "--which", which, "--dump-recon", "1"]) == 0
    for variant in ("pns", "p"):
        assert cli.main(base + ["train-classifier", "--variant", variant, "--seed", "0"]) == 0
    assert cli.main(base + ["evaluate", "--all"]) == 0
    assert cli.main(base + ["report"]) == 0
    return root


def test_artifacts(pipeline):
    lay = cli.Layout(pipeline)
    for name in cli.DATASETS:
        assert lay.dataset_csv(name).exists() and lay.cache_stem(name).with_suffix(".f32").exists()
    assert len(list(lay.images.glob("*.pgm"))) == 3 * 2 + 2
    assert json.loads(lay.config.read_text())["data"]["n_positive"] == 30
    header = (lay.logs / "classifier_pns_s0.csv").read_text().splitlines()[0]
    assert header == "epoch,split,loss,accuracy"
    assert (lay.logs / "run.log").exists()


def test_vae_checkpoint_summary(pipeline):
    c = ck.load_checkpoint(cli.Layout(pipeline).vae_ckpt("positive"), expected_kind="vae")
    assert c.architecture["dataset"] == "positive"
    assert {"val_mse_untrained", "val_mse_trained", "best_epoch"} <= set(c.metrics)


def test_classifier_records_encoder_hashes(pipeline):
    lay = cli.Layout(pipeline)
    c = ck.load_checkpoint(lay.clf_ckpt(cli.Variant.PNS, 0), expected_kind="classifier")
    assert c.training_config["encoder_sha256"] == {w: ck.file_sha256(lay.vae_ckpt(w)) for w in ("positive", "negative")}
    p_only = ck.load_checkpoint(lay.clf_ckpt(cli.Variant.P, 0))
    assert list(p_only.training_config["encoder_sha256"]) == ["positive"]


def test_report(pipeline):
    rows = metrics.read_metrics_csv(cli.Layout(pipeline).results / "report.csv")
    assert [(r["model"], r["seed"]) for r in rows] == [("VAE(P)", "0"), ("VAE(PNS)", "0"), ("VAE(P)", "mean"),
                                                       ("VAE(PNS)", "mean")]
    assert list(rows[0]) == metrics.METRICS_HEADER
    assert int(rows[0]["tp"]) + int(rows[0]["fp"]) + int(rows[0]["tn"]) + int(rows[0]["fn"]) == 10


def test_evaluate_is_byte_identical(pipeline):
    lay = cli.Layout(pipeline)
    path = lay.metrics_csv(cli.Variant.PNS, 0)
    before = path.read_bytes()
    roc_before = lay.roc_csv(cli.Variant.PNS, 0).read_bytes()
    assert run(pipeline, "evaluate", "--variant", "pns", "--seed", "0") == 0
    assert path.read_bytes() == before and lay.roc_csv(cli.Variant.PNS, 0).read_bytes() == roc_before


def test_commands_idempotent(pipeline):
    lay = cli.Layout(pipeline)
    data = lay.dataset_csv("mixed").read_bytes()
    vae = lay.vae_ckpt("negative").read_bytes()
    clf = lay.clf_ckpt(cli.Variant.P, 0).read_bytes()
    assert run(pipeline, "gen-data") == 0
    assert run(pipeline, "train-vae", "--which", "negative") == 0
    assert run(pipeline, "train-classifier", "--variant", "p", "--seed", "0") == 0
    assert lay.dataset_csv("mixed").read_bytes() == data
    assert lay.vae_ckpt("negative").read_bytes() == vae
    assert lay.clf_ckpt(cli.Variant.P, 0).read_bytes() == clf


def test_reuses_saved_config(pipeline):
    cfg, lay = cli.resolve_config(cli.build_parser().parse_args(["--out", str(pipeline), "report"]))
    assert cfg.data.n_positive == 30 and lay.root == pipeline


def test_classifier_before_vae(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--out", str(tmp_path / "r")]
    assert cli.main(base + ["gen-data"]) == 0
    assert cli.main(base + ["render-cwt"]) == 0
    assert cli.main(base + ["train-classifier", "--variant", "pns"]) == 3
    err = capsys.readouterr().err.strip()
    assert err.startswith("trafficqc: error[prerequisite]:")
    assert "trafficqc train-vae --which positive" in err


@pytest.mark.parametrize("command,hint", [(["render-cwt"], "gen-data"), (["train-vae", "--which", "negative"], "render-cwt"),
                                          (["evaluate"], "train-classifier"), (["report"], "evaluate")])
def test_missing_prerequisites(tmp_path, capsys, command, hint):
    assert run(tmp_path, *command) == 3
    assert f"trafficqc {hint}" in capsys.readouterr().err


@pytest.mark.parametrize("doc", ['{"vae": {"alpha": -1}}', '{"data": {"fault_mix": [0.5, 0.6, 0.0]}}',
                                 '{"bogus": {}}', '{"cwt": {"prefactor": "sqrt"}}', '{not json'])
def test_bad_config(tmp_path, capsys, doc):
    path = tmp_path / "bad.json"
    path.write_text(doc)
    assert cli.main(["--config", str(path), "gen-data"]) == 2
    assert capsys.readouterr().err.startswith("trafficqc: error[config]:")


def test_corrupt_checkpoint_exit_code(pipeline, tmp_path, capsys):
    lay = cli.Layout(pipeline)
    bad = tmp_path / "run"
    (bad / "checkpoints").mkdir(parents=True)
    for sub in ("cwt",):
        (bad / sub).mkdir()
        for f in (lay.root / sub).iterdir():
            (bad / sub / f.name).write_bytes(f.read_bytes())
    (bad / "config.json").write_text(lay.config.read_text())
    (bad / "checkpoints" / "vae_positive.ckpt").write_bytes(lay.vae_ckpt("positive").read_bytes()[:-4])
    assert run(bad, "train-classifier", "--variant", "p") == 4
    assert "TruncatedCheckpointError" in capsys.readouterr().err


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "trafficqc.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "render-cwt", "train-vae", "train-classifier", "evaluate", "report"):
        assert cmd in out.stdout
