import csv
import json

import pytest

from lnseg.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from lnseg.model import Model, save_checkpoint


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "prox"
    assert main(["gen-data", "--dataset", "proximity", "--out", str(d), "--seed", "7",
                 "--train", "4", "--val", "2", "--test", "2", "--png", "1"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    p = tmp_path_factory.mktemp("ck") / "ae.lnsc"
    save_checkpoint(Model.create(0, "AE"), {"dataset": "proximity", "iteration": 0}, p)
    return p


def test_gen_data_writes_manifest_and_metadata(data_dir):
    assert (data_dir / "manifest.json").exists()
    run = json.loads((data_dir / "run.json").read_text())
    assert run["status"] == "ok" and run["subcommand"] == "gen-data" and run["finished"]
    assert list((data_dir / "png").glob("*.png"))


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gen-data", "--dataset", "proximity", "--out", "x", "--bogus"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_help_exits_cleanly():
    assert main(["--help"]) == EXIT_OK


def test_segment_sigma_zero(data_dir, ckpt, tmp_path, capsys):
    code = main(["segment", "--ckpt", str(ckpt), "--dataset", str(data_dir), "--sigma", "0", "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "all zeros" in capsys.readouterr().err


def test_missing_dataset_is_data_error(ckpt, tmp_path):
    code = main(["evaluate", "--ckpt", str(ckpt), "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_missing_checkpoint_is_data_error(data_dir, tmp_path):
    code = main(["evaluate", "--ckpt", str(tmp_path / "none.lnsc"), "--dataset", str(data_dir), "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_evaluate_writes_results(data_dir, ckpt, tmp_path):
    out = tmp_path / "ev"
    code = main(["--threads", "1", "evaluate", "--ckpt", str(ckpt), "--dataset", str(data_dir), "--N", "3",
                 "--sigma", "0.1", "--limit", "1", "--out", str(out)])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out / "per_image.csv")))
    assert len(rows) == 1
    run = json.loads((out / "run.json").read_text())
    assert run["inputs"]["checkpoint"]["sha256"]
    assert (out / "masks.lnsc").exists()


def test_train_and_failed_run_metadata(data_dir, tmp_path):
    cfg = tmp_path / "train.toml"
    cfg.write_text(f'data_dir = "{data_dir}"\nout_dir = "{tmp_path / "run"}"\niterations = 2\nbatch = 2\n'
                   'val_every = 1\nval_size = 2\n')
    assert main(["train", "--config", str(cfg), "--quiet"]) == EXIT_OK
    assert (tmp_path / "run" / "final.lnsc").exists()
    assert json.loads((tmp_path / "run" / "run.json").read_text())["status"] == "ok"
    bad = tmp_path / "bad.toml"
    bad.write_text(f'data_dir = "{data_dir}"\nout_dir = "{tmp_path / "bad"}"\nbatch = 0\n')
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    bad.write_text('data_dir = "x"\nout_dir = "y"\nlearning_rate = 1.0\n')
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE


def test_train_on_missing_data_marks_run_failed(tmp_path):
    cfg = tmp_path / "train.toml"
    cfg.write_text(f'data_dir = "{tmp_path / "none"}"\nout_dir = "{tmp_path / "run"}"\niterations = 2\n')
    assert main(["train", "--config", str(cfg)]) == EXIT_DATA
    run = json.loads((tmp_path / "run" / "run.json").read_text())
    assert run["status"] == "failed" and "manifest" in run["error"]


def test_theory_var_check(tmp_path):
    out = tmp_path / "var.csv"
    assert main(["theory", "--mode", "var-check", "--draws", "20000", "--out", str(out)]) == EXIT_OK
    row = next(csv.DictReader(open(out)))
    assert abs(float(row["ratio_delta"]) - 1.0) < 0.05


def test_theory_seed_override(tmp_path, monkeypatch):
    args = ["theory", "--mode", "independent", "--Ns", "3", "--runs", "5", "--no-cluster", "--tol", "0.5"]
    main(args + ["--seed", "1", "--out", str(tmp_path / "a.csv")])
    monkeypatch.setenv("LNS_SEED", "1")
    main(args + ["--seed", "99", "--out", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    monkeypatch.setenv("LNS_SEED", "x")
    assert main(args + ["--out", str(tmp_path / "c.csv")]) == EXIT_USAGE


def test_compare_needs_two_seeds(tmp_path):
    s = tmp_path / "summary.csv"
    s.write_text("variant,seed,dataset,mode,sigma,N,mean_ari,sem,n\n"
                 "AE,0,kanizsa,latent,0.01,80,0.9,0.01,100\nVAE,0,kanizsa,latent,0.01,80,0.8,0.01,100\n")
    assert main(["compare", "--summary", str(s), "--out", str(tmp_path / "c.csv")]) == EXIT_DATA


def test_compare_writes_table(tmp_path):
    s = tmp_path / "summary.csv"
    lines = ["variant,seed,dataset,mode,sigma,N,mean_ari,sem,n"]
    for seed, (a, b) in enumerate([(0.9, 0.5), (0.92, 0.55), (0.91, 0.52)]):
        lines += [f"AE,{seed},kanizsa,latent,0.01,80,{a},0.01,100", f"VAE,{seed},kanizsa,latent,0.01,80,{b},0.01,100"]
    s.write_text("\n".join(lines) + "\n")
    assert main(["compare", "--summary", str(s), "--m", "6", "--out", str(tmp_path / "c.csv")]) == EXIT_OK
    row = next(csv.DictReader(open(tmp_path / "c.csv")))
    assert float(row["p_bonferroni"]) == pytest.approx(min(1.0, 6 * float(row["p"])))


def test_plot_on_empty_results(tmp_path):
    (tmp_path / "grid.csv").write_text("variant,seed,dataset,clusterer,sigma,N,mean_ari,sem,n,errors,error\n")
    assert main(["plot", "--results", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "plots" / "sigma.svg").exists()


def test_sweep_spec_errors(tmp_path):
    spec = tmp_path / "s.toml"
    spec.write_text('out_dir = "o"\nmodels = []\n')
    assert main(["sweep", "--spec", str(spec)]) == EXIT_USAGE
    spec.write_text('out_dir = "o"\nunknown_key = 1\nmodels = []\n')
    assert main(["sweep", "--spec", str(spec)]) == EXIT_USAGE
    spec.write_text("not [valid toml")
    assert main(["sweep", "--spec", str(spec)]) == EXIT_USAGE
    assert main(["sweep", "--spec", str(tmp_path / "missing.toml")]) == EXIT_DATA


def test_bad_threads_value():
    assert main(["--threads", "0", "plot", "--results", "."]) == EXIT_USAGE
