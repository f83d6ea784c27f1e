import numpy as np
import pytest

from age2hie.cli import FIELD_SPECS, RunConfig, build_parser, merged_config, run


def read(path):
    return path.read_text()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny corpora plus one pretrained checkpoint, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth-age", "--n", "12", "--dims", "8", "--seed", "1",
                "--out", str(root / "age")]) == 0
    assert run(["synth-hie", "--n", "10", "--dims", "8", "--seed", "2",
                "--site-mix", "0.5", "--out", str(root / "hie")]) == 0
    assert run(["pretrain", "--data", str(root / "age" / "manifest.csv"),
                "--width", "4", "--epochs", "2", "--batch", "6",
                "--out", str(root / "pre")]) == 0
    return root


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def test_defaults_fill_every_field():
    parser = build_parser()
    args = parser.parse_args(["synth-age"])
    cfg = merged_config(args)
    assert cfg.variant == "resnet18"
    assert cfg.width == 64
    assert cfg.k == 5
    assert cfg.out == "."


def test_flag_beats_config_file_beats_default(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("n=6\nseed=9\n")
    parser = build_parser()

    args = parser.parse_args(["synth-age", "--config", str(cfgfile)])
    cfg = merged_config(args)
    assert cfg.n == 6 and cfg.seed == 9

    args = parser.parse_args(["synth-age", "--config", str(cfgfile),
                              "--n", "4"])
    cfg = merged_config(args)
    assert cfg.n == 4 and cfg.seed == 9


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("nn=6\n")
    rc = run(["synth-age", "--config", str(cfgfile), "--out", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "nn" in err


def test_config_file_comments_and_blanks_skipped(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("# cohort size\n\nn=7\n")
    parser = build_parser()
    args = parser.parse_args(["synth-age", "--config", str(cfgfile)])
    assert merged_config(args).n == 7


def test_bad_config_value_type(tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("n=many\n")
    rc = run(["synth-age", "--config", str(cfgfile), "--out", str(tmp_path)])
    assert rc == 1
    assert "n" in capsys.readouterr().err


def test_stage_lr_flags_and_defaults(tmp_path):
    parser = build_parser()
    args = parser.parse_args(["pretrain", "--lr", "0.0025"])
    cfg = merged_config(args)
    assert cfg.pretrain_lr == 0.0025
    assert cfg.refine_lr == 0.001 and cfg.finetune_lr == 0.0005

    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("finetune_lr=0.0001\n")
    args = parser.parse_args(["train-scratch", "--config", str(cfgfile),
                              "--refine-lr", "0.002"])
    cfg = merged_config(args)
    assert cfg.refine_lr == 0.002 and cfg.finetune_lr == 0.0001


def test_dims_parses_single_and_triple():
    parser = build_parser()
    args = parser.parse_args(["synth-age", "--dims", "16"])
    assert merged_config(args).dims_tuple() == (16, 16, 16)
    args = parser.parse_args(["synth-age", "--dims", "8,12,16"])
    assert merged_config(args).dims_tuple() == (8, 12, 16)


def test_dims_rejects_pairs(tmp_path, capsys):
    rc = run(["synth-age", "--dims", "8,8", "--out", str(tmp_path)])
    assert rc == 1
    assert "dims" in capsys.readouterr().err


def test_seed_list_falls_back_to_seed():
    cfg = RunConfig(**{name: default for name, _, default in FIELD_SPECS})
    cfg.seed = 5
    assert cfg.seed_list() == [5]
    cfg.seeds = "0,1,2"
    assert cfg.seed_list() == [0, 1, 2]


def test_out_env_var_is_the_default_root(tmp_path, monkeypatch):
    monkeypatch.setenv("AGE2HIE_OUT", str(tmp_path / "envout"))
    rc = run(["synth-age", "--n", "3", "--dims", "8", "--seed", "0"])
    assert rc == 0
    assert (tmp_path / "envout" / "manifest.csv").exists()


def test_run_config_written_with_resolved_values(workdir):
    text = read(workdir / "age" / "run_config.txt")
    lines = dict(line.split("=", 1) for line in text.strip().split("\n"))
    assert lines["n"] == "12"
    assert lines["seed"] == "1"
    assert lines["dims"] == "8"
    assert set(lines) == {name for name, _, _ in FIELD_SPECS}


def test_rerun_from_written_config_reproduces(workdir, tmp_path):
    rc = run(["synth-age", "--config", str(workdir / "age" / "run_config.txt"),
              "--out", str(tmp_path)])
    assert rc == 0
    assert read(tmp_path / "manifest.csv") == read(workdir / "age" / "manifest.csv")


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------

def test_synth_hie_writes_manifest_and_volumes(tmp_path):
    d = tmp_path / "d"
    rc = run(["synth-hie", "--n", "40", "--dims", "16", "--seed", "7",
              "--out", str(d)])
    assert rc == 0
    assert (d / "manifest.csv").exists()
    assert len(list(d.glob("*.vol3"))) == 40


def test_synth_hie_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["synth-hie", "--n", "40", "--dims", "16", "--seed", "7",
                    "--out", str(d)]) == 0
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    for vol in sorted(a.glob("*.vol3")):
        assert vol.read_bytes() == (b / vol.name).read_bytes()


def test_synth_age_labels_are_parseable_ages(workdir):
    lines = read(workdir / "age" / "manifest.csv").strip().split("\n")
    assert lines[0] == "id,volume_path,label,site"
    ages = [float(line.split(",")[2]) for line in lines[1:]]
    assert len(ages) == 12
    assert all(0.0 <= a <= 97.0 for a in ages)


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------

def test_pretrain_artifacts(workdir):
    pre = workdir / "pre"
    assert (pre / "pretrained.a2h").exists()
    trace = read(pre / "loss_trace.txt").strip().split("\n")
    assert len(trace) == 2
    assert all(np.isfinite(float(v)) for v in trace)


def test_refine_finetune_predict_chain(workdir, tmp_path):
    hie = str(workdir / "hie" / "manifest.csv")
    pre = str(workdir / "pre" / "pretrained.a2h")
    ref = tmp_path / "ref"
    fin = tmp_path / "fin"

    assert run(["refine", "--pretrained", pre, "--data", hie, "--epochs", "2",
                "--batch", "5", "--out", str(ref)]) == 0
    assert (ref / "refined.a2h").exists()

    assert run(["finetune", "--checkpoint", str(ref / "refined.a2h"),
                "--data", hie, "--epochs", "2", "--batch", "5",
                "--out", str(fin)]) == 0
    assert (fin / "finetuned.a2h").exists()

    assert run(["predict", "--checkpoint", str(fin / "finetuned.a2h"),
                "--data", hie, "--out", str(tmp_path / "pred")]) == 0
    lines = read(tmp_path / "pred" / "predictions.csv").strip().split("\n")
    assert lines[0] == "id,class,prob1"
    assert len(lines) == 11
    for line in lines[1:]:
        sid, cls, prob = line.split(",")
        assert cls in ("0", "1")
        assert 0.0 <= float(prob) <= 1.0


def test_train_scratch_smoke(workdir, tmp_path):
    hie = str(workdir / "hie" / "manifest.csv")
    rc = run(["train-scratch", "--data", hie, "--width", "4",
              "--refine-epochs", "1", "--finetune-epochs", "1",
              "--batch", "5", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "scratch.a2h").exists()
    assert len(read(tmp_path / "loss_trace.txt").strip().split("\n")) == 2


def test_refine_missing_checkpoint_names_path(workdir, tmp_path, capsys):
    rc = run(["refine", "--pretrained", "missing.a2h",
              "--data", str(workdir / "hie" / "manifest.csv"),
              "--out", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "missing.a2h" in err
    assert err.count("\n") == 1


def test_inspect_checkpoint_prints_metadata(workdir, capsys):
    rc = run(["inspect-checkpoint", "--checkpoint",
              str(workdir / "pre" / "pretrained.a2h")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "stage: pretrained" in out
    assert "variant: resnet18" in out
    assert "width: 4" in out
    assert "stem.conv.weight" in out


# ---------------------------------------------------------------------------
# Evaluation protocols
# ---------------------------------------------------------------------------

def test_cross_validate_transfer_report(workdir, tmp_path):
    rc = run(["cross-validate", "--arm", "transfer",
              "--pretrained", str(workdir / "pre" / "pretrained.a2h"),
              "--data", str(workdir / "hie" / "manifest.csv"),
              "--k", "5", "--seed", "3", "--refine-epochs", "1",
              "--finetune-epochs", "1", "--batch", "5",
              "--out", str(tmp_path)])
    assert rc == 0
    kv = read(tmp_path / "cv_report.kv").strip().split("\n")
    folds = [line for line in kv if line.startswith("fold=") and
             "aggregate" not in line]
    assert len(folds) == 5
    assert kv[-1].startswith("fold=aggregate")
    assert (tmp_path / "cv_report.txt").exists()


def test_cross_validate_transfer_needs_pretrained(workdir, tmp_path, capsys):
    rc = run(["cross-validate", "--arm", "transfer",
              "--data", str(workdir / "hie" / "manifest.csv"),
              "--out", str(tmp_path)])
    assert rc == 1
    assert "--pretrained" in capsys.readouterr().err


def test_cross_validate_rejects_unknown_arm(workdir, tmp_path, capsys):
    rc = run(["cross-validate", "--arm", "finetuned",
              "--data", str(workdir / "hie" / "manifest.csv"),
              "--out", str(tmp_path)])
    assert rc == 1
    assert "arm" in capsys.readouterr().err


def test_cross_site_report(workdir, tmp_path):
    rc = run(["cross-site", "--arm", "scratch", "--width", "4",
              "--data", str(workdir / "hie" / "manifest.csv"),
              "--train-site", "SITE_A", "--test-site", "SITE_B",
              "--seeds", "0,1", "--refine-epochs", "1",
              "--finetune-epochs", "1", "--batch", "5",
              "--out", str(tmp_path)])
    assert rc == 0
    kv = read(tmp_path / "cross_site_report.kv").strip().split("\n")
    assert kv[0].startswith("fold=s0 ")
    assert kv[1].startswith("fold=s1 ")
    assert kv[-1].startswith("fold=aggregate")


def test_ablation_writes_table_per_variant(workdir, tmp_path):
    rc = run(["ablation", "--variants", "resnet18",
              "--data", str(workdir / "hie" / "manifest.csv"),
              "--k", "2", "--width", "4", "--refine-epochs", "1",
              "--finetune-epochs", "1", "--batch", "5",
              "--out", str(tmp_path)])
    assert rc == 0
    table = read(tmp_path / "ablation.txt")
    assert "resnet18" in table
    assert (tmp_path / "ablation_resnet18.kv").exists()


# ---------------------------------------------------------------------------
# Argument errors stay single-line
# ---------------------------------------------------------------------------

def test_no_subcommand_is_an_error(capsys):
    assert run([]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_flag_is_an_error(capsys):
    assert run(["synth-age", "--cohort", "3"]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_data_flag_names_it(workdir, tmp_path, capsys):
    rc = run(["pretrain", "--out", str(tmp_path)])
    assert rc == 1
    assert "--data" in capsys.readouterr().err
