import csv
import textwrap

import numpy as np
import pytest

from ctta import cli, config, experiment, metrics, nn
from ctta.adapt import AdaptConfig
from ctta.errors import ConfigError

TINY = textwrap.dedent(
    """\
    seed: 0
    dataset: {num_classes: 4, train_size: 600, test_size: 400}
    model: {architecture: cnn-small, pretrain_epochs: 4, batch_size: 64, lr: 0.002}
    stream:
      mode: standard
      kinds: [fog, contrast]
      severity: 4
      batches_per_kind: 3
      batch_size: 16
      rounds: 2
    adapt:
      methods: [source, bn_stats, cotta]
      n_aug: 4
    output: {dir: results}
    """
)


def _write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    cfg = _write(d, TINY)
    ckpt = str(d / "src.ckpt")
    assert cli.main(["pretrain", "--config", cfg, "--out", ckpt]) == 0
    return cfg, ckpt


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_default_config_parses():
    exp = config.load_config("configs/default.yaml")
    assert list(exp.methods) == ["source", "bn_stats", "pseudo_label", "tent_continual", "tent_online", "cotta"]
    spec = exp.stream_spec()
    assert spec.rounds == 3 and spec.batches_per_round == 8 * 25
    assert all(s.batch_size == 32 and set(s.severity_schedule) == {5} for s in spec.segments)
    c = exp.methods["cotta"]
    assert (c.alpha, c.restore_p, c.p_th, c.n_aug) == (0.999, 0.01, 0.92, 32)


def test_missing_model_section_names_it(tmp_path, capsys):
    text = TINY.replace("model: {architecture: cnn-small, pretrain_epochs: 4, batch_size: 64, lr: 0.002}\n", "")
    with pytest.raises(ConfigError, match="'model'"):
        config.parse_config(text)
    assert cli.main(["pretrain", "--config", _write(tmp_path, text), "--out", str(tmp_path / "c")]) == 2
    assert "model" in capsys.readouterr().err


def test_yaml_error_has_line_and_column():
    with pytest.raises(ConfigError, match=r"line 5, column 3"):
        config.parse_config("model: {}\nstream: {}\nadapt:\n  lr: 0.1\n  - x\n")


def test_field_type_error_names_field():
    with pytest.raises(ConfigError, match=r"stream\.batch_size"):
        config.parse_config(TINY.replace("batch_size: 16", "batch_size: sixteen"))


def test_unknown_field_rejected():
    with pytest.raises(ConfigError, match=r"model\.depth"):
        config.parse_config(TINY.replace("architecture: cnn-small", "architecture: cnn-small, depth: 3"))


def test_unknown_method(tmp_path):
    text = TINY.replace("[source, bn_stats, cotta]", "[source, dropout]")
    with pytest.raises(ConfigError, match="dropout"):
        config.parse_config(text)


def test_n_aug_zero_rejected_with_advice():
    with pytest.raises(ConfigError, match="enable_aug_avg"):
        config.parse_config(TINY.replace("n_aug: 4", "n_aug: 0"))


def test_per_method_overrides():
    text = TINY.replace("n_aug: 4", "n_aug: 4\n  overrides: {cotta: {alpha: 0.99}}")
    exp = config.parse_config(text)
    assert exp.methods["cotta"].alpha == 0.99
    assert exp.methods["bn_stats"].alpha == 0.999


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv(config.SEED_ENV, "7")
    exp = config.parse_config(TINY)
    assert exp.dataset.seed == exp.model.seed == exp.stream.seed == 7
    assert all(c.seed == 7 for c in exp.methods.values())
    monkeypatch.setenv(config.SEED_ENV, "x")
    with pytest.raises(ConfigError):
        config.parse_config(TINY)


def test_ablation_rows():
    exp = config.parse_config(TINY.replace("n_aug: 4", "n_aug: 4\n  ablation: true"))
    rows = {n: (c.enable_weight_avg, c.enable_aug_avg, c.enable_restore) for n, c in exp.methods.items() if n.startswith("cotta_")}
    assert rows == {
        "cotta_weight_avg": (True, False, False),
        "cotta_weight_aug_avg": (True, True, False),
        "cotta_full": (True, True, True),
    }


@pytest.mark.parametrize("param,values", [("alpha", ""), ("restore_p", " , "), ("n_aug", "2.5"), ("lr", "0.1")])
def test_bad_sweep_values(param, values):
    with pytest.raises(ConfigError):
        config.parse_sweep_values(param, values)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def test_pretrain_reports_and_writes(tiny):
    cfg, ckpt = tiny
    model, extra = nn.load_checkpoint(ckpt)
    assert model.architecture_id == "cnn-small" and model.num_classes == 4
    assert 0.5 < extra["clean_accuracy"] <= 1.0


def test_pretrain_is_byte_deterministic(tiny, tmp_path):
    cfg, ckpt = tiny
    again = tmp_path / "again.ckpt"
    assert cli.main(["pretrain", "--config", cfg, "--out", str(again)]) == 0
    assert again.read_bytes() == open(ckpt, "rb").read()


def test_adapt_outputs_and_determinism(tiny, tmp_path, capsys):
    cfg, ckpt = tiny
    for run in ("a", "b"):
        assert cli.main(["adapt", "--config", cfg, "--ckpt", ckpt, "--out", str(tmp_path / run)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(
        ["comparison.csv"] + [f"{k}_{m}.csv" for k in ("log", "summary") for m in ("source", "bn_stats", "cotta")]
    )
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    with open(tmp_path / "a" / "comparison.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "fog", "contrast", "mean"]
    assert [r[0] for r in rows[1:]] == ["source", "bn_stats", "cotta"]
    out = capsys.readouterr().out
    assert "Mean" in out and "cotta" in out


def test_adapt_architecture_mismatch(tiny, tmp_path, capsys):
    cfg, ckpt = tiny
    other = _write(tmp_path, open(cfg).read().replace("num_classes: 4", "num_classes: 5"))
    assert cli.main(["adapt", "--config", other, "--ckpt", ckpt, "--out", str(tmp_path / "o")]) == 1
    assert "expects" in capsys.readouterr().err
    mlp = _write(tmp_path, open(cfg).read().replace("cnn-small", "mlp-small"), "mlp.yaml")
    assert cli.main(["adapt", "--config", mlp, "--ckpt", ckpt, "--out", str(tmp_path / "o")]) == 1


def test_missing_checkpoint_is_runtime_error(tiny, tmp_path):
    cfg, _ = tiny
    assert cli.main(["adapt", "--config", cfg, "--ckpt", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1


def test_method_order_does_not_change_numbers(tiny):
    cfg, ckpt = tiny
    exp = config.load_config(cfg)
    source, _ = nn.load_checkpoint(ckpt)
    spec = exp.stream_spec()
    fwd = experiment.run_methods(source, spec, exp.methods)
    rev = experiment.run_methods(source, spec, dict(reversed(list(exp.methods.items()))))
    for name in exp.methods:
        assert fwd[name].log.errors.tobytes() == rev[name].log.errors.tobytes()


def test_clean_stream_source_matches_pretrain_error(tiny):
    cfg, ckpt = tiny
    source, extra = nn.load_checkpoint(ckpt)
    exp = config.parse_config(
        open(cfg).read().replace("[fog, contrast]", "[none]").replace("batches_per_kind: 3", "batches_per_kind: 50")
        .replace("rounds: 2", "rounds: 1")
    )
    run = experiment.run_methods(source, exp.stream_spec(), {"source": AdaptConfig(method="source")})["source"]
    stream_err = run.log.mean_error()
    test_err = 1 - extra["clean_accuracy"]
    # both are binomial estimates of the same clean error rate (800 and 400 items)
    p = max((stream_err + test_err) / 2, 0.01)
    sigma = np.sqrt(p * (1 - p) * (1 / 800 + 1 / 400))
    assert abs(stream_err - test_err) <= 3 * sigma


def test_sweep_restore_p_two_rows(tiny, tmp_path):
    cfg, ckpt = tiny
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        argv = ["sweep", "--config", cfg, "--ckpt", ckpt, "--param", "restore_p", "--values", "0,0.01", "--out", str(d)]
        assert cli.main(argv) == 0
        outs.append((d / "sweep_restore_p.csv").read_bytes())
    assert outs[0] == outs[1]
    lines = outs[0].decode().splitlines()
    assert lines[0] == "value,mean_error" and len(lines) == 3
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "0.01"]


def test_sweep_config_errors(tiny, tmp_path):
    cfg, ckpt = tiny
    base = ["sweep", "--config", cfg, "--ckpt", ckpt, "--out", str(tmp_path)]
    assert cli.main(base + ["--param", "alpha", "--values", ""]) == 2
    assert cli.main(base + ["--param", "n_aug", "--values", "0"]) == 2
    assert cli.main(base + ["--param", "alpha", "--values", "1.5"]) == 2


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def results_dir(tiny, tmp_path_factory):
    cfg, ckpt = tiny
    d = tmp_path_factory.mktemp("results")
    assert cli.main(["adapt", "--config", cfg, "--ckpt", ckpt, "--out", str(d)]) == 0
    return d


def test_report_table(results_dir, capsys):
    assert cli.main(["report", "--dir", str(results_dir)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["method", "fog", "contrast", "Mean"]
    assert sorted(line.split()[0] for line in lines[1:]) == ["bn_stats", "cotta", "source"]
    assert len({len(line) for line in lines}) == 1  # aligned
    assert "*" not in "".join(lines)


def test_report_mean_matches_weighted_log_mean(results_dir):
    columns, rows, problems = cli.load_report(results_dir)
    assert not problems
    for name, _, mean in rows:
        log = metrics.read_log_csv(results_dir / f"log_{name}.csv")
        assert mean == pytest.approx(log.mean_error(), abs=1e-6)


def test_report_column_order_stable(results_dir):
    assert cli.load_report(results_dir)[:2] == cli.load_report(results_dir)[:2]


def test_report_single_method(results_dir, tmp_path, capsys):
    (tmp_path / "summary_cotta.csv").write_bytes((results_dir / "summary_cotta.csv").read_bytes())
    assert cli.main(["report", "--dir", str(tmp_path)]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_report_lists_missing_files(results_dir, tmp_path, capsys):
    (tmp_path / "log_tent_online.csv").write_bytes((results_dir / "log_cotta.csv").read_bytes())
    (tmp_path / "summary_source.csv").write_bytes((results_dir / "summary_source.csv").read_bytes())
    assert cli.main(["report", "--dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "summary_tent_online.csv" in err
    assert cli.main(["report", "--dir", str(tmp_path / "empty")]) == 1
