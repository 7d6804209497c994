import pytest

from embrec.config import ExperimentConfig, Settings, apply, load_settings, parse_lines
from embrec.errors import ConfigError


def test_parse_lines_comments_and_blanks():
    text = "# header\n\n a = 1  # trailing\nb=x=y\n"
    assert parse_lines(text) == [("a", "1"), ("b", "x=y")]


def test_parse_lines_reports_source_and_line():
    with pytest.raises(ConfigError) as ei:
        parse_lines("a = 1\nno equals here\n", "f.conf")
    assert "f.conf:2" in str(ei.value)
    with pytest.raises(ConfigError):
        parse_lines(" = 3\n")


def test_coercion_by_field_type():
    s = apply(Settings(), [("hyper.tau", "0.5"), ("corpus.n_users", "12"), ("train.user_tower", "cboe"),
                           ("experiment.skip_minutes", "0, 2.5"), ("experiment.eval_users", "None")])
    assert s.hyper.tau == 0.5 and isinstance(s.hyper.tau, float)
    assert s.corpus.n_users == 12 and s.train.user_tower == "cboe"
    assert s.experiment.skip_minutes == (0, 2.5) and s.experiment.eval_users is None
    with pytest.raises(ConfigError) as ei:
        apply(Settings(), [("corpus.n_users", "many")])
    assert ei.value.field == "corpus.n_users"


def test_qualified_vs_unqualified_keys():
    s = apply(Settings(), [("workdir", "w1")])
    assert s.pipeline.workdir == "w1"
    s = apply(Settings(), [("corpus.rng_seed", "9")])
    assert s.corpus.rng_seed == 9 and s.hyper.rng_seed == Settings().hyper.rng_seed != 9
    s = apply(Settings(), [("rng_seed", "9")])
    assert s.corpus.rng_seed == 9 and s.hyper.rng_seed == 9


@pytest.mark.parametrize("key", ["nonsense", "hyper.nonsense", "nosection.tau"])
def test_unknown_keys_rejected(key):
    with pytest.raises(ConfigError):
        apply(Settings(), [(key, "1")])


def test_load_settings_file_seed_and_overrides(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("corpus.n_users = 30\nhyper.epochs = 2\n")
    s = load_settings(p, seed=5, overrides=[("hyper.epochs", "3")])
    assert s.corpus.n_users == 30 and s.hyper.epochs == 3
    assert s.corpus.rng_seed == s.hyper.rng_seed == s.pipeline.index_seed == 5
    assert s.train_config().hyperparams is s.hyper


def test_load_settings_validates(tmp_path):
    with pytest.raises(ConfigError):
        load_settings(tmp_path / "missing.conf")
    p = tmp_path / "c.conf"
    p.write_text("hyper.tau = 0\n")
    with pytest.raises(ConfigError):
        load_settings(p)


def test_shipped_desk_config_loads():
    from pathlib import Path
    s = load_settings(Path(__file__).parent.parent / "configs" / "desk.conf")
    assert s.pipeline.workdir == "work" and s.experiment.skip_minutes == (0, 10, 30)
    assert isinstance(s.experiment, ExperimentConfig)
