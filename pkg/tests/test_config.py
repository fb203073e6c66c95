import pytest

from locdiff.config import PRESETS, SCHEMAS, ConfigError, load_config


@pytest.mark.parametrize("command", sorted(SCHEMAS))
@pytest.mark.parametrize("preset", ["paper", "smoke"])
def test_presets_validate(command, preset):
    cfg = load_config(command, preset=preset)
    assert cfg["schema_version"] == 1 and cfg["seed"] == 0


def test_defaults_of_paper_presets():
    cir = load_config("cir")
    assert cir["process"] == {"a": 1.136, "b": 1.1, "sigma": 0.4205, "h": 0.01, "dt": 1.0, "N": 50, "M": 50}
    assert cir["train"]["learning_rate"] == 5e-5 and cir["train"]["n_train_points"] == 5000
    assert cir["radii"] == [0, 2, 20]
    tr = load_config("gaussian-tradeoff")
    assert (tr["d"], tr["N"], tr["N_gen"], tr["n_steps"], tr["reps"]) == (101, 1000, 10_000, 1000, 30)
    scan = load_config("locality-scan")
    assert [t["d"] for t in scan["targets"]] == [250, 500, 1000]


def test_yaml_overrides_preset(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 7\ntrain:\n  n_epochs: 3\n")
    cfg = load_config("cir", tmp_path / "c.yaml", "smoke")
    assert cfg["seed"] == 7 and cfg["train"]["n_epochs"] == 3
    assert cfg["train"]["n_train_points"] == 500


@pytest.mark.parametrize(
    "text,where",
    [
        ("bogus: 1\n", "bogus"),
        ("train:\n  lr: 1\n", "train.lr"),
        ("seed: -1\n", "seed"),
        ("seed: 18446744073709551616\n", "seed"),
        ("radii: [1, -2]\n", "radii"),
        ("process:\n  N: 2.5\n", "process.N"),
        ("train:\n  weighting: mse\n", "train.weighting"),
        ("schema_version: 2\n", "schema_version"),
    ],
)
def test_errors_name_the_key(tmp_path, text, where):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError) as info:
        load_config("cir", tmp_path / "c.yaml")
    assert info.value.path == where
    assert where in str(info.value)


def test_target_list_items_are_validated(tmp_path):
    (tmp_path / "c.yaml").write_text("targets:\n  - {d: 10, r0: 2, colour: red}\n")
    with pytest.raises(ConfigError) as info:
        load_config("locality-scan", tmp_path / "c.yaml")
    assert info.value.path == "targets[0].colour"


@pytest.mark.parametrize("text", ["[1, 2]\n", "a: [\n"])
def test_malformed_yaml(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError):
        load_config("verify", tmp_path / "c.yaml")


def test_bad_time_segments(tmp_path):
    (tmp_path / "c.yaml").write_text("time_segments: [[1.0, 0.5, 3]]\n")
    with pytest.raises(ConfigError):
        load_config("locality-scan", tmp_path / "c.yaml")


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_config("cir", preset="huge")
    assert set(PRESETS) == set(SCHEMAS)
