from pathlib import Path

import pytest

from hyperconv.config import ConfigError, format_text, load_configs, parse_text
from hyperconv.network import REFERENCE_CONFIGS

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_parse_comments_and_whitespace():
    text = "# header\n a = 1 \n\nb=x,y # trailing\n"
    assert parse_text(text) == {"a": "1", "b": "x,y"}


@pytest.mark.parametrize("text, message", [("novalue\n", "expected"), ("= 3\n", "empty key"), ("a = 1\na = 2\n", "duplicate")])
def test_parse_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_text(text)


def test_format_round_trip():
    values = {"t": (1, 2), "flag": True, "opt": None, "x": 0.5}
    assert parse_text(format_text(values)) == {"t": "1,2", "flag": "true", "opt": "none", "x": "0.5"}


def test_typed_loading(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("variant = eq4\nstage_depths = 1,2\nstage_channels = 8,16\nweight_shared = no\n"
                    "activation_radius = 1.5\npeak_lr = 0.2\ntotal_epochs = 7\nflip = yes\n")
    net, tr = load_configs(path)
    assert net.stage_depths == (1, 2) and net.weight_shared is False and net.activation_radius == 1.5
    assert tr.peak_lr == 0.2 and tr.total_epochs == 7 and tr.flip is True


@pytest.mark.parametrize(
    "text, message",
    [("depth = 3\n", "unknown"), ("total_epochs = many\n", "total_epochs"), ("weight_shared = maybe\n", "weight_shared"),
     ("warmup_epochs = 30\n", "warmup")],
)
def test_config_errors(tmp_path, text, message):
    path = tmp_path / "c.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError, match=message):
        load_configs(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_configs(tmp_path / "none.cfg")


@pytest.mark.parametrize("name", sorted(REFERENCE_CONFIGS))
def test_shipped_full_configs_match_reference(name):
    net, tr = load_configs(CONFIG_DIR / f"full-{name}.cfg")
    assert net == REFERENCE_CONFIGS[name]
    assert tr.peak_lr == 0.3 and tr.warmup_epochs == 5 and tr.total_epochs == 50


def test_desk_config():
    net, _ = load_configs(CONFIG_DIR / "desk.cfg")
    assert net.image_size == 32 and net.stem_channels == 16 and net.stage_depths == (2, 2, 2, 2)
