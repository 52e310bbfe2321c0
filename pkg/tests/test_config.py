import pytest

from also_ssl.config import ConfigError, RunConfig, all_keys, dump_config, parse_config, DOCS


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    assert parse_config(dump_config(cfg)) == cfg


def test_every_key_documented():
    assert set(all_keys()) == set(DOCS)


def test_sections_and_dotted_keys():
    cfg = parse_config(
        """
        seed = 3
        [pretrain]
        radius = 2.0   # meters
        head = ball_max
        pretrain.use_intensity = false
        [scene]
        box_half_xy = 0.4, 1.0
        """
    )
    assert cfg.seed == 3
    assert cfg.pretrain.radius == 2.0 and cfg.pretrain.head == "ball_max"
    assert cfg.pretrain.use_intensity is False
    assert cfg.scene.box_half_xy == (0.4, 1.0)
    assert cfg.pretrain_config().seed == 3


@pytest.mark.parametrize(
    "text",
    [
        "pretrain.radiuss = 1",
        "[nope]\nx = 1",
        "pretrain.epochs = many",
        "pretrain.use_intensity = maybe",
        "seed = 1\nseed = 2",
        "just a line",
        "pretrain.seed = 4",
        "pretrain.radius = -1",
        "pretrain.head = poco",
    ],
)
def test_malformed_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_default_config_file_matches_code():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"
    assert parse_config(path.read_text()) == RunConfig()
