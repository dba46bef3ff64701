import dataclasses
import json
import re
from pathlib import Path

import pytest

from tempclip.config import ConfigError, RunConfig, load_run_config, parse_override
from tempclip.experiments import FINETUNE, PRETRAIN, SMALL_MODEL, STUDY_COUNTS


def test_seed_is_mandatory():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": -1})


def test_defaults_fill_every_section():
    cfg = RunConfig.from_dict({"seed": 3})
    assert cfg.train.seed == 3 and cfg.pretrain.seed == 3
    assert cfg.pretrain.lr_init == PRETRAIN.lr_init
    assert cfg.eval.ep1_repeats == 10


@pytest.mark.parametrize("raw", [{"seed": 0, "extra": {}}, {"seed": 0, "train": {"speed": 1}},
                                 {"seed": 0, "model": {"depth": 2}}, {"seed": 0, "train": {"seed": 1}},
                                 {"seed": 0, "eval": {"lambda_grid": [0.0, 1.5]}},
                                 {"seed": 0, "data": {"shape_size": 30}}])
def test_bad_configs_rejected(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_round_trip_through_json(tmp_path):
    cfg = RunConfig.from_dict({"seed": 5, "train": {"C": 0.25, "mode": "l2"}, "eval": {"recall_at": [1, 3]}})
    cfg.dump(tmp_path / "c.json")
    again = load_run_config(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()


def test_flag_beats_file_beats_default(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "train": {"epochs": 4, "C": 0.3}}))
    cfg = load_run_config(path, ["train.epochs=7", "seed=9"])
    assert cfg.train.epochs == 7      # flag
    assert cfg.train.C == 0.3         # file
    assert cfg.train.R == 0.6         # default
    assert cfg.seed == 9 and cfg.train.seed == 9
    assert {"train.epochs", "train.C"} <= cfg.explicit


def test_override_parsing():
    assert parse_override("train.mode=plain") == ("train", "mode", "plain")
    assert parse_override("eval.lambda_grid=[0, 0.5]") == ("eval", "lambda_grid", [0, 0.5])
    for bad in ("train.epochs", "epochs=3", "nope.x=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_invalid_json_file(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "c.json")


def test_readme_reduced_config_matches_presets():
    readme = (Path(__file__).parents[1] / "README.md").read_text()
    block = re.search(r"```json\n(.*?)```", readme, re.S).group(1)
    cfg = RunConfig.from_dict(json.loads(block))
    assert cfg.model == SMALL_MODEL
    assert cfg.data.counts == STUDY_COUNTS
    assert cfg.train == dataclasses.replace(FINETUNE, seed=cfg.seed)
