import json

import pytest

from minute.config import (
    ConfigError,
    default_config,
    load_config,
    parse_override,
    validate_config,
)


def test_default_config_valid_both_profiles():
    for profile in ("desk", "paper"):
        validate_config(default_config(profile))


def test_paper_profile_keeps_published_training_constants():
    cfg = default_config("paper")
    assert cfg["retriever_training"] == {"epochs": 100, "batch_size": 256,
                                         "lr": 1e-4, "weight_decay": 0.01}
    assert cfg["localizer_training"]["lr"] == 1e-4
    assert cfg["localizer_training"]["epochs"] == 10
    assert cfg["localizer_training"]["batch_size"] == 32
    assert cfg["localizer_training"]["n_negatives"] == 4
    assert cfg["localizer_training"]["candidate_pool"] == 100
    assert cfg["inference"]["top_k"] == 10
    assert cfg["inference"]["nms_iou"] == 0.7
    assert cfg["inference"]["max_moment_len"] == 24


def test_missing_required_field_named(tmp_path):
    doc = default_config()
    del doc["inference"]["top_k"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="inference.top_k"):
        load_config(path)


def test_unknown_key_rejected():
    doc = default_config()
    doc["inference"]["topk"] = 10
    with pytest.raises(ConfigError, match="topk"):
        validate_config(doc)
    doc2 = default_config()
    doc2["bogus_section"] = {}
    with pytest.raises(ConfigError, match="bogus_section"):
        validate_config(doc2)


def test_wrong_type_rejected():
    doc = default_config()
    doc["inference"]["top_k"] = "ten"
    with pytest.raises(ConfigError, match="inference.top_k"):
        validate_config(doc)


def test_needs_exactly_one_corpus_source():
    doc = default_config()
    doc["corpus"] = {"manifest": "x.json"}
    with pytest.raises(ConfigError, match="exactly one"):
        validate_config(doc)
    del doc["corpus"]
    del doc["synthetic"]
    with pytest.raises(ConfigError, match="exactly one"):
        validate_config(doc)


def test_partial_file_merges_over_defaults(tmp_path):
    doc = {"seed": 3, "inference": {"top_k": 4},
           "synthetic": {"n_videos": 9}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    cfg = load_config(path)
    assert cfg["seed"] == 3
    assert cfg["inference"]["top_k"] == 4
    assert cfg["inference"]["nms_iou"] == 0.7  # default survives
    assert cfg["synthetic"]["n_videos"] == 9
    assert cfg["synthetic"]["min_frames"] == 12


def test_corpus_file_replaces_synthetic_default(tmp_path):
    doc = {"seed": 1, "inference": {"top_k": 2}, "corpus": {"manifest": "m.json"}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    cfg = load_config(path)
    assert "synthetic" not in cfg
    assert cfg["corpus"]["manifest"] == "m.json"


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(default_config()))
    cfg = load_config(path, overrides={"seed": 99, "inference": {"top_k": 3}})
    assert cfg["seed"] == 99
    assert cfg["inference"]["top_k"] == 3


def test_parse_override():
    assert parse_override("inference.top_k=5") == {"inference": {"top_k": 5}}
    assert parse_override("synthetic.noise_std=0.4") == {"synthetic": {"noise_std": 0.4}}
    assert parse_override("seed=2") == {"seed": 2}
    with pytest.raises(ConfigError):
        parse_override("no_equals_sign")


def test_bad_json_reported(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)
