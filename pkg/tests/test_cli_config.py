import json

import pytest

from pageopt import cli
from pageopt.config import CONFIG_ENV, ConfigError, RunConfig, resolve

SMALL = {
    "seed": 11,
    "sim": {"n_families": 4, "modules_per_family": 3, "K": 4, "n_buckets": 2, "n_users": 200},
    "collect": {"n_thompson_pages": 600, "n_uniform_pages": 1500, "propensity_mc_samples": 200},
    "pipeline": {"min_count": 500},
    "train": {"d_h": 6, "d_f": 4, "d_m": 6, "d_o": 6, "mlp_hidden": 6, "epochs": 1},
    "eval": {"max_contexts": 40, "max_rank_pages": 60},
}


@pytest.fixture()
def small_cfg(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_shipped_config_is_default(request):
    cfg = RunConfig.load(request.config.rootpath / "desk.config")
    assert cfg == RunConfig()


def test_config_round_trip():
    cfg = RunConfig.from_dict(SMALL)
    assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg


@pytest.mark.parametrize("bad,needle", [({"bogus": 1}, "bogus"), ({"train": {"lr_x": 1}}, "train.lr_x"),
                                        ({"sim": {"seed": 3}}, "sim.seed"), ({"seed": "x"}, "seed"),
                                        ({"infer": {"W": 0}}, "W")])
def test_config_errors(bad, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.from_dict(bad)


def test_seed_derivation():
    cfg = RunConfig(seed=5)
    assert cfg.sim_config().seed == 5
    assert (cfg.collect_seed, cfg.train_seed, cfg.split_seed) == (6, 7, 5)


def test_env_config(monkeypatch, small_cfg):
    monkeypatch.setenv(CONFIG_ENV, small_cfg)
    assert resolve().seed == 11
    assert resolve(seed=2).seed == 2


def test_exit_codes(tmp_path, small_cfg):
    assert run("simulate", "--config", tmp_path / "nope.json", "--out", tmp_path) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"epochz": 3}}')
    assert run("simulate", "--config", bad, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("collect", "--config", small_cfg, "--world", tmp_path / "missing.json",
               "--out", tmp_path) == cli.EXIT_MISSING_INPUT


def _pipeline(out, cfg):
    assert run("simulate", "--config", cfg, "--out", out / "w") == 0
    world = out / "w" / "world.json"
    assert run("collect", "--config", cfg, "--world", world, "--out", out / "ts") == 0
    assert run("collect", "--config", cfg, "--world", world, "--policy", "uniform", "--first-page-id", 600,
               "--out", out / "uni") == 0
    return world


def test_full_cli_chain(tmp_path, small_cfg, capsys):
    world = _pipeline(tmp_path, small_cfg)
    logs = [tmp_path / "ts", tmp_path / "uni"]
    assert run("propensity", "--config", small_cfg, "--logs", tmp_path / "uni", "--out", tmp_path / "p") == 0
    prop = tmp_path / "p" / "propensity.json"
    assert run("attribute", "--config", small_cfg, "--logs", *logs, "--out", tmp_path / "a") == 0
    assert run("build-dataset", "--config", small_cfg, "--world", world, "--logs", *logs, "--propensity", prop,
               "--out", tmp_path / "d") == 0
    ds = tmp_path / "d" / "dataset.jsonl"
    assert run("train", "--config", small_cfg, "--dataset", ds, "--out", tmp_path / "m") == 0
    ck = tmp_path / "m" / "model.ckpt"
    assert run("rank", "--config", small_cfg, "--checkpoint", ck, "--dataset", ds, "--limit", 5,
               "--out", tmp_path / "r") == 0
    rows = [json.loads(x) for x in (tmp_path / "r" / "rankings.jsonl").read_text().splitlines()]
    assert len(rows) == 5 and all(r["policy_tag"] == "model" for r in rows)
    assert run("evaluate", "--config", small_cfg, "--world", world, "--dataset", ds, "--propensity", prop,
               "--checkpoint", f"trnn={ck}", "--out", tmp_path / "e") == 0
    res = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert set(res["policies"]) == {"trnn", "popularity"}
    assert "trnn" in capsys.readouterr().out


def test_collect_is_deterministic(tmp_path, small_cfg):
    _pipeline(tmp_path / "a", small_cfg)
    _pipeline(tmp_path / "b", small_cfg)
    for rel in ("w/world.json", "ts/pages.jsonl", "ts/events.jsonl", "uni/pages.jsonl", "uni/events.jsonl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_corrupt_line_exit(tmp_path, small_cfg, capsys):
    _pipeline(tmp_path, small_cfg)
    pages = tmp_path / "ts" / "pages.jsonl"
    lines = pages.read_text().splitlines()
    lines[6] = "{not json"
    pages.write_text("\n".join(lines) + "\n")
    assert run("propensity", "--config", small_cfg, "--logs", tmp_path / "ts", "--out", tmp_path / "p") \
        == cli.EXIT_SCHEMA
    assert ":7:" in capsys.readouterr().err


def test_directory_arguments_resolve_default_files(tmp_path, small_cfg):
    assert run("simulate", "--config", small_cfg, "--out", tmp_path / "w") == 0
    assert cli.load_world(tmp_path / "w") == cli.load_world(tmp_path / "w" / "world.json")
    with pytest.raises(cli.MissingInput):
        cli.load_propensity(tmp_path / "w")
