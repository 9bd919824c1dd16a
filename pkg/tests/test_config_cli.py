import json

import pytest

from phddpg import cli
from phddpg.config import Config, ConfigError, load_config, parse_config


def test_ini_roundtrip_and_hash():
    cfg = Config().replace("agent", mask="mean", batch_size=40).replace("train", eval_seeds="0 1 2")
    back = parse_config(cfg.to_ini())
    assert back == cfg and back.hash() == cfg.hash()
    assert back.train.eval_seed_list() == [0, 1, 2]
    assert Config().hash() != cfg.hash()


def test_partial_file_uses_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[agent]\nmask = zero\nneighbors = yes\n")
    cfg = load_config(path)
    assert cfg.agent.mask == "zero" and cfg.agent.neighbors is True and cfg.agent.gamma == 0.8


@pytest.mark.parametrize("text, fragment", [
    ("[agnet]\nmask = mean\n", "unknown section"),
    ("[agent]\nmsk = mean\n", "unknown key"),
    ("[agent]\nbatch_size = eighty\n", "not a valid int"),
    ("[agent]\nmask = fancy\n", "agent.mask"),
    ("[agent]\nx_min = 50\nx_max = 40\n", "duration bounds"),
    ("[train]\neval_seeds =\n", "eval_seeds"),
    ("[variant]\nname = other\n", "variant.name"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.ini")


def _run(args, tmp_path):
    return cli.main([*args[:1], "--output-dir", str(tmp_path), *args[1:]])


def _small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text("[train]\nhorizon = 300\ncollect_episodes = 2\ntrain_episodes = 2\nsteps_per_episode = 5\n"
                    "online_episodes = 2\nwarmup_episodes = 2\nreport_last = 1\n"
                    "[agent]\nbatch_size = 16\n[scenario]\ndemand = 1800\n")
    return str(path)


def test_cli_generate_and_simulate(tmp_path, capsys):
    assert _run(["generate-grid", "--rows", "2", "--cols", "2", "--demand", "1000", "--out", str(tmp_path / "sc")],
                tmp_path) == 0
    roadnet, flow = tmp_path / "sc" / "roadnet.json", tmp_path / "sc" / "flow.json"
    assert roadnet.is_file() and flow.is_file()
    cfg = _small_config(tmp_path)
    rc = _run(["simulate", "--config", cfg, "--roadnet", str(roadnet), "--flow", str(flow),
               "--controller", "maxpressure"], tmp_path)
    assert rc == 0
    out = json.loads((tmp_path / "simulate.json").read_text())
    assert out["vehicles"] > 0 and len(out["config_hash"]) == 64
    assert (tmp_path / "episode.jsonl").read_text().startswith("{")


def test_cli_train_evaluate_diagnose_compare(tmp_path, monkeypatch):
    cfg = _small_config(tmp_path)
    assert _run(["collect", "--config", cfg, "--out", str(tmp_path / "buf.npz")], tmp_path) == 0
    assert _run(["train", "--config", cfg, "--buffer", str(tmp_path / "buf.npz"), "--mask", "mean"], tmp_path) == 0
    rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 3 and rows[0].startswith("episode,seed,att,datt,dar,mean_diag")
    assert len(list((tmp_path / "checkpoints").glob("episode_*.ckpt"))) == 2
    best = str(tmp_path / "best.ckpt")
    assert _run(["evaluate", "--config", cfg, "--checkpoint", best, "--eval-seeds", "0 1"], tmp_path) == 0
    ev = json.loads((tmp_path / "evaluate.json").read_text())
    assert ev["episodes"] == 2 and ev["target"] == best
    assert _run(["diagnose", "--config", cfg, best, "--buffer", str(tmp_path / "buf.npz"), "--samples", "16"],
                tmp_path) == 0
    diag = json.loads((tmp_path / "diagnose.json").read_text())
    m = diag["matrices"][best]["matrix"]
    assert all(abs(sum(row[j] for row in m) - 1.0) < 1e-9 for j in range(4))
    assert _run(["compare", "--config", cfg, "fixedtime", best, "--eval-seeds", "0"], tmp_path) == 0
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["train", "--config", cfg, "--mode", "online", "--episodes", "1"]) == 0
    assert (tmp_path / "env" / "summary.json").is_file()


def test_cli_invalid_inputs_exit_2(tmp_path):
    assert _run(["simulate", "--config", str(tmp_path / "missing.ini")], tmp_path) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[agent]\nmask = bogus\n")
    assert _run(["train", "--config", str(bad)], tmp_path) == 2
    broken = tmp_path / "roadnet.json"
    broken.write_text("{not json")
    assert _run(["simulate", "--roadnet", str(broken), "--flow", str(broken)], tmp_path) == 2
    assert _run(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt")], tmp_path) == 2


def test_cli_divergence_exit_3(tmp_path, monkeypatch):
    from phddpg.agent import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("critic loss became non-finite (nan)")

    monkeypatch.setattr(cli.training, "train_online", boom)
    assert _run(["train", "--mode", "online"], tmp_path) == 3
