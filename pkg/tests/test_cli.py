import json
import os

import numpy as np
import pytest

from emts.cli import main
from emts.config import RunConfig, load_config, save_config
from emts.envs import OBS_DIM
from emts.intents import new_intent_encoder
from emts.skills import new_skill_model
from emts.trainer import save_full_checkpoint
from emts.world_model import ModelConfig, new_model_bundle


@pytest.fixture()
def tiny_config(tmp_path):
    """A configuration small enough for CLI round trips in seconds."""
    cfg = RunConfig()
    cfg.library.spline_count = 30
    cfg.library.const_speeds = [0.0, 8.0]
    cfg.skills.epochs = 8
    cfg.skills.d_z = 4
    cfg.skills.hidden = 16
    cfg.intents.steps = 60
    cfg.intents.hidden = 16
    cfg.intents.episodes = 2
    cfg.model.d_s = 8
    cfg.model.hidden = 16
    cfg.search.k_samples = 4
    cfg.search.num_simulations = 6
    cfg.train.total_env_steps = 600
    cfg.train.eval_interval = 300
    cfg.train.eval_episodes = 1
    cfg.train.batch_size = 8
    cfg.train.grad_steps_per_episode = 2
    cfg.env.step_cap = 60
    cfg.env.density = 0.1
    path = tmp_path / "config.json"
    cfg.artifacts.library = str(tmp_path / "lib.jsonl")
    cfg.artifacts.skills = str(tmp_path / "skills.ckpt")
    cfg.artifacts.intents = str(tmp_path / "intents.ckpt")
    cfg.artifacts.expert_data = [str(tmp_path / f"expert_{i}.jsonl") for i in range(3)]
    save_config(cfg, path)
    return path, cfg, tmp_path


def tiny_checkpoint(tmp_path, seed=0):
    rng = np.random.default_rng(seed)
    skill_model = new_skill_model(4, 10, 16, rng)
    bundle = new_model_bundle(OBS_DIM, 4, ModelConfig(d_s=8, hidden=16), rng)
    encoders = [new_intent_encoder(OBS_DIM, 4, 16, i, rng) for i in range(2)]
    path = tmp_path / "full.ckpt"
    save_full_checkpoint(path, bundle, skill_model, encoders)
    return path


def test_init_config_round_trips(tmp_path):
    out = tmp_path / "default.json"
    assert main(["init-config", "--out", str(out)]) == 0
    cfg = load_config(out)
    assert cfg.search.k_samples == 20


def test_invalid_config_exit_code_2(tmp_path):
    bad = tmp_path / "bad.json"
    data = {"search": {"k_samples": 1}}
    bad.write_text(json.dumps(data))
    assert main(["gen-library", "--config", str(bad), "--out",
                 str(tmp_path / "lib.jsonl")]) == 2


def test_missing_input_exit_code_2(tmp_path):
    assert main(["train-skills", "--library", str(tmp_path / "absent.jsonl"),
                 "--out", str(tmp_path / "skills.ckpt")]) == 2


def test_gen_library_writes_jsonl_and_figure(tiny_config):
    path, cfg, tmp_path = tiny_config
    assert main(["gen-library", "--config", str(path)]) == 0
    assert os.path.exists(cfg.artifacts.library)
    assert os.path.exists(str(tmp_path / "lib_overview.png"))
    with open(cfg.artifacts.library) as f:
        row = json.loads(f.readline())
    assert set(row) == {"family", "params", "initial", "actions", "states"}


def test_pipeline_through_search_debug(tiny_config):
    path, cfg, tmp_path = tiny_config
    assert main(["gen-library", "--config", str(path)]) == 0
    assert main(["train-skills", "--config", str(path)]) == 0
    for i, style in enumerate(["cautious", "assertive", "lanekeeper"]):
        assert main(["gen-expert-data", "--config", str(path), "--style", style,
                     "--episodes", "2", "--out", cfg.artifacts.expert_data[i]]) == 0
    assert main(["train-intents", "--config", str(path)]) == 0

    out_dir = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out-dir", str(out_dir)]) == 0
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "metrics.png").exists()
    assert (out_dir / "checkpoint.emts").exists()
    header = (out_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == ("step,episodes,success_rate,completion_ratio,mean_return,"
                      "loss_r,loss_v,loss_p,gamma,lambda")

    traces = tmp_path / "traces"
    assert main(["eval", "--config", str(path), "--ckpt", str(out_dir / "checkpoint.emts"),
                 "--scenario", "corridor", "--episodes", "2",
                 "--traces", str(traces), "--seed", "3"]) == 0
    assert (traces / "summary.csv").exists()
    assert (traces / "episode_000.jsonl").exists()
    assert (traces / "episodes.png").exists()
    with open(traces / "episode_000.jsonl") as f:
        step_row = json.loads(f.readline())
    assert set(step_row) == {"state", "action", "components", "cause"}

    obs_fixture = tmp_path / "obs.json"
    obs_fixture.write_text(json.dumps({"obs": [0.0] * OBS_DIM}))
    dump = tmp_path / "tree.json"
    assert main(["search-debug", "--config", str(path), "--obs", str(obs_fixture),
                 "--ckpt", str(out_dir / "checkpoint.emts"), "--sims", "10",
                 "--dump", str(dump), "--seed", "0"]) == 0
    tree = json.loads(dump.read_text())
    assert tree["num_simulations"] == 10
    assert len(tree["atoms"]) == cfg.search.k_samples
    assert sum(tree["visits"]) == 9  # the first simulation expands the root


def test_eval_deterministic_golden(tiny_config):
    path, cfg, tmp_path = tiny_config
    ckpt = tiny_checkpoint(tmp_path)
    a, b = tmp_path / "ev_a", tmp_path / "ev_b"
    for out in (a, b):
        assert main(["eval", "--config", str(path), "--ckpt", str(ckpt),
                     "--scenario", "corridor", "--episodes", "2",
                     "--traces", str(out), "--seed", "5"]) == 0
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


def test_search_debug_deterministic(tiny_config):
    path, cfg, tmp_path = tiny_config
    ckpt = tiny_checkpoint(tmp_path)
    obs_fixture = tmp_path / "obs.json"
    obs_fixture.write_text(json.dumps({"obs": [0.1] * OBS_DIM}))
    d1, d2 = tmp_path / "t1.json", tmp_path / "t2.json"
    for dump in (d1, d2):
        assert main(["search-debug", "--config", str(path), "--obs", str(obs_fixture),
                     "--ckpt", str(ckpt), "--sims", "12", "--dump", str(dump),
                     "--seed", "1"]) == 0
    assert d1.read_bytes() == d2.read_bytes()
