import pytest
import yaml

from fedlscl.config import ConfigError, FederationConfig, HyperParams, dump_config, load_config, reference_config


def test_yaml_round_trip(tmp_path):
    cfg = reference_config(encoders=("mlp", "tinyconv"), num_public=1).with_ablation(o2d=False)
    dump_config(cfg, tmp_path / "cfg.yaml")
    back = load_config(tmp_path / "cfg.yaml")
    assert back == cfg and back.digest() == cfg.digest()
    doc = yaml.safe_load((tmp_path / "cfg.yaml").read_text())
    assert list(doc) == ["federation", "backbone", "hyperparams", "data", "ablations"]


def test_partial_file_uses_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("federation:\n  num_clients: 2\nhyperparams:\n  server_lambda: 1.0\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.num_clients == 2 and cfg.hyper.server_lambda == 1.0 and cfg.num_tasks == 5


@pytest.mark.parametrize("text", ["federation:\n  nope: 1\n", "hyperparams:\n  lr2: 1\n", "federation:\n  seeds: []\n"])
def test_bad_files_rejected(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(batch_size=0), dict(o2d_solver="newton")])
def test_hyperparam_validation(bad):
    with pytest.raises(ConfigError):
        HyperParams(**bad)


def test_federation_validation():
    for bad in (dict(num_clients=0), dict(num_tasks=0), dict(dirichlet_beta=0.0), dict(encoders=())):
        with pytest.raises(ConfigError):
            FederationConfig(**bad)


def test_encoders_cycle_over_clients():
    cfg = reference_config(encoders=("mlp", "tinyconv"))
    assert [cfg.encoder_for(i) for i in range(3)] == ["mlp", "tinyconv", "mlp"]
