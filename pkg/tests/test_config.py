import pytest

from bikvil.config import ENV_VAR, PipelineConfig, dump_toml, load_config, parse_override
from bikvil.errors import ConfigError


def test_defaults_validate():
    assert load_config().to_dict() == PipelineConfig().to_dict()


def test_toml_round_trip(tmp_path):
    cfg = load_config(overrides=["bikac.k=150.0", "geomcon.rho=0.2", "vmp.n_basis=12",
                                 'bikac.stiffness={ p2P = 90.0 }'])
    path = tmp_path / "c.toml"
    path.write_text(dump_toml(cfg))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.bikac.k_for("p2P") == 90.0 and again.hmsr.n_basis == 12 and again.geomcon.tol.rho == 0.2


def test_environment_variable(tmp_path, monkeypatch):
    path = tmp_path / "c.toml"
    path.write_text("[saliency]\nstride = 0.25\n")
    monkeypatch.setenv(ENV_VAR, str(path))
    assert load_config().saliency.stride == 0.25


@pytest.mark.parametrize("text,module", [
    ("[nosuch]\na = 1\n", "cli"),
    ("[bikac]\nnosuch = 1\n", "bikac"),
    ("[geomcon]\nnosuch = 1\n", "geomcon"),
    ("[geomcon]\nrho = 2.0\n", "geomcon"),
    ("[bikac]\nk = \"stiff\"\n", "bikac"),
    ("[vmp]\nn_basis = 2.5\n", "vmp"),
    ("not toml [", "cli"),
])
def test_bad_configs_are_tagged(tmp_path, text, module):
    path = tmp_path / "c.toml"
    path.write_text(text)
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.module == module


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/c.toml")


def test_override_parsing():
    assert parse_override("bikac.k=12") == ("bikac", "k", 12)
    assert parse_override("a.b=word") == ("a", "b", "word")
    with pytest.raises(ConfigError):
        parse_override("nodot=1")
