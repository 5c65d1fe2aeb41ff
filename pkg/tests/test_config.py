import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlmule.config import SECTIONS, SimConfig, config_hash, dumps, load, loads, parse_overrides
from mlmule.errors import ConfigError


def test_defaults_are_valid_and_expose_views():
    c = SimConfig()
    assert c.architecture().shape_tag == "logistic:8:10"
    assert c.protocol_params().transfer_steps == 3
    assert c.world_config().n_areas == 2
    assert c.synth_spec().samples_per_subclass == 500
    assert c.mobility_label == "0.1"
    assert SimConfig(trace="synthetic").mobility_label == "trace"


def test_round_trip_is_a_fixed_point():
    c = SimConfig(method="fedavg", alpha=0.01, p_cross=0.5, seed=4, learning_rate=0.05)
    text = dumps(c)
    again = loads(text)
    assert again == c and dumps(again) == text


@given(st.floats(0, 1), st.integers(0, 10**6), st.sampled_from(["mlmule", "fedavg", "local"]),
       st.floats(1e-3, 100))
def test_round_trip_property(p_cross, seed, method, alpha):
    c = SimConfig(p_cross=p_cross, seed=seed, method=method, alpha=alpha)
    assert loads(dumps(c)) == c


def test_hash_ignores_key_order_and_seed():
    a = loads("[sim]\nseed = 1\np_cross = 0.5\n[data]\nalpha = 0.01\n")
    b = loads("[data]\nalpha = 0.01\n[sim]\np_cross = 0.5\nseed = 9\n")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(a.with_overrides(p_cross=0.1))
    assert len(config_hash(a)) == 16


def test_overrides():
    c = loads("[sim]\np_cross = 0.5\n", ["p_cross=0.1", "data.alpha=0.3", "method=local"])
    assert c.p_cross == 0.1 and c.alpha == 0.3 and c.method == "local"
    assert parse_overrides(["learner.epochs=2"]) == {"epochs": 2}


@pytest.mark.parametrize("text,key", [
    ("[sim]\nbogus = 1\n", "bogus"),
    ("[nowhere]\nx = 1\n", "nowhere"),
    ("[sim]\nn_mules = many\n", "n_mules"),
    ("[sim]\np_cross = 1.5\n", "p_cross"),
    ("[data]\nalpha = 0\n", "alpha"),
    ("[sim]\nmethod = magic\n", "method"),
    ("[sim]\nmode = mobile_training\n", "scheme"),
    ("[sim]\nmethod = gossip\n", "method"),
    ("[sim]\ntrace = synthetic\nmethod = oppcl\nmode = mobile_training\n[data]\nscheme = shards\n", "method"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        loads(text)
    assert err.value.key == key
    assert key in str(err.value)


def test_malformed_override():
    with pytest.raises(ConfigError):
        parse_overrides(["p_cross"])
    with pytest.raises(ConfigError) as err:
        parse_overrides(["sim.nope=3"])
    assert err.value.key == "nope"


def test_every_field_is_addressable(tmp_path):
    keys = [k for ks in SECTIONS.values() for k in ks]
    assert len(keys) == len(set(keys))
    p = tmp_path / "c.cfg"
    p.write_text(dumps(SimConfig()))
    assert load(p) == SimConfig()
