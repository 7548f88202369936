import pytest

from config import (DelayKind, Endpoint, JobConfig, config_digest, load_job_config, parse_job_config,
                    render_job_config)
from error_handlers import ConfigParseError, ConfigValidationError, OutOfScopeError

MINIMAL = """
world_size=2
real_ranks=0
endpoint.base=127.0.0.1:29500
"""


def test_minimal_config_has_one_emulated_rank():
    cfg = parse_job_config(MINIMAL)
    assert cfg.world_size == 2
    assert cfg.real_ranks == frozenset({0})
    assert cfg.emulated_ranks == frozenset({1})
    assert cfg.endpoints == (Endpoint(host="127.0.0.1", port=29500), Endpoint(host="127.0.0.1", port=29501))
    assert cfg.delay_kind == DelayKind.NONE
    assert cfg.collective_algo == "ring"


def test_world_size_one_is_rejected():
    with pytest.raises(ConfigValidationError) as exc:
        parse_job_config("world_size=1\nreal_ranks=0\nendpoint.base=127.0.0.1:29500\n")
    assert exc.value.field == "world_size"
    assert "world_size ≥ 2" in str(exc.value)


def test_all_ranks_real_is_rejected():
    with pytest.raises(ConfigValidationError) as exc:
        parse_job_config("world_size=2\nreal_ranks=0,1\nendpoint.base=127.0.0.1:29500\n")
    assert exc.value.field == "real_ranks"
    assert "real_ranks must be a strict subset" in str(exc.value)


def test_non_uniform_node_class_is_out_of_scope():
    with pytest.raises(OutOfScopeError) as exc:
        parse_job_config(MINIMAL + "node_class=v100\nnode_class.1=a100\n")
    assert exc.value.field == "node_class"
    assert "out of scope" in str(exc.value)


@pytest.mark.parametrize("text, field", [
    (MINIMAL + "bucket_bytes=0\n", "bucket_bytes"),
    (MINIMAL + "bucket_bytes=lots\n", "bucket_bytes"),
    (MINIMAL + "delay.alpha_us=-1\n", "link.alpha_us"),
    (MINIMAL + "delay.kind=quantum\n", "delay_kind"),
    ("world_size=2\nreal_ranks=5\nendpoint.base=127.0.0.1:29500\n", "real_ranks"),
    ("world_size=2\nreal_ranks=0\nendpoint.0=127.0.0.1:1\nendpoint.1=127.0.0.1:1\n", "endpoints"),
    ("world_size=2\nreal_ranks=0\nendpoint.0=127.0.0.1:1\n", "endpoints"),
    (MINIMAL + "endpoint.7=127.0.0.1:1\n", "endpoint.7"),
    ("world_size=2\nreal_ranks=0\nendpoint.base=bad host:1\n", "endpoint.base"),
    ("real_ranks=0\nendpoint.base=127.0.0.1:29500\n", "world_size"),
])
def test_validation_errors_name_the_field(text, field):
    with pytest.raises(ConfigValidationError) as exc:
        parse_job_config(text)
    assert exc.value.field == field


@pytest.mark.parametrize("text, field", [
    (MINIMAL + "colour=blue\n", "colour"),
    (MINIMAL + "world_size=3\n", "world_size"),
    (MINIMAL + "endpoint.x=127.0.0.1:1\n", "endpoint.x"),
])
def test_parse_errors_name_the_field(text, field):
    with pytest.raises(ConfigParseError) as exc:
        parse_job_config(text)
    assert exc.value.field == field


def test_endpoint_override_wins_over_base():
    cfg = parse_job_config(MINIMAL + "endpoint.1=localhost:4000\n")
    assert cfg.endpoints[1] == Endpoint(host="localhost", port=4000)


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_job_config("# job\n\nworld_size=3   \nreal_ranks=0\n# ports\nendpoint.base=127.0.0.1:29500\n")
    assert cfg.world_size == 3


def test_render_round_trip():
    cfg = parse_job_config(MINIMAL + "delay.kind=alpha_beta\ndelay.alpha_us=2.5\ndelay.beta_us_per_byte=0.001\n"
                                     "delay.inject_us=125\nbucket_bytes=1048576\n")
    again = parse_job_config(render_job_config(cfg))
    assert again == cfg
    assert config_digest(again) == config_digest(cfg)


def test_digest_changes_with_any_field():
    cfg = parse_job_config(MINIMAL)
    other = parse_job_config(MINIMAL + "delay.inject_us=1\n")
    assert config_digest(cfg) != config_digest(other)


def test_config_is_immutable():
    cfg = parse_job_config(MINIMAL)
    with pytest.raises(Exception):
        cfg.world_size = 3


def test_load_job_config_missing_file(tmp_path):
    with pytest.raises(ConfigParseError):
        load_job_config(str(tmp_path / "absent.conf"))


def test_load_job_config_reads_file(tmp_path):
    path = tmp_path / "job.conf"
    path.write_text(MINIMAL, encoding="utf-8")
    assert isinstance(load_job_config(str(path)), JobConfig)


def test_endpoint_parse():
    assert str(Endpoint.parse("example.com:80")) == "example.com:80"
    with pytest.raises(ValueError):
        Endpoint.parse("no-port")
