import pytest

from src.core.constants import TWO_PI
from src.core.errors import InvalidParamsError, ParseError
from src.utils import run_config
from src.utils.run_config import RunConfig


def test_dump_load_round_trip(tmp_path):
    config = RunConfig(pair_rate=1.23456789e6, seed=42, frozen="tau_F, t_r", weights="uniform")
    path = tmp_path / "run.conf"
    config.save(str(path))
    assert RunConfig.load(str(path)) == config


def test_comments_and_blank_lines_are_ignored():
    config = RunConfig.loads("# pump series\n\nseed = 7   # second run\nduration_s = 0.5\n")
    assert config.seed == 7
    assert config.duration_s == 0.5
    assert config.pair_rate == RunConfig().pair_rate


def test_unknown_key_names_line():
    with pytest.raises(ParseError) as excinfo:
        RunConfig.loads("seed = 1\nfinesse = 40\n")
    assert excinfo.value.line == 2
    assert excinfo.value.field == "finesse"
    assert excinfo.value.exit_code == 3


@pytest.mark.parametrize("text", [
    "seed = 1\nseed = 2\n",
    "seed\n",
    "seed = one\n",
    "n_modes_half = 2.5\n",
])
def test_malformed_config(text):
    with pytest.raises(ParseError):
        RunConfig.loads(text)


def test_overrides_skip_none():
    config = RunConfig(seed=3).with_overrides(seed=None, duration_s=2.0)
    assert config.seed == 3
    assert config.duration_s == 2.0
    with pytest.raises(InvalidParamsError):
        RunConfig().with_overrides(colour="blue")


def test_validate():
    RunConfig().validate()
    with pytest.raises(InvalidParamsError):
        RunConfig(duration_s=0.0).validate()
    with pytest.raises(InvalidParamsError):
        RunConfig(window_start_ns=10.0, window_stop_ns=5.0).validate()
    with pytest.raises(InvalidParamsError):
        RunConfig(workers=-1).validate()


def test_zero_workers_uses_physical_cores(monkeypatch):
    monkeypatch.setattr(run_config.psutil, "cpu_count", lambda logical=True: 6)
    assert RunConfig(workers=0).resolved_workers() == 6
    assert RunConfig(workers=3).resolved_workers() == 3


def test_zero_workers_falls_back_when_psutil_cannot_tell(monkeypatch):
    monkeypatch.setattr(run_config.psutil, "cpu_count", lambda logical=True: None)
    monkeypatch.setattr(run_config.os, "cpu_count", lambda: 2)
    assert RunConfig(workers=0).resolved_workers() == 2


def test_boundary_units_convert_to_internal():
    config = RunConfig(tau_f_ns=2.07, resolving_time_ps=285.0, omega_c_mhz=11.0, tau0_ns=39.0,
                       bin_width_ps=50.0, pump_scale=0.5, pair_rate=2e6)
    params = config.to_model_params()
    assert params.tau_F == pytest.approx(2.07e-9)
    assert params.t_r == pytest.approx(285e-12)
    assert params.omega_c == pytest.approx(TWO_PI * 11e6)
    assert params.tau0 == pytest.approx(39e-9)
    assert config.to_emission().pair_rate == pytest.approx(1e6)
    tac = config.to_tac()
    assert tac.bin_width == pytest.approx(50e-12)
    assert tac.electronic_delay == pytest.approx(39e-9)
    assert config.to_opo_params().n_modes == 2 * config.n_modes_half + 1


def test_frozen_names():
    assert RunConfig(frozen="tau_F, t_r,").frozen_names() == ("tau_F", "t_r")
    assert RunConfig().frozen_names() == ()
