import json

import pytest

from ppsim.config import ExperimentConfig
from ppsim.harness import (ExperimentReport, NoiseCalibration, StageError, calibrate_noise, collect,
                           run_end_to_end, sweep, with_seed)
from ppsim.kernel import NoiseConfig

KNOWN = ExperimentConfig().replace(**{"attack.scan_mode": "known"})
QUIET = KNOWN.replace(noise=NoiseConfig())


@pytest.fixture(scope="module")
def noisy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e")
    cfg = with_seed(KNOWN, 4).replace(**{"attack.n_traces": 3})
    return cfg, run_end_to_end(cfg, out), out


def test_zero_noise_single_trace(tmp_path):
    rep = run_end_to_end(with_seed(QUIET, 2).replace(**{"attack.n_traces": 1}), tmp_path)
    assert rep.merged_bit_errors == 0 and rep.partial_error_rates == [0.0]
    assert rep.recovered_key_hex == rep.true_key_hex


def test_outputs_written(noisy_run):
    cfg, rep, out = noisy_run
    for name in ("config.json", "report.json", "errors_vs_traces.csv", "errors_vs_lookahead.csv",
                 "timing.json", "traces/trace-000.csv", "traces/trace-000.json"):
        assert (out / name).exists(), name
    assert ExperimentReport.read(out / "report.json") == rep
    assert ExperimentConfig.load(out / "config.json") == cfg
    assert rep.config_digest == cfg.digest()
    lines = (out / "errors_vs_lookahead.csv").read_text().splitlines()
    assert lines[0] == "lookahead,bit_errors" and len(lines) == 7
    assert len(rep.errors_vs_traces) == 3 and rep.errors_vs_traces[-1] == rep.merged_bit_errors


def test_attack_scale_metrics(noisy_run):
    _, rep, _ = noisy_run
    assert rep.mean_trace_span_cycles == pytest.approx(220.47e6, rel=0.25)
    assert rep.mean_mult_cycles == pytest.approx(107662, rel=0.25)
    assert rep.mean_probe_cycles == pytest.approx(734, rel=0.2)
    assert 0 < rep.mean_partial_error_rate < 0.2


def test_single_value_sweep_matches_end_to_end(noisy_run):
    cfg, rep, _ = noisy_run
    res = sweep(cfg, "lookahead", [cfg.attack.lookahead], [cfg.seed])
    assert res.rows[0].errors == [rep.merged_bit_errors]
    assert res.rows[0].partial_error[0] == pytest.approx(rep.mean_partial_error_rate)


def test_sweep_workers_agree(tmp_path):
    cfg = QUIET.replace(**{"attack.n_traces": 1})
    a = sweep(cfg, "n_traces", [1], [1, 2])
    b = sweep(cfg, "n_traces", [1], [1, 2], workers=2)
    assert a.to_dict() == b.to_dict()
    assert a.rows[0].errors == [0, 0]
    a.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "n_traces,seed,bit_errors,mean_partial_error"
    assert "mean" in a.table()


def test_sweep_validation():
    with pytest.raises(ValueError):
        sweep(QUIET, "temperature", [1], [0])
    with pytest.raises(ValueError):
        sweep(QUIET, "n_traces", [0.5], [0])
    with pytest.raises(ValueError):
        sweep(QUIET, "lookahead", [], [0])


def test_stage_error_names_stage():
    cfg = with_seed(ExperimentConfig(), 3).replace(**{"attack.max_scan_sets": 1})
    with pytest.raises(StageError) as ei:
        collect(cfg, n_traces=1)
    assert ei.value.stage == "scan" and ei.value.seed == 3


def test_calibration_edges(tmp_path):
    zero = calibrate_noise(0.0, path=tmp_path / "z.json")
    assert zero.converged and zero.noise == NoiseConfig()
    assert NoiseCalibration.load(tmp_path / "z.json") == zero
    far = calibrate_noise(0.45, budget=6, cfg=KNOWN, traces_per_eval=2, seeds=(1,))
    assert not far.converged and far.runs <= 6 and len(far.history) == far.runs // 2
    with pytest.raises(ValueError):
        calibrate_noise(0.04, budget=1, traces_per_eval=2, seeds=(1,))
    with pytest.raises(ValueError):
        calibrate_noise(0.6)


def test_report_json_is_strict(noisy_run):
    _, rep, _ = noisy_run
    json.loads(rep.to_json(), parse_constant=lambda c: pytest.fail(f"non-finite {c}"))
