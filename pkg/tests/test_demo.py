"""Tests for the single-machine demo topology."""

import json

import pytest

from fedstr.demo import DatasetKind, DemoConfig, ProblemConfig, _provider_args, run_demo
from fedstr.ml import LossKind, ModelFamily


@pytest.mark.unit
class TestDemoConfig:
    """Fault options and the child process arguments they produce."""

    def test_no_faults_no_spares(self):
        cfg = DemoConfig()
        assert not cfg.faulty
        assert cfg.spare_count == 0

    @pytest.mark.parametrize(
        "faults",
        [{"kill_provider_at_round": 2}, {"tamper_blob": True}, {"malicious_provider": True}],
    )
    def test_any_fault_adds_a_spare(self, faults):
        cfg = DemoConfig(**faults)
        assert cfg.faulty
        assert cfg.spare_count == 1

    def test_explicit_spares_win(self):
        assert DemoConfig(tamper_blob=True, spares=3).spare_count == 3

    def test_kill_round_must_follow_the_first(self):
        with pytest.raises(ValueError):
            DemoConfig(kill_provider_at_round=1)

    def test_faults_only_on_first_provider(self, tmp_path):
        cfg = DemoConfig(kill_provider_at_round=3, tamper_blob=True)
        first = _provider_args(cfg, 0, "ws://127.0.0.1:1", tmp_path)
        second = _provider_args(cfg, 1, "ws://127.0.0.1:1", tmp_path)
        assert first[first.index("--crash-after-jobs") + 1] == "2"
        assert "--tamper" in first
        assert "--crash-after-jobs" not in second and "--tamper" not in second

    def test_malicious_provider_is_seeded(self, tmp_path):
        cfg = DemoConfig(malicious_provider=True, problem=ProblemConfig(seed=9))
        args = _provider_args(cfg, 0, "ws://127.0.0.1:1", tmp_path)
        assert args[args.index("--noise-seed") + 1] == "9"


@pytest.mark.unit
class TestProblemConfig:
    def test_linear_problem(self):
        data, spec, loss = ProblemConfig(n=50, d=4).build()
        assert data.features.shape == (50, 4)
        assert spec.family is ModelFamily.LINEAR_REGRESSION
        assert loss is LossKind.MSE

    def test_classification_problem(self):
        data, spec, loss = ProblemConfig(dataset=DatasetKind.CLASSIFY, n=40, d=3).build()
        assert len(data) == 40
        assert spec.family is ModelFamily.LOGISTIC_REGRESSION
        assert loss is LossKind.CROSS_ENTROPY


@pytest.mark.e2e
class TestDemoRun:
    """Child processes on loopback; slow."""

    async def test_clean_run(self, tmp_path):
        cfg = DemoConfig(
            providers=2,
            rounds=2,
            problem=ProblemConfig(n=400, d=3),
            work_dir=str(tmp_path),
        )
        assert await run_demo(cfg) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["completed"] is True
        assert summary["flow_violations"] == []
        assert summary["final_loss"] < summary["initial_loss"]

    async def test_killed_provider_is_replaced(self, tmp_path):
        cfg = DemoConfig(
            providers=2,
            rounds=3,
            problem=ProblemConfig(n=400, d=3),
            kill_provider_at_round=2,
            job_timeout=4.0,
            work_dir=str(tmp_path),
        )
        assert await run_demo(cfg) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["reassignments"] == 1
