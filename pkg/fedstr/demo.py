"""Single-machine end-to-end run: a relay and N providers as child processes,
plus one in-process customer.

Every connection stays on loopback. After training the relay log is audited
for protocol ordering and a summary document is written.
"""

import asyncio
import json
import logging
import os
import socket
import sys
import tempfile
from enum import StrEnum
from pathlib import Path

import httpx
from pydantic import BaseModel, ConfigDict, Field

from fedstr.audit import check_flow_ordering, load_relay_log, summarize
from fedstr.config import settings
from fedstr.customer import CustomerConfig, OuterMode, ValidationPolicy, run_training
from fedstr.customer.orchestrator import discover_providers
from fedstr.errors import ConfigError, FedstrError, TrainingAbortedError
from fedstr.ml import (
    Dataset,
    LossKind,
    ModelFamily,
    ModelSpec,
    RunOption,
    make_classification,
    make_linear,
)
from fedstr.nostr.keys import generate_keypair
from fedstr.relay.client import RelayPool
from fedstr.roundlog import RoundLog

logger = logging.getLogger(__name__)

MAX_RETRIES = 50
RETRY_BACKOFF_BASE = 0.1
SPARE_HEAD_START = 1.1  # announcements carry whole-second timestamps


class DatasetKind(StrEnum):
    LINEAR = "synthetic-linear"
    CLASSIFY = "synthetic-classify"


class ProblemConfig(BaseModel):
    """Synthetic training problem shared by ``customer train`` and the demo."""

    model_config = ConfigDict(frozen=True)

    dataset: DatasetKind = DatasetKind.LINEAR
    n: int = Field(default=3000, ge=10)
    d: int = Field(default=10, ge=1)
    noise: float = Field(default=0.1, ge=0.0)
    classes: int = Field(default=2, ge=2)
    seed: int = 0

    def build(self) -> tuple[Dataset, ModelSpec, LossKind]:
        if self.dataset is DatasetKind.LINEAR:
            data = make_linear(self.n, self.d, self.noise, self.seed)
            spec = ModelSpec(family=ModelFamily.LINEAR_REGRESSION, input_dim=self.d)
            return data, spec, LossKind.MSE
        data = make_classification(self.n, self.d, self.classes, self.seed)
        out = 1 if self.classes == 2 else self.classes
        spec = ModelSpec(
            family=ModelFamily.LOGISTIC_REGRESSION, input_dim=self.d, output_dim=out
        )
        return data, spec, LossKind.CROSS_ENTROPY


class DemoConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    providers: int = Field(default=2, ge=1)
    rounds: int = Field(default=3, ge=1)
    run_option: RunOption = RunOption.FEDAVG
    outer_mode: OuterMode = OuterMode.SELF
    problem: ProblemConfig = ProblemConfig()

    # --- Fault injection (applied to the first main provider) ---
    kill_provider_at_round: int | None = Field(default=None, ge=2)
    tamper_blob: bool = False
    malicious_provider: bool = False
    spares: int | None = Field(default=None, ge=0)

    # --- Timing ---
    job_timeout: float = Field(default=10.0, gt=0)
    feedback_interval: float = Field(default=0.25, gt=0)
    startup_timeout: float = Field(default=20.0, gt=0)

    # --- Output ---
    log_out: str | None = None
    summary_out: str | None = None
    work_dir: str | None = None

    @property
    def faulty(self) -> bool:
        return (
            self.kill_provider_at_round is not None or self.tamper_blob or self.malicious_provider
        )

    @property
    def spare_count(self) -> int:
        if self.spares is not None:
            return self.spares
        return 1 if self.faulty else 0


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class Supervisor:
    """Starts and reaps child processes; every child is terminated on exit."""

    def __init__(self, work: Path):
        self.work = work
        self.children: list[tuple[str, asyncio.subprocess.Process]] = []
        self._logs = []

    async def spawn(self, name: str, *args: str) -> asyncio.subprocess.Process:
        log = open(self.work / f"{name}.log", "wb")  # noqa: SIM115
        self._logs.append(log)
        env = {**os.environ, "FEDSTR_LOG_LEVEL": settings.log_level}
        proc = await asyncio.create_subprocess_exec(
            sys.executable, "-m", "fedstr", *args, stdout=log, stderr=log, env=env
        )
        self.children.append((name, proc))
        logger.info("Started %s (pid %d)", name, proc.pid)
        return proc

    def check_alive(self) -> None:
        """Raises:
        ConfigError: If any child that should still run has exited.
        """
        for name, proc in self.children:
            if proc.returncode is not None and name == "relay":
                raise ConfigError(f"{name} exited with code {proc.returncode}")

    async def shutdown(self) -> None:
        for _, proc in self.children:
            if proc.returncode is None:
                proc.terminate()
        for name, proc in self.children:
            try:
                await asyncio.wait_for(proc.wait(), timeout=5)
            except TimeoutError:
                logger.warning("Killing %s", name)
                proc.kill()
                await proc.wait()
        for log in self._logs:
            log.close()


async def wait_for_relay(port: int, relay: asyncio.subprocess.Process) -> None:
    url = f"http://127.0.0.1:{port}/health"
    async with httpx.AsyncClient(timeout=1.0) as client:
        for attempt in range(MAX_RETRIES):
            if relay.returncode is not None:
                raise ConfigError(f"relay exited with code {relay.returncode}")
            try:
                response = await client.get(url)
                if response.status_code == 200:
                    return
            except httpx.TransportError:
                pass
            await asyncio.sleep(RETRY_BACKOFF_BASE * min(attempt + 1, 5))
    raise ConfigError(f"relay on port {port} never became healthy")


def _provider_args(cfg: DemoConfig, index: int, relay_url: str, work: Path) -> list[str]:
    args = [
        "provider", "run",
        "--relays", relay_url,
        "--key", str(work / "keys" / f"provider_{index}.key"),
        "--model-root", str(work / f"provider_{index}"),
        "--name", f"demo-provider-{index}",
    ]
    if index == 0:
        if cfg.kill_provider_at_round is not None:
            args += ["--crash-after-jobs", str(cfg.kill_provider_at_round - 1)]
        if cfg.tamper_blob:
            args.append("--tamper")
        if cfg.malicious_provider:
            args += ["--noise", "--noise-seed", str(cfg.problem.seed)]
    return args


async def run_demo(cfg: DemoConfig) -> int:
    """Run the whole topology once. Returns the process exit code."""
    work = Path(cfg.work_dir or tempfile.mkdtemp(prefix="fedstr-demo-"))
    work.mkdir(parents=True, exist_ok=True)
    relay_log = work / "relay.jsonl"
    relay_log.unlink(missing_ok=True)
    log_out = Path(cfg.log_out) if cfg.log_out else work / "rounds.jsonl"
    summary_out = Path(cfg.summary_out) if cfg.summary_out else work / "summary.json"
    port = free_port()
    relay_url = f"ws://127.0.0.1:{port}"
    supervisor = Supervisor(work)
    round_log = RoundLog(log_out)
    training: dict = {}
    completed, error = False, None

    try:
        relay = await supervisor.spawn(
            "relay", "relay", "serve", "--bind", f"127.0.0.1:{port}", "--log-file", str(relay_log)
        )
        await wait_for_relay(port, relay)

        for s in range(cfg.spare_count):
            await supervisor.spawn(
                f"spare_{s}", *_provider_args(cfg, cfg.providers + s, relay_url, work)
            )
        if cfg.spare_count:
            await asyncio.sleep(SPARE_HEAD_START)
        for i in range(cfg.providers):
            await supervisor.spawn(f"provider_{i}", *_provider_args(cfg, i, relay_url, work))

        pool = await RelayPool([relay_url]).connect()
        try:
            await discover_providers(
                pool, cfg.providers + cfg.spare_count, retry_window=cfg.startup_timeout
            )
        finally:
            await pool.close()
        supervisor.check_alive()

        data, spec, loss = cfg.problem.build()
        customer_cfg = CustomerConfig(
            keypair=generate_keypair(),
            relays=[relay_url],
            num_pr=cfg.providers,
            num_jobs=cfg.rounds,
            run_option=cfg.run_option,
            outer_mode=cfg.outer_mode,
            dataset=data,
            model=spec,
            loss=loss,
            seed=cfg.problem.seed,
            feedback_interval=cfg.feedback_interval,
            job_timeout=cfg.job_timeout,
            discovery_retry_window=cfg.startup_timeout,
            validation=ValidationPolicy(),
            model_root=str(work / "customer"),
        )
        result = await run_training(customer_cfg, round_log=round_log)
        training = result.summary
        completed = True
    except TrainingAbortedError as e:
        error = str(e)
    except (FedstrError, OSError) as e:
        error = f"{type(e).__name__}: {e}"
        logger.error("❌ Demo failed to start: %s (see logs in %s)", error, work)
    finally:
        await supervisor.shutdown()

    violations = check_flow_ordering(load_relay_log(relay_log)) if relay_log.exists() else []
    for v in violations:
        logger.error("Flow violation for %s…: %s", v.request_id[:12], v.message)
    summary = summarize(training, round_log.counters, violations, completed, error)
    summary["round_log"] = str(log_out)
    summary["relay_log"] = str(relay_log)
    summary_out.parent.mkdir(parents=True, exist_ok=True)
    summary_out.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    logger.info("📄 Summary written to %s", summary_out)

    ok = completed and not violations
    if ok:
        logger.info(
            "✅ Demo complete: loss %.6g → %.6g",
            training.get("initial_loss"), training.get("final_loss"),
        )
    return 0 if ok else 1
