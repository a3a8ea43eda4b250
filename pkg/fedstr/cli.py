"""``fedstr`` command line: relay, provider, customer, demo and tooling."""

import argparse
import asyncio
import contextlib
import json
import logging
import signal
import sys
from pathlib import Path

from fedstr.audit import check_flow_ordering, load_relay_log
from fedstr.config import settings
from fedstr.errors import FedstrError, ProviderCrashed, TrainingAbortedError
from fedstr.ml import RunOption
from fedstr.nostr.keys import Keypair, generate_keypair, load_or_create_keypair, save_keypair
from fedstr.observability import configure_logging, configure_tracing

logger = logging.getLogger(__name__)

EXIT_CRASHED = 3
RUN_OPTIONS = {"fedavg": RunOption.FEDAVG, "diloco": RunOption.DILOCO}


def _keypair(args: argparse.Namespace) -> Keypair:
    if args.ephemeral or not args.key:
        return generate_keypair()
    return load_or_create_keypair(args.key)


def _relays(raw: str) -> list[str]:
    return [url.strip() for url in raw.split(",") if url.strip()]


def _stop_on_signals(stop: asyncio.Event) -> None:
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        with contextlib.suppress(NotImplementedError):
            loop.add_signal_handler(sig, stop.set)


# ── relay serve ──────────────────────────────────────
async def _relay_serve(args: argparse.Namespace) -> int:
    from fedstr.relay.server import relay_serve
    from fedstr.relay.store import RelayStore

    handle = await relay_serve(args.bind, RelayStore(args.log_file or settings.relay_log_file))
    stop = asyncio.Event()
    _stop_on_signals(stop)
    await stop.wait()
    await handle.stop()
    return 0


# ── provider run ─────────────────────────────────────
async def _provider_run(args: argparse.Namespace) -> int:
    from fedstr.provider import FaultInjection, ProviderConfig, ProviderDaemon

    cfg = ProviderConfig(
        keypair=_keypair(args),
        relays=_relays(args.relays),
        name=args.name,
        price_init_msats=args.price_init,
        price_result_msats=args.price_result,
        max_jobs=args.max_jobs,
        model_root=args.model_root or settings.model_root,
        nip94=args.nip94 or settings.nip94_enabled,
        faults=FaultInjection(
            crash_after_jobs=args.crash_after_jobs,
            tamper=args.tamper,
            tamper_velocity=args.tamper_velocity,
            noise=args.noise,
            noise_seed=args.noise_seed,
        ),
    )
    daemon = ProviderDaemon(cfg)
    stop = asyncio.Event()
    _stop_on_signals(stop)
    try:
        await daemon.run(stop)
    except ProviderCrashed as e:
        logger.error("💥 %s", e)
        return EXIT_CRASHED
    finally:
        await daemon.close()
    return 0


# ── customer train ───────────────────────────────────
async def _customer_train(args: argparse.Namespace) -> int:
    from fedstr.customer import CustomerConfig, OuterMode, run_training
    from fedstr.demo import ProblemConfig

    data, spec, loss = _problem(args, ProblemConfig).build()
    cfg = CustomerConfig(
        keypair=_keypair(args),
        relays=_relays(args.relays),
        num_pr=args.providers,
        num_jobs=args.rounds,
        run_option=RUN_OPTIONS[args.run_option],
        outer_mode=OuterMode(args.outer),
        dataset=data,
        model=spec,
        loss=loss,
        seed=args.seed,
        job_timeout=args.job_timeout or settings.job_timeout,
        target_loss=args.target_loss,
        model_root=args.model_root or settings.model_root,
        log_out=args.log_out,
    )
    try:
        result = await run_training(cfg)
    except TrainingAbortedError as e:
        logger.error("🛑 %s", e)
        return 1
    print(f"final loss: {result.summary['final_loss']:.6g}")
    if args.log_out:
        print(f"round log: {args.log_out}")
    if args.summary_out:
        Path(args.summary_out).write_text(json.dumps(result.summary, indent=2), encoding="utf-8")
    return 0


# ── demo e2e ─────────────────────────────────────────
async def _demo_e2e(args: argparse.Namespace) -> int:
    from fedstr.customer import OuterMode
    from fedstr.demo import DemoConfig, ProblemConfig, run_demo

    cfg = DemoConfig(
        providers=args.providers,
        rounds=args.rounds,
        run_option=RUN_OPTIONS[args.run_option],
        outer_mode=OuterMode(args.outer),
        problem=_problem(args, ProblemConfig),
        kill_provider_at_round=args.kill_provider_at,
        tamper_blob=args.tamper_blob,
        malicious_provider=args.malicious_provider,
        spares=args.spares,
        job_timeout=args.job_timeout or 10.0,
        log_out=args.log_out,
        summary_out=args.summary_out,
        work_dir=args.work_dir,
    )
    return await run_demo(cfg)


def _problem(args: argparse.Namespace, problem_cls):
    return problem_cls(
        dataset=args.dataset,
        n=args.n,
        d=args.d,
        noise=args.noise_sigma,
        classes=args.classes,
        seed=args.seed,
    )


# ── keygen / audit ───────────────────────────────────
def _keygen(args: argparse.Namespace) -> int:
    keypair = generate_keypair()
    save_keypair(keypair, args.out)
    print(keypair.pubkey_hex)
    return 0


def _audit(args: argparse.Namespace) -> int:
    violations = check_flow_ordering(load_relay_log(args.relay_log))
    for v in violations:
        print(f"{v.request_id}: {v.message}")
    if not violations:
        print("no flow violations")
    return 1 if violations else 0


# ── Parser ───────────────────────────────────────────
def _add_identity(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--key", help="key file; created on first use")
    group.add_argument("--ephemeral", action="store_true", help="use a fresh keypair")


def _add_problem(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--dataset", default="synthetic-linear", choices=["synthetic-linear", "synthetic-classify"]
    )
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--providers", type=int, default=2)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--run-option", default="fedavg", choices=sorted(RUN_OPTIONS))
    p.add_argument("--outer", default="self", choices=["self", "delegate"])
    p.add_argument("--job-timeout", type=float)
    p.add_argument("--log-out")
    p.add_argument("--summary-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedstr", description=__doc__)
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    relay = sub.add_parser("relay").add_subparsers(dest="action", required=True)
    serve = relay.add_parser("serve", help="run a relay")
    serve.add_argument("--bind", default=settings.relay_bind)
    serve.add_argument("--log-file")
    serve.set_defaults(handler=_relay_serve)

    provider = sub.add_parser("provider").add_subparsers(dest="action", required=True)
    run = provider.add_parser("run", help="run a provider daemon")
    run.add_argument("--relays", required=True, help="comma-separated relay URLs")
    _add_identity(run)
    run.add_argument("--name", default="fedstr-provider")
    run.add_argument("--price-init", type=int, default=1000, help="msats before the job")
    run.add_argument("--price-result", type=int, default=9000, help="msats per delivered result")
    run.add_argument("--max-jobs", type=int, default=1)
    run.add_argument("--model-root")
    run.add_argument("--nip94", action="store_true")
    run.add_argument("--crash-after-jobs", type=int, help="crash on the next inner job after N")
    run.add_argument("--tamper", action="store_true")
    run.add_argument("--tamper-velocity", action="store_true")
    run.add_argument("--noise", action="store_true")
    run.add_argument("--noise-seed", type=int, default=0)
    run.set_defaults(handler=_provider_run)

    customer = sub.add_parser("customer").add_subparsers(dest="action", required=True)
    train = customer.add_parser("train", help="run a training session")
    train.add_argument("--relays", required=True, help="comma-separated relay URLs")
    _add_identity(train)
    _add_problem(train)
    train.add_argument("--target-loss", type=float)
    train.add_argument("--model-root")
    train.set_defaults(handler=_customer_train)

    demo = sub.add_parser("demo").add_subparsers(dest="action", required=True)
    e2e = demo.add_parser("e2e", help="relay, providers and customer on loopback")
    _add_problem(e2e)
    e2e.add_argument("--kill-provider-at", type=int, metavar="ROUND")
    e2e.add_argument("--tamper-blob", action="store_true")
    e2e.add_argument("--malicious-provider", action="store_true")
    e2e.add_argument("--spares", type=int)
    e2e.add_argument("--work-dir")
    e2e.set_defaults(handler=_demo_e2e)

    keygen = sub.add_parser("keygen", help="write a new key file, print its pubkey")
    keygen.add_argument("--out", required=True)
    keygen.set_defaults(handler=_keygen)

    audit = sub.add_parser("audit", help="check protocol ordering in a relay log")
    audit.add_argument("--relay-log", required=True)
    audit.set_defaults(handler=_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    configure_tracing()
    try:
        outcome = args.handler(args)
        if asyncio.iscoroutine(outcome):
            outcome = asyncio.run(outcome)
    except (FedstrError, ValueError, OSError) as e:
        logger.error("❌ %s: %s", type(e).__name__, e)
        return 2
    except KeyboardInterrupt:
        return 130
    return outcome


if __name__ == "__main__":
    sys.exit(main())
