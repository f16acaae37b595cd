"""Run a validated config for real: one process per role, TCP in between.

``run_server`` blocks until the configured number of global epochs (or, for
the asynchronous scheduler, updates) has been reached, then writes the run
directory: resolved config snapshot, metric log, and the final model.
``run_client`` is the matching worker loop.  ``run_local`` wires both sides
up inside a single process, which is handy for demos and for checking that
a networked run reproduces the simulator's model.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .aggregators import make_aggregator
from .client import ClientState, local_train
from .config import ClientPlan, ExperimentConfig, client_dataset, dump_resolved
from .metrics import export_metrics
from .models import build_dataset, dataset_metrics, init_params
from .params import MetricRecord, ParameterSet, save_params
from .schedulers import make_scheduler
from .server import ServerAgent
from .transport import Communicator, SocketServer
from .wire import FilesystemConnector

DEFAULT_METRICS_FORMAT = "csv"


def make_server_agent(cfg: ExperimentConfig) -> ServerAgent:
    """Build the transport-independent server from a validated config."""
    ids = [p.client_id for p in cfg.clients]
    default_steps = max(p.train.local_steps for p in cfg.clients)
    scheduler = make_scheduler(cfg.scheduler, ids, default_steps, cfg.scheduler_kwargs)
    strategy = make_aggregator(cfg.aggregator, cfg.aggregator_kwargs)
    init = init_params(cfg.model_spec, seed=cfg.init_seed)
    if cfg.scheduler == "AsyncScheduler":
        return ServerAgent(
            init, scheduler, strategy, target_updates=cfg.num_global_epochs * len(ids)
        )
    return ServerAgent(init, scheduler, strategy, target_epochs=cfg.num_global_epochs)


def make_client_state(cfg: ExperimentConfig, plan: ClientPlan) -> ClientState:
    return ClientState(
        plan.client_id,
        client_dataset(cfg, plan),
        cfg.model_spec,
        plan.train,
        privacy=plan.privacy,
    )


@dataclass
class RunOutputs:
    final_params: ParameterSet
    epoch: int
    updates_processed: int
    metrics: list
    run_dir: Optional[Path] = None


def _write_run_dir(cfg, agent, run_dir, metrics_format) -> Optional[Path]:
    if run_dir is None:
        return None
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_resolved(cfg, run_dir / "config.yaml")
    suffix = "jsonl" if metrics_format == "jsonl" else "csv"
    export_metrics(agent.metrics, metrics_format, run_dir / f"metrics.{suffix}")
    save_params(agent.global_params, run_dir / "model.bin")
    return run_dir


def _final_eval(cfg, agent, now: float) -> None:
    if cfg.evaluation is None or cfg.model_spec is None:
        return
    ds = build_dataset(cfg.evaluation["dataset_name"], cfg.evaluation["dataset_kwargs"])
    scores = dataset_metrics(cfg.model_spec, agent.global_params, ds)
    for kind, value in sorted(scores.items()):
        agent.metrics.append(MetricRecord(now, "server", f"val_{kind}", float(value)))


def serve(cfg: ExperimentConfig, port: Optional[int] = None, spool_dir=None) -> SocketServer:
    """Start (but do not block on) the TCP server for a config."""
    agent = make_server_agent(cfg)
    connectors = {}
    send = None
    if spool_dir is not None:
        send = FilesystemConnector(spool_dir)
        connectors[send.connector_id] = send
    return SocketServer(
        agent,
        host=cfg.comm.bind_host,
        port=cfg.comm.bind_port if port is None else port,
        token=cfg.comm.resolve_token(),
        connectors=connectors,
        send_connector=send,
        inline_limit=cfg.comm.inline_limit,
        max_payload=cfg.comm.max_payload,
    )


def run_server(
    cfg: ExperimentConfig,
    run_dir=None,
    port: Optional[int] = None,
    timeout: Optional[float] = None,
    metrics_format: str = DEFAULT_METRICS_FORMAT,
) -> RunOutputs:
    """Serve until the run completes, then persist outputs."""
    with serve(cfg, port=port) as srv:
        finished = srv.wait_done(timeout=timeout)
        agent = srv.agent
        if not finished:
            raise TimeoutError(f"run did not finish within {timeout} seconds")
        if cfg.scheduler == "AsyncScheduler":
            agent.finalize(time.monotonic())
        _final_eval(cfg, agent, time.monotonic())
    out_dir = _write_run_dir(cfg, agent, run_dir, metrics_format)
    return RunOutputs(
        final_params=agent.global_params,
        epoch=agent.epoch,
        updates_processed=agent.update_count,
        metrics=agent.metrics,
        run_dir=out_dir,
    )


def run_client(
    cfg: ExperimentConfig,
    client_id: str,
    host: Optional[str] = None,
    port: Optional[int] = None,
) -> int:
    """Train-submit loop until the server says the run is over.

    Returns the number of rounds this client contributed.
    """
    plans = {p.client_id: p for p in cfg.clients}
    plan = plans[client_id]
    state = make_client_state(cfg, plan)
    rounds = 0
    with Communicator(
        host if host is not None else cfg.comm.bind_host,
        port if port is not None else cfg.comm.bind_port,
        token=cfg.comm.resolve_token(),
        max_payload=cfg.comm.max_payload,
    ) as com:
        params, epoch, steps, done = com.fetch_model(client_id)
        while not done:
            update = local_train(state, params, steps=steps, base_epoch=epoch)
            params, epoch, steps, done = com.submit_update(
                update, codec=plan.codec, inline_limit=cfg.comm.inline_limit
            )
            rounds += 1
    return rounds


def run_local(
    cfg: ExperimentConfig,
    run_dir=None,
    timeout: float = 300.0,
    metrics_format: str = DEFAULT_METRICS_FORMAT,
) -> RunOutputs:
    """Server plus every client in one process, over real sockets."""
    with serve(cfg, port=0) as srv:
        failures: list[BaseException] = []

        def drive(cid: str) -> None:
            try:
                run_client(cfg, cid, host=srv.host, port=srv.port)
            except BaseException as e:  # surfaced after join
                failures.append(e)

        threads = [
            threading.Thread(target=drive, args=(p.client_id,), daemon=True)
            for p in cfg.clients
        ]
        for t in threads:
            t.start()
        # poll rather than block so a crashed client surfaces immediately
        deadline = time.monotonic() + timeout
        while not srv.agent.done and not failures:
            if time.monotonic() > deadline:
                raise TimeoutError(f"local run did not finish within {timeout} seconds")
            time.sleep(0.02)
        if failures:
            raise failures[0]
        srv.wait_done(timeout=5.0)
        for t in threads:
            t.join(timeout=5.0)
        agent = srv.agent
        if cfg.scheduler == "AsyncScheduler":
            agent.finalize(time.monotonic())
        _final_eval(cfg, agent, time.monotonic())
    out_dir = _write_run_dir(cfg, agent, run_dir, metrics_format)
    return RunOutputs(
        final_params=agent.global_params,
        epoch=agent.epoch,
        updates_processed=agent.update_count,
        metrics=agent.metrics,
        run_dir=out_dir,
    )
