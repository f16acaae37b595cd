"""Transport-independent server logic.

A :class:`ServerAgent` owns the global model, a scheduler, and an
aggregation strategy.  Both the in-process simulator and the socket
transport drive the same three entry points (``handle_model_request``,
``process_update``, ``check_deadlines``), which is what makes simulated
and networked runs produce identical models for identical event orders.
"""
from __future__ import annotations

from typing import Optional

from .aggregators import AggregatorState
from .params import MetricRecord, ModelUpdate, ParameterSet
from .schedulers import Aggregate, Reply


class ServerAgent:
    def __init__(
        self,
        initial_params: ParameterSet,
        scheduler,
        strategy,
        target_epochs: Optional[int] = None,
        target_updates: Optional[int] = None,
    ):
        self.state = AggregatorState(global_params=initial_params, epoch=0)
        self.scheduler = scheduler
        self.strategy = strategy
        self.target_epochs = target_epochs
        self.target_updates = target_updates
        # updates that actually reached the scheduler (auth failures must not count)
        self.dispatch_count = 0
        self.update_count = 0
        self.aggregation_count = 0
        self.metrics: list[MetricRecord] = []

    @property
    def global_params(self) -> ParameterSet:
        return self.state.global_params

    @property
    def epoch(self) -> int:
        return self.state.epoch

    @property
    def done(self) -> bool:
        if self.target_epochs is not None and self.state.epoch >= self.target_epochs:
            return True
        return self.target_updates is not None and self.update_count >= self.target_updates

    def handle_model_request(self, client_id: str, now: float) -> tuple[ParameterSet, int, int]:
        """First contact: returns (global params, epoch, assigned local steps)."""
        steps = self.scheduler.initial_assignment(client_id, now)
        return self.state.global_params, self.state.epoch, steps

    def process_update(self, update: ModelUpdate, now: float) -> dict[str, Reply]:
        """Feed one client update in; returns replies that became ready."""
        self.dispatch_count += 1
        self.update_count += 1
        action = self.scheduler.on_update(update, now)
        if isinstance(action, Aggregate):
            return self._apply(action, now)
        return {}

    def check_deadlines(self, now: float) -> dict[str, Reply]:
        replies: dict[str, Reply] = {}
        while True:
            action = self.scheduler.check_deadline(now)
            if action is None:
                return replies
            replies.update(self._apply(action, now))

    def finalize(self, now: float) -> None:
        """Flush any partially filled aggregation buffer at end of run."""
        if self.strategy.finalize(self.state):
            self.aggregation_count += 1
            self._record(now)

    def _apply(self, action: Aggregate, now: float) -> dict[str, Reply]:
        if self.strategy.apply(self.state, list(action.updates), late=(action.mode == "late")):
            self.aggregation_count += 1
            self._record(now)
        return self.scheduler.replies(self.state.global_params, self.state.epoch, now)

    def _record(self, now: float) -> None:
        self.metrics.append(MetricRecord(now, "server", "epoch", float(self.state.epoch)))
