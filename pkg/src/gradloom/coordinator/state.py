"""Pure project state: membership, data allocation, reduce, budgets.

Everything here is synchronous and deterministic; the async runtime calls in
from a single event loop, and tests drive it directly. Allocation follows
three rules, each deliberately simple enough to brute-force in an oracle:

  fill:     unallocated ids go one at a time to the emptiest eligible trainer
            (ties by ascending worker_id), ids in sorted order.
  join:     with nothing unallocated, a joiner receives floor(total/(n+1))
            ids, moved one at a time from whichever worker currently holds
            the most (ties by ascending worker_id, donating its
            lexicographically largest id). No id moves between two
            pre-existing workers.
  loss:     a leaver's ids are refilled smallest-first; whatever exceeds the
            survivors' capacity returns to the unallocated pool.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from gradloom.coordinator.config import STEP_BUDGET, ProjectConfig
from gradloom.nn.archive import ModelArchive
from gradloom.nn.network import Network, add_output_class, build_network
from gradloom.nn.optim import Hyperparams, NonFiniteGradientError, adagrad_update
from gradloom.nn.params import AdaGradState, GradientBundle, Params
from gradloom.protocol.messages import IterationRecord, WorkerIterationStats

log = logging.getLogger("gradloom.coordinator")

TRAIN = "train"


class RegistrationError(ValueError):
    pass


@dataclass
class Datum:
    label: str
    allocated_to: str | None = None
    cached_by: set[str] = field(default_factory=set)


@dataclass
class WorkerRecord:
    worker_id: str
    mode: str
    capacity: int
    latency_ewma_ms: float = 0.0
    last_budget: tuple[str, int] | None = None
    allocated_ids: set[str] = field(default_factory=set)
    cache_ready: bool = False
    last_report_iteration: int = -1
    paused: bool = False


class ProjectState:
    def __init__(self, config: ProjectConfig, archive: ModelArchive | None = None):
        self.config = config
        if archive is not None:
            self.net = _net_from_spec(archive.spec)
            self.params = archive.params
            self.adagrad = archive.adagrad
            self.hyper = archive.hyper
            self.iteration = archive.iteration
            self.seed = archive.seed
        else:
            self.net, self.params, self.adagrad = build_network(config.spec, config.seed)
            self.hyper = config.hyper
            self.iteration = 0
            self.seed = config.seed
        self.data: dict[str, Datum] = {}
        self.unallocated: set[str] = set()
        self.workers: dict[str, WorkerRecord] = {}
        self.stalled_iterations = 0
        self.discarded_reports = 0
        self._metrics: dict[str, float] = {}

    # -- membership ---------------------------------------------------------

    def add_worker(self, worker_id: str, mode: str, capacity: int) -> WorkerRecord:
        if worker_id in self.workers:
            raise ValueError(f"worker id {worker_id!r} already connected")
        rec = WorkerRecord(worker_id, mode, capacity)
        if mode != TRAIN or self._effective_cap(rec) == 0:
            rec.cache_ready = mode == TRAIN  # nothing to fetch, ready vacuously
        self.workers[worker_id] = rec
        return rec

    def _effective_cap(self, rec: WorkerRecord) -> int:
        return min(rec.capacity, self.config.per_worker_cap)

    def _fill_candidates(self) -> list[WorkerRecord]:
        return [
            w for w in self.workers.values()
            if w.mode == TRAIN and not w.paused
            and len(w.allocated_ids) < self._effective_cap(w)
        ]

    # -- allocation ---------------------------------------------------------

    def allocate_unallocated(self) -> dict[str, list[str]]:
        """Fill step: hand out pending ids smallest-allocation-first."""
        return self._fill(sorted(self.unallocated))

    def _fill(self, pending: list[str]) -> dict[str, list[str]]:
        adds: dict[str, list[str]] = {}
        for datum_id in pending:
            candidates = self._fill_candidates()
            if not candidates:
                break
            candidates.sort(key=lambda w: (len(w.allocated_ids), w.worker_id))
            target = candidates[0]
            self._assign(datum_id, target.worker_id)
            adds.setdefault(target.worker_id, []).append(datum_id)
        return adds

    def allocate_for_join(self, worker_id: str) -> dict[str, dict[str, list[str]]]:
        """Provision a joining trainer; returns per-worker {add, remove} deltas.

        Unallocated data is used first (up to the joiner's fair share); the
        pie-cutter runs only when the pool is empty.
        """
        rec = self.workers[worker_id]
        if rec.mode != TRAIN or rec.allocated_ids:
            return {}
        limit = self._effective_cap(rec)
        deltas: dict[str, dict[str, list[str]]] = {}
        if self.unallocated:
            trainers = [
                w for w in self.workers.values() if w.mode == TRAIN and not w.paused
            ]
            total = sum(len(w.allocated_ids) for w in trainers) + len(self.unallocated)
            fair = total // max(len(trainers), 1)
            take = min(limit, fair, len(self.unallocated))
            moved = sorted(self.unallocated)[:take]
            for datum_id in moved:
                self._assign(datum_id, worker_id)
            if moved:
                deltas[worker_id] = {"add": moved, "remove": []}
            return deltas
        donors = [
            w for w in self.workers.values()
            if w.mode == TRAIN and not w.paused and w.worker_id != worker_id
        ]
        if not donors:
            return {}
        total = sum(len(w.allocated_ids) for w in donors)
        target = min(total // (len(donors) + 1), limit)
        gained: list[str] = []
        removed: dict[str, list[str]] = {}
        while len(gained) < target:
            donors.sort(key=lambda w: (-len(w.allocated_ids), w.worker_id))
            donor = donors[0]
            if not donor.allocated_ids:
                break
            datum_id = max(donor.allocated_ids)
            self._assign(datum_id, worker_id)
            gained.append(datum_id)
            removed.setdefault(donor.worker_id, []).append(datum_id)
        for donor_id, ids in removed.items():
            deltas[donor_id] = {"add": [], "remove": ids}
        if gained:
            deltas[worker_id] = {"add": sorted(gained), "remove": []}
        return deltas

    def handle_worker_loss(self, worker_id: str) -> dict[str, list[str]]:
        """Drop a worker; refill its ids smallest-first, overflow unallocated.

        Only the leaver's own ids are redistributed here. Anything already in
        the unallocated pool waits for the next regular fill step.
        """
        rec = self.workers.pop(worker_id, None)
        if rec is None:
            return {}
        freed = sorted(rec.allocated_ids)
        for datum_id in freed:
            d = self.data[datum_id]
            d.allocated_to = None
        for d in self.data.values():
            d.cached_by.discard(worker_id)
        self.unallocated.update(freed)
        return self._fill(freed)

    def rebalance(self) -> dict[str, dict[str, list[str]]]:
        """Level under-cap trainers to within one id of each other.

        Joins that drain the unallocated pool below a fair share leave one
        worker shorted; nothing in the fill/join/loss rules ever repairs
        that, so the settle step does. Ids move from the largest open
        allocation to the smallest (ties by ascending worker_id, donors
        giving up their highest-sorting id first).
        """
        deltas: dict[str, dict[str, list[str]]] = {}
        for _ in range(len(self.data) + 1):
            open_ws = [
                w for w in self.workers.values()
                if w.mode == TRAIN and not w.paused
                and len(w.allocated_ids) < self._effective_cap(w)
            ]
            if len(open_ws) < 2:
                break
            small = sorted(open_ws, key=lambda w: (len(w.allocated_ids), w.worker_id))[0]
            large = sorted(open_ws, key=lambda w: (-len(w.allocated_ids), w.worker_id))[0]
            if len(large.allocated_ids) - len(small.allocated_ids) <= 1:
                break
            datum_id = max(large.allocated_ids)
            self._assign(datum_id, small.worker_id)
            deltas.setdefault(large.worker_id, {"add": [], "remove": []})["remove"].append(datum_id)
            deltas.setdefault(small.worker_id, {"add": [], "remove": []})["add"].append(datum_id)
        return deltas

    def _assign(self, datum_id: str, worker_id: str) -> None:
        d = self.data[datum_id]
        if d.allocated_to is not None and d.allocated_to in self.workers:
            self.workers[d.allocated_to].allocated_ids.discard(datum_id)
            d.cached_by.discard(d.allocated_to)
        d.allocated_to = worker_id
        d.cached_by.discard(worker_id)
        rec = self.workers[worker_id]
        rec.allocated_ids.add(datum_id)
        rec.cache_ready = False
        self.unallocated.discard(datum_id)

    # -- data registration --------------------------------------------------

    def register_dataset(self, entries: list[tuple[str, str]]) -> list[str]:
        """Add (datum_id, label) pairs; returns labels new to the model.

        A new label grows the softmax layer (zero row) and bumps the params
        version so in-flight gradient reports against the old geometry are
        rejected as stale instead of corrupting the reduce.
        """
        collisions = [i for i, _ in entries if i in self.data]
        if collisions:
            raise RegistrationError(f"duplicate datum ids: {sorted(collisions)[:10]}")
        seen = set()
        dupes = [i for i, _ in entries if i in seen or seen.add(i)]
        if dupes:
            raise RegistrationError(f"duplicate datum ids in manifest: {sorted(set(dupes))[:10]}")
        new_labels = []
        for _, label in entries:
            if label not in self.net.labels and label not in new_labels:
                new_labels.append(label)
        for label in new_labels:
            self.net, self.params, self.adagrad = add_output_class(
                self.net, self.params, self.adagrad, label
            )
        if new_labels:
            self.params = Params(self.params.version + 1, self.params.arrays)
            log.info("labels grew to %s; params version now %d",
                     self.net.labels, self.params.version)
        for datum_id, label in entries:
            self.data[datum_id] = Datum(label)
            self.unallocated.add(datum_id)
        return new_labels

    # -- latency and budgets --------------------------------------------------

    def update_latency(self, worker_id: str, rtt_ms: float, compute_ms: float = 0.0) -> None:
        rec = self.workers.get(worker_id)
        if rec is None:
            return
        sample = max(0.0, (max(rtt_ms, 0.0) - compute_ms) / 2.0)
        rec.latency_ewma_ms = 0.8 * rec.latency_ewma_ms + 0.2 * sample

    def compute_budget(self, worker_id: str) -> tuple[str, int]:
        rec = self.workers[worker_id]
        if self.config.mode == STEP_BUDGET:
            budget = ("steps", self.config.step_budget_steps)
        else:
            ms = (self.config.T_seconds * 1000.0
                  - 2.0 * rec.latency_ewma_ms
                  - self.config.reduce_margin_ms)
            budget = ("budget_ms", int(max(self.config.min_budget_ms, ms)))
        rec.last_budget = budget
        return budget

    def straggler_timeout_s(self) -> float:
        members = self.barrier_members()
        max_ewma = max((self.workers[w].latency_ewma_ms for w in members), default=0.0)
        return self.config.T_seconds + 2.0 * max_ewma / 1000.0 + 1.0

    def barrier_members(self) -> set[str]:
        return {
            w.worker_id for w in self.workers.values()
            if w.mode == TRAIN and w.cache_ready and not w.paused
        }

    def order_recipients(self) -> list[str]:
        return sorted(
            w.worker_id for w in self.workers.values()
            if w.mode == TRAIN and not w.paused
        )

    # -- reduce ---------------------------------------------------------------

    def apply_reduce(self, reports: dict[str, GradientBundle],
                     stale_count: int = 0, wall_ms: float = 0.0) -> IterationRecord:
        """Steps (c)+(d) bookkeeping: weighted-average fold, AdaGrad, record.

        reports must already be filtered to the current params version.
        Summation runs in ascending worker_id order so the floating-point
        result is independent of arrival order.
        """
        usable = {
            w: b for w, b in sorted(reports.items())
            if b.params_version == self.params.version
            and self.params.arrays.congruent(b.grads)
        }
        dropped = len(reports) - len(usable)
        if dropped:
            self.discarded_reports += dropped
        total = sum(b.example_count for b in usable.values())
        stepped = False
        if total > 0:
            acc = self.params.arrays.zeros_like()
            for _, bundle in sorted(usable.items()):
                acc.add_(bundle.grads)
            avg = acc.scaled(1.0 / total)
            try:
                self.params, self.adagrad = adagrad_update(
                    self.params, self.adagrad, avg, self.hyper
                )
                stepped = True
            except NonFiniteGradientError:
                log.error("non-finite averaged gradient at version %d; update rejected",
                          self.params.version)
                self.params = Params(self.params.version + 1, self.params.arrays)
        else:
            self.params = Params(self.params.version + 1, self.params.arrays)
        if not stepped:
            self.stalled_iterations += 1
            log.info("stalled iteration %d: %d reports, %d examples",
                     self.iteration, len(usable), total)
        self.iteration += 1
        for w, bundle in usable.items():
            if w in self.workers:
                self.workers[w].last_report_iteration = self.iteration
        wall = max(wall_ms, self.config.T_seconds * 1000.0)
        record = IterationRecord(
            iteration=self.iteration,
            params_version=self.params.version,
            reports_received=len(usable),
            total_examples=total,
            wall_ms=wall,
            power=total / (wall / 1000.0) if wall > 0 else 0.0,
            stale_reports=stale_count + dropped,
            workers={
                w.worker_id: WorkerIterationStats(
                    latency_ewma_ms=w.latency_ewma_ms,
                    budget_ms=float(w.last_budget[1]) if w.last_budget else 0.0,
                    example_count=(usable[w.worker_id].example_count
                                   if w.worker_id in usable else 0),
                )
                for w in self.workers.values() if w.mode == TRAIN
            },
            hyper=self.hyper.to_obj(),
            metrics=self.drain_metrics(),
        )
        return record

    # -- misc ------------------------------------------------------------------

    def note_metric(self, name: str, value: float) -> None:
        self._metrics[name] = value

    def drain_metrics(self) -> dict[str, float]:
        out, self._metrics = self._metrics, {}
        return out

    def set_cache_ready(self, worker_id: str) -> None:
        rec = self.workers.get(worker_id)
        if rec is None:
            return
        rec.cache_ready = True
        for datum_id in rec.allocated_ids:
            self.data[datum_id].cached_by.add(worker_id)

    def mark_cache_pending(self, worker_id: str) -> None:
        rec = self.workers.get(worker_id)
        if rec is not None:
            rec.cache_ready = False

    def set_paused(self, worker_id: str, paused: bool) -> None:
        rec = self.workers.get(worker_id)
        if rec is None:
            raise KeyError(worker_id)
        rec.paused = paused

    def set_hyperparams(self, hyper: Hyperparams) -> None:
        self.hyper = hyper

    def set_duration(self, t_seconds: float) -> None:
        if not 1.0 <= t_seconds <= 30.0:
            raise ValueError(f"T_seconds must be in [1, 30], got {t_seconds}")
        self.config.T_seconds = t_seconds

    def snapshot(self) -> ModelArchive:
        return ModelArchive(
            spec=self.net.spec,
            params=self.params.copy(),
            adagrad=self.adagrad.copy(),
            hyper=self.hyper,
            labels=list(self.net.labels),
            iteration=self.iteration,
            seed=self.seed,
        )

    def check_invariants(self) -> None:
        """Partition, cap, and balance assertions; raises on violation."""
        seen: dict[str, str] = {}
        for w in self.workers.values():
            if len(w.allocated_ids) > self._effective_cap(w):
                raise AssertionError(
                    f"{w.worker_id} holds {len(w.allocated_ids)} > cap {self._effective_cap(w)}"
                )
            for datum_id in w.allocated_ids:
                if datum_id in seen:
                    raise AssertionError(f"{datum_id} allocated to {seen[datum_id]} and {w.worker_id}")
                seen[datum_id] = w.worker_id
                if self.data[datum_id].allocated_to != w.worker_id:
                    raise AssertionError(f"{datum_id} table/record mismatch")
        for datum_id, d in self.data.items():
            if d.allocated_to is None:
                if datum_id not in self.unallocated:
                    raise AssertionError(f"{datum_id} unallocated but not pooled")
            elif datum_id not in seen:
                raise AssertionError(f"{datum_id} points at missing worker {d.allocated_to}")
        if len(seen) + len(self.unallocated) != len(self.data):
            raise AssertionError("allocation partition does not cover the dataset")
        if not self.unallocated:
            open_counts = [
                len(w.allocated_ids) for w in self.workers.values()
                if w.mode == TRAIN and not w.paused
                and len(w.allocated_ids) < self._effective_cap(w)
            ]
            if len(open_counts) > 1 and max(open_counts) - min(open_counts) > 1:
                raise AssertionError(f"unbalanced open allocations: {sorted(open_counts)}")


def _net_from_spec(spec) -> Network:
    net, _, _ = build_network(spec, seed=0)
    return net
