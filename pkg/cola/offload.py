"""
Simulated low-cost devices that own the adapters.

Each OffloadWorker holds a disjoint set of (m, k) adapters together with their
optimizer state and adaptation buffers. The trainer talks to workers only through
FIFO message channels: AdaptationData carries records in, FlushRequest asks for a fit,
AdapterUpload carries serialized adapters in either direction and Ack closes every
request. In synchronous mode the trainer drains a worker's inbox right after sending,
in lockstep; in concurrent mode every worker runs its own thread.
"""

import copy
import json
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .adapters import Adapter
from .helpers.arg_options import AssignmentPolicy, get_enum_values
from .helpers.checkpoint import dumps_adapters, loads_adapters
from .helpers.errors import ConfigError, EmptyBufferError, OffloadError, OffloadTimeoutError
from .optim import Optimizer, OptimizerSpec, build_optimizer
from .records import AdaptationRecord, Buffer
from .router import AdapterKey

logger = logging.getLogger(__name__)

TRAINER = 'trainer'


class MessageKind(Enum):
    ADAPTATION_DATA = "AdaptationData"
    ADAPTER_UPLOAD = "AdapterUpload"
    FLUSH_REQUEST = "FlushRequest"
    ACK = "Ack"
    ERROR = "Error"
    SHUTDOWN = "Shutdown"

    def __str__(self):
        return self.value


@dataclass
class Message:
    kind: MessageKind
    sender: str
    seq: int
    payload: object = None
    layer: Optional[int] = None
    user: Optional[int] = None
    iteration: Optional[int] = None
    nbytes: int = 0

    def log_line(self) -> Dict[str, object]:
        return {
            'seq': self.seq,
            'kind': self.kind.value,
            'm': self.layer,
            'k': self.user,
            't': self.iteration,
            'bytes': self.nbytes,
        }


@dataclass
class OffloadReport:
    """Record accounting at shutdown: every dispatched record was consumed by a fit or is still buffered."""

    dispatched: int
    consumed: int
    buffered: int
    flushes: int
    messages: int
    per_worker: Dict[int, Dict[str, int]] = field(default_factory=dict)

    @property
    def conserved(self) -> bool:
        return self.dispatched == self.consumed + self.buffered


class OffloadWorker:
    """One low-cost device: owns adapters, their optimizers and their buffers."""

    def __init__(self, worker_id: int, optimizer_spec: OptimizerSpec, inner_steps: int = 1) -> None:
        self.worker_id = worker_id
        self.name = f"worker-{worker_id}"
        self.optimizer_spec = optimizer_spec
        self.inner_steps = inner_steps
        self.adapters: Dict[AdapterKey, Adapter] = {}
        self.optimizers: Dict[AdapterKey, Optimizer] = {}
        self.buffers: Dict[AdapterKey, Buffer] = {}
        self.inbox: "queue.Queue[Message]" = queue.Queue()
        self.outbox: "queue.Queue[Message]" = queue.Queue()
        self.consumed = 0
        self.thread: Optional[threading.Thread] = None
        self._seq = 0

    def _reply(self, kind: MessageKind, **kwargs) -> Message:
        self._seq += 1
        return Message(kind, self.name, self._seq, **kwargs)

    def buffered(self) -> int:
        return sum(len(buffer.records) for buffer in self.buffers.values())

    def fit_all(self, partial: bool = False) -> Dict[AdapterKey, Dict[str, float]]:
        """
        Fit every adapter with buffered records, then empty those buffers.

        Fits run on copies of the adapters and their optimizers, committed only when every fit
        succeeds, so a failing fit leaves adapters, optimizer state and buffers as they were.

        Returns:
            Dict[AdapterKey, Dict[str, float]]: Per adapter, the samples and records consumed and the
            auxiliary loss before fitting.
        """
        keys = [key for key in sorted(self.buffers) if self.buffers[key].records]
        adapters = {key: copy.deepcopy(self.adapters[key]) for key in keys}
        optimizers = {key: copy.deepcopy(self.optimizers[key]) for key in keys}
        fitted = {}
        for key in keys:
            buffer = self.buffers[key]
            if not partial and buffer.capacity and buffer.n_samples != buffer.capacity:
                logger.debug(f"{self.name}: buffer {key} holds {buffer.n_samples} of {buffer.capacity} samples")
            inputs, grads = buffer.stack()
            loss = adapters[key].fit_step(inputs, grads, optimizers[key], self.inner_steps)
            fitted[key] = {'samples': buffer.n_samples, 'records': len(buffer.records), 'loss': loss}
        self.adapters.update(adapters)
        self.optimizers.update(optimizers)
        for key in keys:
            self.consumed += len(self.buffers[key].records)
            self.buffers[key].clear()
        return fitted

    def handle(self, message: Message) -> List[Message]:
        """
        Process one message and return the replies to send back.

        Raises:
            OffloadError: If a message refers to an adapter this worker does not own.
        """
        if message.kind == MessageKind.ADAPTER_UPLOAD:
            capacity = message.payload.get('capacity', 0)
            for key, adapter in loads_adapters(message.payload['adapters']).items():
                self.adapters[key] = adapter
                if key not in self.optimizers:
                    self.optimizers[key] = build_optimizer(self.optimizer_spec)
                if key not in self.buffers:
                    self.buffers[key] = Buffer(key[0], key[1], capacity)
            return [self._reply(MessageKind.ACK, payload={'request': 'upload'})]

        if message.kind == MessageKind.ADAPTATION_DATA:
            record: AdaptationRecord = message.payload
            key = (record.layer, record.user)
            if key not in self.buffers:
                raise OffloadError(f"{self.name} does not own adapter {key}.")
            self.buffers[key].append(record)
            return []

        if message.kind == MessageKind.FLUSH_REQUEST:
            partial = bool(message.payload and message.payload.get('partial'))
            try:
                fitted = self.fit_all(partial)
            except Exception as error:
                return [
                    self._reply(MessageKind.ERROR, payload=error, iteration=message.iteration),
                    self._reply(
                        MessageKind.ACK, payload={'request': 'flush', 'fitted': {}}, iteration=message.iteration
                    ),
                ]
            replies = []
            if fitted:
                data = dumps_adapters({key: self.adapters[key] for key in fitted})
                replies.append(
                    self._reply(
                        MessageKind.ADAPTER_UPLOAD,
                        payload={'adapters': data},
                        iteration=message.iteration,
                        nbytes=len(data),
                    )
                )
            replies.append(
                self._reply(
                    MessageKind.ACK,
                    payload={'request': 'flush', 'fitted': fitted},
                    iteration=message.iteration,
                )
            )
            return replies

        if message.kind == MessageKind.SHUTDOWN:
            return [
                self._reply(
                    MessageKind.ACK,
                    payload={'request': 'shutdown', 'consumed': self.consumed, 'buffered': self.buffered()},
                )
            ]
        raise OffloadError(f"{self.name} cannot handle a {message.kind} message.")

    def drain(self) -> None:
        """Process every queued message on the calling thread."""
        while True:
            try:
                message = self.inbox.get_nowait()
            except queue.Empty:
                return
            self._process(message)

    def _process(self, message: Message) -> bool:
        try:
            replies = self.handle(message)
        except Exception as error:
            replies = [self._reply(MessageKind.ERROR, payload=error)]
        for reply in replies:
            self.outbox.put(reply)
        return message.kind != MessageKind.SHUTDOWN

    def run(self) -> None:
        while self._process(self.inbox.get()):
            pass

    def start(self) -> None:
        self.thread = threading.Thread(target=self.run, name=f"cola-{self.name}", daemon=True)
        self.thread.start()


class OffloadHandle:
    """Trainer-side end of the channels to every offload worker."""

    def __init__(
        self,
        workers: Sequence[OffloadWorker],
        assignment: str = AssignmentPolicy.ROUND_ROBIN.value,
        concurrent: bool = False,
        timeout: float = 30.0,
        message_log=None,
    ) -> None:
        self.workers = list(workers)
        self.assignment = assignment
        self.concurrent = concurrent
        self.timeout = timeout
        self.owners: Dict[AdapterKey, int] = {}
        self.dispatched = 0
        self.pending = 0
        self.flushes = 0
        self.messages = 0
        self.last_flush: Dict[AdapterKey, Dict[str, float]] = {}
        self.closed = False
        self._seq = 0
        self._log = None
        if message_log is not None:
            path = Path(message_log)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._log = path.open('w')
        if concurrent:
            for worker in self.workers:
                worker.start()

    def __enter__(self) -> "OffloadHandle":
        return self

    def __exit__(self, *exc) -> None:
        if not self.closed:
            self.shutdown()

    def _record(self, message: Message) -> None:
        self.messages += 1
        logger.debug(f"{message.sender}: {message.kind} m={message.layer} k={message.user} t={message.iteration}")
        if self._log is not None:
            self._log.write(json.dumps(message.log_line()) + "\n")

    def _send(self, worker: OffloadWorker, kind: MessageKind, **kwargs) -> None:
        if self.closed:
            raise OffloadError("The offload runtime has been shut down.")
        self._seq += 1
        message = Message(kind, TRAINER, self._seq, **kwargs)
        self._record(message)
        worker.inbox.put(message)
        if not self.concurrent:
            worker.drain()

    def _receive(self, worker: OffloadWorker, raise_errors: bool = True) -> Message:
        try:
            message = worker.outbox.get(timeout=self.timeout) if self.concurrent else worker.outbox.get_nowait()
        except queue.Empty:
            raise OffloadTimeoutError(f"{worker.name} did not answer within {self.timeout} s.") from None
        self._record(message)
        if message.kind == MessageKind.ERROR and raise_errors:
            raise message.payload
        return message

    def _await_ack(
        self, worker: OffloadWorker, request: str, raise_errors: bool = True, skip_stale: bool = False
    ) -> List[Message]:
        """
        Collect a worker's replies up to its ACK of `request`.

        With `raise_errors` off, ERROR replies are returned with the others. With `skip_stale`,
        ACKs of other requests and ERROR replies left over from an earlier request are logged
        and dropped.
        """
        received = []
        while True:
            message = self._receive(worker, raise_errors=raise_errors and not skip_stale)
            if message.kind == MessageKind.ACK and message.payload.get('request') != request:
                acknowledged = message.payload.get('request')
                if skip_stale:
                    logger.debug(f"{worker.name}: dropping a stale '{acknowledged}' acknowledgement")
                    received = []
                    continue
                raise OffloadError(f"{worker.name} acknowledged '{acknowledged}', not '{request}'.")
            if message.kind == MessageKind.ERROR and skip_stale:
                logger.warning(f"{worker.name}: dropping an unread error reply: {message.payload}")
                continue
            received.append(message)
            if message.kind == MessageKind.ACK:
                return received

    def _assign(self, keys: Sequence[AdapterKey]) -> None:
        new_keys = sorted(key for key in keys if key not in self.owners)
        n_workers = len(self.workers)
        for index, key in enumerate(new_keys):
            if self.assignment == AssignmentPolicy.BLOCK.value:
                self.owners[key] = index * n_workers // len(new_keys)
            else:
                self.owners[key] = index % n_workers

    def owned_by(self, worker_id: int) -> List[AdapterKey]:
        return sorted(key for key, owner in self.owners.items() if owner == worker_id)

    def upload(self, adapters: Dict[AdapterKey, Adapter], capacity: int = 0) -> None:
        """
        Hand adapters to their workers; new keys are assigned by the handle's policy.

        Args:
            adapters (Dict[AdapterKey, Adapter]): Adapters by (m, k).
            capacity (int): Expected samples per buffer at a regular flush, 0 when unknown.
        """
        self._assign(list(adapters))
        for key in sorted(adapters):
            data = dumps_adapters({key: adapters[key]})
            worker = self.workers[self.owners[key]]
            self._send(
                worker,
                MessageKind.ADAPTER_UPLOAD,
                payload={'adapters': data, 'capacity': capacity},
                layer=key[0],
                user=key[1],
                nbytes=len(data),
            )
            self._await_ack(worker, 'upload')

    def dispatch(self, records: Sequence[AdaptationRecord]) -> None:
        """
        Send adaptation records to the workers owning their adapters.

        Raises:
            OffloadError: If a record belongs to an adapter that was never uploaded.
        """
        for record in records:
            key = (record.layer, record.user)
            if key not in self.owners:
                raise OffloadError(f"No worker owns adapter {key}; upload it first.")
            self._send(
                self.workers[self.owners[key]],
                MessageKind.ADAPTATION_DATA,
                payload=record,
                layer=record.layer,
                user=record.user,
                iteration=record.iteration,
                nbytes=record.nbytes,
            )
            self.dispatched += 1
            self.pending += 1

    def flush(self, iteration: int, partial: bool = False) -> Dict[AdapterKey, Adapter]:
        """
        Ask every worker to fit its buffered adapters and collect the uploads.

        Every worker's reply is read before an error is raised. A worker whose fit fails
        keeps its adapters, optimizer state and buffers unchanged.

        Args:
            iteration (int): Iteration t of the flush.
            partial (bool): The buffers may hold less than a full adaptation interval.

        Returns:
            Dict[AdapterKey, Adapter]: Freshly fitted adapters by (m, k).

        Raises:
            EmptyBufferError: If no records were dispatched since the last flush.
            OffloadTimeoutError: If a concurrent worker does not acknowledge in time.
            ColaError: The first error a worker replied with.
        """
        if self.pending == 0:
            raise EmptyBufferError(f"Flush at iteration {iteration} with no adaptation data buffered.")
        for worker in self.workers:
            self._send(worker, MessageKind.FLUSH_REQUEST, payload={'partial': partial}, iteration=iteration)
        updated: Dict[AdapterKey, Adapter] = {}
        self.last_flush = {}
        first_error = None
        for worker in self.workers:
            for message in self._await_ack(worker, 'flush', raise_errors=False):
                if message.kind == MessageKind.ERROR:
                    logger.error(f"{worker.name} failed at iteration {iteration}: {message.payload}")
                    first_error = first_error or message.payload
                elif message.kind == MessageKind.ADAPTER_UPLOAD:
                    updated.update(loads_adapters(message.payload['adapters']))
                elif message.kind == MessageKind.ACK:
                    self.last_flush.update(message.payload['fitted'])
        if first_error is not None:
            raise first_error
        self.pending = 0
        self.flushes += 1
        logger.debug(f"Flush at iteration {iteration} updated {len(updated)} adapters")
        return updated

    def shutdown(self) -> OffloadReport:
        """Stop every worker and account for all dispatched records."""
        per_worker = {}
        try:
            for worker in self.workers:
                self._send(worker, MessageKind.SHUTDOWN)
                (ack,) = self._await_ack(worker, 'shutdown', skip_stale=True)[-1:]
                per_worker[worker.worker_id] = {
                    'consumed': ack.payload['consumed'],
                    'buffered': ack.payload['buffered'],
                }
                if worker.thread is not None:
                    worker.thread.join(timeout=self.timeout)
        finally:
            self.closed = True
            if self._log is not None:
                self._log.close()
                self._log = None
        report = OffloadReport(
            dispatched=self.dispatched,
            consumed=sum(counts['consumed'] for counts in per_worker.values()),
            buffered=sum(counts['buffered'] for counts in per_worker.values()),
            flushes=self.flushes,
            messages=self.messages,
            per_worker=per_worker,
        )
        if not report.conserved:
            logger.warning(f"Offload record accounting is off: {report}")
        return report


def thread_cap() -> Optional[int]:
    """
    Worker cap from COLA_THREADS, read after loading a .env file.

    Raises:
        ConfigError: If the variable is set but not a positive integer.
    """
    load_dotenv()
    value = os.getenv('COLA_THREADS')
    if value is None or not value.strip():
        return None
    try:
        cap = int(value)
    except ValueError:
        raise ConfigError(f"COLA_THREADS must be a positive integer, got '{value}'.") from None
    if cap < 1:
        raise ConfigError(f"COLA_THREADS must be a positive integer, got '{value}'.")
    return cap


def spawn_offload(
    n_workers: int,
    assignment: str = AssignmentPolicy.ROUND_ROBIN.value,
    concurrent: bool = False,
    optimizer_spec: Optional[OptimizerSpec] = None,
    inner_steps: int = 1,
    timeout: float = 30.0,
    message_log=None,
) -> OffloadHandle:
    """
    Start the offload runtime.

    Args:
        n_workers (int): Number of simulated devices, capped by COLA_THREADS when set.
        assignment (str): 'round_robin' or 'block' placement of (m, k) adapters.
        concurrent (bool): Run every worker in its own thread.
        optimizer_spec (OptimizerSpec, optional): Optimizer each worker builds per adapter.
        inner_steps (int): Fit steps per flush.
        timeout (float): Seconds to wait for a concurrent worker's reply.
        message_log (optional): Path of a JSON-lines log of every message.

    Returns:
        OffloadHandle: The trainer's handle.

    Raises:
        ConfigError: If there are no workers or the policy is unknown.
    """
    if n_workers < 1:
        raise ConfigError(f"The offload runtime needs at least one worker, got {n_workers}.")
    if assignment not in get_enum_values(AssignmentPolicy):
        raise ConfigError(f"Unknown assignment policy '{assignment}'.")
    if inner_steps < 1:
        raise ConfigError(f"inner_steps must be at least 1, got {inner_steps}.")
    cap = thread_cap()
    if cap is not None and cap < n_workers:
        logger.info(f"COLA_THREADS caps the offload runtime at {cap} of {n_workers} workers.")
        n_workers = cap
    optimizer_spec = optimizer_spec or OptimizerSpec()
    workers = [OffloadWorker(worker_id, optimizer_spec, inner_steps) for worker_id in range(n_workers)]
    return OffloadHandle(
        workers, assignment=assignment, concurrent=concurrent, timeout=timeout, message_log=message_log
    )
