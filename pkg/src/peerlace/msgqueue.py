"""Named FIFO queues with SQS-like peek/delete semantics.

``receive`` never removes anything: a message stays visible until some
caller deletes it or the queue is purged. There is no visibility timeout
and no redelivery.
"""

from __future__ import annotations

import itertools
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable


class MessageNotFound(KeyError):
    pass


@dataclass(frozen=True)
class QueueMessage:
    id: str
    sender_rank: int
    payload: bytes
    enqueue_time: int


class Queue:
    def __init__(self, name: str, clock: Callable[[], int] = lambda: 0):
        self.name = name
        self._clock = clock
        self._messages: OrderedDict[str, QueueMessage] = OrderedDict()
        self._ids = itertools.count()
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"Queue({self.name!r}, count={self.count()})"

    def send(self, sender_rank: int, payload: bytes) -> str:
        with self._lock:
            msg_id = f"{self.name}-{next(self._ids)}"
            self._messages[msg_id] = QueueMessage(msg_id, sender_rank, bytes(payload), self._clock())
            return msg_id

    def receive(self, max_messages: int = 10) -> list[QueueMessage]:
        if max_messages < 1:
            raise ValueError("max_messages must be >= 1")
        with self._lock:
            return list(itertools.islice(self._messages.values(), max_messages))

    def delete(self, msg_id: str) -> None:
        with self._lock:
            try:
                del self._messages[msg_id]
            except KeyError:
                raise MessageNotFound(f"no message {msg_id!r} in queue {self.name!r}") from None

    def count(self) -> int:
        with self._lock:
            return len(self._messages)

    def purge(self) -> None:
        with self._lock:
            self._messages.clear()

    def drain(self) -> list[QueueMessage]:
        """Receive and delete everything currently queued, oldest first."""
        with self._lock:
            messages = list(self._messages.values())
            self._messages.clear()
            return messages


class QueueService:
    """Registry of named queues sharing one logical clock."""

    def __init__(self, clock: Callable[[], int] = lambda: 0):
        self._clock = clock
        self._queues: dict[str, Queue] = {}
        self._lock = threading.Lock()

    def queue(self, name: str) -> Queue:
        with self._lock:
            if name not in self._queues:
                self._queues[name] = Queue(name, self._clock)
            return self._queues[name]

    __getitem__ = queue

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._queues)
