"""In-process pub/sub broker with MQTT topic-matching semantics.

Topics are ``/``-separated levels. Filters may use ``+`` (exactly one
level) and a trailing ``#`` (the remaining levels, including none, so
``a/#`` also matches ``a``). Filters starting with a wildcard do not
match topics whose first level starts with ``$``. Published topics must
be non-empty and wildcard-free.

The broker also speaks a line-delimited socket protocol (one UTF-8 line
per message, ``\\n``-terminated):

    client -> broker:  CONNECT <client-id>
                       SUB <qos> <filter>
                       PUB <qos> <topic> <json-payload>
                       ACK <msg-id>
    broker -> client:  OK <detail...> | ERR <reason>
                       MSG <msg-id> <qos> <topic> <json-payload>

qos 0 is at-most-once (single delivery); qos 1 is at-least-once (the
broker redelivers MSG until the subscriber ACKs the id). The effective
delivery qos is min(publish qos, subscribe qos).
"""

from __future__ import annotations

import json
import queue
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

QOS_AT_MOST_ONCE = 0
QOS_AT_LEAST_ONCE = 1


class TopicError(Exception):
    pass


@dataclass(frozen=True)
class Command:
    topic: str
    payload: dict
    qos: int = QOS_AT_MOST_ONCE

    def __post_init__(self):
        validate_topic(self.topic)
        if self.qos not in (QOS_AT_MOST_ONCE, QOS_AT_LEAST_ONCE):
            raise TopicError(f"unknown qos {self.qos}")


def validate_topic(topic: str) -> None:
    if not topic:
        raise TopicError("topic must be non-empty")
    if "+" in topic or "#" in topic:
        raise TopicError(f"wildcards forbidden in published topics: {topic!r}")


def validate_filter(filt: str) -> None:
    if not filt:
        raise TopicError("filter must be non-empty")
    levels = filt.split("/")
    for i, level in enumerate(levels):
        if "#" in level:
            if level != "#" or i != len(levels) - 1:
                raise TopicError(f"'#' must be the final, whole level: {filt!r}")
        elif "+" in level and level != "+":
            raise TopicError(f"'+' must occupy a whole level: {filt!r}")


def topic_matches(filt: str, topic: str) -> bool:
    """Does ``filt`` select ``topic``? Raises TopicError on a bad filter."""
    validate_filter(filt)
    f_levels = filt.split("/")
    t_levels = topic.split("/")
    if topic.startswith("$") and f_levels[0] in ("+", "#"):
        return False
    for i, level in enumerate(f_levels):
        if level == "#":
            return True
        if i >= len(t_levels):
            return False
        if level == "+":
            continue
        if level != t_levels[i]:
            return False
    return len(f_levels) == len(t_levels)


@dataclass
class Subscription:
    sub_id: int
    filter: str
    qos: int
    messages: "queue.Queue[tuple[int, str, dict]]" = field(default_factory=queue.Queue)
    _broker: "Broker | None" = None
    active: bool = True

    def ack(self, msg_id: int) -> None:
        if self._broker is not None:
            self._broker._ack(self.sub_id, msg_id)

    def get(self, timeout: float | None = None) -> tuple[int, str, dict]:
        return self.messages.get(timeout=timeout)

    def cancel(self) -> None:
        self.active = False


class Broker:
    """Topic-matched fan-out with optional at-least-once redelivery."""

    def __init__(self, redelivery_interval_s: float = 0.2):
        self._subs: dict[int, Subscription] = {}
        self._next_sub = 1
        self._next_msg = 1
        self._pending: dict[tuple[int, int], tuple[float, str, dict]] = {}
        self._lock = threading.Lock()
        self.redelivery_interval_s = redelivery_interval_s
        self._redelivery_thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.published = 0
        self.delivered = 0

    def subscribe(self, filt: str, qos: int = QOS_AT_MOST_ONCE) -> Subscription:
        validate_filter(filt)
        if qos not in (QOS_AT_MOST_ONCE, QOS_AT_LEAST_ONCE):
            raise TopicError(f"unknown qos {qos}")
        with self._lock:
            sub = Subscription(self._next_sub, filt, qos, _broker=self)
            self._subs[sub.sub_id] = sub
            self._next_sub += 1
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            self._subs.pop(sub.sub_id, None)
            for key in [k for k in self._pending if k[0] == sub.sub_id]:
                del self._pending[key]
        sub.cancel()

    def publish(self, command: Command) -> int:
        """Deliver to every matching subscription; returns the match count."""
        matched = 0
        with self._lock:
            self.published += 1
            subs = list(self._subs.values())
        for sub in subs:
            if not sub.active or not topic_matches(sub.filter, command.topic):
                continue
            matched += 1
            msg_id = self._allocate_msg_id()
            effective_qos = min(command.qos, sub.qos)
            if effective_qos == QOS_AT_LEAST_ONCE:
                with self._lock:
                    self._pending[(sub.sub_id, msg_id)] = (
                        time.monotonic(), command.topic, command.payload,
                    )
                self._ensure_redelivery_thread()
            sub.messages.put((msg_id, command.topic, command.payload))
            with self._lock:
                self.delivered += 1
        return matched

    def _allocate_msg_id(self) -> int:
        with self._lock:
            msg_id = self._next_msg
            self._next_msg += 1
        return msg_id

    def _ack(self, sub_id: int, msg_id: int) -> None:
        with self._lock:
            self._pending.pop((sub_id, msg_id), None)

    def _ensure_redelivery_thread(self) -> None:
        if self._redelivery_thread is None or not self._redelivery_thread.is_alive():
            self._redelivery_thread = threading.Thread(
                target=self._redelivery_loop, daemon=True, name="broker-redelivery"
            )
            self._redelivery_thread.start()

    def _redelivery_loop(self) -> None:
        while not self._stop.wait(self.redelivery_interval_s):
            with self._lock:
                due = [
                    (key, entry) for key, entry in self._pending.items()
                    if time.monotonic() - entry[0] >= self.redelivery_interval_s
                ]
            for (sub_id, msg_id), (_, topic, payload) in due:
                sub = self._subs.get(sub_id)
                if sub is None or not sub.active:
                    self._ack(sub_id, msg_id)
                    continue
                with self._lock:
                    if (sub_id, msg_id) in self._pending:
                        self._pending[(sub_id, msg_id)] = (
                            time.monotonic(), topic, payload,
                        )
                sub.messages.put((msg_id, topic, payload))

    def close(self) -> None:
        self._stop.set()


class _BrokerHandler(socketserver.StreamRequestHandler):
    def handle(self):
        broker: Broker = self.server.broker
        client_id = None
        subs: list[Subscription] = []
        write_lock = threading.Lock()
        pumps: list[threading.Thread] = []

        def send(line: str) -> None:
            with write_lock:
                try:
                    self.wfile.write((line + "\n").encode("utf-8"))
                    self.wfile.flush()
                except OSError:
                    pass

        def pump(sub: Subscription) -> None:
            while sub.active:
                try:
                    msg_id, topic, payload = sub.messages.get(timeout=0.2)
                except queue.Empty:
                    continue
                send(f"MSG {msg_id} {sub.qos} {topic} "
                     f"{json.dumps(payload, separators=(',', ':'))}")

        try:
            for raw in self.rfile:
                line = raw.decode("utf-8", errors="replace").strip()
                if not line:
                    continue
                verb, _, rest = line.partition(" ")
                verb = verb.upper()
                if verb == "CONNECT":
                    client_id = rest.strip() or "anonymous"
                    send(f"OK connected {client_id}")
                elif client_id is None:
                    send("ERR connect first")
                elif verb == "SUB":
                    try:
                        qos_s, _, filt = rest.partition(" ")
                        sub = broker.subscribe(filt.strip(), int(qos_s))
                    except (TopicError, ValueError) as exc:
                        send(f"ERR {exc}")
                        continue
                    subs.append(sub)
                    thread = threading.Thread(target=pump, args=(sub,), daemon=True)
                    thread.start()
                    pumps.append(thread)
                    send(f"OK sub {sub.sub_id}")
                elif verb == "PUB":
                    try:
                        qos_s, _, rest2 = rest.partition(" ")
                        topic, _, payload_s = rest2.partition(" ")
                        payload = json.loads(payload_s) if payload_s.strip() else {}
                        if not isinstance(payload, dict):
                            raise TopicError("payload must be a JSON object")
                        matched = broker.publish(
                            Command(topic, payload, int(qos_s))
                        )
                    except (TopicError, ValueError, json.JSONDecodeError) as exc:
                        send(f"ERR {exc}")
                        continue
                    send(f"OK pub {matched}")
                elif verb == "ACK":
                    try:
                        msg_id = int(rest.strip())
                    except ValueError:
                        send("ERR bad message id")
                        continue
                    for sub in subs:
                        sub.ack(msg_id)
                    send("OK ack")
                else:
                    send(f"ERR unknown verb {verb}")
        finally:
            for sub in subs:
                broker.unsubscribe(sub)


class BrokerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], broker: Broker | None = None):
        super().__init__(address, _BrokerHandler)
        self.broker = broker or Broker()

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True,
                                  name="broker-server")
        thread.start()
        return thread


class BrokerClient:
    """Minimal line-protocol client for tests and actuator-side tooling."""

    def __init__(self, address: tuple[str, int], client_id: str = "client",
                 timeout: float = 5.0):
        self._sock = socket.create_connection(address, timeout=timeout)
        self._fh = self._sock.makefile("rwb")
        self._inbox: "queue.Queue[str]" = queue.Queue()
        self._replies: "queue.Queue[str]" = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        reply = self.request(f"CONNECT {client_id}")
        if not reply.startswith("OK"):
            raise TopicError(f"connect failed: {reply}")

    def _read_loop(self) -> None:
        try:
            for raw in self._fh:
                line = raw.decode("utf-8").rstrip("\n")
                if line.startswith("MSG "):
                    self._inbox.put(line)
                else:
                    self._replies.put(line)
        except (OSError, ValueError):
            pass

    def request(self, line: str, timeout: float = 5.0) -> str:
        self._fh.write((line + "\n").encode("utf-8"))
        self._fh.flush()
        return self._replies.get(timeout=timeout)

    def subscribe(self, filt: str, qos: int = 0) -> str:
        return self.request(f"SUB {qos} {filt}")

    def publish(self, topic: str, payload: dict, qos: int = 0) -> str:
        return self.request(
            f"PUB {qos} {topic} {json.dumps(payload, separators=(',', ':'))}"
        )

    def ack(self, msg_id: int) -> str:
        return self.request(f"ACK {msg_id}")

    def next_message(self, timeout: float = 5.0) -> tuple[int, int, str, dict]:
        line = self._inbox.get(timeout=timeout)
        _, msg_id, qos, topic, payload = line.split(" ", 4)
        return int(msg_id), int(qos), topic, json.loads(payload)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
