import queue
import random
import re
import time

import pytest

from gridmesh.broker import (
    Broker,
    BrokerClient,
    BrokerServer,
    Command,
    TopicError,
    topic_matches,
    validate_filter,
    validate_topic,
)


def reference_matches(filt: str, topic: str) -> bool:
    """Independent matcher: translate the filter to a regex.

    ``+`` becomes one ``[^/]*`` level; a trailing ``#`` becomes an optional
    ``(/.*)?`` so the parent level itself also matches.
    """
    if topic.startswith("$") and filt[:1] in ("+", "#"):
        return False
    parts = []
    pattern = None
    levels = filt.split("/")
    for i, level in enumerate(levels):
        if level == "#":
            pattern = ".*" if i == 0 else "/".join(parts) + "(/.*)?"
            break
        parts.append("[^/]*" if level == "+" else re.escape(level))
    if pattern is None:
        pattern = "/".join(parts)
    return re.fullmatch(pattern, topic, re.S) is not None


def random_topic(rng: random.Random) -> str:
    n = rng.randint(1, 4)
    words = ["grid", "area7", "area8", "der", "disconnect", "a", "b", ""]
    return "/".join(rng.choice(words) for _ in range(n)) or "x"


def random_filter(rng: random.Random) -> str:
    n = rng.randint(1, 4)
    words = ["grid", "area7", "der", "+", "a", ""]
    levels = [rng.choice(words) for _ in range(n)]
    if rng.random() < 0.35:
        levels.append("#")
    return "/".join(levels) or "+"


class TestMatching:
    def test_multi_level_wildcard(self):
        assert topic_matches("grid/area7/#", "grid/area7/der/disconnect")
        assert topic_matches("grid/area7/#", "grid/area7")  # parent rule
        assert not topic_matches("grid/area8/#", "grid/area7/der/disconnect")

    def test_single_level_wildcard(self):
        assert topic_matches("grid/+/der/disconnect", "grid/area7/der/disconnect")
        assert not topic_matches("grid/+", "grid/a/b")
        assert not topic_matches("sport/+", "sport")

    def test_exact_match(self):
        assert topic_matches("a/b/c", "a/b/c")
        assert not topic_matches("a/b/c", "a/b")
        assert not topic_matches("a/b", "a/b/c")

    def test_hash_alone_matches_everything_non_dollar(self):
        assert topic_matches("#", "a")
        assert topic_matches("#", "a/b/c")
        assert not topic_matches("#", "$SYS/stats")

    def test_empty_levels_are_real_levels(self):
        assert topic_matches("a//c", "a//c")
        assert topic_matches("a/+/c", "a//c")
        assert not topic_matches("a//c", "a/b/c")

    def test_invalid_filters_rejected(self):
        for bad in ("", "a/#/b", "a/b#", "a/+b", "#extra"):
            with pytest.raises(TopicError):
                validate_filter(bad)

    def test_published_topic_validation(self):
        with pytest.raises(TopicError):
            validate_topic("grid/+/x")
        with pytest.raises(TopicError):
            validate_topic("grid/#")
        with pytest.raises(TopicError):
            validate_topic("")

    def test_randomized_against_reference_matcher(self):
        rng = random.Random(4321)
        mismatches = 0
        for _ in range(10_000):
            filt = random_filter(rng)
            topic = random_topic(rng)
            try:
                validate_filter(filt)
            except TopicError:
                continue
            if topic_matches(filt, topic) != reference_matches(filt, topic):
                mismatches += 1
        assert mismatches == 0


class TestBrokerCore:
    def test_publish_delivers_to_matching_subscribers(self):
        broker = Broker()
        hit = broker.subscribe("grid/area7/#")
        miss = broker.subscribe("grid/area8/#")
        plus = broker.subscribe("grid/+/der/disconnect")
        n = broker.publish(Command("grid/area7/der/disconnect",
                                   {"action": "disconnect"}))
        assert n == 2
        assert hit.get(timeout=1)[1] == "grid/area7/der/disconnect"
        assert plus.get(timeout=1)[2] == {"action": "disconnect"}
        assert miss.messages.empty()

    def test_publish_without_subscribers_is_noop(self):
        broker = Broker()
        assert broker.publish(Command("lone/topic", {})) == 0

    def test_at_most_once_delivers_exactly_once(self):
        broker = Broker(redelivery_interval_s=0.05)
        sub = broker.subscribe("t", qos=0)
        broker.publish(Command("t", {"k": 1}, qos=0))
        sub.get(timeout=1)
        time.sleep(0.2)
        assert sub.messages.empty()
        broker.close()

    def test_at_least_once_redelivers_until_ack(self):
        broker = Broker(redelivery_interval_s=0.05)
        sub = broker.subscribe("t", qos=1)
        broker.publish(Command("t", {"k": 1}, qos=1))
        msg_id, topic, payload = sub.get(timeout=1)
        redelivered_id, _, _ = sub.get(timeout=1)  # not acked yet
        assert redelivered_id == msg_id
        sub.ack(msg_id)
        time.sleep(0.25)
        while not sub.messages.empty():
            sub.messages.get_nowait()
        time.sleep(0.25)
        assert sub.messages.empty()  # ack stopped the redelivery
        broker.close()

    def test_effective_qos_is_minimum(self):
        broker = Broker(redelivery_interval_s=0.05)
        sub = broker.subscribe("t", qos=0)
        broker.publish(Command("t", {}, qos=1))
        sub.get(timeout=1)
        time.sleep(0.2)
        assert sub.messages.empty()  # qos0 subscription: no redelivery
        broker.close()

    def test_unsubscribe_stops_delivery(self):
        broker = Broker()
        sub = broker.subscribe("t")
        broker.unsubscribe(sub)
        broker.publish(Command("t", {}))
        assert sub.messages.empty()


class TestBrokerSocketProtocol:
    @pytest.fixture()
    def server(self):
        server = BrokerServer(("127.0.0.1", 0))
        server.serve_in_background()
        yield server
        server.shutdown()
        server.server_close()

    def test_connect_sub_pub_msg_ack_flow(self, server):
        sub_client = BrokerClient(server.server_address, "subscriber")
        pub_client = BrokerClient(server.server_address, "publisher")
        assert sub_client.subscribe("grid/#", qos=1).startswith("OK sub")
        reply = pub_client.publish("grid/area7/der/disconnect",
                                   {"action": "disconnect"}, qos=1)
        assert reply == "OK pub 1"
        msg_id, qos, topic, payload = sub_client.next_message()
        assert topic == "grid/area7/der/disconnect"
        assert payload == {"action": "disconnect"}
        assert qos == 1
        assert sub_client.ack(msg_id) == "OK ack"
        sub_client.close()
        pub_client.close()

    def test_protocol_errors_reported_not_fatal(self, server):
        client = BrokerClient(server.server_address, "c")
        assert client.request("SUB 0 bad/#/filter").startswith("ERR")
        assert client.request("PUB 0 bad/+wildcard {}").startswith("ERR")
        assert client.request("NONSENSE").startswith("ERR")
        assert client.subscribe("ok/#").startswith("OK")
        client.close()

    def test_connect_required_first(self, server):
        import socket
        with socket.create_connection(server.server_address) as sock:
            fh = sock.makefile("rwb")
            fh.write(b"SUB 0 a/#\n")
            fh.flush()
            assert fh.readline().decode().startswith("ERR connect first")
