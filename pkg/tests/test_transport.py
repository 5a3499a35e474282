import numpy as np
import pytest

from vflbayes.messages import (
    SHARED_KEY,
    TAGS,
    Message,
    MessageLog,
    WireError,
    decode,
    encode,
    frame_size,
)
from vflbayes.transport import InProcessTransport, ShuffledTransport, SocketTransport, make_transport


def _msg(rng, tag="CrossGrad", n=5):
    parts = {1: rng.normal(size=n), 3: rng.normal(size=n), SHARED_KEY: rng.normal(size=2)}
    return Message(tag, 12, 345, 2, parts)


def test_round_trip_every_tag():
    rng = np.random.default_rng(0)
    for tag in TAGS:
        m = _msg(rng, tag)
        back = decode(encode(m))
        assert (back.tag, back.run_id, back.iteration, back.actor) == (tag, 12, 345, 2)
        assert back.parts.keys() == m.parts.keys()
        for k in m.parts:
            np.testing.assert_array_equal(back.parts[k], m.parts[k])


def test_special_values_survive_bitwise():
    vals = np.array([0.0, -0.0, np.inf, -np.inf, 5e-324, np.nextafter(1.0, 2.0)])
    back = decode(encode(Message("AuxUpdate", 0, 0, 1, {1: vals}))).parts[1]
    assert back.tobytes() == vals.tobytes()


def test_frame_layout_by_hand():
    m = Message("AuxUpdate", 1, 2, 3, {3: [1.0]})
    frame = encode(m)
    # 4 length + 25 header + 8 directory + 8 payload
    assert len(frame) == 45 == frame_size(m)
    assert frame[:4] == (41).to_bytes(4, "big")
    assert frame[4] == TAGS["AuxUpdate"]
    assert frame[5:13] == (1).to_bytes(8, "big")
    assert frame[13:21] == (2).to_bytes(8, "big")
    assert frame[21:25] == (3).to_bytes(4, "big")
    assert frame[25:29] == (1).to_bytes(4, "big")
    assert frame[29:37] == (3).to_bytes(4, "big") + (1).to_bytes(4, "big")
    assert frame[37:] == bytes.fromhex("3ff0000000000000")


def test_empty_message():
    back = decode(encode(Message("Control", 0, 0, 0)))
    assert back.parts == {} and back.payload_values().size == 0


def test_malformed_frames_rejected():
    good = encode(Message("AuxUpdate", 0, 1, 1, {1: [1.0, 2.0]}))
    with pytest.raises(WireError):
        decode(good[:-1])
    with pytest.raises(WireError):
        decode(good[:10])
    bad_tag = bytearray(good)
    bad_tag[4] = 99
    with pytest.raises(WireError):
        decode(bytes(bad_tag))
    with pytest.raises(WireError):
        Message("Gossip", 0, 0, 0)


def test_in_process_copies_payload():
    t = InProcessTransport()
    payload = np.ones(3)
    t.send(1, 0, Message("AuxUpdate", 0, 1, 1, {1: payload}))
    payload[:] = 7.0
    (got,) = t.receive(0)
    np.testing.assert_array_equal(got.parts[1], 1.0)
    assert t.receive(0) == []
    assert t.n_messages == 1 and t.by_iteration[1] == 1


def test_shuffled_keeps_per_sender_order():
    t = ShuffledTransport(seed=3)
    for k in range(4):
        for src in (1, 2, 3):
            t.send(src, 0, Message("AuxUpdate", 0, k, src, {src: [float(k)]}))
    got = t.receive(0)
    assert len(got) == 12
    for src in (1, 2, 3):
        assert [m.iteration for m in got if m.actor == src] == [0, 1, 2, 3]


def test_shuffled_actually_interleaves():
    orders = set()
    for seed in range(10):
        t = ShuffledTransport(seed)
        for src in (1, 2, 3, 4):
            t.send(src, 0, Message("AuxUpdate", 0, 1, src, {src: [0.0]}))
        orders.add(tuple(m.actor for m in t.receive(0)))
    assert len(orders) > 1


def test_socket_transport_large_and_many():
    rng = np.random.default_rng(1)
    t = SocketTransport()
    sent = [Message("AuxBroadcast", 0, i, 1, {1: rng.normal(size=20000)}) for i in range(8)]
    for m in sent:
        t.send(0, 1, m)
    got = t.receive(1)
    t.close()
    assert len(got) == 8
    for a, b in zip(sent, got):
        np.testing.assert_array_equal(a.parts[1], b.parts[1])
    assert t.n_bytes == sum(frame_size(m) for m in sent)


def test_message_log(tmp_path):
    import json

    path = tmp_path / "log.jsonl"
    t = make_transport("in-process", log=MessageLog(str(path)))
    t.send(1, 0, Message("AuxUpdate", 0, 1, 1, {1: [0.5]}))
    t.close()
    (rec,) = [json.loads(line) for line in path.read_text().splitlines()]
    assert rec["src"] == 1 and rec["dst"] == 0 and rec["parts"] == {"1": [0.5]}
    with pytest.raises(ValueError):
        make_transport("carrier-pigeon")
