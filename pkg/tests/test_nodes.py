"""Head/tail loopback: equivalence with in-process inference, error paths."""
import socket

import numpy as np
import pytest

from splitnav import policy as P
from splitnav import tensor as T
from splitnav import wire
from splitnav import world as W
from splitnav.depthnet import StudentSpec, TeacherDepthNet, build_branches, build_student, desk_geometry
from splitnav.errors import WireError
from splitnav.nodes import ChannelModel, HeadClient, RemoteDepthSource, SessionStats, TailServer, evaluate_remote
from splitnav.rng import substream

SEED = 550123
CAM = W.CameraSpec(36, 64)
POOL = (6, 8)


@pytest.fixture(scope="module")
def branches():
    teacher = TeacherDepthNet(desk_geometry(), rng=substream(SEED, "init", 0))
    students = [build_student(teacher, StudentSpec("bottleneck", 12, variant="v1"),
                              rng=substream(SEED, "init", 1)),
                build_student(teacher, StudentSpec("baseline", 32),
                              rng=substream(SEED, "init", 2))]
    return build_branches(teacher, students)


@pytest.fixture()
def server(branches):
    with TailServer(branches) as srv:
        yield srv


def empty_episode(i):
    schedule = W.CurriculumSchedule((W.CurriculumLevel((6.0, 14.0), (0, 0)),))
    return W.sample_episode(W.WorldConfig(), schedule, 0,
                            substream(SEED, "world", i), yaw_noise=0.0)


def pilot(feature):
    import math
    sv = feature[-4:]
    dx, dy, dz = (float(v) * 100.0 for v in sv[:3])
    rel = float(sv[3]) * math.pi
    dist_h = math.hypot(dx, dy)
    return np.clip(np.array([math.cos(rel) * dist_h / 2, math.sin(rel) * dist_h / 2,
                             dz / 2, rel / (math.pi / 8)], dtype=np.float32), -1, 1)


def test_hello_reports_menu(server, branches):
    client = HeadClient(server.host, server.port, POOL)
    try:
        assert client.menu == {b.branch_id: b.payload_bytes for b in branches}
    finally:
        client.close()


def test_remote_pooled_matches_local(server, branches):
    world, spec = empty_episode(0)
    state = W.DroneState(np.asarray(spec.start), spec.start_yaw)
    client = HeadClient(server.host, server.port, POOL)
    try:
        for branch in branches:
            rgb = W.render_rgb(world, state.position, state.yaw, CAM)
            remote = client.infer_pooled(branch, rgb)
            local = T.min_pool2d(branch.infer_depth(rgb), *POOL).data
            np.testing.assert_array_equal(remote, local)
    finally:
        client.close()


def test_remote_episode_bitwise_equal(server, branches):
    world, spec = empty_episode(1)
    local_env = P.NavEnv(CAM, P.BranchDepthSource(branches[0], CAM), P.NavEnvConfig())
    local = P.run_episode(local_env, pilot, (world, spec))

    client = HeadClient(server.host, server.port, POOL)
    try:
        source = RemoteDepthSource(client, branches, CAM)
        source.select(0)
        remote_env = P.NavEnv(CAM, source, P.NavEnvConfig())
        remote = P.run_episode(remote_env, pilot, (world, spec))
    finally:
        client.close()
    assert remote.positions == local.positions
    assert remote.steps == local.steps
    assert remote.success == local.success
    assert remote.bytes_sent == local.bytes_sent


def test_session_stats_account_headers(server, branches):
    client = HeadClient(server.host, server.port, POOL)
    rgb = np.zeros((3, 36, 64), dtype=np.float32)
    n = 3
    for _ in range(n):
        client.infer_pooled(branches[0], rgb)
    stats = client.stats
    server_stats = client.close()
    # hello + n observations + bye, each 11-byte header plus payload
    assert stats.frames_sent == n + 2
    assert stats.observation_payload_bytes == n * branches[0].payload_bytes
    assert stats.wire_bytes_sent > stats.observation_payload_bytes + 11 * (n + 2) - 1
    assert server_stats is not None
    assert server_stats.observation_payload_bytes == stats.observation_payload_bytes
    assert server_stats.frames_received == n + 2
    assert stats.reply_payload_bytes == n * 4 * POOL[0] * POOL[1]
    assert server_stats.reply_payload_bytes == stats.reply_payload_bytes


def test_unknown_branch_keeps_connection(server, branches):
    client = HeadClient(server.host, server.port, POOL)
    try:
        rgb = np.zeros((3, 36, 64), dtype=np.float32)

        class Impostor:
            branch_id = 99
            payload_bytes = branches[0].payload_bytes
            model = branches[0].model

        with pytest.raises(WireError, match="unknown branch"):
            client.infer_pooled(Impostor(), rgb)
        # the same connection still serves valid requests afterwards
        pooled = client.infer_pooled(branches[0], rgb)
        assert pooled.shape == POOL
    finally:
        client.close()


def test_malformed_frame_closes_connection(server):
    sock = socket.create_connection((server.host, server.port), timeout=10)
    fh = sock.makefile("rwb")
    wire.write_frame(fh, wire.Hello(*POOL))
    assert isinstance(wire.read_frame(fh), wire.Hello)
    fh.write(b"\x00" * 11)
    fh.flush()
    reply = wire.read_frame(fh)
    assert isinstance(reply, wire.Error)
    assert "malformed" in reply.message
    # server closed its side after the error frame
    assert fh.read(1) == b""
    sock.close()


def test_observation_before_hello_is_fatal(server, branches):
    from splitnav.quantize import quantize
    sock = socket.create_connection((server.host, server.port), timeout=10)
    fh = sock.makefile("rwb")
    qt = quantize(np.ones((1, 2, 2), dtype=np.float32))
    wire.write_frame(fh, wire.Observation(branches[0].branch_id, qt))
    reply = wire.read_frame(fh)
    assert isinstance(reply, wire.Error)
    assert "hello" in reply.message
    assert fh.read(1) == b""
    sock.close()


def test_channel_model_accrues_delay():
    ch = ChannelModel(bytes_per_second=1000.0, latency_s=0.01)
    assert ch.delay(500) == pytest.approx(0.51)
    stats = SessionStats()
    stats.link_seconds += ch.delay(1000)
    assert stats.link_seconds == pytest.approx(1.01)


def test_evaluate_remote_marks_dropped_link(branches):
    # the link dies right after hello: the first observation hits a dead socket
    srv = TailServer(branches)
    srv.start()
    client = HeadClient(srv.host, srv.port, POOL)
    source = RemoteDepthSource(client, branches, CAM)
    client._sock.shutdown(socket.SHUT_RDWR)

    env = P.NavEnv(CAM, source, P.NavEnvConfig())
    episodes = [empty_episode(2)]
    results, summary = evaluate_remote(env, pilot, episodes)
    client.close()
    srv.stop()
    assert summary.infra_failures == 1
    assert results[0].infra_failure
    assert summary.episodes == 0
