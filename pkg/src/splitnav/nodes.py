"""Drone-side client, edge-side server, and the simulated link between them.

The tail server owns the branch tails: it receives quantized observations,
finishes the forward pass, min-pools the depth map, and replies with the
pooled grid.  The head client renders and quantizes locally, so an episode
driven through ``RemoteDepthSource`` touches exactly the same arithmetic as
the in-process path and produces bit-identical features.

Byte accounting is split deliberately: navigation metrics count only the
split-layer payload (the uint8 codes), while ``SessionStats`` tracks full
wire traffic including the 11-byte frame headers.
"""
from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import wire
from . import world as W
from .errors import ConfigurationError, WireError
from .policy import EpisodeResult, EvalSummary, run_episode, summarize

log = logging.getLogger(__name__)


@dataclass
class SessionStats:
    """Client-side counters; wire bytes include frame headers."""
    frames_sent: int = 0
    frames_received: int = 0
    wire_bytes_sent: int = 0
    wire_bytes_received: int = 0
    observation_payload_bytes: int = 0
    reply_payload_bytes: int = 0
    link_seconds: float = 0.0


@dataclass
class ChannelModel:
    """First-order link model: fixed latency plus serialisation delay.

    With ``realtime`` set the delay is actually slept, otherwise it only
    accrues into ``SessionStats.link_seconds``.
    """
    bytes_per_second: float = 1e6
    latency_s: float = 0.0
    realtime: bool = False

    def delay(self, nbytes: int) -> float:
        if self.bytes_per_second <= 0:
            raise ConfigurationError("link rate must be positive")
        d = self.latency_s + nbytes / self.bytes_per_second
        if self.realtime and d > 0:
            time.sleep(d)
        return d


# ---------------------------------------------------------------------------
# server


class TailServer:
    """Serves branch tails over a socket, one client at a time.

    An unknown branch id earns an error frame and the connection survives;
    a malformed frame earns an error frame and the connection closes.
    """

    def __init__(self, branches, host: str = "127.0.0.1", port: int = 0):
        if not branches:
            raise ConfigurationError("tail server needs at least one branch")
        self.branches = {b.branch_id: b for b in branches}
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._active: set[socket.socket] = set()
        self._lock = threading.Lock()

    @property
    def menu(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted((bid, b.payload_bytes) for bid, b in self.branches.items()))

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "TailServer":
        self._sock.settimeout(0.2)
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._lock:
            for conn in list(self._active):
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self._sock.close()

    def __enter__(self) -> "TailServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            log.info("tail: connection from %s:%d", *peer[:2])
            with self._lock:
                self._active.add(conn)
            try:
                self.serve_connection(conn)
            except Exception:
                log.exception("tail: connection handler failed")
            finally:
                with self._lock:
                    self._active.discard(conn)
                conn.close()

    # -- protocol -----------------------------------------------------------

    def serve_connection(self, conn: socket.socket) -> wire.Stats:
        """Handle one client until BYE or disconnect; returns the session stats."""
        fh = conn.makefile("rwb")
        pool_hw: tuple[int, int] | None = None
        frames_in = frames_out = obs_bytes = reply_bytes = 0
        try:
            while True:
                try:
                    msg, _ = wire.read_frame_sized(fh, eof_ok=True)
                except WireError as exc:
                    log.warning("tail: malformed frame: %s", exc)
                    try:
                        wire.write_frame(fh, wire.Error(f"malformed frame: {exc}"))
                    except (OSError, WireError):
                        pass
                    break
                if msg is None:
                    log.info("tail: client disconnected")
                    break
                frames_in += 1
                if isinstance(msg, wire.Hello):
                    pool_hw = (msg.pool_h, msg.pool_w)
                    wire.write_frame(fh, wire.Hello(*pool_hw, self.menu))
                    frames_out += 1
                elif isinstance(msg, wire.Observation):
                    if pool_hw is None:
                        wire.write_frame(fh, wire.Error("observation before hello"))
                        frames_out += 1
                        break
                    obs_bytes += msg.tensor.nbytes
                    reply = self._infer(msg, pool_hw)
                    frames_out += 1
                    if isinstance(reply, wire.DepthReply):
                        reply_bytes += 4 * reply.pooled.size
                    wire.write_frame(fh, reply)
                elif isinstance(msg, wire.Bye):
                    stats = wire.Stats(frames_in, obs_bytes, frames_out + 1, reply_bytes)
                    wire.write_frame(fh, stats)
                    return stats
                else:
                    wire.write_frame(fh, wire.Error(
                        f"unexpected {type(msg).__name__} frame"))
                    frames_out += 1
                    break
        finally:
            try:
                fh.close()
            except OSError:
                pass
        return wire.Stats(frames_in, obs_bytes, frames_out, reply_bytes)

    def _infer(self, msg: wire.Observation, pool_hw: tuple[int, int]) -> wire.Message:
        branch = self.branches.get(msg.branch_id)
        if branch is None:
            return wire.Error(f"unknown branch {msg.branch_id}")
        try:
            with T.no_grad():
                depth = branch.model.tail_forward(msg.tensor).data
            pooled = T.min_pool2d(depth, *pool_hw).data
        except Exception as exc:
            return wire.Error(f"branch {msg.branch_id} failed: {exc}")
        return wire.DepthReply(msg.branch_id, pooled)


# ---------------------------------------------------------------------------
# client


class HeadClient:
    """Drone-side connection to a tail server."""

    def __init__(self, host: str, port: int, pool_hw: tuple[int, int],
                 channel: ChannelModel | None = None, timeout_s: float = 30.0):
        self.pool_hw = pool_hw
        self.channel = channel
        self.stats = SessionStats()
        self.menu: dict[int, int] = {}
        self._sock = socket.create_connection((host, port), timeout=timeout_s)
        self._fh = self._sock.makefile("rwb")
        reply = self._exchange(wire.Hello(*pool_hw))
        if not isinstance(reply, wire.Hello):
            raise WireError(f"expected hello ack, got {type(reply).__name__}")
        self.menu = dict(reply.menu)

    def _exchange(self, msg: wire.Message) -> wire.Message:
        try:
            sent = wire.write_frame(self._fh, msg)
            self.stats.frames_sent += 1
            self.stats.wire_bytes_sent += sent
            if self.channel is not None:
                self.stats.link_seconds += self.channel.delay(sent)
            reply, received = wire.read_frame_sized(self._fh)
        except OSError as exc:
            raise WireError(f"link failed: {exc}") from exc
        self.stats.frames_received += 1
        self.stats.wire_bytes_received += received
        if self.channel is not None:
            self.stats.link_seconds += self.channel.delay(received)
        return reply

    def infer_pooled(self, branch, rgb: np.ndarray) -> np.ndarray:
        """Quantize at the branch's split layer, round-trip, return the pooled grid."""
        with T.no_grad():
            qt = branch.model.head_forward(rgb)
        self.stats.observation_payload_bytes += qt.nbytes
        reply = self._exchange(wire.Observation(branch.branch_id, qt))
        if isinstance(reply, wire.Error):
            raise WireError(f"server rejected observation: {reply.message}")
        if not isinstance(reply, wire.DepthReply):
            raise WireError(f"expected depth reply, got {type(reply).__name__}")
        if reply.branch_id != branch.branch_id:
            raise WireError(f"reply for branch {reply.branch_id}, "
                            f"sent {branch.branch_id}")
        self.stats.reply_payload_bytes += 4 * reply.pooled.size
        return reply.pooled

    def close(self) -> wire.Stats | None:
        """Say goodbye; returns the server's stats when the exchange succeeds."""
        server_stats = None
        try:
            reply = self._exchange(wire.Bye())
            if isinstance(reply, wire.Stats):
                server_stats = reply
        except (WireError, OSError):
            pass
        finally:
            try:
                self._fh.close()
            except OSError:
                pass
            self._sock.close()
        return server_stats

    def __enter__(self) -> "HeadClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class RemoteDepthSource:
    """Menu-shaped depth source that defers tails to a ``HeadClient``.

    ``depth`` returns the server's pooled grid; pooling it again locally is
    the identity, so features match the in-process path bit for bit.
    """

    def __init__(self, client: HeadClient, branches, cam: W.CameraSpec):
        self.client = client
        self.cam = cam
        self.sources = sorted(branches, key=lambda b: b.branch_id)
        for b in self.sources:
            if b.branch_id not in client.menu:
                raise WireError(f"server does not serve branch {b.branch_id}")
            if client.menu[b.branch_id] != b.payload_bytes:
                raise WireError(f"branch {b.branch_id} payload mismatch: local "
                                f"{b.payload_bytes}, server {client.menu[b.branch_id]}")
        self.current = len(self.sources) - 1

    @property
    def menu_size(self) -> int:
        return len(self.sources)

    def select(self, index: int) -> None:
        if not 0 <= index < len(self.sources):
            raise ConfigurationError(f"branch index {index} outside menu")
        self.current = index

    @property
    def payload_bytes(self) -> int:
        return self.sources[self.current].payload_bytes

    @property
    def branch_id(self) -> int:
        return self.sources[self.current].branch_id

    def depth(self, world: W.World, state: W.DroneState):
        branch = self.sources[self.current]
        rgb = W.render_rgb(world, state.position, state.yaw, self.cam)
        pooled = self.client.infer_pooled(branch, rgb)
        return pooled, branch.payload_bytes, branch.branch_id


def evaluate_remote(env, actor_fn, episodes) -> tuple[list[EpisodeResult], EvalSummary]:
    """Like ``evaluate_policy`` but a dropped link marks the episode, not the run."""
    results: list[EpisodeResult] = []
    for ep in episodes:
        try:
            results.append(run_episode(env, actor_fn, ep))
        except WireError as exc:
            log.warning("remote episode failed: %s", exc)
            results.append(EpisodeResult(
                success=False, collision=False, timeout=False, steps=0,
                initial_distance_m=ep[1].initial_distance, bytes_sent=0,
                mean_c=float("nan"), total_reward=0.0, infra_failure=True))
    return results, summarize(results)
