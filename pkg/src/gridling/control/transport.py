"""TCP transport for the controller, node agents and command-line clients.

One line per message over a plain stream socket.  Every inbound line is handed
to the controller under a single lock, so the scheduler sees one ordered
stream of events no matter how many connections are open.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time as _time
from typing import Optional, Tuple

from gridling.control import protocol
from gridling.control.agent import Agent
from gridling.control.controller import Controller
from gridling.errors import GridlingError, ProtocolError

log = logging.getLogger(__name__)

MAX_LINE = 16 * 1024 * 1024


class ControllerUnreachable(GridlingError):
    code = "ControllerUnreachable"


def parse_address(addr: str) -> Tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"controller address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: ControllerServer = self.server.owner  # type: ignore[attr-defined]
        write_lock = threading.Lock()
        node_name = None

        def send(line: str) -> None:
            with write_lock:
                try:
                    self.wfile.write((line + "\n").encode("utf-8"))
                    self.wfile.flush()
                except OSError:
                    pass

        try:
            for raw in self.rfile:
                if len(raw) > MAX_LINE:
                    break
                line = raw.decode("utf-8", errors="replace").rstrip("\r\n")
                if not line:
                    continue
                with server.lock:
                    reply = server.controller.handle_line(line)
                    if node_name is None:
                        node_name = self._maybe_register(server.controller, line, send)
                if reply is not None:
                    send(reply)
        finally:
            if node_name is not None:
                with server.lock:
                    server.controller.disconnect(node_name, send)

    @staticmethod
    def _maybe_register(controller: Controller, line: str, send) -> Optional[str]:
        try:
            msg = protocol.decode(line)
        except ProtocolError:
            return None
        if msg.kind != "HEARTBEAT":
            return None
        try:
            controller.authenticate(line)
            controller.connect(msg["node"], send)
        except GridlingError:
            return None
        return msg["node"]


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class ControllerServer:
    """Runs a Controller behind a TCP listener plus a periodic scheduling tick."""

    def __init__(self, controller: Controller, address: str = "127.0.0.1:0", tick: float = 0.5):
        self.controller = controller
        self.lock = threading.RLock()
        self.tick = tick
        self._server = _TCPServer(parse_address(address), _Handler)
        self._server.owner = self
        self._stop = threading.Event()
        self._threads = []

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def _ticker(self):
        while not self._stop.wait(self.tick):
            with self.lock:
                try:
                    self.controller.step()
                except Exception:  # keep the daemon alive; the error is logged
                    log.exception("scheduler step failed")

    def start(self) -> "ControllerServer":
        for target in (self._server.serve_forever, self._ticker):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(1.0):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()


class AgentClient:
    """Connects an Agent to the controller, reconnecting if the link drops."""

    def __init__(self, agent: Agent, address: str, heartbeat_interval: float = 10.0):
        self.agent = agent
        self.address = address
        self.heartbeat_interval = heartbeat_interval
        self._sock: Optional[socket.socket] = None
        self._send_lock = threading.Lock()
        self._stop = threading.Event()
        agent.send = self._send

    def _send(self, line: str) -> None:
        with self._send_lock:
            if self._sock is None:
                log.warning("not connected; dropping %s", line.split("|", 1)[0])
                return
            try:
                self._sock.sendall((line + "\n").encode("utf-8"))
            except OSError:
                log.warning("send failed; dropping %s", line.split("|", 1)[0])

    def _heartbeats(self) -> None:
        while not self._stop.is_set():
            # a fresh connection sends its own heartbeat
            if self._sock is not None:
                self.agent.heartbeat()
            self._stop.wait(self.heartbeat_interval)

    def run(self) -> None:
        threading.Thread(target=self._heartbeats, daemon=True).start()
        while not self._stop.is_set():
            try:
                sock = socket.create_connection(parse_address(self.address), timeout=5)
            except OSError:
                self._stop.wait(1.0)
                continue
            sock.settimeout(None)
            with self._send_lock:
                self._sock = sock
            self.agent.heartbeat()
            try:
                for raw in sock.makefile("rb"):
                    self.agent.handle_line(raw.decode("utf-8", errors="replace").rstrip("\r\n"))
            except OSError:
                pass
            with self._send_lock:
                self._sock = None
            sock.close()

    def start(self) -> "AgentClient":
        threading.Thread(target=self.run, daemon=True).start()
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._send_lock:
            if self._sock is not None:
                try:
                    self._sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass


def request(
    address: str,
    secret: bytes,
    fields,
    timeout: float = 10.0,
    skew_window: float = protocol.DEFAULT_SKEW_WINDOW,
) -> protocol.Message:
    """Send one REQUEST and return the authenticated ACK or ERROR reply."""
    line = protocol.encode("REQUEST", fields, _time.time(), secret)
    try:
        with socket.create_connection(parse_address(address), timeout=timeout) as sock:
            sock.sendall((line + "\n").encode("utf-8"))
            reply = sock.makefile("rb").readline()
    except OSError as exc:
        raise ControllerUnreachable(f"cannot reach controller at {address}: {exc}") from None
    if not reply:
        raise ControllerUnreachable(f"controller at {address} closed the connection")
    return protocol.authenticate(reply.decode("utf-8").rstrip("\r\n"), secret, _time.time(), skew_window)
