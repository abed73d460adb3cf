"""Line-oriented text protocol that lets an external simulator act as the black box.

Server greets with ``HELLO <n> <n_u> <dt>``.  The client then sends
``STEP <n> <n_u> <x...> <u...> <dt>`` and the server answers
``STATE <x_next...>`` or ``ERR <message>``.  Floats travel as the shortest
decimal that round-trips the float64 (at most 17 significant digits).
"""

from __future__ import annotations

import math
import os
import select
import socket
import subprocess
import threading
import time

import numpy as np

from .dynamics import BlackBoxSystem, ControlBox, DynamicsError, NonFiniteStateError


class ProtocolError(RuntimeError):
    """Malformed or unexpected traffic, or a dead peer."""


class ExternalTimeoutError(ProtocolError):
    pass


class RemoteStepError(DynamicsError):
    """The simulator answered ERR for one step."""


def fmt(v: float) -> str:
    return repr(float(v))


def format_step(x, u, dt) -> str:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    parts = ["STEP", str(x.size), str(u.size)] + [fmt(v) for v in x] + [fmt(v) for v in u] + [fmt(dt)]
    return " ".join(parts) + "\n"


def parse_step(line: str):
    """(x, u, dt) from a STEP request; ValueError on malformed input."""
    tok = line.split()
    if not tok or tok[0] != "STEP":
        raise ValueError("expected STEP")
    if len(tok) < 3:
        raise ValueError("STEP needs <n> <n_u>")
    n, m = int(tok[1]), int(tok[2])
    if n < 1 or m < 1:
        raise ValueError("dimensions must be positive")
    nums = tok[3:]
    if len(nums) != n + m + 1:
        raise ValueError(f"STEP {n} {m} carries {len(nums)} numbers, expected {n + m + 1}")
    vals = [float(t) for t in nums]
    return np.array(vals[:n]), np.array(vals[n:n + m]), vals[-1]


class _Connection:
    """One serial request/reply channel with a line buffer and deadline reads."""

    def __init__(self, read_fd, write, close, timeout):
        self.read_fd = read_fd
        self._write = write
        self._close = close
        self.timeout = timeout
        self.buf = b""
        self.proc = None

    def send(self, line: str) -> None:
        try:
            self._write(line.encode("ascii"))
        except (BrokenPipeError, ConnectionError, OSError) as exc:
            raise ProtocolError(f"peer closed the connection: {exc}") from exc

    def readline(self) -> str:
        deadline = time.monotonic() + self.timeout
        while b"\n" not in self.buf:
            left = deadline - time.monotonic()
            if left <= 0:
                raise ExternalTimeoutError(f"no reply within {self.timeout} s")
            ready, _, _ = select.select([self.read_fd], [], [], left)
            if not ready:
                raise ExternalTimeoutError(f"no reply within {self.timeout} s")
            chunk = os.read(self.read_fd, 65536)
            if not chunk:
                raise ProtocolError("peer closed the connection")
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        try:
            return line.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise ProtocolError("reply is not ASCII text") from exc

    def close(self):
        self._close()


def _open_process(command, timeout):
    proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0)

    def write(data):
        proc.stdin.write(data)

    def close():
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        proc.stdout.close()

    conn = _Connection(proc.stdout.fileno(), write, close, timeout)
    conn.proc = proc
    return conn


def _open_socket(address, timeout):
    try:
        sock = socket.create_connection(address, timeout=timeout)
    except socket.timeout as exc:
        raise ExternalTimeoutError(f"connect to {address} timed out") from exc
    except OSError as exc:
        raise ProtocolError(f"cannot connect to {address}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return _Connection(sock.fileno(), sock.sendall, sock.close, timeout)


def parse_hello(line: str):
    tok = line.split()
    if len(tok) != 4 or tok[0] != "HELLO":
        raise ProtocolError(f"expected HELLO <n> <n_u> <dt>, got {line!r}")
    try:
        n, m, dt = int(tok[1]), int(tok[2]), float(tok[3])
    except ValueError as exc:
        raise ProtocolError(f"bad HELLO line {line!r}") from exc
    if n < 1 or m < 1 or not (dt > 0 and math.isfinite(dt)):
        raise ProtocolError(f"bad HELLO values {line!r}")
    return n, m, dt


class ExternalSystem(BlackBoxSystem):
    """Black box served by a subprocess (``command``) or a TCP peer (``address``).

    Each thread gets its own lazily opened connection, which then serves all
    of that thread's steps.  The control box is configuration: the protocol
    does not carry it.
    """

    name = "external"

    def __init__(self, control_box: ControlBox, command=None, address=None, timeout: float = 10.0):
        if (command is None) == (address is None):
            raise ValueError("give exactly one of command or address")
        self.command = list(command) if command is not None else None
        self.address = tuple(address) if address is not None else None
        self.timeout = float(timeout)
        self.control_box = control_box
        self._local = threading.local()
        self._all = []
        self._lock = threading.Lock()
        self.requests = 0
        conn = self._connection()
        self.state_dim, m, self.step_size = self._hello
        if m != control_box.dim:
            conn.close()
            raise ProtocolError(f"server has {m} controls, control box has {control_box.dim}")

    def _connection(self) -> _Connection:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            return conn
        if self.command is not None:
            conn = _open_process(self.command, self.timeout)
        else:
            conn = _open_socket(self.address, self.timeout)
        hello = parse_hello(conn.readline())
        if hasattr(self, "_hello") and hello != self._hello:
            conn.close()
            raise ProtocolError(f"server greeting changed from {self._hello} to {hello}")
        self._hello = hello
        self._local.conn = conn
        with self._lock:
            self._all.append(conn)
        return conn

    def _step_one(self, conn, x, u):
        conn.send(format_step(x, u, self.step_size))
        reply = conn.readline()
        self.requests += 1
        if reply.startswith("ERR"):
            raise RemoteStepError(reply[3:].strip() or "remote step failed")
        tok = reply.split()
        if not tok or tok[0] != "STATE":
            raise ProtocolError(f"expected STATE or ERR, got {reply[:80]!r}")
        if len(tok) - 1 != self.state_dim:
            raise ProtocolError(f"STATE carries {len(tok) - 1} numbers, expected {self.state_dim}")
        try:
            out = np.array([float(t) for t in tok[1:]])
        except ValueError as exc:
            raise ProtocolError(f"unparseable STATE {reply[:80]!r}") from exc
        if not np.all(np.isfinite(out)):
            raise NonFiniteStateError(f"simulator returned a non-finite state {reply[:80]!r}")
        return out

    def step(self, x, u):
        single = np.ndim(x) == 1 and np.ndim(u) == 1
        xs, us = self._check_inputs(x, u)
        conn = self._connection()
        out = np.empty((xs.shape[0], self.state_dim))
        for r in range(xs.shape[0]):
            out[r] = self._step_one(conn, xs[r], us[r])
        return out[0] if single else out

    def close(self):
        with self._lock:
            conns, self._all = self._all, []
        for c in conns:
            c.close()
        self._local = threading.local()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# server side


class EchoSystem(BlackBoxSystem):
    """Test double: x_next = x + dt * (u_0, 0, u_1) on a 3-state, 2-control system."""

    name = "echo"
    state_dim = 3

    def __init__(self, step_size: float = 0.001):
        self.step_size = float(step_size)
        self.control_box = ControlBox(np.zeros(2), np.ones(2))

    def step(self, x, u):
        single = np.ndim(x) == 1 and np.ndim(u) == 1
        xs, us = self._check_inputs(x, u)
        out = xs + self.step_size * np.stack([us[:, 0], np.zeros(len(us)), us[:, 1]], axis=1)
        return out[0] if single else out


def handle_line(system: BlackBoxSystem, line: str) -> str:
    """Reply for one request line (without trailing newline handling)."""
    try:
        x, u, dt = parse_step(line)
    except ValueError as exc:
        return f"ERR malformed-request {exc}"
    if x.size != system.state_dim or u.size != system.control_dim:
        return f"ERR dimension-mismatch expected {system.state_dim} {system.control_dim}"
    if dt != system.step_size:
        return f"ERR step-size-mismatch expected {fmt(system.step_size)}"
    if not system.control_box.contains(u)[0]:
        return "ERR out-of-bounds"
    try:
        nxt = np.asarray(system.step(x, u), dtype=float)
    except DynamicsError as exc:
        return f"ERR step-failed {exc}"
    return "STATE " + " ".join(fmt(v) for v in nxt)


def serve_stream(system: BlackBoxSystem, rfile, wfile) -> int:
    """Serve one peer over binary file objects until EOF or QUIT; returns steps served."""
    wfile.write(f"HELLO {system.state_dim} {system.control_dim} {fmt(system.step_size)}\n".encode())
    wfile.flush()
    served = 0
    for raw in rfile:
        line = raw.decode("ascii", errors="replace").strip()
        if not line:
            continue
        if line == "QUIT":
            break
        wfile.write((handle_line(system, line) + "\n").encode())
        wfile.flush()
        served += 1
    return served


def serve_tcp(system: BlackBoxSystem, host: str = "127.0.0.1", port: int = 0, ready=None,
              max_clients=None) -> None:
    """Accept peers on a TCP port, one thread per connection.

    ``ready`` (if given) is called with the bound port once listening.
    """
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    if ready is not None:
        ready(srv.getsockname()[1])
    threads = []
    accepted = 0
    try:
        while max_clients is None or accepted < max_clients:
            conn, _ = srv.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            accepted += 1

            def run(c=conn):
                with c, c.makefile("rb") as r, c.makefile("wb") as w:
                    try:
                        serve_stream(system, r, w)
                    except (BrokenPipeError, ConnectionError):
                        pass

            t = threading.Thread(target=run, daemon=True)
            t.start()
            threads.append(t)
    finally:
        srv.close()
        for t in threads:
            t.join(timeout=1.0)
