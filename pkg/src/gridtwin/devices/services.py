"""Protocol-shaped auxiliary services: banner, LOGIN, EXEC over a line stream.

These are not FTP/telnet/HTTP implementations. They model what matters
for the attack chain: which port answers with which banner, whether a
credential pair is accepted, and what an authenticated session may run.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

from ..netemu import HostStack, Stream
from .eventlog import EventLog

DEFAULT_CREDENTIAL = ("admin", "admin")


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    port: int
    banner: str


DEFAULT_SERVICES = (
    ServiceSpec("ftp", 21, "220 vRTU FTP service ready"),
    ServiceSpec("telnet", 23, "vRTU telnet service, login required"),
    ServiceSpec("http", 80, "HTTP/1.0 200 OK vRTU web configuration"),
)


@dataclass(frozen=True)
class AuthResult:
    granted: bool
    session: int | None = None


def service_auth(credentials, username: str, password: str, session_id: int = 1) -> AuthResult:
    """Grant iff ``(username, password)`` is in ``credentials``."""
    if (username, password) in set(map(tuple, credentials)):
        return AuthResult(True, session_id)
    return AuthResult(False)


class LineSession:
    def __init__(self, stream: Stream, service: ServiceSpec):
        self.stream = stream
        self.service = service
        self.buf = b""
        self.user: str | None = None

    def lines(self) -> list[str]:
        self.buf += self.stream.recv()
        *complete, self.buf = self.buf.split(b"\n")
        return [c.decode("utf-8", "replace").strip() for c in complete]

    def reply(self, text: str, now: int) -> None:
        if self.stream.state == "open":
            self.stream.send(text.encode() + b"\n", now)


class ServiceHost:
    """Accepts sessions on each service port and dispatches command lines.

    ``handler(session, verb, args, now)`` returns the reply line.
    """

    def __init__(self, owner: str, host: HostStack, services, log: EventLog,
                 handler: Callable[[LineSession, str, list[str], int], str]):
        self.owner = owner
        self.host = host
        self.services = {s.port: s for s in services}
        self.log = log
        self.handler = handler
        self.sessions: list[LineSession] = []
        for port in self.services:
            host.listen(port)

    def step(self, now: int) -> None:
        for port, spec in self.services.items():
            for stream in self.host.accept(port):
                session = LineSession(stream, spec)
                self.sessions.append(session)
                self.log.log(now, self.owner, "INFO", "service_connect", service=spec.name, src=stream.peer)
                session.reply(spec.banner, now)
        if not self.sessions:
            return
        for session in self.sessions:
            for line in session.lines():
                if not line:
                    continue
                verb, *args = line.split()
                session.reply(self.handler(session, verb.upper(), args, now), now)
        self.sessions = [s for s in self.sessions if s.stream.state != "closed"]

    def close_all(self, now: int) -> None:
        for s in self.sessions:
            s.stream.close(now)
        self.sessions = []


# -- file exchange -------------------------------------------------------------

def blob_tag(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


class FileServer:
    """Anonymous put/get blob store with a per-blob integrity tag."""

    SERVICE = ServiceSpec("ftp", 21, "220 file exchange ready")

    def __init__(self, name: str, host: HostStack, log: EventLog, blobs: dict[str, bytes] | None = None):
        self.name = name
        self.log = log
        self.blobs: dict[str, tuple[bytes, str]] = {}
        for key, content in (blobs or {}).items():
            self.blobs[key] = (content, blob_tag(content))
        self.server = ServiceHost(name, host, [self.SERVICE], log, self._handle)

    def _handle(self, session: LineSession, verb: str, args: list[str], now: int) -> str:
        if verb == "PUT" and len(args) == 2:
            try:
                content = bytes.fromhex(args[1])
            except ValueError:
                return "ERR bad blob"
            self.blobs[args[0]] = (content, blob_tag(content))
            self.log.log(now, self.name, "INFO", "blob_put", name=args[0], src=session.stream.peer,
                         tag=blob_tag(content)[:16])
            return "OK"
        if verb == "GET" and len(args) == 1:
            self.log.log(now, self.name, "INFO", "blob_get", name=args[0], src=session.stream.peer)
            if args[0] not in self.blobs:
                return "NONE"
            content, tag = self.blobs[args[0]]
            return f"DATA {tag} {content.hex()}"
        return "ERR unknown command"

    def step(self, now: int) -> None:
        self.server.step(now)
