"""Precondition-gated multi-stage attack scripts."""
from __future__ import annotations

import ipaddress
import random
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..netemu import SYN, ConnectBlocked, Frame, Network
from .mitm import Interceptor, RewriteRule, rule_errors

US = 1_000_000

STAGE_KINDS = ("scan", "brute_force", "mitm_insert", "dos", "upload_update", "remote_exec",
               "rewrite_via_legit_path")
TOKEN_KINDS = ("stage", "creds", "discovered", "foothold")
DEFAULT_PORTS = (21, 22, 23, 80, 443, 502, 2404)
SESSION_TIMEOUT_S = 5.0


@dataclass(frozen=True)
class Stage:
    id: str
    kind: str
    at_s: float = 0.0
    requires: tuple[str, ...] = ()
    origin: str = "attacker_field"
    params: Mapping[str, Any] = field(default_factory=dict)
    duration_s: float | None = None


def _refs(stage: Stage) -> list[str]:
    return [tok.split(":", 1)[1] for tok in stage.requires if tok.startswith("stage:")]


def script_errors(stages: list[Stage], nodes: Mapping[str, Any] | None = None,
                  links: set[int] | None = None) -> list[str]:
    """Every problem with a script, not just the first."""
    errors = []
    ids = [s.id for s in stages]
    seen = set()
    for s in stages:
        where = f"stage {s.id!r}"
        if s.id in seen:
            errors.append(f"{where}: duplicate id")
        seen.add(s.id)
        if s.kind not in STAGE_KINDS:
            errors.append(f"{where}: unknown kind {s.kind!r} (expected one of {', '.join(STAGE_KINDS)})")
        if s.at_s < 0:
            errors.append(f"{where}: start time must be >= 0")
        if s.duration_s is not None and s.duration_s <= 0:
            errors.append(f"{where}: duration must be > 0")
        if nodes is not None and s.origin not in nodes:
            errors.append(f"{where}: unknown origin node {s.origin!r}")
        for tok in s.requires:
            kind, _, arg = tok.partition(":")
            if kind not in TOKEN_KINDS or not arg:
                errors.append(f"{where}: bad precondition {tok!r}")
            elif kind == "stage" and arg not in ids:
                errors.append(f"{where}: requires unknown stage {arg!r}")
            elif kind in ("creds", "foothold") and nodes is not None and arg not in nodes:
                errors.append(f"{where}: precondition names unknown node {arg!r}")
        errors += [f"{where}: {e}" for e in _param_errors(s, nodes, links)]
    # precondition references must be acyclic
    graph = {s.id: _refs(s) for s in stages}
    state: dict[str, int] = {}

    def visit(n, path):
        if state.get(n) == 1:
            errors.append(f"precondition cycle: {' -> '.join(path + [n])}")
            return
        if state.get(n) == 2 or n not in graph:
            return
        state[n] = 1
        for m in graph[n]:
            visit(m, path + [n])
        state[n] = 2

    for sid in ids:
        visit(sid, [])
    return errors


def _param_errors(s: Stage, nodes, links) -> list[str]:
    p = dict(s.params)
    errors = []

    def need_node(key):
        if key not in p:
            errors.append(f"missing parameter {key!r}")
        elif nodes is not None and p[key] not in nodes:
            errors.append(f"unknown {key} node {p[key]!r}")

    if s.kind == "scan":
        try:
            ipaddress.ip_network(str(p.get("subnet", "")), strict=False)
        except ValueError:
            errors.append(f"bad subnet {p.get('subnet')!r}")
    elif s.kind == "brute_force":
        need_node("target")
        words = p.get("wordlist")
        if not isinstance(words, (list, tuple)) or not all(isinstance(w, (list, tuple)) and len(w) == 2
                                                           for w in words):
            errors.append("wordlist must be a list of [user, password] pairs")
    elif s.kind in ("remote_exec", "rewrite_via_legit_path"):
        need_node("target")
        if s.kind == "remote_exec" and not p.get("command"):
            errors.append("missing parameter 'command'")
        if s.kind == "rewrite_via_legit_path" and ("ioa" not in p or "value" not in p):
            errors.append("rewrite_via_legit_path needs 'ioa' and 'value'")
    elif s.kind == "mitm_insert":
        if "link" not in p:
            errors.append("missing parameter 'link'")
        elif links is not None and p["link"] not in links:
            errors.append(f"unknown link {p['link']!r}")
        rules = p.get("rules", [])
        if not isinstance(rules, (list, tuple)):
            errors.append("rules must be a list")
        else:
            for k, r in enumerate(rules):
                if not isinstance(r, Mapping):
                    errors.append(f"rule {k}: must be a mapping")
                else:
                    errors += [f"rule {k}: {e}" for e in rule_errors(dict(r))]
    elif s.kind == "dos":
        need_node("target")
        rate = p.get("rate", 0)
        if not isinstance(rate, int) or rate < 0:
            errors.append("rate must be a non-negative integer (frames per substep)")
    elif s.kind == "upload_update":
        need_node("server")
        if "hook" not in p and "content" not in p:
            errors.append("upload_update needs 'hook' or 'content'")
    return errors


class ScriptError(ValueError):
    pass


@dataclass
class AttackerState:
    footholds: set[str]
    credentials: dict[str, tuple[str, str]] = field(default_factory=dict)
    discovered: set[tuple[str, int]] = field(default_factory=set)
    banners: dict[tuple[str, int], str] = field(default_factory=dict)
    interceptors: dict[int, Interceptor] = field(default_factory=dict)
    cursor: int = 0  # stages fired so far


@dataclass
class StageRun:
    stage: Stage
    t_fired: int
    outcome: str = "running"  # running | success | failure
    t_done: int | None = None
    detail: dict = field(default_factory=dict)
    work: Any = None


class _LineClient:
    """Line exchange with a banner-first service: one line out per reply in.

    ``pace_us`` spaces the lines after the first one.
    """

    def __init__(self, stream, lines: list[str], deadline: int, pace_us: int = 0,
                 stop_on: str | None = None):
        self.stream = stream
        self.todo = list(lines)
        self.replies: list[str] = []
        self.banner: str | None = None
        self.buf = b""
        self.deadline = deadline
        self.pace_us = pace_us
        self.stop_on = stop_on
        self.waiting = False
        self.next_send = 0

    def pump(self, now: int) -> bool:
        """Advance; True once every line was answered or the session died."""
        self.buf += self.stream.recv()
        *complete, self.buf = self.buf.split(b"\n")
        for raw in complete:
            line = raw.decode("utf-8", "replace").strip()
            if self.banner is None:
                self.banner = line
            else:
                self.replies.append(line)
                self.waiting = False
        if self.stream.state == "closed" or now >= self.deadline:
            return True
        if self.banner is None or self.waiting:
            return False
        if not self.todo or (self.stop_on and self.replies and self.replies[-1].startswith(self.stop_on)):
            return True
        if now < self.next_send:
            return False
        self.stream.send(self.todo.pop(0).encode() + b"\n", now)
        self.waiting = True
        if self.replies:
            self.next_send = now + self.pace_us
        return False


class AttackEngine:
    def __init__(self, stages: list[Stage], net: Network, log, seed: int = 0, footholds=("attacker_field",),
                 substep_us: int = 10_000):
        errors = script_errors(stages, net.nodes, set(net.links))
        if errors:
            raise ScriptError("; ".join(errors))
        self.stages = list(stages)
        self.net = net
        self.log = log
        self.substep_us = substep_us
        self.rng = random.Random(f"attack:{seed}")
        self.state = AttackerState(set(footholds))
        self.runs: dict[str, StageRun] = {}
        self.first_effect_us: int | None = None

    # -- preconditions -------------------------------------------------------------

    def holds(self, token: str) -> bool:
        kind, _, arg = token.partition(":")
        st = self.state
        if kind == "stage":
            run = self.runs.get(arg)
            return run is not None and run.outcome == "success"
        if kind == "creds":
            return arg in st.credentials
        if kind == "foothold":
            return arg in st.footholds
        if kind == "discovered":
            host, _, port = arg.partition(":")
            if port:
                return (host, int(port)) in st.discovered
            return any(h == host for h, _ in st.discovered)
        return False

    def unmet(self, stage: Stage) -> list[str]:
        missing = [tok for tok in stage.requires if not self.holds(tok)]
        if stage.origin not in self.state.footholds:
            missing.append(f"foothold:{stage.origin}")
        return missing

    # -- main loop ------------------------------------------------------------------

    def step(self, now: int) -> None:
        if not self.stages:
            return
        for stage in self.stages:
            if stage.id in self.runs or now < int(round(stage.at_s * US)) or self.unmet(stage):
                continue
            run = StageRun(stage, now)
            self.runs[stage.id] = run
            self.state.cursor += 1
            self.log.log(now, "attacker", "ALARM", "stage_fired", stage=stage.id, kind=stage.kind,
                         origin=stage.origin)
            getattr(self, f"_start_{stage.kind}")(run, now)
        for run in self.runs.values():
            if run.outcome == "running":
                getattr(self, f"_progress_{run.stage.kind}")(run, now)

    def _finish(self, run: StageRun, now: int, ok: bool, **detail) -> None:
        run.outcome = "success" if ok else "failure"
        run.t_done = now
        run.detail.update(detail)
        self.log.log(now, "attacker", "ALARM" if ok else "WARN", "stage_done", stage=run.stage.id,
                     outcome=run.outcome, **{k: v for k, v in detail.items() if not isinstance(v, (list, dict))})

    def _effect(self, now: int) -> None:
        if self.first_effect_us is None:
            self.first_effect_us = now

    def _ends(self, run: StageRun, default_s: float | None) -> int | None:
        dur = run.stage.duration_s if run.stage.duration_s is not None else default_s
        return None if dur is None else run.t_fired + int(round(dur * US))

    def _host(self, run: StageRun):
        return self.net.hosts[run.stage.origin]

    def _open(self, run: StageRun, target: str, port: int, now: int):
        try:
            stream = self._host(run).connect(target, port, now)
        except ConnectBlocked:
            return None
        finally:
            self._effect(now)
        return stream

    # -- scan -----------------------------------------------------------------------

    def _start_scan(self, run: StageRun, now: int) -> None:
        p = run.stage.params
        subnet = ipaddress.ip_network(str(p.get("subnet")), strict=False)
        ports = tuple(p.get("ports", DEFAULT_PORTS))
        targets = [n for n in self.net.topo.hosts()
                   if n.name != run.stage.origin and ipaddress.ip_address(n.addr) in subnet]
        host = self._host(run)
        run.work = len(host.probe_replies)
        for node in targets:
            for port in ports:
                host.probe(node.name, port, now)
                self._effect(now)
        run.detail["probed"] = len(targets) * len(ports)

    def _progress_scan(self, run: StageRun, now: int) -> None:
        end = self._ends(run, 1.0)
        if now < end:
            return
        replies = self._host(run).probe_replies[run.work:]
        found = sorted({(r.host, r.port) for r in replies if r.open})
        self.state.discovered.update(found)
        report = [f"{h}:{p}" for h, p in found]
        self._finish(run, now, True, open=len(found), report=report)
        self.log.log(now, "attacker", "INFO", "scan_report", stage=run.stage.id,
                     found=",".join(report) if report else "none")

    # -- credential attacks -----------------------------------------------------------

    def _start_brute_force(self, run: StageRun, now: int) -> None:
        p = run.stage.params
        port = int(p.get("port", 23))
        stream = self._open(run, p["target"], port, now)
        if stream is None:
            self._finish(run, now, False, reason="blocked")
            return
        lines = [f"LOGIN {u} {pw}" for u, pw in p["wordlist"]]
        run.work = _LineClient(stream, lines, self._ends(run, 10.0 + len(lines)), stop_on="OK")

    def _progress_brute_force(self, run: StageRun, now: int) -> None:
        client: _LineClient = run.work
        if not client.pump(now):
            return
        p = run.stage.params
        if client.banner is not None:
            self.state.banners[(p["target"], int(p.get("port", 23)))] = client.banner
        client.stream.close(now)
        if client.replies and client.replies[-1].startswith("OK"):
            user, pw = p["wordlist"][len(client.replies) - 1]
            self.state.credentials[p["target"]] = (str(user), str(pw))
            self._finish(run, now, True, user=user, attempts=len(client.replies))
        else:
            self._finish(run, now, False, reason="exhausted", attempts=len(client.replies))

    def _exec_session(self, run: StageRun, commands: list[str], now: int, pace_us: int = 0) -> None:
        p = run.stage.params
        creds = self.state.credentials.get(p["target"])
        if creds is None:
            self._finish(run, now, False, reason="no_credentials")
            return
        stream = self._open(run, p["target"], int(p.get("port", 23)), now)
        if stream is None:
            self._finish(run, now, False, reason="blocked")
            return
        deadline = now + int(SESSION_TIMEOUT_S * US) + len(commands) * max(pace_us, US)
        run.work = _LineClient(stream, [f"LOGIN {creds[0]} {creds[1]}"] + commands, deadline, pace_us, "DENIED")

    def _start_remote_exec(self, run: StageRun, now: int) -> None:
        self._exec_session(run, [f"EXEC {run.stage.params['command']}"], now)

    def _progress_remote_exec(self, run: StageRun, now: int) -> None:
        client: _LineClient = run.work
        if not client.pump(now):
            return
        client.stream.close(now)
        ok = len(client.replies) >= 2 and client.replies[0].startswith("OK") and client.replies[1].startswith(
            ("OK", "uid", "VALUE"))
        if ok:
            self.state.footholds.add(run.stage.params["target"])
        self._finish(run, now, ok, reply=client.replies[-1] if client.replies else "none")

    def _start_rewrite_via_legit_path(self, run: StageRun, now: int) -> None:
        p = run.stage.params
        period_s = float(p.get("period_s", 1.0))
        count = max(1, int((run.stage.duration_s or period_s) / period_s))
        self._exec_session(run, [f"EXEC write {int(p['ioa'])} {float(p['value'])}"] * count, now,
                           int(period_s * US))

    def _progress_rewrite_via_legit_path(self, run: StageRun, now: int) -> None:
        client: _LineClient = run.work
        if not client.pump(now):
            return
        client.stream.close(now)
        ok = sum(r == "OK" for r in client.replies[1:])
        self._finish(run, now, ok > 0, writes=ok)

    # -- on-path manipulation -----------------------------------------------------------

    def _start_mitm_insert(self, run: StageRun, now: int) -> None:
        p = run.stage.params
        link = self.net.links[p["link"]]
        adjacent = {link.a, link.b}
        neighbours = {l.other(run.stage.origin) for l in self.net.links.values()
                      if run.stage.origin in (l.a, l.b)}
        if run.stage.origin not in adjacent and not adjacent & neighbours:
            self._finish(run, now, False, reason="not_on_path")
            return
        rules = [RewriteRule.from_dict(dict(r)) for r in p.get("rules", [])]

        def record(rec):
            self._effect(rec.t)
            self.log.log(rec.t, "attacker", "ALARM", "mitm_rewrite", protocol=rec.protocol, action=rec.action,
                         key=":".join(map(str, rec.key)), old=rec.old if rec.old is not None else "-",
                         new=rec.new if rec.new is not None else "-")

        icpt = Interceptor(rules, record)
        self.state.interceptors[link.id] = icpt
        self.net.interceptors[link.id] = icpt
        run.work = icpt
        run.detail["link"] = link.id

    def _progress_mitm_insert(self, run: StageRun, now: int) -> None:
        end = self._ends(run, None)
        if end is not None and now >= end:
            run.work.active = False
            self._finish(run, now, True, rewrites=len(run.work.records))

    def _start_dos(self, run: StageRun, now: int) -> None:
        run.work = 0  # frames injected

    def _progress_dos(self, run: StageRun, now: int) -> None:
        end = self._ends(run, None)
        if end is not None and now >= end:
            self._finish(run, now, True, injected=run.work)
            return
        p = run.stage.params
        rate = int(p.get("rate", 0))
        if rate <= 0:
            return
        frame = Frame(run.stage.origin, p["target"], 1024 + self.rng.randrange(64512), int(p.get("port", 2404)),
                      SYN, self.rng.getrandbits(32), 0, b"", "flood", now, rate)
        self.net.enqueue(frame)
        self._effect(now)
        run.work += rate

    # -- supply chain -------------------------------------------------------------------

    def _start_upload_update(self, run: StageRun, now: int) -> None:
        p = run.stage.params
        content = p["content"].encode() if "content" in p else f"hook={p['hook']}".encode()
        stream = self._open(run, p["server"], int(p.get("port", 21)), now)
        if stream is None:
            self._finish(run, now, False, reason="unreachable")
            return
        name = p.get("name", "update")
        run.work = _LineClient(stream, [f"PUT {name} {content.hex()}"], now + int(SESSION_TIMEOUT_S * US))

    def _progress_upload_update(self, run: StageRun, now: int) -> None:
        client: _LineClient = run.work
        if not client.pump(now):
            return
        client.stream.close(now)
        ok = bool(client.replies) and client.replies[0] == "OK"
        self._finish(run, now, ok, reason="stored" if ok else "rejected")

    # -- reporting ------------------------------------------------------------------------

    def summary(self) -> dict:
        fired, unfired = [], []
        for stage in self.stages:
            run = self.runs.get(stage.id)
            if run is None:
                unfired.append({"id": stage.id, "kind": stage.kind, "at_s": stage.at_s,
                                "unmet": self.unmet(stage)})
            else:
                fired.append({"id": stage.id, "kind": stage.kind, "fired_s": run.t_fired / US,
                              "done_s": None if run.t_done is None else run.t_done / US,
                              "outcome": run.outcome, **run.detail})
        st = self.state
        return {"fired": fired, "unfired": unfired,
                "footholds": sorted(st.footholds), "credentials": sorted(st.credentials),
                "discovered": [f"{h}:{p}" for h, p in sorted(st.discovered)],
                "first_effect_s": None if self.first_effect_us is None else self.first_effect_us / US}
