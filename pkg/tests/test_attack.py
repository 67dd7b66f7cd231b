import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtwin.attack import AttackEngine, Interceptor, RewriteRule, ScriptError, Stage, rule_errors, script_errors
from gridtwin.cosim import csv_text, run_scenario
from gridtwin.devices import EventLog
from gridtwin.iec104 import (C_SE_NC_1, COT_ACTIVATION, COT_SPONTANEOUS, M_ME_NC_1, Apdu, Asdu, InfoObject,
                             encode_apdu, split_stream)
from gridtwin.netemu import ACK, PSH, Frame, build_network, pcap_bytes, reference_topology

from helpers import scenario_doc, shipped, with_stages

US = 1_000_000


# -- validation -------------------------------------------------------------------------

class TestRuleValidation:
    def test_valid(self):
        assert rule_errors({"protocol": "iec104", "action": "replace", "ioa": 2001, "value": 6.0}) == []

    @pytest.mark.parametrize("rule,fragment", [
        ({"protocol": "dnp3", "action": "drop"}, "unsupported protocol"),
        ({"protocol": "iec104", "action": "explode"}, "unknown rule action"),
        ({"protocol": "iec104", "action": "drop", "register": 4}, "cannot match"),
        ({"protocol": "modbus", "action": "drop", "ioa": 4}, "cannot match"),
        ({"protocol": "modbus", "action": "delay"}, "delay_ms"),
        ({"protocol": "modbus", "action": "drop", "colour": 1}, "unknown rule field"),
    ])
    def test_errors(self, rule, fragment):
        assert any(fragment in e for e in rule_errors(rule))


class TestScriptValidation:
    nodes = {n.name: n for n in reference_topology().nodes}
    links = set(range(18))

    def test_all_errors_reported(self):
        stages = [Stage("a", "scan", params={"subnet": "nope"}),
                  Stage("a", "teleport", requires=("stage:zz",)),
                  Stage("b", "dos", -1.0, params={"target": "moon", "rate": -3}),
                  Stage("c", "mitm_insert", params={"link": 99, "rules": [{"protocol": "x", "action": "drop"}]})]
        errors = script_errors(stages, self.nodes, self.links)
        for fragment in ("bad subnet", "duplicate id", "unknown kind", "unknown stage 'zz'", "start time",
                         "unknown target node", "rate must be", "unknown link 99", "rule 0"):
            assert any(fragment in e for e in errors), fragment

    def test_cycle(self):
        stages = [Stage("a", "scan", requires=("stage:b",), params={"subnet": "10.0.2.0/24"}),
                  Stage("b", "scan", requires=("stage:a",), params={"subnet": "10.0.2.0/24"})]
        assert any("cycle" in e for e in script_errors(stages))

    def test_bad_token(self):
        stages = [Stage("a", "scan", requires=("luck:high", "creds:"), params={"subnet": "10.0.2.0/24"})]
        assert len([e for e in script_errors(stages) if "bad precondition" in e]) == 2

    def test_engine_refuses_invalid_script(self):
        net = build_network(reference_topology())
        with pytest.raises(ScriptError):
            AttackEngine([Stage("x", "dos", params={"target": "nowhere"})], net, EventLog())


# -- interceptor ---------------------------------------------------------------------------

def command(ns, nr, value):
    return Apdu("I", ns, nr, asdu=Asdu(C_SE_NC_1, COT_ACTIVATION, 1, (InfoObject(2001, value, 0),)))


def measurement(ns, nr, value):
    return Apdu("I", ns, nr, asdu=Asdu(M_ME_NC_1, COT_SPONTANEOUS, 1, (InfoObject(1031, value, 0),)))


@st.composite
def iec_streams(draw):
    kinds = draw(st.lists(st.booleans(), min_size=1, max_size=25))
    values = draw(st.lists(st.floats(-10, 10, width=32), min_size=len(kinds), max_size=len(kinds)))
    base = draw(st.integers(0, 32767 - 30))
    apdus = [(command if k else measurement)(base + i, 0, v) for i, (k, v) in enumerate(zip(kinds, values))]
    data = b"".join(encode_apdu(a) for a in apdus)
    cuts = sorted(set(draw(st.lists(st.integers(1, max(1, len(data) - 1)), max_size=12))))
    return apdus, data, cuts


def segments(data, cuts, isn=1000):
    bounds = [0] + [c for c in cuts if 0 < c < len(data)] + [len(data)]
    return [Frame("mtu", "vrtu", 40000, 2404, ACK | PSH, isn + a, 1, data[a:b]) for a, b in zip(bounds, bounds[1:])]


def intercept(icpt, frames):
    out = []
    for k, f in enumerate(frames):
        out += [fr for fr, _ in icpt.on_frame(f, "sw2", k)]
    return out


class TestInterceptor:
    @settings(max_examples=200, deadline=None)
    @given(iec_streams())
    def test_no_rules_is_identity(self, stream):
        _, data, cuts = stream
        frames = segments(data, cuts)
        assert intercept(Interceptor([]), frames) == frames

    @settings(max_examples=200, deadline=None)
    @given(iec_streams(), st.booleans())
    def test_rewritten_stream_stays_valid(self, stream, drop_measurements):
        apdus, data, cuts = stream
        rules = [RewriteRule("iec104", "replace", to="vrtu", type_id=C_SE_NC_1, ioa=2001, value=6.0)]
        if drop_measurements:
            rules.append(RewriteRule("iec104", "drop", type_id=M_ME_NC_1))
        out = intercept(Interceptor(rules), segments(data, cuts))
        # TCP sequence numbers stay contiguous from the original start
        seq = 1000
        for f in out:
            assert f.tcp_seq == seq
            seq += len(f.payload)
        frames, rest = split_stream(b"".join(f.payload for f in out))
        assert rest == b"" and not any(isinstance(f, Exception) for f in frames)
        kept = [a for a in apdus if not (drop_measurements and a.asdu.type_id == M_ME_NC_1)]
        assert len(frames) == len(kept)
        assert [f.send_seq for f in frames] == [apdus[0].send_seq + i for i in range(len(kept))]
        for got, want in zip(frames, kept):
            if want.asdu.type_id == C_SE_NC_1:
                assert got.asdu.objects[0].value == 6.0
            else:
                assert got.asdu == want.asdu

    def test_inactive_still_renumbers(self):
        icpt = Interceptor([RewriteRule("iec104", "drop", type_id=M_ME_NC_1)])
        first = segments(encode_apdu(measurement(0, 0, 1.0)) + encode_apdu(command(1, 0, 2.0)), [])
        out = intercept(icpt, first)
        assert [f.send_seq for f in split_stream(out[0].payload)[0]] == [0]
        icpt.active = False
        later = encode_apdu(measurement(2, 0, 3.0))
        out = intercept(icpt, [Frame("mtu", "vrtu", 40000, 2404, ACK | PSH, 1000 + len(first[0].payload), 1,
                                     later)])
        (apdu,), _ = split_stream(out[0].payload)
        assert apdu.send_seq == 1 and apdu.asdu.objects[0].value == 3.0


# -- scenario level -------------------------------------------------------------------------

def pcaps(result):
    return {t.id: pcap_bytes(t.records, result.config.topology, result.config.flood_sample) for t in result.taps}


@pytest.fixture(scope="module")
def baseline():
    return run_scenario(shipped("normal", duration=40))


class TestNonInterference:
    def test_passive_mitm_changes_nothing(self, baseline):
        stages = [{"id": "tap", "kind": "mitm_insert", "at_s": 5, "params": {"link": 9, "rules": []}}]
        result = run_scenario(with_stages("normal", stages, duration=40))
        assert result.summary["attack"]["fired"][0]["outcome"] == "running"
        assert csv_text(result) == csv_text(baseline)
        assert pcaps(result) == pcaps(baseline)

    def test_zero_rate_dos_changes_nothing(self, baseline):
        stages = [{"id": "flood", "kind": "dos", "at_s": 5, "params": {"target": "vrtu", "rate": 0}}]
        result = run_scenario(with_stages("normal", stages, duration=40))
        assert csv_text(result) == csv_text(baseline)
        assert pcaps(result) == pcaps(baseline)

    def test_flood_below_budget_drops_nothing(self, baseline):
        stages = [{"id": "flood", "kind": "dos", "at_s": 5, "params": {"target": "vrtu", "rate": 5}}]
        result = run_scenario(with_stages("normal", stages, duration=40))
        assert result.summary["vrtu"]["legit_dropped"] == 0
        assert result.summary["vrtu"]["flood_seen"] > 0
        assert result.column("bss_p_kw") == baseline.column("bss_p_kw")


SCAN = {"subnet": "10.0.2.0/24", "ports": [21, 23, 80, 502, 2404]}


class TestScan:
    def test_field_scan_finds_services(self):
        result = run_scenario(with_stages("normal", [{"id": "s", "kind": "scan", "at_s": 2, "params": SCAN}], 6))
        found = set(result.summary["attack"]["discovered"])
        assert {"vrtu:21", "vrtu:23", "vrtu:80", "vrtu:2404"} <= found
        assert {f"ied_{n}:502" for n in ("sub", "bss", "load1", "pv2")} <= found

    def test_firewall_hides_field_from_workstation(self):
        stages = [{"id": "s", "kind": "scan", "at_s": 2, "from": "workstation", "params": SCAN}]
        result = run_scenario(with_stages("normal", stages, 6, footholds=["workstation"],
                                          taps=[{"id": "ws", "node": "workstation"}]))
        attack = result.summary["attack"]
        assert attack["discovered"] == []
        assert result.log.find("scan_report")[0].get("found") == "none"
        assert attack["fired"][0]["probed"] == 9 * 5  # vrtu, attacker, seven IEDs
        assert len(result.taps[0].records) >= 9 * 5  # probes leave the workstation

    def test_empty_subnet(self):
        stages = [{"id": "s", "kind": "scan", "at_s": 2, "params": {"subnet": "192.168.9.0/24"}}]
        result = run_scenario(with_stages("normal", stages, 5))
        assert result.summary["attack"]["fired"][0]["outcome"] == "success"
        assert result.summary["attack"]["discovered"] == []


WORDLIST = [["root", "root"], ["admin", "1234"], ["operator", "operator"], ["admin", "admin"]]
CHAIN = [
    {"id": "scan", "kind": "scan", "at_s": 2, "duration_s": 2, "params": SCAN},
    {"id": "guess", "kind": "brute_force", "at_s": 5, "requires": ["discovered:vrtu:23"],
     "params": {"target": "vrtu", "port": 23, "wordlist": WORDLIST}},
    {"id": "shell", "kind": "remote_exec", "at_s": 10, "requires": ["creds:vrtu"],
     "params": {"target": "vrtu", "command": "id"}},
    {"id": "write", "kind": "rewrite_via_legit_path", "at_s": 12, "duration_s": 10, "requires": ["stage:shell"],
     "params": {"target": "vrtu", "ioa": 2001, "value": 6.0, "period_s": 1}},
]


class TestCredentialChain:
    def test_chain_fires_in_order(self):
        result = run_scenario(with_stages("normal", CHAIN, 25))
        attack = result.summary["attack"]
        fired = attack["fired"]
        assert [f["id"] for f in fired] == ["scan", "guess", "shell", "write"]
        assert all(f["outcome"] == "success" for f in fired[:3])
        assert fired[1]["attempts"] == 4 and attack["credentials"] == ["vrtu"]
        assert "vrtu" in attack["footholds"]
        assert [f["fired_s"] for f in fired] == sorted(f["fired_s"] for f in fired)
        assert result.row_at(14.0)["bss_p_kw"] == 6.0
        assert len(result.log.find("exec", "vrtu")) >= 10

    def test_hardened_rtu_stops_chain(self):
        doc = scenario_doc("normal")
        vrtu = {**doc["devices"]["vrtu"], "default_credentials": False, "credentials": [["ops", "S3cure!x"]]}
        result = run_scenario(with_stages("normal", CHAIN, 25, devices={**doc["devices"], "vrtu": vrtu}))
        attack = result.summary["attack"]
        assert [f["id"] for f in attack["fired"]] == ["scan", "guess"]
        assert attack["fired"][1]["outcome"] == "failure"
        unfired = {u["id"]: u["unmet"] for u in attack["unfired"]}
        assert unfired["shell"] == ["creds:vrtu"] and unfired["write"] == ["stage:shell"]
        assert all(a.get("granted") is False for a in result.log.find("auth_attempt", "vrtu"))

    def test_halt_crashes_rtu(self):
        stages = CHAIN[:2] + [{"id": "kill", "kind": "remote_exec", "at_s": 10, "requires": ["creds:vrtu"],
                               "params": {"target": "vrtu", "command": "halt"}}]
        result = run_scenario(with_stages("normal", stages, 40))
        assert not result.summary["vrtu"]["alive"]
        crash = result.log.find("crashed", "vrtu")[0]
        assert crash.get("reason") == "remote_halt"
        # a silent peer: the master only notices when t1 expires
        closed = result.log.find("link_closed", "mtu")
        assert closed and crash.t_us < closed[0].t_us <= crash.t_us + 16 * US


def update_config(duration, maintenance_s=10, blob="hook=identity", origin="workstation", content=None):
    doc = scenario_doc("normal")
    devices = dict(doc["devices"])
    devices["mtu"] = {**devices["mtu"], "maintenance_s": maintenance_s}
    devices["fileserver"] = {"blobs": {"update": blob}}
    params = {"server": "fileserver", "hook": "scale:3"} if content is None else {"server": "fileserver",
                                                                                   "content": content}
    stages = [{"id": "upload", "kind": "upload_update", "at_s": 5, "from": origin, "params": params}]
    return with_stages("normal", stages, duration, footholds=[origin], devices=devices)


class TestUpdate:
    def test_poisoned_update_triples_commands(self):
        result = run_scenario(update_config(30))
        installed = result.log.find("update_installed", "mtu")
        assert len(installed) == 1 and installed[0].get("hook") == "scale:3"
        after = [c for c in result.log.find("cmd_sent", "mtu") if c.t_us > installed[0].t_us]
        assert after and all(c.get("sent") == pytest.approx(3 * c.get("ems")) for c in after)

    def test_latent_until_maintenance(self):
        result = run_scenario(update_config(30, maintenance_s=1000))
        assert result.summary["attack"]["fired"][0]["outcome"] == "success"
        assert result.summary["mtu"]["hook"] == "identity"
        assert result.twin.fileserver.blobs["update"][0] == b"hook=scale:3"

    def test_bad_content_rejected(self):
        result = run_scenario(update_config(30, content="rm -rf /"))
        assert result.log.find("update_rejected", "mtu")[0].get("reason") == "format"
        assert result.summary["mtu"]["hook"] == "identity"

    def test_clean_blob_keeps_hook(self):
        result = run_scenario(with_stages("normal", [], 30, devices={
            **scenario_doc("normal")["devices"],
            "mtu": {**scenario_doc("normal")["devices"]["mtu"], "maintenance_s": 10}}))
        assert result.log.find("blob_get", "fileserver")
        assert not result.log.find("update_installed", "mtu")

    def test_fileserver_unreachable_from_field(self):
        result = run_scenario(update_config(10, origin="attacker_field"))
        fired = result.summary["attack"]["fired"][0]
        assert fired["outcome"] == "failure" and fired["reason"] == "unreachable"


class TestMitm:
    def test_not_on_path(self):
        stages = [{"id": "m", "kind": "mitm_insert", "at_s": 2, "params": {"link": 0, "rules": []}}]
        result = run_scenario(with_stages("normal", stages, 4))
        fired = result.summary["attack"]["fired"][0]
        assert fired["outcome"] == "failure" and fired["reason"] == "not_on_path"

    def test_zero_scaled_measurement_reaches_mtu(self):
        rules = [{"protocol": "iec104", "action": "scale", "to": "mtu", "type_id": 13, "ioa": 1031, "value": 0.0}]
        stages = [{"id": "m", "kind": "mitm_insert", "at_s": 2, "params": {"link": 9, "rules": rules}}]
        result = run_scenario(with_stages("normal", stages, 20))
        assert result.twin.mtu.values[1031].value == 0.0
        assert any(r.action == "scale" for r in result.twin.engine.state.interceptors[9].records)

    def test_window_ends_rewriting(self):
        doc_stage = {"id": "m", "kind": "mitm_insert", "at_s": 2, "duration_s": 8, "params": {"link": 9, "rules": [
            {"protocol": "iec104", "action": "replace", "to": "vrtu", "type_id": 50, "ioa": 2001, "value": 6.0}]}}
        result = run_scenario(with_stages("normal", [doc_stage], 40))
        rewrites = result.log.find("mitm_rewrite", "attacker")
        assert rewrites and all(r.t_us < 10 * US for r in rewrites)
        assert result.row_at(40.0)["bss_p_kw"] != 6.0

    def test_causality(self, baseline):
        stages = [{"id": "m", "kind": "mitm_insert", "at_s": 5, "params": {"link": 9, "rules": [
            {"protocol": "iec104", "action": "replace", "to": "vrtu", "type_id": 50, "ioa": 2001, "value": 6.0}]}}]
        result = run_scenario(with_stages("normal", stages, 40))
        first = result.summary["attack"]["first_effect_s"]
        assert first is not None and first >= 5.0
        for row, ref in zip(result.rows, baseline.rows):
            if row[0] <= first:
                assert row == ref
        assert result.rows != baseline.rows
