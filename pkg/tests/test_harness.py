"""End-to-end harness runs: scheduling, fault ports, reports and the CLI.

The small three-broker scenario used throughout settles four windows of 25
units at 0.05 each, so the expected balances are short hand arithmetic:
deposit floor 25*0.05+0.1 = 1.35, revenue 100*0.05 = 5, refunds 1.25 a side.
"""

import random

import pytest

from iotmarket import cli, harness
from iotmarket.currency import money
from iotmarket.harness import (
    Kernel,
    PHASE_AUDIT,
    PHASE_FAULT,
    PHASE_INTAKE,
    PHASE_SEAL,
    InvariantViolation,
    ScenarioError,
    Simulation,
    load_scenario,
)
from iotmarket.ledger import Ledger

BASE = """
[scenario]
name = "fault_matrix"
duration_ticks = 1400

[[brokers]]
id = "b1"
location = [0.0, 0.0]

[[brokers]]
id = "b2"
location = [10.0, 0.0]

[[brokers]]
id = "b3"
location = [0.0, 10.0]

[[participants]]
id = "p1"
role = "provider"
balance = "50"
location = [0.5, 0.0]

[[participants]]
id = "c1"
role = "consumer"
balance = "50"
location = [9.5, 0.0]

[[listings]]
provider = "p1"
device_id = 7
data_type = "Humidity"
unit_cost = "0.05"
sampling_frequency = 10
location = [0.5, 0.0]

[[queries]]
consumer = "c1"
data_type = "Humidity"
budget = "0.06"
frequency_required = 10
start_tick = 20
end_tick = 1020
payment_granularity = 25
"""


def run(text, seed=42, trace=False, until=None):
    sim = Simulation(load_scenario(text), seed, trace=trace)
    report = sim.run(until=until)
    return sim, report


def sole_contract(report):
    assert len(report.contracts) == 1, report.contracts.keys()
    return next(iter(report.contracts.values()))


# -- kernel ---------------------------------------------------------------------


def test_kernel_orders_by_time_then_phase_then_fifo():
    k = Kernel()
    seen = []
    k.schedule(5, PHASE_SEAL, "a")
    k.schedule(5, PHASE_FAULT, "b")
    k.schedule(1, PHASE_AUDIT, "c")
    k.schedule(5, PHASE_FAULT, "d")  # same slot as b: FIFO
    k.schedule(5, PHASE_INTAKE, "e")
    k.run(lambda ev: seen.append(ev.target), horizon=10)
    assert seen == ["c", "b", "d", "e", "a"]


def test_kernel_horizon_is_exclusive_and_past_rejected():
    k = Kernel()
    k.schedule(3, PHASE_INTAKE, "in")
    k.schedule(7, PHASE_INTAKE, "out")
    seen = []
    k.run(lambda ev: seen.append((ev.time, ev.target)), horizon=7)
    assert seen == [(3, "in")]
    assert k.now == 3
    with pytest.raises(ValueError):
        k.schedule(2, PHASE_INTAKE, "late")
    # events scheduled for the horizon tick survive for a later run
    k.run(lambda ev: seen.append((ev.time, ev.target)), horizon=8)
    assert seen[-1] == (7, "out")


# -- scenario loading -------------------------------------------------------------


def test_load_scenario_reads_base():
    sc = load_scenario(BASE)
    assert sc.name == "fault_matrix"
    assert len(sc.brokers) == 3
    assert sc.queries[0].payment_granularity == 25
    assert sc.economics.broker_fee == money("0.1")


@pytest.mark.parametrize(
    "mutation,needle",
    [
        ("[scenario]\nname = \"x\"", "duration_ticks"),  # missing duration
        (BASE.replace('balance = "50"', "balance = 50.0", 1), "float"),
        (BASE.replace("start_tick = 20", "start_tick = 0"), "after submit_tick"),
        (BASE.replace("end_tick = 1020", "end_tick = 1399"), "end_tick + 2"),
        (BASE.replace("end_tick = 1020", "end_tick = 19"), "after start_tick"),
        (BASE.replace('data_type = "Humidity"\nbudget', 'data_type = ""\nbudget'), "data_type"),
        (BASE + "\n[[faults]]\nkind = \"meteor\"\ntarget = \"b1\"\nat_tick = 1\n", "unknown fault"),
        (BASE + "\n[[faults]]\nkind = \"broker_crash\"\ntarget = \"p1\"\nat_tick = 1\n", "not a broker"),
        (BASE + "\n[[faults]]\nkind = \"eavesdrop\"\ntarget = \"b1\"\nat_tick = 1\n", "not a participant"),
        (BASE.replace('id = "c1"', 'id = "p1"'), "duplicate"),
        ("not == toml ==", "invalid TOML"),
        (BASE.replace('unit_cost = "0.05"', 'unit_cost = "-1"'), "unit_cost"),
        (BASE + '\n[[listings]]\nprovider = "c1"\ndevice_id = 1\ndata_type = "X"\nunit_cost = "1"\nsampling_frequency = 5\n', "role"),
    ],
)
def test_load_scenario_rejects(mutation, needle):
    with pytest.raises(ScenarioError) as err:
        load_scenario(mutation)
    assert needle in str(err.value)


def test_min_price_must_not_exceed_unit_cost():
    bad = BASE.replace('unit_cost = "0.05"', 'unit_cost = "0.05"\nmin_price = "0.06"')
    with pytest.raises(ScenarioError, match="min_price"):
        load_scenario(bad)


# -- clean lifecycle ---------------------------------------------------------------


def test_clean_run_settles_and_refunds():
    sim, report = run(BASE)
    c = sole_contract(report)
    assert c["transfers"] == 100
    assert c["settlements_full"] == 4
    assert c["settlements_partial"] == 0
    assert c["settled_units"] == 100
    assert c["revenue"] == "5"
    assert c["outcome"] == "completed"
    assert c["disputes"] == 0
    assert c["refund_provider"] == "1.25"
    assert c["refund_consumer"] == "1.25"
    assert c["fees"] == "0.2"

    # hand-derived final balances
    assert report.accounts["p1"] == "54.9"
    assert report.accounts["c1"] == "44.9"
    assert report.globals["conservation_residual"] == "0"
    assert report.globals["residual_checks"] == 1400
    # completion nudges both reputations up (clamped at the ceiling)
    assert report.payload["reputations"]["p1"] == "1"


def test_determinism_same_seed_same_digest():
    digests = set()
    chains = set()
    for _ in range(3):
        sim, report = run(BASE, seed=7)
        digests.add(report.digest())
        chains.add(sim.ledger.export_jsonl())
    assert len(digests) == 1
    assert len(chains) == 1

    _, other = run(BASE, seed=8)
    assert other.digest() not in digests
    # contract outcomes agree even when the key material differs
    assert sole_contract(other)["outcome"] == "completed"


def test_report_tracks_broker_and_negotiation():
    _, report = run(BASE)
    assert report.brokers["b2"]["fee_tokens"] == 1  # c1's home broker hosted the DSC
    assert report.brokers["b2"]["fee_account"] == "0.2"
    neg = report.globals["negotiation"]
    assert neg.get("sessions", 0) == 1
    assert neg.get("accepted", 0) == 1


# -- fault ports -------------------------------------------------------------------


def fault(kind, target, at_tick, extra=""):
    return f'\n[[faults]]\nkind = "{kind}"\ntarget = "{target}"\nat_tick = {at_tick}\n{extra}'


def test_crash_and_recover_preserves_outcome():
    text = BASE + fault("broker_crash", "b2", 200) + fault("broker_recover", "b2", 400)
    sim, report = run(text)
    c = sole_contract(report)
    assert c["outcome"] == "completed"
    assert c["revenue"] == "5"
    assert report.accounts["p1"] == "54.9"
    assert report.accounts["c1"] == "44.9"
    assert report.globals["conservation_residual"] == "0"
    # c1 lost its home and was adopted by the nearest live broker
    assert report.brokers["b2"]["live"] is True


def test_crash_without_recovery_still_settles():
    # 2 of 3 brokers stay live: the chain keeps sealing and the run completes
    text = BASE + fault("broker_crash", "b2", 200)
    _, report = run(text)
    c = sole_contract(report)
    assert c["outcome"] == "completed"
    assert report.globals["conservation_residual"] == "0"
    assert report.brokers["b2"]["live"] is False


def test_counter_tamper_disputes_at_window():
    text = BASE + fault("counter_tamper", "c1", 100, 'params = {window = 2, delta = -1}')
    sim, report = run(text)
    c = sole_contract(report)
    assert c["outcome"] == "disputed"
    assert c["dispute_reason"] == "counter_mismatch"
    assert c["settlements_full"] == 1  # only window 1 paid
    assert c["revenue"] == "1.25"
    assert c["frozen"] == "2.5"
    assert c["refund_provider"] == "0"
    # both reputations take the dispute penalty
    assert report.payload["reputations"]["p1"] == "0.9"
    assert report.payload["reputations"]["c1"] == "0.9"
    assert report.globals["conservation_residual"] == "0"


def test_payment_refusal_times_out_to_dispute():
    text = BASE + fault("payment_refusal", "c1", 300)
    _, report = run(text)
    c = sole_contract(report)
    assert c["outcome"] == "disputed"
    assert c["dispute_reason"] == "lodged_by_provider:settlement_timeout:c1"
    assert report.globals["conservation_residual"] == "0"


def test_delivery_stall_lodged_by_consumer():
    text = BASE + fault("delivery_stall", "p1", 500)
    _, report = run(text)
    c = sole_contract(report)
    assert c["outcome"] == "disputed"
    assert c["dispute_reason"] == "lodged_by_consumer:delivery_stalled"
    assert c["transfers"] < 100
    assert report.globals["conservation_residual"] == "0"


def test_eavesdrop_sees_frames_recovers_nothing():
    text = BASE + fault("eavesdrop", "p1", 0)
    _, report = run(text)
    eav = report.globals["eavesdrop"]
    assert eav["taps"] == 1
    assert eav["frames_seen"] == 100
    assert eav["plaintexts_recovered"] == 0
    # the tap does not interfere with delivery
    assert sole_contract(report)["outcome"] == "completed"


BIAS_EXTRA = """
[[participants]]
id = "p2"
role = "provider"
balance = "50"
location = [0.6, 0.0]

[[listings]]
provider = "p2"
device_id = 8
data_type = "Humidity"
unit_cost = "0.04"
sampling_frequency = 10
location = [0.6, 0.0]
"""


def test_collusion_bias_is_flagged_on_chain():
    text = BASE + BIAS_EXTRA + fault("broker_collusion_bias", "b1", 0)
    sim, report = run(text)
    assert report.globals["flagged_rounds"] == [0]
    # the doctored round was challenged by a peer over the anchored digests
    reg = sim.ledger.get_contract_state(sim.register_address)
    assert "0:b1" in reg["challenges"]
    challenge = reg["challenges"]["0:b1"]
    assert challenge["expected_digest"] != challenge["actual_digest"]
    # commerce proceeds on the honest home broker's full candidate list: the
    # cheap provider wins the haggle (one concession step from 0.04 quote)
    c = sole_contract(report)
    assert c["outcome"] == "completed"
    assert c["unit_cost"] == "0.047"
    assert report.globals["conservation_residual"] == "0"


def test_bias_with_single_candidate_is_undetectable():
    # with one matching listing the doctored list equals the honest one
    text = BASE + fault("broker_collusion_bias", "b1", 0)
    _, report = run(text)
    assert report.globals["flagged_rounds"] == []
    assert sole_contract(report)["outcome"] == "completed"


# -- key rotation ------------------------------------------------------------------


def test_key_rotation_after_completion():
    text = BASE.replace('role = "consumer"\nbalance = "50"',
                        'role = "consumer"\nbalance = "50"\nrotate_key_on_completion = true')
    sim, report = run(text)
    assert sole_contract(report)["outcome"] == "completed"
    assert len(sim.directory.get("c1").keyring) == 2
    assert len(sim.directory.get("p1").keyring) == 1
    # both keys stay attributable to c1
    snap = sim.directory.identities_snapshot()
    c1_keys = [pk for pk, pid in snap.items() if pid == "c1"]
    assert len(c1_keys) == 2


# -- outputs -----------------------------------------------------------------------


def test_emit_metrics_files(tmp_path):
    sim, report = run(BASE, trace=True)
    written = harness.emit_metrics(sim, report, tmp_path)
    names = {p.name for p in written}
    assert names == {"metrics.tsv", "chain_audit.txt", "match_audit.txt",
                     "contract_tables.txt", "trace.txt"}
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert lines[0] == "row_type\tkey\tmetric\tvalue"
    assert all(len(line.split("\t")) == 4 for line in lines[1:])
    assert any(line.startswith("global\trun\trevenue\t5") for line in lines)

    audit = (tmp_path / "chain_audit.txt").read_text().splitlines()
    assert all(len(line.split("|")) == 4 for line in audit)
    match_audit = (tmp_path / "match_audit.txt").read_text().splitlines()
    assert all(len(line.split("|")) == 5 for line in match_audit)
    tables = (tmp_path / "contract_tables.txt").read_text()
    assert "# lookup table" in tables
    assert "Humidity" in tables
    trace = (tmp_path / "trace.txt").read_text().splitlines()
    assert all(len(line.split("|")) == 6 for line in trace)


def test_chain_export_replays_to_same_state(tmp_path):
    sim, report = run(BASE)
    path = harness.export_chain(sim, tmp_path / "chain.jsonl")
    replayed, digests = Ledger.replay_jsonl(path.read_text())
    assert digests == [b.state_digest for b in sim.ledger.blocks]
    assert replayed.accounts == sim.ledger.accounts
    assert replayed.fee_accounts == sim.ledger.fee_accounts


def test_until_stops_early():
    sim, report = run(BASE, until=10)
    assert sim.kernel.now < 10
    assert report.globals["residual_checks"] == 10
    # the subscription exists but has not reached its start tick yet
    c = sole_contract(report)
    assert c["status"] == "created"
    assert c["settled_units"] == 0


# -- CLI ---------------------------------------------------------------------------


def write_scenario(tmp_path, text=BASE):
    p = tmp_path / "scenario.toml"
    p.write_text(text)
    return p


def test_cli_run_ok(tmp_path, capsys):
    p = write_scenario(tmp_path)
    code = cli.main([
        "run", "--scenario", str(p), "--seed", "42",
        "--metrics-out", str(tmp_path / "out"),
        "--chain-out", str(tmp_path / "out" / "chain.jsonl"),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "scenario=fault_matrix" in out
    assert "residual=0" in out
    assert "report digest " in out
    assert (tmp_path / "out" / "metrics.tsv").exists()
    assert (tmp_path / "out" / "chain.jsonl").exists()


def test_cli_seed_required(tmp_path, capsys):
    p = write_scenario(tmp_path)
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--scenario", str(p)])
    assert exc.value.code == 1


def test_cli_bad_seed_and_until(tmp_path):
    p = write_scenario(tmp_path)
    assert cli.main(["run", "--scenario", str(p), "--seed", str(2**64)]) == 1
    assert cli.main(["run", "--scenario", str(p), "--seed", "1", "--until", "-5"]) == 1


def test_cli_scenario_error(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[scenario]\nname = \"x\"\n")
    assert cli.main(["run", "--scenario", str(p), "--seed", "1"]) == 1
    assert "scenario error" in capsys.readouterr().err
    assert cli.main(["run", "--scenario", str(tmp_path / "missing.toml"), "--seed", "1"]) == 1


def test_cli_invariant_violation_exits_2(tmp_path, capsys, monkeypatch):
    p = write_scenario(tmp_path)

    def broken_run(self, until=None):
        raise InvariantViolation("conservation violated at tick 3: residual 1")

    monkeypatch.setattr(Simulation, "run", broken_run)
    assert cli.main(["run", "--scenario", str(p), "--seed", "1"]) == 2
    assert "invariant violation" in capsys.readouterr().err
