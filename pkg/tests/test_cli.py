import csv
import json
import os
import sys

import numpy as np
import tomli_w

from delaycert import cli
from delaycert import config as cfgmod
from delaycert.certio import CertificateFile, Provenance, load_certificate, save_certificate

from support import fixture_path, hand_certificate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def run(*argv):
    return cli.main(list(argv))


def write_config(path, cfg, **tables):
    data = tomllib.loads(cfg.to_toml())
    for name, values in tables.items():
        data[name].update(values)
    path.write_text(tomli_w.dumps(data))
    return str(path)


def test_toy_certificate_reverifies(toy_run, tmp_path):
    assert toy_run.exit_code == 0
    code = run("verify", "--config", toy_run.config_path, "--certificate", toy_run.path("certificate.json"),
               "--out-dir", str(tmp_path))
    assert code == 0
    with open(tmp_path / "report.json") as fh:
        assert json.load(fh) == toy_run.report


def test_coarser_outer_grid_keeps_soundness(toy_run, tmp_path):
    cfg = write_config(tmp_path / "coarse.toml", toy_run.config,
                       grids={"delta_out": 2 * toy_run.config.table("grids")["delta_out"]})
    code = run("verify", "--config", cfg, "--certificate", toy_run.path("certificate.json"),
               "--out-dir", str(tmp_path))
    with open(tmp_path / "report.json") as fh:
        coarse = json.load(fh)
    if code == 0:
        fine = {t["task"]: t for t in toy_run.report["tasks"]}
        for t in coarse["tasks"]:
            if t["k"] not in ("classk", "inside") and t["worst"] is not None:
                assert t["worst"] < 0
                assert t["margins"]["delta_out"] >= fine[t["task"]]["margins"]["delta_out"]
    else:
        assert coarse["verdict"] != "verified"


def test_corrupted_certificate_exits_3(toy_run, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(open(toy_run.path("certificate.json")).read()[:200])
    assert run("verify", "--config", toy_run.config_path, "--certificate", str(bad),
               "--out-dir", str(tmp_path)) == 3


def test_config_errors_exit_3(tmp_path, capsys):
    cfg = tmp_path / "x.toml"
    cfg.write_text("seed = 1\n")
    assert run("reduce", "--config", str(cfg), "--out-dir", str(tmp_path)) == 3
    assert "env" in capsys.readouterr().err
    assert run("reduce", "--config", str(tmp_path / "nope.toml")) == 3
    assert run("reduce", "--config", fixture_path("star.toml"), "--threads", "0") == 3


def test_reduce_star(tmp_path):
    assert run("reduce", "--config", fixture_path("star.toml"), "--out-dir", str(tmp_path)) == 0
    data = json.loads((tmp_path / "classes.json").read_text())
    assert data["n_classes"] == 2 and data["n_agents"] == 10


def test_simulate_at_equilibrium_is_constant(tmp_path):
    assert run("simulate", "--config", fixture_path("chain.toml"), "--horizon", "5",
               "--out-dir", str(tmp_path)) == 0
    with open(tmp_path / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    states = [r for r in rows if r["control_flag"] == "0"]
    assert len(states) == 6 * 10 and len(rows) - len(states) == 5 * 10
    assert all(float(r["value"]) == 0.0 for r in rows)


def test_dry_run_prints_resolved_config(capsys):
    assert run("synthesize", "--config", fixture_path("toy.toml"), "--dry-run", "--seed", "4") == 0
    text = capsys.readouterr().out
    assert cfgmod.loads(text) == cfgmod.load(fixture_path("toy.toml")).with_seed(4)


def test_transfer_chain_then_verify(tmp_path):
    src_cfg = cfgmod.load(fixture_path("chain3.toml"))
    env = cfgmod.build_environment(src_cfg)
    cert_path = tmp_path / "src.json"
    save_certificate(cert_path, CertificateFile(hand_certificate(env), Provenance(src_cfg.digest(), 0)))
    out = tmp_path / "out"
    assert run("transfer", "--config", fixture_path("chain10.toml"), "--source-config", fixture_path("chain3.toml"),
               "--certificate", str(cert_path), "--out-dir", str(out)) == 0
    moved = load_certificate(out / "certificate.json")
    assert moved.certificate.n_agents == 10 and moved.provenance.verdict == "unverified"
    assert os.path.exists(out / "transfer_map.json")
    assert run("verify", "--config", fixture_path("chain10.toml"), "--certificate", str(out / "certificate.json"),
               "--out-dir", str(out)) == 0


def test_transfer_to_mismatched_target_fails(tmp_path):
    src_cfg = cfgmod.load(fixture_path("chain3.toml"))
    env = cfgmod.build_environment(src_cfg)
    cert_path = tmp_path / "src.json"
    save_certificate(cert_path, CertificateFile(hand_certificate(env)))
    # chain.toml has asymmetric two-step delays that the source lacks
    assert run("transfer", "--config", fixture_path("chain.toml"), "--source-config", fixture_path("chain3.toml"),
               "--certificate", str(cert_path), "--out-dir", str(tmp_path)) == 3


def test_seeded_synthesis_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "small.toml", cfgmod.load(fixture_path("toy.toml")),
                       training={"trajectories": 20, "horizon": 5, "epochs": 2, "cegis_cap": 2,
                                 "pretrain_epochs": 1})
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run("synthesize", "--config", cfg, "--seed", "11", "--out-dir", str(out))
        outs.append(out)
    for f in ("certificate.json", "report.json", "loss.csv", "cegis_log.jsonl"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert np.isfinite(json.loads((outs[0] / "report.json").read_text())["rho"])
