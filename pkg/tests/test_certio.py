import json

import numpy as np
import pytest

from delaycert.certio import (CertificateFile, Provenance, check_compatible, load_certificate, report_digest,
                              save_certificate)
from delaycert.certificate import CertificateConstants, init_certificate
from delaycert.errors import CertificateFormatError
from delaycert.scalability import partition_equivalent

from support import linear_env


def sample_file():
    env = linear_env(n_agents=3, topology="chain", tau=1)
    cert = init_certificate(env.system, partition_equivalent(env.system), CertificateConstants(), (4,), (4,), rng=1)
    return env, CertificateFile(cert, Provenance("ab" * 32, 3))


def test_save_load_is_byte_identical(tmp_path):
    env, cf = sample_file()
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    text = save_certificate(a, cf)
    back = load_certificate(a)
    assert save_certificate(b, back) == text
    assert a.read_bytes() == b.read_bytes()
    check_compatible(back.certificate, env.system)
    for k, net in cf.certificate.v_nets.items():
        assert all(np.array_equal(x, y) for x, y in zip(net.weights, back.certificate.v_nets[k].weights))


def test_verified_requires_digest():
    with pytest.raises(CertificateFormatError):
        Provenance(verdict="verified")
    with pytest.raises(CertificateFormatError):
        Provenance(verdict="proven")
    assert Provenance(verdict="verified", report_digest=report_digest({"verdict": "verified"})).verdict


def test_corrupted_files_raise(tmp_path):
    _, cf = sample_file()
    path = tmp_path / "c.json"
    save_certificate(path, cf)
    data = json.loads(path.read_text())
    for mutate in (lambda d: d.pop("v_nets"), lambda d: d.update(version=9),
                   lambda d: d.update(v_index=["nope"] * 3), lambda d: d.update(n_agents=5)):
        d = json.loads(json.dumps(data))
        mutate(d)
        path.write_text(json.dumps(d))
        with pytest.raises(CertificateFormatError):
            load_certificate(path)
    path.write_text("{not json")
    with pytest.raises(CertificateFormatError):
        load_certificate(path)
    with pytest.raises(CertificateFormatError):
        load_certificate(tmp_path / "missing.json")


def test_incompatible_system_rejected():
    _, cf = sample_file()
    other = linear_env(n_agents=4, topology="chain", tau=1).system
    with pytest.raises(CertificateFormatError):
        check_compatible(cf.certificate, other)
