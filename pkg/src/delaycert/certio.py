"""Deterministic JSON persistence for certificates and reports."""

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .certificate import Certificate, CertificateConstants
from .errors import CertificateFormatError
from .neural import mlp_from_dict, mlp_to_dict
from .scalability import EquivalenceClasses

FORMAT = "delaycert-certificate"
VERSION = 1
VERDICTS = ("verified", "refuted", "inconclusive-cap", "unverified")
_DIGEST = re.compile(r"^[0-9a-f]{64}$")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj):
    """Canonical JSON text (sorted keys, fixed separators, trailing newline)."""
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "), default=_default,
                      allow_nan=False) + "\n"


def report_digest(report):
    """SHA-256 of the timing-free report JSON."""
    data = report.to_json(timing=False) if hasattr(report, "to_json") else report
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Provenance:
    config_hash: str = ""
    seed: int = 0
    verdict: str = "unverified"
    report_digest: str = None

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise CertificateFormatError(f"unknown verdict {self.verdict!r}")
        if self.verdict == "verified" and not (isinstance(self.report_digest, str)
                                               and _DIGEST.match(self.report_digest)):
            raise CertificateFormatError("verdict 'verified' requires a report digest")


@dataclass(frozen=True)
class CertificateFile:
    certificate: Certificate
    provenance: Provenance = field(default_factory=Provenance)
    lipschitz_method: str = "norm-product"


def certificate_to_json(cf):
    cert = cf.certificate
    n = cert.n_agents
    gamma = cert.gamma_matrix()
    return {
        "format": FORMAT,
        "version": VERSION,
        "n_agents": n,
        "constants": asdict(cert.constants),
        "gamma": gamma,
        "gamma_rows": {k: np.asarray(v, dtype=np.float64) for k, v in sorted(cert.gamma_rows.items())},
        "gamma_index": list(cert.gamma_index),
        "v_index": list(cert.v_index),
        "pi_index": list(cert.pi_index),
        "slot_orders": [list(o) for o in cert.slot_orders],
        "classes": None if cert.classes is None else cert.classes.to_json(),
        "v_nets": {k: mlp_to_dict(v) for k, v in sorted(cert.v_nets.items())},
        "pi_nets": {k: mlp_to_dict(v) for k, v in sorted(cert.pi_nets.items())},
        "lipschitz": {"method": cf.lipschitz_method,
                      "v": cert.v_lipschitz(cf.lipschitz_method),
                      "pi": cert.pi_lipschitz(cf.lipschitz_method)},
        "provenance": asdict(cf.provenance),
    }


def _require(data, key, kind):
    if key not in data:
        raise CertificateFormatError(f"missing field '{key}'")
    if not isinstance(data[key], kind):
        raise CertificateFormatError(f"field '{key}' has the wrong type")
    return data[key]


def certificate_from_json(data):
    if not isinstance(data, dict) or data.get("format") != FORMAT:
        raise CertificateFormatError("not a certificate file")
    if data.get("version") != VERSION:
        raise CertificateFormatError(f"unsupported certificate version {data.get('version')!r}")
    try:
        n = _require(data, "n_agents", int)
        constants = CertificateConstants(**_require(data, "constants", dict))
        v_index = tuple(_require(data, "v_index", list))
        pi_index = tuple(_require(data, "pi_index", list))
        g_index = tuple(_require(data, "gamma_index", list))
        orders = tuple(tuple(int(j) for j in o) for o in _require(data, "slot_orders", list))
        if not len(v_index) == len(pi_index) == len(g_index) == len(orders) == n:
            raise CertificateFormatError("per-agent index lengths disagree with n_agents")
        v_nets = {k: mlp_from_dict(v) for k, v in _require(data, "v_nets", dict).items()}
        pi_nets = {k: mlp_from_dict(v) for k, v in _require(data, "pi_nets", dict).items()}
        rows = {k: np.asarray(v, dtype=np.float64) for k, v in _require(data, "gamma_rows", dict).items()}
        classes = data.get("classes")
        classes = None if classes is None else EquivalenceClasses.from_json(classes, orders)
        prov = Provenance(**_require(data, "provenance", dict))
        method = _require(data, "lipschitz", dict).get("method", "norm-product")
    except CertificateFormatError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise CertificateFormatError(f"malformed certificate: {e}") from None
    for i in range(n):
        if v_index[i] not in v_nets:
            raise CertificateFormatError(f"agent {i}: unknown V key {v_index[i]!r}")
        if pi_index[i] is not None and pi_index[i] not in pi_nets:
            raise CertificateFormatError(f"agent {i}: unknown controller key {pi_index[i]!r}")
        if g_index[i] not in rows:
            raise CertificateFormatError(f"agent {i}: unknown gain key {g_index[i]!r}")
        if rows[g_index[i]].shape != (1 + len(orders[i]),):
            raise CertificateFormatError(f"agent {i}: gain row length does not match its neighbors")
    for key, net in list(v_nets.items()) + list(pi_nets.items()):
        if any(not np.all(np.isfinite(w)) for w in net.weights + net.biases):
            raise CertificateFormatError(f"network {key!r} has non-finite parameters")
    cert = Certificate(constants, v_nets, v_index, pi_nets, pi_index, rows, g_index, orders, classes)
    return CertificateFile(cert, prov, method)


def save_certificate(path, cf):
    text = dumps(certificate_to_json(cf))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text


def load_certificate(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise CertificateFormatError(f"{path}: invalid JSON ({e})") from None
    except OSError as e:
        raise CertificateFormatError(f"{path}: {e}") from None
    return certificate_from_json(data)


def check_compatible(cert, system):
    """Raise ``CertificateFormatError`` if the certificate does not fit ``system``."""
    if cert.n_agents != system.n_agents:
        raise CertificateFormatError(f"certificate has {cert.n_agents} agents, system has {system.n_agents}")
    for i in range(system.n_agents):
        a = system.agents[i]
        if sorted(cert.slot_orders[i]) != sorted(system.neighbors(i)):
            raise CertificateFormatError(f"agent {i}: slot order is not a permutation of its neighbors")
        if cert.v_net(i).input_dim != a.state_dim:
            raise CertificateFormatError(f"agent {i}: V input width {cert.v_net(i).input_dim} != {a.state_dim}")
        pi = cert.pi_net(i)
        if pi is not None:
            width = a.state_dim + sum(system.agents[j].state_dim for j in cert.slot_orders[i])
            if pi.input_dim != width or pi.output_dim != a.input_dim:
                raise CertificateFormatError(f"agent {i}: controller shape does not match the system")


def write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(report.to_json(timing=False)))
