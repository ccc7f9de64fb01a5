"""Command-line front end: synthesize, verify, simulate, evaluate, reduce, transfer."""

import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from .certificate import init_certificate
from .certio import (CertificateFile, Provenance, check_compatible, dumps, load_certificate,
                     report_digest, save_certificate, write_report)
from .cegis import run_cegis
from .errors import CertificateFormatError, ConfigurationError
from .evaluation import (lyapunov_trace, preset_scenarios, rmse, run_scenario, siss_envelope_check,
                         write_envelope_check_csv, write_lyap_csv, write_rmse_csv)
from .scalability import find_substructure_map, partition_equivalent, transfer_certificate
from .seeding import derive_seed
from .synthesis import write_loss_csv
from .system import DisturbanceSignal, pad_history, rollout, write_trajectory_csv
from .verification import INCONCLUSIVE, REFUTED, VERIFIED, verify_certificate

log = logging.getLogger("delaycert")

EXIT_CODES = {VERIFIED: 0, REFUTED: 1, INCONCLUSIVE: 2}
EXIT_FORMAT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FORMAT, f"{self.prog}: error: {message}\n")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker cap (runs are sequential)")
    p.add_argument("--out-dir", default=".", help="directory for outputs")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="delaycert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synthesize", parents=[common], help="run CEGIS and write a certificate")
    p = sub.add_parser("verify", parents=[common], help="verify a certificate")
    p.add_argument("--certificate", required=True)
    p = sub.add_parser("simulate", parents=[common], help="closed-loop rollout to CSV")
    p.add_argument("--certificate", default=None, help="use its controller (default: nominal)")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--offset", type=float, nargs="*", default=None,
                   help="initial offset from the equilibrium (per coordinate)")
    p = sub.add_parser("evaluate", parents=[common], help="RMSE, Lyapunov traces and envelope checks")
    p.add_argument("--certificate", required=True)
    p.add_argument("--horizon", type=int, default=None)
    sub.add_parser("reduce", parents=[common], help="structural equivalence classes")
    p = sub.add_parser("transfer", parents=[common], help="reuse a certificate on a larger system")
    p.add_argument("--certificate", required=True, help="certificate of the source system")
    p.add_argument("--source-config", required=True)
    return parser


def _out(args, name):
    return os.path.join(args.out_dir, name)


def _load_config(args):
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_cert(path, system):
    cf = load_certificate(path)
    check_compatible(cf.certificate, system)
    return cf


def cmd_synthesize(args, cfg):
    env = cfgmod.build_environment(cfg)
    system = env.system
    classes = partition_equivalent(system, cfgmod.refinement_rounds(cfg))
    net = cfg.table("networks")
    cert = init_certificate(system, classes, cfgmod.build_constants(cfg), tuple(net["v_hidden"]),
                            tuple(net["pi_hidden"]), net["controller"], net["share"],
                            rng=derive_seed(cfg.seed, "init"))
    verify = cfgmod.build_verify(cfg)
    curves = []
    cert, report, state = run_cegis(env, cert, cfgmod.build_weights(cfg), cfgmod.build_training(cfg), verify,
                                    cfg.seed, _out(args, "cegis_log.jsonl"), curves)
    write_loss_csv(_out(args, "loss.csv"), curves, iteration=True)
    write_report(_out(args, "report.json"), report)
    prov = Provenance(cfg.digest(), cfg.seed, report.verdict, report_digest(report))
    save_certificate(_out(args, "certificate.json"), CertificateFile(cert, prov, verify.lipschitz))
    print(f"verdict: {report.verdict} after {state.iteration} iteration(s)")
    return 0 if report.verdict == VERIFIED else 1


def cmd_verify(args, cfg):
    env = cfgmod.build_environment(cfg)
    cf = _load_cert(args.certificate, env.system)
    report = verify_certificate(cf.certificate, env.system, env.nominal, env.initial_box, cfgmod.build_verify(cfg))
    write_report(_out(args, "report.json"), report)
    print(f"verdict: {report.verdict}")
    return EXIT_CODES[report.verdict]


def _initial_state(system, offset):
    if offset is None:
        return [a.equilibrium.copy() for a in system.agents]
    off = np.asarray(offset, dtype=np.float64)
    return [a.equilibrium + np.broadcast_to(off, (a.state_dim,)) for a in system.agents]


def cmd_simulate(args, cfg):
    env = cfgmod.build_environment(cfg)
    system = env.system
    if args.certificate:
        controller = _load_cert(args.certificate, system).certificate.controller(system, env.nominal)
    else:
        controller = env.nominal
    horizon = args.horizon if args.horizon is not None else cfg.table("evaluation")["horizon"]
    traj = rollout(system, controller, pad_history(system, _initial_state(system, args.offset)),
                   DisturbanceSignal(), horizon, seed=derive_seed(cfg.seed, "simulate"))
    write_trajectory_csv(_out(args, "trajectory.csv"), traj)
    print(f"wrote {horizon + 1} steps")
    return 0


def cmd_evaluate(args, cfg):
    env = cfgmod.build_environment(cfg)
    system = env.system
    cert = _load_cert(args.certificate, system).certificate
    horizon = args.horizon if args.horizon is not None else cfg.table("evaluation")["horizon"]
    scenarios = preset_scenarios(cfg.env, system.n_agents, system.tau_max, horizon, cfg.seed)
    controllers = {"nominal": env.nominal, "certificate": cert.controller(system, env.nominal)}
    rows, ok = [], True
    for sc in scenarios:
        for name, ctrl in controllers.items():
            sysm, traj = run_scenario(env, ctrl, sc)
            value = rmse(env.tracking_errors(traj.states))
            rows.append((sc.name, name, value))
            ok = ok and bool(np.isfinite(value))
            if name == "certificate":
                d = os.path.join(args.out_dir, sc.name)
                os.makedirs(d, exist_ok=True)
                _, values = lyapunov_trace(traj, cert, sysm)
                write_lyap_csv(os.path.join(d, "lyap.csv"), values)
                check = siss_envelope_check(traj, cert, sysm)
                write_envelope_check_csv(os.path.join(d, "envelope.csv"), check)
                ok = ok and check.passed
                print(f"{sc.name}: rmse {value:.6g}, envelope {'pass' if check.passed else 'FAIL'} "
                      f"(worst slack {check.worst_slack:.3g})")
    write_rmse_csv(_out(args, "rmse.csv"), rows)
    return 0 if ok else 1


def cmd_reduce(args, cfg):
    env = cfgmod.build_environment(cfg)
    classes = partition_equivalent(env.system, cfgmod.refinement_rounds(cfg))
    data = {"n_agents": env.system.n_agents, "n_classes": len(classes.classes), "classes": classes.to_json(),
            "slot_orders": [list(o) for o in classes.slot_orders]}
    with open(_out(args, "classes.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(data))
    print(f"{len(classes.classes)} classes over {env.system.n_agents} agents")
    return 0


def cmd_transfer(args, cfg):
    target = cfgmod.build_environment(cfg).system
    source_cfg = cfgmod.load(args.source_config)
    source = cfgmod.build_environment(source_cfg).system
    cf = _load_cert(args.certificate, source)
    cmap = find_substructure_map(source, target, cfgmod.refinement_rounds(cfg))
    if cmap is None:
        raise ConfigurationError("target has a neighborhood with no counterpart in the source")
    cert = transfer_certificate(cf.certificate, source, cmap, target)
    prov = Provenance(cfg.digest(), cfg.seed, "unverified", None)
    save_certificate(_out(args, "certificate.json"), CertificateFile(cert, prov, cf.lipschitz_method))
    with open(_out(args, "transfer_map.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps({str(j): {str(k): v for k, v in m.items()} for j, m in cmap.items()}))
    print(f"transferred to {target.n_agents} agents")
    return 0


COMMANDS = {
    "synthesize": cmd_synthesize,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "reduce": cmd_reduce,
    "transfer": cmd_transfer,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = _load_config(args)
        if args.dry_run:
            sys.stdout.write(cfg.to_toml())
            return 0
        os.makedirs(args.out_dir, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except CertificateFormatError as e:
        print(f"certificate format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
