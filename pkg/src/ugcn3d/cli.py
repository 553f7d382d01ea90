"""Command-line entry point: ``ugcn3d <command> [options]``."""

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import __version__, kernels
from .data import (
    PoseSequence,
    Sample,
    SynthConfig,
    generate_synthetic,
    import_table,
    load_dataset,
    read_skl,
    save_dataset,
    write_skl,
)
from .errors import (
    FormatError,
    MissingArgument,
    UGCNError,
    UnknownCommand,
    ValidationError,
)
from .kinematics import RotationSet, forward_kinematics, inverse_kinematics_swing
from .model import ModelConfig, build_model, desk_config, load_weights, save_weights
from .topology import default_rest_positions, default_topology, graph_dump, spatial_adjacency, topology_from_dict
from .train import DESK_HYPERPARAMS, PAPER_HYPERPARAMS, evaluate, refine, train

COMMANDS = ("synth", "train", "refine", "eval", "gradcheck", "graph-dump", "kin", "import", "replay")


class _UsageError(Exception):
    def __init__(self, parser, message):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(self, message)


# ---------------------------------------------------------------------------
# shared helpers


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--topology", help="topology JSON (parents, names, optional rest positions)")
    return p


def _topology(args):
    """(topology, rest positions or None)."""
    if not args.topology:
        return default_topology(), default_rest_positions()
    try:
        with open(args.topology) as fh:
            desc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.topology}: not valid JSON ({exc.msg})", offset=exc.pos) from None
    topo = topology_from_dict(desc)
    rest = np.asarray(desc["rest"], dtype=np.float64) if "rest" in desc else None
    return topo, rest


def _need_rest(rest, what):
    if rest is None:
        raise ValidationError(f"{what} needs rest positions; add a 'rest' list to the topology file")
    return rest


def _model_config(args, topology, path=None):
    if path:
        return ModelConfig.load(path)
    if args.profile == "paper":
        return ModelConfig(joints=topology.joint_count).validate()
    return desk_config(topology.joint_count).validate()


def _weights_config(args, topology):
    """Config for a weights file: ``--config``, else config.json beside the weights, else the profile."""
    if args.config:
        return _model_config(args, topology, args.config)
    sibling = os.path.join(os.path.dirname(os.path.abspath(args.weights)), "config.json")
    if os.path.exists(sibling):
        return ModelConfig.load(sibling)
    return _model_config(args, topology)


def _hyperparams(args):
    base = PAPER_HYPERPARAMS if args.profile == "paper" else DESK_HYPERPARAMS
    hp = type(base)(**{**base.__dict__, "seed": args.seed})
    if args.epochs is not None:
        hp.epochs = args.epochs
    if args.lr is not None:
        hp.learning_rate = args.lr
    if args.batch is not None:
        hp.batch_size = args.batch
    return hp.validate()


@contextmanager
def _thread_limit(n):
    if n < 1:
        raise ValidationError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    # the numba kernels are serial; only BLAS pools need capping
    with threadpool_limits(limits=n):
        yield


def _manifest_path(out):
    return os.path.normpath(out) + ".manifest.json"


def _write_manifest(args, argv, config, inputs, outputs, started):
    """Sibling ``<output>.manifest.json`` so the output itself stays reproducible."""
    manifest = {
        "command": args.command if args.command != "kin" else f"kin {args.kin_command}",
        "argv": list(argv),
        "config": config,
        "seed": args.seed,
        "threads": args.threads,
        "profile": args.profile,
        "version": __version__,
        "backend": kernels.get_backend(),
        "inputs": inputs,
        "outputs": outputs,
        "duration_s": round(time.perf_counter() - started, 6),
    }
    with open(_manifest_path(outputs[0]), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sequences_in(path):
    """(name, sequence) pairs from one ``.skl`` file or every ``.skl`` in a directory."""
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".skl") and not f.startswith("target_"))
        if not names:
            raise FormatError(f"{path}: no .skl files")
        return [(n, read_skl(os.path.join(path, n))) for n in names]
    return [(os.path.basename(path), read_skl(path))]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, argv, started):
    topo, rest = _topology(args)
    cfg = SynthConfig(
        sequences=args.sequences,
        frames=args.frames,
        noise_sigma=args.noise,
        occlusion=args.occlusion,
        groups=args.groups,
        seed=args.seed,
        topology=topo,
        rest=_need_rest(rest, "synth"),
    )
    samples = generate_synthetic(cfg)
    save_dataset(samples, args.out)
    resolved = {k: v for k, v in cfg.__dict__.items() if k not in ("topology", "rest")}
    resolved["topology"] = topo.name
    _write_manifest(args, argv, resolved, [], [args.out], started)
    print(f"wrote {len(samples)} sequences to {args.out}")


def cmd_train(args, argv, started):
    topo, _ = _topology(args)
    config = _model_config(args, topo, args.config)
    hp = _hyperparams(args)
    samples = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    model = build_model(config, topo, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)

    def log(epoch, row):
        extra = "" if row[2] is None else f"  val {row[2]:.3f}"
        print(f"epoch {epoch:4d}  loss {row[1]:.3f} mm{extra}", flush=True)

    history = train(model, samples, hp, val=val, checkpoint_dir=args.out, log=None if args.quiet else log)
    config.save(os.path.join(args.out, "config.json"))
    save_weights(model, os.path.join(args.out, "model.ugcw"))
    with open(os.path.join(args.out, "history.csv"), "w") as fh:
        fh.write("epoch,loss_mm,val_mpjpe_mm\n")
        for epoch, loss, v in history:
            fh.write(f"{epoch},{loss:.17g},{'' if v is None else format(v, '.17g')}\n")
    resolved = {"model": config.to_dict(), "hyperparams": {**hp.__dict__, "decay_at": list(hp.decay_at)}}
    inputs = [args.data] + ([args.val] if args.val else [])
    _write_manifest(args, argv, resolved, inputs, [args.out], started)
    print(f"final loss {history[-1][1]:.3f} mm; weights in {os.path.join(args.out, 'model.ugcw')}")


def cmd_refine(args, argv, started):
    topo, _ = _topology(args)
    config = _weights_config(args, topo)
    model = load_weights(args.weights, config, topo, seed=args.seed)
    items = _sequences_in(args.inp)
    outputs = refine(model, [Sample(s, s) for _, s in items])
    single = not os.path.isdir(args.inp)
    if not single:
        os.makedirs(args.out, exist_ok=True)
    for (name, seq), pos in zip(items, outputs):
        path = args.out if single else os.path.join(args.out, name)
        write_skl(PoseSequence(pos, None, seq.label), path)
    _write_manifest(args, argv, {"model": config.to_dict()}, [args.weights, args.inp], [args.out], started)
    print(f"refined {len(items)} sequences into {args.out}")


def cmd_eval(args, argv, started):
    topo, _ = _topology(args)
    if args.identity:
        config = _model_config(args, topo, args.config)
        model = build_model(config, topo, seed=args.seed)
        model.zero_head()
        if not config.residual_output:
            raise ValidationError("--identity needs a config with residual_output enabled")
    elif args.weights:
        config = _weights_config(args, topo)
        model = load_weights(args.weights, config, topo, seed=args.seed)
    else:
        raise MissingArgument("eval needs --weights or --identity")
    samples = load_dataset(args.data)
    key = (lambda s: "all") if args.group_by == "none" else None
    report = evaluate(model, samples, group_key=key, threads=args.threads)
    sys.stdout.write(report.to_text())
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_csv())
        inputs = [args.data] + ([args.weights] if args.weights else [])
        _write_manifest(args, argv, {"model": config.to_dict(), "group_by": args.group_by}, inputs,
                        [args.report], started)


def cmd_gradcheck(args, argv, started):
    from .gradsuite import TOLERANCE, run_suite

    worst, elapsed = run_suite(range(args.seed, args.seed + args.seeds))
    failed = 0
    for name in sorted(worst):
        ok = worst[name] < TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:28s} {worst[name]:.3e}")
    print(f"{len(worst) - failed}/{len(worst)} checks below {TOLERANCE:g} over {args.seeds} seeds in {elapsed:.1f} s")
    return 1 if failed else 0


def cmd_graph_dump(args, argv, started):
    topo, _ = _topology(args)
    text = graph_dump(spatial_adjacency(topo))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        _write_manifest(args, argv, {"topology": topo.to_dict()}, [], [args.out], started)
    else:
        sys.stdout.write(text)


def cmd_kin(args, argv, started):
    topo, rest = _topology(args)
    rest = _need_rest(rest, "kin")
    if args.kin_command == "fk":
        try:
            with np.load(args.rotations) as z:
                rot = RotationSet(np.array(z["rotations"], dtype=np.float64),
                                  np.array(z["root_translation"], dtype=np.float64))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{args.rotations}: expected arrays 'rotations' and 'root_translation' ({exc})") from None
        pos = forward_kinematics(topo, rest, rot)
        if pos.ndim == 2:
            pos = pos[None]
        write_skl(PoseSequence(pos, None, args.label), args.out)
        _write_manifest(args, argv, {"topology": topo.name}, [args.rotations], [args.out], started)
    else:
        seq = read_skl(args.inp)
        rot = inverse_kinematics_swing(topo, rest, seq.dense())
        with open(args.out, "wb") as fh:
            np.savez(fh, rotations=rot.rotations, root_translation=rot.root_translation)
        _write_manifest(args, argv, {"topology": topo.name}, [args.inp], [args.out], started)
    print(f"wrote {args.out}")


def cmd_import(args, argv, started):
    seq = import_table(args.table, args.frames, args.joints)
    seq.label = args.label
    write_skl(seq, args.out)
    _write_manifest(args, argv, {"frames": args.frames, "joints": args.joints}, [args.table], [args.out], started)
    print(f"wrote {args.out}")


def cmd_replay(args, argv, started):
    try:
        with open(args.manifest) as fh:
            recorded = json.load(fh)["argv"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise FormatError(f"{args.manifest}: not a run manifest") from None
    if recorded and recorded[0] == "replay":
        raise ValidationError("a manifest cannot replay another replay")
    return dispatch(recorded)


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "graph-dump": cmd_graph_dump,
    "kin": cmd_kin,
    "import": cmd_import,
    "replay": cmd_replay,
}


def build_parser():
    common = _common()
    parser = _Parser(prog="ugcn3d", description="Skeleton-sequence refinement with spatio-temporal graph convolutions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--noise", type=float, default=20.0, help="observation noise sigma in mm")
    p.add_argument("--occlusion", type=float, default=0.0, help="fraction of non-root cells hidden")
    p.add_argument("--groups", type=int, default=1)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--val")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("refine", parents=[common], help="run a trained model over .skl sequences")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("eval", parents=[common], help="per-group MPJPE report")
    p.add_argument("--weights")
    p.add_argument("--identity", action="store_true", help="evaluate the identity refinement")
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.add_argument("--group-by", choices=("label", "none"), default="label")
    p.add_argument("--config")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("graph-dump", parents=[common], help="print the partitioned adjacency")
    p.add_argument("--out")

    p = sub.add_parser("kin", help="forward / inverse kinematics")
    kin = p.add_subparsers(dest="kin_command", parser_class=_Parser, metavar="fk|ik")
    q = kin.add_parser("fk", parents=[common], help="rotations .npz -> positions .skl")
    q.add_argument("--rotations", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--label", default="")
    q = kin.add_parser("ik", parents=[common], help="positions .skl -> swing rotations .npz")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out", required=True)

    p = sub.add_parser("import", parents=[common], help="text table -> .skl")
    p.add_argument("--table", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--joints", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="")

    p = sub.add_parser("replay", parents=[common], help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    return parser


def _usage_failure(exc):
    message = str(exc)
    if "invalid choice" in message and exc.parser.prog in ("ugcn3d", "ugcn3d kin"):
        name = "UnknownCommand"
    elif "required" in message:
        name = "MissingArgument"
    else:
        name = "UsageError"
    sys.stderr.write(exc.parser.format_usage())
    sys.stderr.write(f"error: {name}: {message}\n")
    return 1


def dispatch(argv=None):
    """Run one command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UnknownCommand(f"no command given; choose one of {', '.join(COMMANDS)}")
        if args.command == "kin" and args.kin_command is None:
            raise UnknownCommand("kin needs fk or ik")
        started = time.perf_counter()
        with _thread_limit(args.threads):
            code = HANDLERS[args.command](args, argv, started)
        return code or 0
    except _UsageError as exc:
        return _usage_failure(exc)
    except SystemExit as exc:  # --help / --version
        return exc.code or 0
    except ValidationError as exc:
        if isinstance(exc, UnknownCommand):
            sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1
    except (FormatError, OSError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2
    except UGCNError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1


def main():
    sys.exit(dispatch())
