"""Batch command-line front end.

Every subcommand reads its inputs, runs one pipeline stage and prints a
single ``RESULT key=value ...`` line. Outputs are written atomically.

Exit status: 0 on success, 2 on argument errors, 3 on malformed inputs or
invalid circuits, 1 on numeric failures (zero-probability samples).
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext

import numpy as np

from . import __version__
from .em import LabeledBatch, format_ll_trace, prune, train_em
from .errors import DomainError, ParseError, StructureError, ZeroProbabilityError
from .growing import GrowConfig, format_cluster_map, parse_cluster_maps
from .lvd import (
    PatchLayout,
    assemble,
    bits_per_dimension,
    extract_patches,
    finetune,
    gap_report,
    read_dataset,
    tie_and_train_conditional,
    train_prior,
)
from .serialize import atomic_write, load_circuit, save_circuit
from .structure import learn_hclt

log = logging.getLogger("lvdpc")


class UsageError(Exception):
    """Inputs that are well formed but do not fit together."""


def _fraction(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1)")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be a positive integer")
    return v


def _lr(text):
    parts = text.split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad learning-rate schedule {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or not all(0.0 < v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("learning rates must look like START:END with values in (0, 1]")
    return tuple(vals)


def _hw(text):
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lvdpc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset file (DS v1 format)")
            sp.add_argument("--channels", type=_positive, default=1)
            sp.add_argument("--image-hw", type=_hw, default=None, help="image size HxW (default: square)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=_positive, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    def em_flags(sp):
        sp.add_argument("--epochs", type=int, default=50)
        sp.add_argument("--batch", type=_positive, default=256)
        sp.add_argument("--lr", type=_lr, default=(0.1, 0.01), help="annealed step size START:END")

    sp = sub.add_parser("validate", help="check a circuit file for structural properties")
    sp.add_argument("--circuit-in", required=True)
    common(sp, dataset=False)

    sp = sub.add_parser("hclt", help="learn an HCLT over the pooled patches of a dataset")
    common(sp)
    sp.add_argument("--circuit-out", required=True)
    sp.add_argument("--hidden", type=_positive, default=16)
    sp.add_argument("--heads", type=_positive, default=1)
    sp.add_argument("--domain", type=_positive, default=None, help="values per pixel (default: data maximum + 1)")

    sp = sub.add_parser("train", help="EM on patches (patch-sized circuits) or whole images")
    common(sp)
    sp.add_argument("--circuit-in", required=True)
    sp.add_argument("--circuit-out", required=True)
    sp.add_argument("--labels", default=None, help="cluster maps giving each patch its head")
    sp.add_argument("--prune", type=_fraction, default=None, help="keep fraction after training")
    sp.add_argument("--trace", default=None, help="write the per-epoch mean LL as CSV")
    em_flags(sp)

    sp = sub.add_parser("grow", help="progressive growing of the tied patch conditional")
    common(sp)
    sp.add_argument("--circuit-in", default=None, help="initial single-headed circuit (default: learn an HCLT)")
    sp.add_argument("--circuit-out", required=True)
    sp.add_argument("--labels", required=True, help="output cluster maps, one block per patch position")
    sp.add_argument("--K", type=_positive, default=None, help="target clusters (single-level growing)")
    sp.add_argument("--n1", type=_positive, default=None, help="outer groups of the two-level schedule (default 100)")
    sp.add_argument("--n2", type=_positive, default=None, help="clusters grown inside each outer group (default 4)")
    sp.add_argument("--capacity", type=_fraction, default=0.4)
    sp.add_argument("--epsilon-frac", type=float, default=0.01)
    sp.add_argument("--hidden", type=_positive, default=16)
    sp.add_argument("--prune", type=float, default=0.9, help="keep fraction after each training phase (1 disables)")
    sp.add_argument("--domain", type=_positive, default=None)
    em_flags(sp)

    sp = sub.add_parser("assemble", help="train the latent prior and compose the full model")
    common(sp)
    sp.add_argument("--circuit-in", required=True, help="tied patch conditional")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--circuit-out", required=True, help="composed circuit over pixels")
    sp.add_argument("--prior-out", default=None)
    sp.add_argument("--prior-in", default=None, help="use this prior instead of training one")
    sp.add_argument("--hidden", type=_positive, default=16)
    sp.add_argument("--prior-epochs", type=int, default=30)
    sp.add_argument("--finetune", type=int, default=0, help="full-batch EM epochs on the composed circuit")

    sp = sub.add_parser("eval", help="bits per dimension of a circuit over whole images")
    common(sp)
    sp.add_argument("--circuit-in", required=True)

    sp = sub.add_parser("gaps", help="LVD objective, exact log-likelihood and variational gap")
    common(sp)
    sp.add_argument("--circuit-in", required=True, help="tied patch conditional")
    sp.add_argument("--prior-in", required=True)
    sp.add_argument("--labels", required=True)
    return p


def _layout(args, num_vars, grid):
    try:
        return PatchLayout.from_grid(num_vars, grid, args.channels, args.image_hw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_dataset(args):
    images, emb, grid = read_dataset(args.dataset)
    return images, emb, _layout(args, images.shape[1], grid)


def _read_labels(path):
    with open(path) as fh:
        return parse_cluster_maps(fh.read())


def _write_labels(path, maps):
    atomic_write(path, "".join(format_cluster_map(m) for m in maps))


def _label_grid(maps, n):
    if any(len(m.labels) != n for m in maps):
        raise UsageError("cluster maps do not cover every sample of the dataset")
    return np.stack([m.labels for m in maps], axis=1)


def _result(**kv):
    parts = []
    for k, v in kv.items():
        parts.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    print("RESULT " + " ".join(parts), flush=True)


def cmd_validate(args):
    circuit = load_circuit(args.circuit_in)
    rep = circuit.report
    if not rep.ok:
        raise StructureError("; ".join(rep.messages))
    _result(valid=1, units=circuit.num_units, edges=circuit.num_edges, heads=circuit.num_heads,
            vars=circuit.num_vars)


def cmd_hclt(args):
    images, emb, layout = _load_dataset(args)
    pooled = np.concatenate([d.x for d in extract_patches(images, emb, layout)])
    d = args.domain or int(pooled.max()) + 1
    circuit = learn_hclt(pooled, args.hidden, args.heads, (d,) * layout.patch_size, rng=np.random.default_rng(args.seed))
    save_circuit(circuit, args.circuit_out)
    _result(units=circuit.num_units, edges=circuit.num_edges, heads=circuit.num_heads)


def _training_batch(args, circuit, images, emb, layout):
    if circuit.num_vars == layout.num_vars:
        if args.labels:
            raise UsageError("labels apply to patch-level circuits only")
        return LabeledBatch.unlabeled(images)
    if circuit.num_vars != layout.patch_size:
        raise UsageError(
            f"circuit has {circuit.num_vars} variables; expected {layout.patch_size} (patch) or {layout.num_vars} (image)"
        )
    patches = extract_patches(images, emb, layout)
    x = np.concatenate([d.x for d in patches])
    if args.labels:
        z = _label_grid(_read_labels(args.labels), len(images))
        labels = z.T.ravel()
    else:
        labels = np.zeros(len(x), dtype=np.int64)
    return LabeledBatch(x, labels)


def cmd_train(args):
    images, emb, layout = _load_dataset(args)
    circuit = load_circuit(args.circuit_in)
    batch = _training_batch(args, circuit, images, emb, layout)
    rng = np.random.default_rng(args.seed)
    circuit, trace = train_em(circuit, batch, args.epochs, args.batch, args.lr[0], args.lr[1], rng=rng)
    if args.prune is not None:
        circuit = prune(circuit, batch, args.prune)
    save_circuit(circuit, args.circuit_out)
    if args.trace:
        atomic_write(args.trace, format_ll_trace(trace))
    final = float(np.mean(circuit.head_log_likelihoods(batch.x)[np.arange(len(batch)), batch.labels]))
    _result(train_ll=final, epochs=len(trace), edges=circuit.num_edges)


DEFAULT_SCHEDULE = (100, 4)


def grow_schedule(args):
    """``(n_outer, clusters_per_group)``; ``n_outer`` is None for single-level growing."""
    if args.K is not None:
        if args.n1 is not None or args.n2 is not None:
            raise UsageError("use either --K or --n1/--n2")
        return None, args.K
    if (args.n1 is None) != (args.n2 is None):
        raise UsageError("--n1 and --n2 go together")
    if args.n1 is None:
        return DEFAULT_SCHEDULE
    return args.n1, args.n2


def cmd_grow(args):
    n_outer, k = grow_schedule(args)
    if not 0.0 < args.prune <= 1.0:
        raise UsageError("--prune must lie in (0, 1]")
    images, emb, layout = _load_dataset(args)
    rng = np.random.default_rng(args.seed)
    try:
        config = GrowConfig(
            K=k,
            capacity_fraction=args.capacity,
            epsilon_fraction=args.epsilon_frac,
            hidden_size=args.hidden,
            epochs=args.epochs,
            batch_size=args.batch,
            lr_start=args.lr[0],
            lr_end=args.lr[1],
            prune_keep=args.prune,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    patches = extract_patches(images, emb, layout)
    initial = load_circuit(args.circuit_in) if args.circuit_in else None
    domains = None
    if args.domain:
        domains = (args.domain,) * layout.patch_size
    circuit, maps = tie_and_train_conditional(
        patches, config, rng=rng, domains=domains, n_outer=n_outer, initial=initial
    )
    save_circuit(circuit, args.circuit_out)
    _write_labels(args.labels, maps)
    x = np.concatenate([d.x for d in patches])
    labels = np.concatenate([m.labels for m in maps])
    ll = float(np.mean(circuit.head_log_likelihoods(x)[np.arange(len(x)), labels]))
    _result(clusters=circuit.num_heads, units=circuit.num_units, edges=circuit.num_edges, train_ll=ll)


def cmd_assemble(args):
    images, emb, layout = _load_dataset(args)
    conditional = load_circuit(args.circuit_in)
    z = _label_grid(_read_labels(args.labels), len(images))
    rng = np.random.default_rng(args.seed)
    if args.prior_in:
        prior = load_circuit(args.prior_in)
    else:
        prior = train_prior(z, conditional.num_heads, layout, args.hidden, args.prior_epochs, rng=rng)
    model = assemble(prior, conditional, layout)
    model = finetune(model, images, args.finetune, rng=rng)
    save_circuit(model.circuit, args.circuit_out)
    if args.prior_out:
        save_circuit(prior, args.prior_out)
    _result(units=model.circuit.num_units, edges=model.circuit.num_edges,
            bpd=bits_per_dimension(model, images))


def cmd_eval(args):
    images, emb, layout = _load_dataset(args)
    circuit = load_circuit(args.circuit_in)
    if circuit.num_vars != images.shape[1]:
        raise UsageError(f"circuit has {circuit.num_vars} variables, images have {images.shape[1]}")
    ll = circuit.head_log_likelihoods(images)[:, 0]
    if np.isneginf(ll).any():
        raise ZeroProbabilityError(int(np.flatnonzero(np.isneginf(ll))[0]), 0)
    _result(bpd=bits_per_dimension(circuit, images), ll=float(ll.mean()))


def cmd_gaps(args):
    images, emb, layout = _load_dataset(args)
    conditional = load_circuit(args.circuit_in)
    prior = load_circuit(args.prior_in)
    z = _label_grid(_read_labels(args.labels), len(images))
    model = assemble(prior, conditional, layout)
    rep = gap_report(model, images, z)
    if not np.isfinite(rep.true_ll):
        raise FloatingPointError("some image has zero probability under the assembled model")
    _result(lvd_objective=rep.lvd_objective, true_ll=rep.true_ll, variational_gap=rep.variational_gap)


COMMANDS = {
    "validate": cmd_validate,
    "hclt": cmd_hclt,
    "train": cmd_train,
    "grow": cmd_grow,
    "assemble": cmd_assemble,
    "eval": cmd_eval,
    "gaps": cmd_gaps,
}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(code, message):
    print(f"lvdpc: error: {message}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            COMMANDS[args.command](args)
    except (ParseError, StructureError, DomainError) as exc:
        return _fail(3, str(exc))
    except ZeroProbabilityError as exc:
        return _fail(1, str(exc))
    except FloatingPointError as exc:
        return _fail(1, str(exc))
    except (UsageError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(2, str(exc))
    except ValueError as exc:
        return _fail(3, str(exc))
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
