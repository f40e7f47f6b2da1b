"""Command-line interface: dataset generation, training, sampling,
evaluation, and numeric audits."""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib

import numpy as np

from . import evalsuite as ev
from . import molgraph as mg
from . import synthdata as sd
from . import training as tr
from . import vaemodel as vm

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_AUDIT = 2


class CliError(Exception):
    pass


def _seed_override(seed: int) -> int:
    env = os.environ.get("EQLINKER_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"EQLINKER_SEED is not an integer: {env!r}")
    return seed


def _load_json(path, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{what} file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"{what} file is not valid JSON: {e}")


def _genspec_from(obj: dict) -> sd.GenSpec:
    known = set(sd.GenSpec.__dataclass_fields__)
    unknown = set(obj) - known
    if unknown:
        raise CliError(f"unknown spec keys: {sorted(unknown)}")
    for key in ("valences", "type_weights"):
        if key in obj:
            obj[key] = tuple(obj[key])
    try:
        return sd.GenSpec(**obj)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid spec: {e}")


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CliError("--n must be >= 1")
    spec = _genspec_from(_load_json(args.spec, "spec")) if args.spec else sd.GenSpec()
    seed = _seed_override(args.seed)
    samples = sd.gen_dataset(args.n, spec, seed)
    mg.write_samples(args.out, samples)
    sd.write_manifest(str(args.out) + ".manifest.json", spec, seed, args.n)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _resolved(cfg: tr.TrainConfig) -> str:
    import dataclasses
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True)


def cmd_train(args) -> int:
    try:
        samples = mg.read_samples(args.data)
    except FileNotFoundError:
        raise CliError(f"data file not found: {args.data}")
    except mg.ParseError as e:
        raise CliError(f"bad data file: {e}")
    obj = _load_json(args.config, "config") if args.config else {}
    if args.ablate_equivariant:
        obj["ablate_equivariant"] = True
    if args.ablate_coord_update:
        obj["ablate_coord_update"] = True
    try:
        cfg = tr.config_from_dict(obj)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config: {e}")
    import dataclasses
    cfg = dataclasses.replace(cfg, seed=_seed_override(cfg.seed))
    print("config:", _resolved(cfg))
    base, step0 = None, 0
    if args.resume:
        base, extra = vm.load_checkpoint(args.resume, expect_config=cfg.model_config())
        step0 = int(extra.get("adam_step", 0))
        print(f"resuming from {args.resume} at adam step {step0}")
    try:
        model, report = tr.train(samples, cfg, ckpt_path=args.out, log=print,
                                 model=base, start_step=step0)
    except tr.TrainAbort as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_AUDIT
    with open(str(args.out) + ".report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _ = vm.load_checkpoint(args.ckpt)
    try:
        samples = mg.read_samples(args.fragments)
    except mg.ParseError as e:
        raise CliError(f"bad fragments file: {e}")
    seed = _seed_override(args.seed)
    recs = ev.generate_records(model, samples, args.k, seed=seed,
                               max_linker_nodes=args.max_linker_nodes,
                               given_anchors=args.given_anchors)
    ev.write_records(args.out, recs)
    print(f"wrote {len(recs)} generations ({args.k} per pair) to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    records = ev.read_records(args.generated)
    if not records:
        raise CliError("empty generated file")
    truth_samples = mg.read_samples(args.truth)
    truth = {i: s.full for i, s in enumerate(truth_samples)}
    keys = None
    if args.train_linkers:
        keys = ev.linker_keys(mg.read_samples(args.train_linkers))
    try:
        report = ev.evaluate(records, truth, keys)
    except ValueError as e:
        raise CliError(str(e))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    print(report.to_csv().strip())
    return EXIT_OK


def cmd_audit(args) -> int:
    model, _ = vm.load_checkpoint(args.ckpt)
    samples = mg.read_samples(args.data)
    seed = _seed_override(args.seed)
    rep = ev.equivariance_audit(model, samples, n_transforms=args.transforms,
                                seed=seed)
    print(rep.to_json())
    if not rep.ok():
        worst = max(("encoder", rep.encoder_dev), ("logprob", rep.logprob_dev),
                    ("coord", rep.coord_dev), key=lambda kv: kv[1])
        print(f"audit FAILED: worst offender {worst[0]} dev {worst[1]:.3e}, "
              f"{rep.graph_mismatches} graph mismatches", file=sys.stderr)
        return EXIT_AUDIT
    print("audit passed")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.ckpt:
        model, _ = vm.load_checkpoint(args.ckpt)
    else:
        model = vm.Model(vm.ModelConfig(n_h=12, n_v=4, hidden=16, m_h=8, m_v=4,
                                        enc_layers=2, dec_layers=2,
                                        type_emb_dim=4, attn_dim=8),
                         seed=_seed_override(args.seed))
    spec = sd.GenSpec(n_min=6, n_max=7)
    sample = sd.gen_dataset(1, spec, seed=_seed_override(args.seed))[0]
    noise = vm.zero_noise(sample.full.n - sample.n_frag, model.config)
    worst_name, worst = "", 0.0
    rng = np.random.default_rng(0)
    names = sorted(model.params)
    picked = [names[i] for i in rng.choice(len(names),
                                           size=min(args.n_params, len(names)),
                                           replace=False)]
    for name in picked:
        err = _param_fd(model, sample, noise, name)
        if err > worst:
            worst_name, worst = name, err
        print(f"  {name}: rel err {err:.3e}")
    print(f"worst: {worst_name} ({worst:.3e})")
    if worst >= args.tol:
        print(f"gradcheck FAILED: {worst_name} rel err {worst:.3e} >= {args.tol}",
              file=sys.stderr)
        return EXIT_AUDIT
    print("gradcheck passed")
    return EXIT_OK


def _param_fd(model: vm.Model, sample, noise, name: str, n_coords: int = 4,
              eps: float = 1e-5) -> float:
    """Central finite differences on a few coordinates of one parameter
    against the tape gradient of the reconstruction+KL objective.

    A coordinate is skipped when perturbing it flips any vector-ReLU
    projection decision: the loss has a crease at <q, k> = 0 and central
    differences straddling it measure the crease angle, not the gradient.

    The relative-error denominator is floored at the finite-difference
    resolution limit: the loss is a sum of ~len(tape) rounded primitives, so
    the central difference carries cancellation noise of order
    n_ops * ulp(|loss|) / (2 * eps).  Gradients below that floor cannot be
    resolved by FD at this eps regardless of correctness; they are compared
    against the floor instead of their own magnitude."""
    from . import equivariant as eq
    from .tensorcore import Tape, backward
    p = model.params[name]

    def loss_value() -> tuple[float, list]:
        masks: list = []
        with eq.kink_masks(masks):
            parts = model.elbo_parts(sample, noise)
        val = float((parts.reconstruction() + parts.kl_h + parts.kl_v).data)
        return val, masks

    masks0: list = []
    tape = Tape()
    with tape, eq.kink_masks(masks0):
        parts = model.elbo_parts(sample, noise)
        loss = parts.reconstruction() + parts.kl_h + parts.kl_v
    g = backward(tape, loss).get(p)
    fd_floor = (8.0 * len(tape.records) * np.finfo(float).eps
                * abs(float(loss.data)) / (2.0 * eps))
    rng = np.random.default_rng(zlib.crc32(name.encode()))  # stable across processes
    flat = p.data.reshape(-1)
    idxs = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst = 0.0

    def same(a: list, b: list) -> bool:
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    for ix in idxs:
        keep = flat[ix]
        evals = []
        flipped = False
        for h in (eps, -eps, eps / 2, -eps / 2):
            flat[ix] = keep + h
            val, m = loss_value()
            evals.append(val)
            flipped = flipped or not same(m, masks0)
        flat[ix] = keep
        if flipped:
            continue
        fd1 = (evals[0] - evals[1]) / (2 * eps)
        fd2 = (evals[2] - evals[3]) / eps
        fd = (4.0 * fd2 - fd1) / 3.0   # Richardson: cancels the O(eps^2) term
        ad = g.reshape(-1)[ix]
        worst = max(worst, abs(ad - fd) / max(abs(fd), abs(ad), fd_floor))
    return worst


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eqlinker",
                                 description="Equivariant 3D linker generation")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker cap for sample/eval (default 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--ablate-equivariant", action="store_true")
    t.add_argument("--ablate-coord-update", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate linkers from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--fragments", required=True)
    s.add_argument("--k", type=int, default=250)
    s.add_argument("--max-linker-nodes", type=int, default=None)
    s.add_argument("--given-anchors", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generated molecules")
    e.add_argument("--generated", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--train-linkers", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--csv", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="numerical equivariance audit")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--transforms", type=int, default=100)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_audit)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--ckpt", default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-params", type=int, default=6)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (vm.CheckpointError, mg.ParseError, sd.GenerationBudgetError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
