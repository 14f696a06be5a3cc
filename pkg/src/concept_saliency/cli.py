"""Command-line pipeline: gen -> train -> concept -> saliency / manipulate.

Every subcommand accepts ``--config FILE.json`` whose keys (flag names with
dashes or underscores) become defaults; explicit flags override them. The
fully resolved arguments are written to ``resolved_config.json`` in the
output directory, and ``--config`` on that file alone repeats the run.

Exit codes: 0 success, 1 usage error, 2 data/shape error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import concepts, data, saliency, vae
from .autodiff.rules import BackpropRule
from .errors import (AbsentAttributeError, ContainerError, NumericalError, ShapeError,
                     StLoadError)

log = logging.getLogger("concept_saliency")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _strs(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _write_resolved(args, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config"}
    resolved = {k: v for k, v in vars(args).items() if k not in skip}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))


# -- gen ---------------------------------------------------------------------------

def cmd_gen(args):
    if args.kind == "squares":
        color = tuple(args.color) if args.color else None
        ds = data.gen_squares(args.n, side=args.side, size=args.size, brightness=args.brightness,
                              color=color, fraction_with=args.fraction, seed=args.seed,
                              background_spread=args.background_spread)
    elif args.kind == "st":
        ds = data.gen_st_layers(args.genes, args.layers, args.noise, size=args.size, seed=args.seed)
    else:
        grids, report = data.load_st_counts(args.matrix, args.spots, grid=(args.size, args.size))
        if not grids:
            raise ShapeError("no genes with non-zero counts")
        ds = data.st_dataset(grids, {"generator": "st_counts", "matrix": str(args.matrix),
                                     "spots": str(args.spots), "dropped_all_zero": report.dropped})
        print(f"read {report.n_genes_read} genes, dropped {report.n_dropped_all_zero} all-zero, "
              f"{report.n_collisions} spot collisions")
    out = Path(args.out)
    data.save_dataset(ds, out / "dataset")
    _write_resolved(args, out)
    print(f"wrote {len(ds)} samples of shape {ds.sample_shape} to {out / 'dataset'}")


# -- train -------------------------------------------------------------------------

def cmd_train(args):
    ds = data.load_dataset(args.data)
    kw = {"width": args.width, "upsample": args.upsample}
    if args.latent_dim:
        kw["latent_dim"] = args.latent_dim
    arch = vae.preset(args.preset, **kw)
    if tuple(ds.sample_shape) != tuple(arch.input_shape):
        raise ShapeError(f"dataset sample shape {tuple(ds.sample_shape)} does not match preset "
                         f"{args.preset!r} input shape {tuple(arch.input_shape)}")
    if args.epochs < 1:
        raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
    if args.kl_warmup < 0:
        raise UsageError(f"--kl-warmup must be >= 0, got {args.kl_warmup}")
    model = vae.init_model(arch, seed=args.seed)
    vae.train(model, ds.samples, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
              seed=args.seed, kl_warmup=args.kl_warmup,
              progress=lambda e, r: print(f"epoch {e}: total {r['total']:.4f}") if args.verbose else None)
    out = Path(args.out)
    vae.save_checkpoint(model, out / "checkpoint")
    vae.write_loss_history(model, out / "loss_history.json")
    _write_resolved(args, out)
    print(f"trained {args.epochs} epochs, final loss {model.info.loss_history[-1]['total']:.4f}")


# -- concept -------------------------------------------------------------------------

def _pick_group(idx, n, rng):
    if n is None or n >= len(idx):
        return idx
    return np.sort(rng.choice(idx, size=n, replace=False))


def cmd_concept(args):
    model = vae.load_checkpoint(args.model)
    ds = data.load_dataset(args.data)
    out = Path(args.out)
    z = vae.encode_means(model, ds.samples)
    if args.attr:
        y = ds.label(args.attr)
        if y.min() == y.max():
            raise ValueError(f"AUC undefined: attribute {args.attr!r} has a single class in {args.data}")
        rng = np.random.default_rng(args.seed)
        pos = _pick_group(np.flatnonzero(y == 1), args.n_per_group, rng)
        neg = _pick_group(np.flatnonzero(y == 0), args.n_per_group, rng)
        concept = concepts.concept_from_attribute(z[pos], z[neg], args.name or args.attr)
        rep_ds = data.load_dataset(args.report_data) if args.report_data else ds
        report = concepts.score_report(model, concept, rep_ds, args.attr, bins=args.bins)
        concepts.save_concept(concept, out / "concept")
        report.save_json(out / "report.json")
        print(f"concept {concept.name}: n+={concept.n_pos} n-={concept.n_neg} AUC={report.auc:.4f} "
              f"gap={report.gap:.2f} sd")
    else:
        try:
            anchors = [ds.index_of(a) for a in args.anchors]
        except KeyError as exc:
            raise ShapeError(str(exc.args[0])) from None
        concept = concepts.concept_from_correlation(z, anchors, k=args.k,
                                                    name=args.name or "+".join(args.anchors))
        concepts.save_concept(concept, out / "concept")
        members = [ds.ids[i] for i in concept.info["members"]]
        summary = {"anchors": args.anchors, "k": args.k, "members": members,
                   "correlations": concept.info["correlations"], "n_excluded": concept.info["n_excluded"]}
        if args.attr_check:
            y = ds.label(args.attr_check)
            summary["purity"] = float(np.mean(y[concept.info["members"]]))
        (out / "correlation.json").write_text(json.dumps(summary, indent=2))
        print(f"concept {concept.name}: top-{args.k} correlated samples averaged, "
              f"{concept.info['n_excluded']} excluded")
    _write_resolved(args, out)


# -- saliency --------------------------------------------------------------------------

def _select(ds, args):
    if args.ids:
        idx = [ds.index_of(i) for i in args.ids]
    elif args.attr:
        idx = list(np.flatnonzero(ds.label(args.attr) == 1)[: args.first])
    else:
        idx = list(range(min(args.first, len(ds))))
    return np.asarray(idx, dtype=int)


def _rules(args):
    rules = []
    for name in args.rule:
        if name == "vanilla":
            rules.append(BackpropRule.vanilla())
        elif name == "guided":
            rules.append(BackpropRule.guided())
        elif name in ("rectgrad", "rectified"):
            if args.tau is not None:
                rules.append(BackpropRule.rectified(tau=args.tau))
            else:
                rules.append(BackpropRule.rectified(percentile=args.tau_percentile))
        else:
            raise UsageError(f"unknown rule {name!r}; choose vanilla, guided or rectgrad")
    return rules


def _rule_tag(rule):
    return {"vanilla": "vanilla", "guided": "guided", "rectified": "rectgrad"}[rule.kind]


def cmd_saliency(args):
    for p in (args.model, args.concept, args.data):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input: {p}")
    model = vae.load_checkpoint(args.model)
    concept = concepts.load_concept(args.concept)
    ds = data.load_dataset(args.data)
    idx = _select(ds, args)
    rules = _rules(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps, names = [], []
    for rule in rules:
        if args.smooth_n > 1 or args.smooth_sigma > 0:
            cfg = saliency.SmoothGradConfig(args.smooth_n, args.smooth_sigma, args.smooth_seed)
            raws = [saliency.smooth_grad(model, concept, ds.samples[i], rule, cfg).raw for i in idx]
        else:
            raws = list(saliency.saliency_batch(model, concept, ds.samples[idx], rule))
        for i, raw in zip(idx, raws):
            smap = saliency.SaliencyMap(raw, rule, concept.name, channel_reduce=args.reduce)
            maps.append(smap)
            shown = smap
            if args.clip:
                shown = saliency.clip_negative(shown)
            elif args.abs:
                shown = saliency.absolute(shown)
            name = f"{ds.ids[i]}_{_rule_tag(rule)}.{args.format}"
            saliency.render(shown, out / name, reduce=args.reduce, colormap=args.colormap)
            names.append(name)
    saliency.save_maps(maps, out / "raw", extra={"ids": [ds.ids[i] for i in idx] * len(rules),
                                                 "images": names})
    _write_resolved(args, out)
    print(f"wrote {len(names)} maps to {out}")


# -- manipulate --------------------------------------------------------------------------

def _strip(images):
    imgs = [np.clip(np.asarray(im), 0, 1) for im in images]
    gap = np.ones((imgs[0].shape[0], 2, imgs[0].shape[2]), dtype=np.float32)
    parts = []
    for k, im in enumerate(imgs):
        if k:
            parts.append(gap)
        parts.append(im)
    strip = np.concatenate(parts, axis=1)
    return np.round(strip * 255).astype(np.uint8)


def cmd_manipulate(args):
    from PIL import Image

    model = vae.load_checkpoint(args.model)
    concept = concepts.load_concept(args.concept)
    ds = data.load_dataset(args.data)
    idx = _select(ds, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alphas = list(args.alphas)
    records = []
    for i in idx:
        images, scores, monotone = saliency.manipulation_trend(model, concept, ds.samples[i], alphas)
        strip = _strip(images)
        img = Image.fromarray(strip[..., 0], mode="L") if strip.shape[-1] == 1 else Image.fromarray(strip, mode="RGB")
        name = f"{ds.ids[i]}_strip.png"
        img.save(out / name)
        records.append({"id": ds.ids[i], "image": name, "scores": scores.tolist(), "monotone": monotone})
    frac = float(np.mean([r["monotone"] for r in records])) if records else float("nan")
    (out / "manipulate.json").write_text(json.dumps(
        {"alphas": alphas, "concept": concept.name, "fraction_monotone": frac, "images": records}, indent=2))
    _write_resolved(args, out)
    print(f"wrote {len(records)} strips; re-encoded score monotone on {frac:.0%}")


# -- parser --------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="concept-saliency", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of defaults for this command")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen", help="generate or import a dataset")
    gsub = g.add_subparsers(dest="kind", parser_class=_Parser, required=True)
    sq = gsub.add_parser("squares", help="smooth backgrounds with inserted squares")
    common(sq)
    sq.add_argument("--n", type=int, required=True)
    sq.add_argument("--side", type=int, default=8)
    sq.add_argument("--size", type=int, default=32)
    sq.add_argument("--brightness", choices=("bright", "dark"), default="bright")
    sq.add_argument("--color", type=_floats, help="r,g,b in [0,1] for a coloured square (3-channel images)")
    sq.add_argument("--fraction", type=float, default=0.5, help="fraction of images with a square")
    sq.add_argument("--background-spread", type=float, default=0.03)
    st = gsub.add_parser("st", help="synthetic ring-layer gene grids")
    common(st)
    st.add_argument("--genes", type=int, required=True)
    st.add_argument("--layers", type=int, default=3)
    st.add_argument("--noise", type=float, default=0.2)
    st.add_argument("--size", type=int, default=32)
    stc = gsub.add_parser("st-counts", help="import tab-separated spot counts onto a grid")
    common(stc)
    stc.add_argument("--matrix", required=True, help="genes x spots count matrix (TSV)")
    stc.add_argument("--spots", required=True, help="spot<TAB>x<TAB>y coordinates (TSV)")
    stc.add_argument("--size", type=int, default=32)
    for sp in (sq, st, stc):
        sp.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a VAE")
    common(t)
    t.add_argument("--data", required=True, help="dataset container directory")
    t.add_argument("--preset", choices=sorted(vae.PRESETS), default="st")
    t.add_argument("--width", type=float, default=1.0, help="channel/unit multiplier")
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--upsample", action="store_true", help="upsample+conv decoder instead of strided deconv")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--kl-warmup", type=int, default=0, help="epochs over which the KL weight ramps from 0 to 1")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("concept", help="build a concept vector and score report")
    common(c)
    c.add_argument("--model", required=True, help="checkpoint directory")
    c.add_argument("--data", required=True)
    mode = c.add_mutually_exclusive_group(required=True)
    mode.add_argument("--attr", help="label name: mean difference of with/without groups")
    mode.add_argument("--anchors", type=_strs, help="comma-separated sample ids: correlation mode")
    c.add_argument("--n-per-group", type=int, default=2000)
    c.add_argument("--k", type=int, default=50)
    c.add_argument("--name")
    c.add_argument("--bins", type=int, default=50)
    c.add_argument("--report-data", help="dataset for the score report (default: --data)")
    c.add_argument("--attr-check", help="correlation mode: label used to report top-k purity")
    c.set_defaults(func=cmd_concept)

    def selection(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--concept", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--ids", type=_strs, help="comma-separated sample ids")
        sp.add_argument("--attr", help="take the first samples carrying this label")
        sp.add_argument("--first", type=int, default=8)

    s = sub.add_parser("saliency", help="concept saliency maps")
    common(s)
    selection(s)
    s.add_argument("--rule", type=_strs, default=["guided"], help="vanilla,guided,rectgrad")
    s.add_argument("--tau", type=float, help="absolute rectgrad threshold")
    s.add_argument("--tau-percentile", type=float, default=98.0)
    post = s.add_mutually_exclusive_group()
    post.add_argument("--clip", action="store_true", help="clip negative gradients before rendering")
    post.add_argument("--abs", action="store_true", help="render absolute gradients")
    s.add_argument("--reduce", choices=saliency.REDUCE, default="max-abs")
    s.add_argument("--smooth-n", type=int, default=1)
    s.add_argument("--smooth-sigma", type=float, default=0.0)
    s.add_argument("--smooth-seed", type=int, default=0)
    s.add_argument("--format", choices=("png", "pgm"), default="png")
    s.add_argument("--colormap", help="matplotlib colormap name for RGB output")
    s.set_defaults(func=cmd_saliency)

    m = sub.add_parser("manipulate", help="decode mu(x) + alpha * z_c over a list of alphas")
    common(m)
    selection(m)
    m.add_argument("--alphas", type=_floats, default=[0.0, 0.5, 1.0, 2.0])
    m.set_defaults(func=cmd_manipulate)
    return p


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _subparsers(sp):
    for a in sp._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices
    return None


def _apply_config(parser, argv):
    """Parse ``argv``; keys of a ``--config`` JSON file become defaults first.

    A resolved config names its own command, so ``--config FILE`` alone is
    enough to repeat a run.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    if path is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    positional = [t for t in argv if not t.startswith("-")]
    if not (_subparsers(parser) or {}).keys() & set(positional):
        argv = [cfg[k] for k in ("command", "kind") if cfg.get(k)] + argv
    sp = parser
    for tok in argv:
        choices = _subparsers(sp)
        if choices is None:
            break
        if tok in choices:
            sp = choices[tok]
    known = {a.dest for a in sp._actions}
    sp.set_defaults(**{k: v for k, v in cfg.items() if k in known})
    # flags satisfied by the config are no longer required on the command line
    for a in sp._actions:
        if a.dest in cfg and a.required:
            a.required = False
    for group in sp._mutually_exclusive_groups:
        if any(cfg.get(a.dest) is not None for a in group._group_actions):
            group.required = False
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ContainerError, AbsentAttributeError, StLoadError, FileNotFoundError,
            KeyError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
