"""Command-line entry points: data generation, packing, training, probing,
gradient checking, and the information-identity verifier."""

import argparse
import sys

import numpy as np


def _cmd_gen_data(args):
    from picoweave.corpus import CorpusSpec, generate_corpus, write_corpus
    from picoweave.training import load_corpus_spec

    spec = load_corpus_spec(args.spec) if args.spec else CorpusSpec()
    docs = generate_corpus(spec, seed=args.seed)
    write_corpus(docs, spec, args.seed, args.out)
    n_images = sum(1 for d in docs for s in d.segments if hasattr(s, "pixels"))
    print(f"wrote {len(docs)} documents ({n_images} images) to {args.out}")
    return 0


def _cmd_pack(args):
    from picoweave.corpus import Sentence, read_corpus
    from picoweave.packing import pack_document, pack_pair_random, pack_stream_window, write_packed

    docs, manifest = read_corpus(args.input)
    patch_tokens = args.patch_tokens
    if args.mode == "document":
        seqs = [pack_document(d, patch_tokens, max_len=args.max_len, max_images=args.max_images,
                              seed=args.seed + i) for i, d in enumerate(docs)]
    elif args.mode == "window":
        seqs = pack_stream_window(docs, patch_tokens, window=args.max_len)
    else:
        pairs = []
        for d in docs:
            for seg in d.segments:
                if hasattr(seg, "pixels"):
                    pairs.append((seg, Sentence(tokens=list(seg.caption_tokens()))))
        seqs = pack_pair_random(pairs, patch_tokens, seed=args.seed, max_len=args.max_len)
    write_packed(seqs, args.out, mode=args.mode, patch_tokens=patch_tokens)
    n_img = sum(len(s.images) for s in seqs)
    print(f"packed {len(seqs)} sequences ({n_img} images, mode={args.mode}) to {args.out}")
    return 0


def _cmd_train(args):
    import dataclasses

    from picoweave.training import TrainConfig, load_train_config, run_training

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.packing:
        overrides["packing"] = args.packing
    if args.data:
        overrides["data_path"] = args.data
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.deterministic:
        overrides["deterministic"] = True
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    res = run_training(cfg)
    last = res.reports[-1] if res.reports else None
    status = "diverged" if res.diverged else "done"
    if last:
        print(f"{status} after {len(res.reports)} steps: L_total={last.L_total:.4f} "
              f"L_gen={last.L_gen:.4f} L_con={last.L_con:.4f} variance={last.variance:.4f}")
    if res.checkpoint_path:
        print(f"checkpoint: {res.checkpoint_path}")
    if res.log_path:
        print(f"metrics log: {res.log_path}")
    return 1 if res.diverged else 0


def _cmd_probe(args):
    from picoweave.probes import eval_linear_probe, eval_retrieval_probe, held_out_pairs, probe_dataset
    from picoweave.training import load_model_checkpoint

    model, cfg = load_model_checkpoint(args.ckpt)
    if args.task == "retrieval":
        pairs = held_out_pairs(args.pairs, seed=args.seed, image_size=cfg.vision_image_size)
        res = eval_retrieval_probe(model, pairs)
        print(f"TR@1={res['TR@1']:.4f} IR@1={res['IR@1']:.4f} over {res['candidates']} candidates")
    else:
        imgs, labels, ncls = probe_dataset(args.per_class, args.label, seed=args.seed,
                                           image_size=cfg.vision_image_size)
        res = eval_linear_probe(model, imgs, labels, ncls, seed=args.seed)
        print(f"accuracy={res['accuracy']:.4f} (train={res['n_train']}, test={res['n_test']})")
    return 0


def _cmd_grad_check(args):
    from picoweave import tensor as pt
    from picoweave.gradcheck import full_loss_gradient_check, op_kind_gradient_checks

    worst_ops = op_kind_gradient_checks(seeds=args.seeds)
    failed = {k: v for k, v in worst_ops.items() if v > 1e-4}
    for kind in sorted(worst_ops):
        print(f"{kind:>14s}: max rel err {worst_ops[kind]:.3e}")
    worst_full = full_loss_gradient_check(seeds=args.seeds, sample=args.sample)
    print(f"{'full-objective':>14s}: max rel err {worst_full:.3e}")
    ok = not failed and worst_full <= 1e-4
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_verify_mi(args):
    from picoweave.mi import run_verification

    result = run_verification(seeds=args.seeds, alphabet=args.alphabet, positions=args.positions)
    c = result["collapse"]
    print(f"decomposition identity over {result['seeds']} seeded models: "
          f"worst deviation {result['worst_deviation']:.3e}")
    print(f"collapse counterexample: collapsed (H={c.collapsed_cross_entropy:.4f}, "
          f"I={c.collapsed_mutual_information:.4f}) vs informative "
          f"(H={c.identity_cross_entropy:.4f}, I={c.identity_mutual_information:.4f})")
    print("PASS" if result["passed"] else "FAIL")
    return 0 if result["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picoweave",
                                description="Interleaved image-text pre-training lab.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus file")
    g.add_argument("--spec", default="", help="key=value corpus spec file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_data)

    k = sub.add_parser("pack", help="pack a corpus into training sequences")
    k.add_argument("--mode", choices=["pair-random", "document", "window"], required=True)
    k.add_argument("--in", dest="input", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--max-len", type=int, default=2048)
    k.add_argument("--max-images", type=int, default=6)
    k.add_argument("--patch-tokens", type=int, default=16)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(fn=_cmd_pack)

    t = sub.add_parser("train", help="run the pre-training loop")
    t.add_argument("--config", default="", help="key=value training config file")
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--packing", choices=["document", "pair-random", "window"], default="")
    t.add_argument("--data", default="")
    t.add_argument("--out-dir", default="")
    t.add_argument("--deterministic", action="store_true",
                   help="force the single-threaded deterministic mode (also the default)")
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("probe", help="evaluate a checkpoint with a frozen-encoder probe")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", choices=["retrieval", "classify"], required=True)
    r.add_argument("--pairs", type=int, default=128)
    r.add_argument("--per-class", type=int, default=24)
    r.add_argument("--label", choices=["shape", "color", "count"], default="shape")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=_cmd_probe)

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--sample", type=int, default=40,
                   help="elements checked per parameter of the full objective")
    c.set_defaults(fn=_cmd_grad_check)

    v = sub.add_parser("verify-mi", help="verify the information decomposition identity")
    v.add_argument("--seeds", type=int, default=100)
    v.add_argument("--alphabet", type=int, default=8)
    v.add_argument("--positions", type=int, default=2)
    v.set_defaults(fn=_cmd_verify_mi)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
