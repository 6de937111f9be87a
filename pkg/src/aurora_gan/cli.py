"""Command-line entry point: ``aurora <command> ...``.

Errors exit non-zero with one line on stderr: ``error: <Type>: <message>``.
Log verbosity comes from the ``AURORA_LOG_LEVEL`` environment variable.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch


def _setup_logging():
    level = os.environ.get("AURORA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_dataset(spec, image_size=64):
    from .data import load_folder

    return load_folder(spec, image_size)


def _save_grid(rows, path):
    from PIL import Image

    from .evaluation import image_grid

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_grid(rows)).save(path)
    return path


def cmd_train(args):
    from .config import load_config
    from .trainer import train_loop

    cfg = load_config(args.config)
    if args.out_dir:
        cfg.train.out_dir = args.out_dir
    trainer = train_loop(cfg, resume=args.resume, stop_after=args.stop_after)
    print(json.dumps({"step": trainer.step, "resolution": trainer.resolution,
                      "checkpoint": str(Path(cfg.train.out_dir) / "checkpoint.pt")}))


def cmd_sample(args):
    from PIL import Image

    from .data import tensor_to_uint8
    from .evaluation import generate_images
    from .trainer import Trainer

    trainer = Trainer.load(args.checkpoint)
    images = generate_images(trainer.eval_generator(), trainer.encoder,
                             [args.prompt] * args.count, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        Image.fromarray(tensor_to_uint8(img)).save(out / f"sample_{i:04d}.png")
    print(json.dumps({"written": args.count, "out_dir": str(out)}))


@torch.no_grad()
def cmd_interpolate(args):
    from .evaluation import interpolate_latents, interpolate_tokens
    from .trainer import Trainer

    trainer = Trainer.load(args.checkpoint)
    G, enc = trainer.eval_generator(), trainer.encoder
    G.eval()
    alphas = [i / (args.steps - 1) for i in range(args.steps)]
    z_dim = G.cfg.z_dim
    seeds = args.seeds or [0, 1]
    rows = []
    if args.mode == "tokens":
        if len(args.prompts) != 2:
            raise ValueError("tokens mode needs exactly two --prompts")
        z = torch.randn(1, z_dim, generator=torch.Generator().manual_seed(seeds[0]))
        t1, t2 = enc.encode_text(args.prompts[0]), enc.encode_text(args.prompts[1])
        for tok in interpolate_tokens(t1, t2, alphas):
            rows.append(G(z, tok).image)
    else:
        prompt = args.prompts[0] if args.prompts else ""
        tokens = enc.encode_text(prompt)
        z1 = torch.randn(1, z_dim, generator=torch.Generator().manual_seed(seeds[0]))
        z2 = torch.randn(1, z_dim, generator=torch.Generator().manual_seed(seeds[1]))
        if args.mode == "z":
            for z in interpolate_latents(z1[0], z2[0], alphas, space="Z"):
                rows.append(G(z[None], tokens).image)
        else:
            adapted = G.adapt(tokens)
            w1, w2 = G.map_latent(z1, adapted.t_g), G.map_latent(z2, adapted.t_g)
            for w in interpolate_latents(w1, w2, alphas, space="W"):
                rows.append(G.synthesis(w, adapted).image)
    path = _save_grid(rows, args.out)
    print(json.dumps({"grid": str(path), "rows": len(rows)}))


def cmd_eval_fid(args):
    from .trainer import Trainer

    dataset = _load_dataset(args.dataset)
    trainer = Trainer.load(args.checkpoint, dataset)
    value = trainer.fid(args.n, args.seed)
    if args.csv:
        from .trainer import _append_fid_csv

        _append_fid_csv(Path(args.csv), [trainer.step, trainer.resolution, args.n, args.seed, value])
    print(json.dumps({"fid": value, "resolution": trainer.resolution, "n": args.n, "seed": args.seed}))


@torch.no_grad()
def cmd_route_viz(args):
    from .moe import export_routing_maps
    from .trainer import Trainer

    trainer = Trainer.load(args.checkpoint)
    G = trainer.eval_generator()
    G.eval()
    z = torch.randn(1, G.cfg.z_dim, generator=torch.Generator().manual_seed(args.seed))
    out = G(z, trainer.encoder.encode_text(args.prompt))
    written = export_routing_maps(out.decisions, out.decision_resolutions, args.out_dir)
    print(json.dumps({"written": [str(p) for p in written]}))


def cmd_make_data(args):
    from .data import SyntheticSpec, export_folder, generate_synthetic

    spec = SyntheticSpec(seed=args.seed, image_size=args.size)
    if args.spec:
        import yaml

        with open(args.spec) as fh:
            values = yaml.safe_load(fh) or {}
        spec = SyntheticSpec(**{"seed": args.seed, "image_size": args.size, **values})
    dataset = generate_synthetic(spec.validate(), args.n)
    export_folder(dataset, args.out_dir)
    print(json.dumps({"n": len(dataset), "out_dir": args.out_dir, "digest": dataset.digest()}))


def cmd_reference_fid(args):
    from .trainer import reference_fid

    dataset = _load_dataset(args.dataset)
    values = {r: reference_fid(dataset, r, args.n, args.seed) for r in args.resolutions}
    result = {"n": args.n, "seed": args.seed, "values": values}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    print(json.dumps(result))


def build_parser():
    p = argparse.ArgumentParser(prog="aurora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="progressive training from a YAML config")
    s.add_argument("config")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--out-dir")
    s.add_argument("--stop-after", type=int, help="interrupt after this many total steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate images for a prompt")
    s.add_argument("checkpoint")
    s.add_argument("--prompt", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="samples")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("interpolate", help="token or latent interpolation grid")
    s.add_argument("checkpoint")
    s.add_argument("--mode", choices=["tokens", "z", "w"], required=True)
    s.add_argument("--prompts", nargs="+", default=[])
    s.add_argument("--seeds", nargs=2, type=int)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--out", default="interpolation.png")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("eval-fid", help="FID of a checkpoint against a dataset folder")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval_fid)

    s = sub.add_parser("route-viz", help="export per-layer expert routing maps")
    s.add_argument("checkpoint")
    s.add_argument("--prompt", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="routing")
    s.set_defaults(func=cmd_route_viz)

    s = sub.add_parser("make-data", help="render the synthetic shapes dataset to a folder")
    s.add_argument("out_dir")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--spec", help="YAML with shapes/colors/backgrounds/size_range overrides")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("reference-fid", help="FID between two random halves of real data")
    s.add_argument("dataset")
    s.add_argument("--resolutions", nargs="+", type=int, default=[4, 8, 16, 32, 64])
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_reference_fid)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # every failure becomes one parsable line
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
