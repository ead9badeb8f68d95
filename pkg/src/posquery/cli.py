"""``posquery`` command line: train, sample, eval, rpe-dump, bench."""

import argparse
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import config as configlib
from .data import SyntheticDataset, list_images, load_folder, read_image, synth_image, SynthSpec, write_png
from .diffusion import linear_schedule
from .errors import ConfigError, PosQueryError
from .imaging import to_uint8
from .metrics import center_psnr, format_report
from .model import Denoiser
from .position import CropRegion, Explicit, Multiple, embed_variant, format_rpe_dump, relative_grid
from .sampler import SampleConfig, bench_sampling, format_bench, outpaint
from .trainer import TrainConfig, init_state, load_checkpoint, train

OUT_ENV = "POSQUERY_OUT"


@dataclass(frozen=True)
class RunConfig(TrainConfig):
    data: str = "synthetic"
    synthetic_count: int = 512
    checkpoint_every: int = 0

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ENV) or "posquery_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(pairs):
    raw = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return raw


def _run_config(args):
    raw = configlib.parse_text(Path(args.config).read_text()) if args.config else {}
    raw.update(_overrides(args.set))
    for key in ("iterations", "seed", "data"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = str(val)
    return configlib.build(RunConfig, raw)


def _dataset(rc):
    if rc.data == "synthetic":
        return SyntheticDataset(rc.synthetic_count, rc.seed, rc.image_size)
    return load_folder(rc.data, rc.image_size)


def cmd_train(args):
    rc = _run_config(args)
    out = _out_dir(args)
    (out / "config.txt").write_text(configlib.dump(rc))
    tc = rc.train_config()
    state = load_checkpoint(args.resume, expected_model=tc.model_config()) if args.resume else None
    if state is not None and state.config != tc:
        state.config = tc
    state, losses = train(tc, _dataset(rc), state=state, out_dir=out, checkpoint_every=rc.checkpoint_every)
    last = f"{losses[-1]:.6g}" if losses else "n/a"
    print(f"trained to iteration {state.step}, last loss {last}, checkpoint {out / 'checkpoint.bin'}")
    return 0


def _mode(args):
    if args.anchor or args.target:
        if not (args.anchor and args.target):
            raise ConfigError("--anchor and --target must be given together")
        return Explicit(CropRegion.parse(args.anchor), CropRegion.parse(args.target))
    return Multiple(float(args.multiple), int(args.output_side))


def _load_model(path):
    state = load_checkpoint(path)
    return state.model, state.config.schedule(), state.config


def cmd_sample(args):
    model, sched, tc = _load_model(args.checkpoint)
    out = _out_dir(args)
    img = read_image(args.input)
    cfg = SampleConfig(mode=_mode(args), trajectory=args.trajectory, ddim_steps=args.steps, copy=args.copy,
                       seed=args.seed, count=args.count)
    res = outpaint(model, sched, img, cfg)
    for i, im in enumerate(res.images):
        write_png(out / f"sample_{i:03d}.png", im)
    sidecar = (f"anchor = {res.anchor}\ntarget = {res.target}\nplacement = {res.placement}\n"
               f"scales = {res.scales[0]!r},{res.scales[1]!r}\ntiming_ms = {res.timing_ms:.3f}\n"
               f"denoise_calls = {res.denoise_calls}\nclamp_rate = {res.clamp_rate:.6f}\n")
    (out / "placement.txt").write_text(sidecar)
    (out / "sample_config.txt").write_text(
        f"checkpoint = {args.checkpoint}\ninput = {args.input}\nmode = {cfg.mode}\n"
        f"trajectory = {cfg.trajectory}\nsteps = {cfg.ddim_steps}\ncopy = {cfg.copy}\n"
        f"seed = {cfg.seed}\ncount = {cfg.count}\n")
    print(sidecar, end="")
    return 0


def _read_placement(path):
    raw = configlib.parse_text(Path(path).read_text())
    if "placement" not in raw:
        raise ConfigError(f"{path} has no 'placement' entry")
    return CropRegion.parse(raw["placement"])


def cmd_eval(args):
    out = _out_dir(args)
    gen_files = list_images(args.generated)
    inp_files = list_images(args.inputs)
    if len(inp_files) not in (1, len(gen_files)):
        raise ConfigError(f"{len(gen_files)} generated images but {len(inp_files)} inputs")
    if args.placement:
        placement = CropRegion.parse(args.placement)
    else:
        placement = _read_placement(Path(args.generated) / "placement.txt")
    results = []
    for i, gpath in enumerate(gen_files):
        ipath = inp_files[0] if len(inp_files) == 1 else inp_files[i]
        gen, inp = read_image(gpath), read_image(ipath)
        if args.max_value == 255:
            gen, inp = to_uint8(gen).astype(np.float64), to_uint8(inp).astype(np.float64)
        results.append(center_psnr(gen, inp, placement, args.max_value))
    report = format_report([p.name for p in gen_files], results, args.max_value, args.cutoff)
    (out / "eval_report.txt").write_text(report)
    print(report, end="")
    return 0


def cmd_rpe_dump(args):
    anchor, target = CropRegion.parse(args.anchor), CropRegion.parse(args.target)
    grid = relative_grid(anchor, target, args.k, args.k_target or args.k)
    text = format_rpe_dump(grid, embed_variant(grid, "sincos", args.dim))
    if args.out:
        (_out_dir(args) / "rpe.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args):
    if args.checkpoint:
        model, sched, tc = _load_model(args.checkpoint)
    else:
        tc = configlib.build(TrainConfig, _overrides(args.set))
        model = Denoiser(tc.model_config()).init_params(np.random.default_rng(tc.seed), zero_head=False)
        sched = tc.schedule()
    image = read_image(args.input) if args.input else synth_image(SynthSpec(), 0, 0, args.output_side)
    multiples = [float(m) for m in args.multiples.split(",")]
    cfg = SampleConfig(trajectory=args.trajectory, ddim_steps=args.steps, seed=0)
    rows = bench_sampling(model, sched, image, multiples, cfg, repeats=args.repeats, output_side=args.output_side)
    text = format_bench(rows)
    (_out_dir(args) / "bench.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="posquery", description="Positional-query diffusion outpainting.")
    sub = p.add_subparsers(dest="command")

    def out_flag(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./posquery_out)")

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="image folder or 'synthetic'")
    t.add_argument("--resume", help="checkpoint to continue from")
    out_flag(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="outpaint one input image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--multiple", type=float, default=2.25)
    s.add_argument("--output-side", type=int, default=192)
    s.add_argument("--anchor", help="explicit anchor region top,left,height,width")
    s.add_argument("--target", help="explicit target region top,left,height,width")
    s.add_argument("--trajectory", choices=("ddim", "ddpm"), default="ddim")
    s.add_argument("--steps", type=int, default=20, help="DDIM jumps")
    s.add_argument("--copy", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    out_flag(s)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="center PSNR over generated/input pairs")
    e.add_argument("--generated", required=True)
    e.add_argument("--inputs", required=True)
    e.add_argument("--placement", help="top,left,height,width (default: generated/placement.txt)")
    e.add_argument("--max-value", type=float, default=255.0)
    e.add_argument("--cutoff", type=float, default=1000.0)
    out_flag(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rpe-dump", help="print a relative grid and its sin-cos embedding")
    r.add_argument("--anchor", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--k", type=int, required=True, help="anchor patches per side")
    r.add_argument("--k-target", type=int, help="target patches per side (default: --k)")
    r.add_argument("--dim", type=int, default=16)
    out_flag(r)
    r.set_defaults(func=cmd_rpe_dump)

    b = sub.add_parser("bench", help="sampling time per multiple")
    b.add_argument("--checkpoint", help="trained checkpoint (default: randomly initialized model)")
    b.add_argument("--set", action="append", metavar="KEY=VALUE", help="model config for random init")
    b.add_argument("--input")
    b.add_argument("--multiples", default="2.25,5,11.7")
    b.add_argument("--trajectory", choices=("ddim", "ddpm"), default="ddim")
    b.add_argument("--steps", type=int, default=20)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--output-side", type=int, default=192)
    out_flag(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (PosQueryError, OSError) as exc:
        print(f"posquery {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
