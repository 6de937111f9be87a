"""Controlled desk-scale training run on a 2-color x 2-shape synthetic dataset.

Measures FID (random-feature extractor) before and after training at 16x16
and the color adherence of generated samples.
"""

import logging
import time

import torch

from .config import Config, DataConfig, LossConfig, ModelConfig, OptimConfig, TrainConfig
from .data import color_accuracy, generate_synthetic, SyntheticSpec
from .evaluation import generate_images
from .trainer import Trainer, train_loop

log = logging.getLogger(__name__)

SMOKE_COLORS = ["red", "blue"]
SMOKE_SHAPES = ["circle", "square"]


def smoke_config(seed=0, out_dir="runs/smoke", steps=(400, 600, 2000)):
    chans = {4: 32, 8: 32, 16: 32, 32: 16, 64: 16}
    return Config(
        model=ModelConfig(z_dim=64, w_dim=64, text_dim=64, context_length=12, vocab_size=512,
                          resolutions=[4, 8, 16], channels=dict(chans), disc_channels=dict(chans),
                          num_experts=4, num_kernels=2, disc_feature_dim=64),
        loss=LossConfig(),
        optim=OptimConfig(),
        data=DataConfig(n=2000, shapes=list(SMOKE_SHAPES), colors=list(SMOKE_COLORS),
                        backgrounds=["black"], seed=seed),
        train=TrainConfig(batch_size=16, max_steps_per_stage=list(steps), eval_every=250,
                          fid_n=500, reference_n=500, seed=seed, out_dir=out_dir,
                          ckpt_every=0, log_every=10),
    ).validate()


def run_smoke(seed=0, out_dir="runs/smoke", steps=(400, 600, 2000), n_color=200):
    cfg = smoke_config(seed, out_dir, steps)
    dataset = generate_synthetic(SyntheticSpec.from_config(cfg.data), cfg.data.n)
    t0 = time.time()
    init = Trainer(cfg, dataset)
    while not init.schedule.is_final:
        init.grow()
    fid_init = init.fid()
    trainer = train_loop(cfg, dataset)
    fid_final = trainer.fid()
    captions = [dataset.captions[i % len(dataset)] for i in range(n_color)]
    images = generate_images(trainer.eval_generator(), trainer.encoder, captions, seed + 99)
    acc = color_accuracy(images, captions, SMOKE_COLORS)
    result = {"seed": seed, "fid_init": fid_init, "fid_final": fid_final,
              "fid_reduction": 1.0 - fid_final / fid_init, "color_accuracy": acc,
              "steps": trainer.step, "resolution": trainer.resolution,
              "seconds": time.time() - t0}
    log.info("smoke result %s", result)
    return result


if __name__ == "__main__":
    import json
    import sys

    logging.basicConfig(level=logging.INFO)
    torch.set_num_threads(1)
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    print(json.dumps(run_smoke(seed, out_dir=f"runs/smoke_{seed}")))
