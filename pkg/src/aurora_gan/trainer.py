"""Progressive training: stage schedule, reference-FID trigger, optimization
loop, EMA and checkpoints."""

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config, config_from_dict
from .data import BatchSampler, dataset_from_config, derangement
from .discriminator import Discriminator
from .evaluation import FeatureExtractor, FeatureStats, extract_features, fid_score, frechet_distance
from .generator import Generator
from .objectives import (
    MultiLevelClip, d_adversarial, g_adversarial, matching_aware, moe_loss, r1_penalty, report_from,
)
from .text_encoding import TextTokens, ToyTextEncoder

log = logging.getLogger(__name__)


@dataclass
class StageSchedule:
    resolutions: list
    max_steps: list
    index: int = 0
    steps_in_stage: int = 0

    @property
    def resolution(self):
        return self.resolutions[self.index]

    @property
    def is_final(self):
        return self.index == len(self.resolutions) - 1

    @property
    def cap(self):
        return self.max_steps[min(self.index, len(self.max_steps) - 1)]

    def advance(self):
        if self.is_final:
            raise ValueError("schedule is already at its final resolution")
        self.index += 1
        self.steps_in_stage = 0


@dataclass
class ReferenceFIDTable:
    values: dict = field(default_factory=dict)
    n: int = 0
    seed: int = 0

    def __getitem__(self, res):
        if res not in self.values:
            raise KeyError(f"no reference FID for resolution {res}")
        return self.values[res]

    def __contains__(self, res):
        return res in self.values


class ReferenceFIDCache:
    """Memoizes reference FIDs by (dataset digest, resolution, n, seed)."""

    def __init__(self):
        self.values = {}
        self.hits = 0
        self.computations = 0

    def get(self, dataset, resolution, n, seed, extractor=None):
        key = (dataset.digest(), resolution, n, seed)
        if key in self.values:
            self.hits += 1
            return self.values[key]
        self.computations += 1
        value = reference_fid(dataset, resolution, n, seed, extractor)
        self.values[key] = value
        return value


def reference_fid(dataset, resolution, n, seed, extractor=None, feature_seed=777):
    """FID between two disjoint random halves of a 2n-image sample of real data."""
    if len(dataset) < 2 * n:
        raise ValueError(f"reference FID at n={n} needs {2 * n} images, dataset has {len(dataset)}")
    extractor = extractor or FeatureExtractor(resolution, seed=feature_seed)
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))[:2 * n]
    images = dataset.images_at(resolution)
    a = extract_features(extractor, images[torch.as_tensor(idx[:n])])
    b = extract_features(extractor, images[torch.as_tensor(idx[n:])])
    return frechet_distance(FeatureStats.from_features(a), FeatureStats.from_features(b))


def stage_done(current_fid, table, resolution, schedule, tau=1.0):
    if resolution not in table:
        raise KeyError(f"reference FID table has no entry for {resolution}")
    if schedule.steps_in_stage >= schedule.cap:
        return True
    return current_fid is not None and current_fid <= tau * table[resolution]


def should_advance(current_fid, table, resolution, schedule, tau=1.0):
    """Grow when the generator reaches tau * reference FID or the stage cap; never at the last stage."""
    done = stage_done(current_fid, table, resolution, schedule, tau)
    return done and not schedule.is_final


class _Snapshot:
    def __init__(self, trainer):
        self.d = copy.deepcopy(trainer.D.state_dict())
        self.d_opt = copy.deepcopy(trainer.d_opt.state_dict())
        self.z = trainer.z_gen.get_state()
        self.rng = copy.deepcopy(trainer.rng.bit_generator.state)

    def restore(self, trainer):
        trainer.D.load_state_dict(self.d)
        trainer.d_opt.load_state_dict(self.d_opt)
        trainer.z_gen.set_state(self.z)
        trainer.rng.bit_generator.state = self.rng


def _new_params(module, optimizer):
    seen = {id(p) for g in optimizer.param_groups for p in g["params"]}
    return [p for p in module.parameters() if p.requires_grad and id(p) not in seen]


class Trainer:
    """Owns every trainable object and performs steps, growth and (de)serialization.

    The frozen text encoder is shared by generator, discriminator and the
    contrastive loss but never receives gradients.
    """

    def __init__(self, cfg: Config, dataset=None, encoder=None):
        self.cfg = cfg
        self.dataset = dataset
        m = cfg.model
        self.encoder = encoder or ToyTextEncoder(m.text_dim, m.context_length, m.vocab_size,
                                                 m.encoder_layers, m.encoder_heads, m.encoder_seed)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.train.seed)
            self.G = Generator(m)
            self.D = Discriminator(m)
        self.G_ema = copy.deepcopy(self.G).requires_grad_(False).eval()
        self.clip = MultiLevelClip(m.resolutions, m.text_dim, cfg.loss.clip_temperature, m.embed_seed)
        o = cfg.optim
        kw = dict(lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
        self.g_opt = torch.optim.AdamW([p for p in self.G.parameters() if p.requires_grad], **kw)
        self.d_opt = torch.optim.AdamW([p for p in self.D.parameters() if p.requires_grad], **kw)
        self.schedule = StageSchedule(list(m.resolutions),
                                      [cfg.max_steps(i) for i in range(len(m.resolutions))])
        self.step = 0
        self.z_gen = torch.Generator().manual_seed(cfg.train.seed + 1)
        self.rng = np.random.default_rng(cfg.train.seed + 2)
        self.sampler = BatchSampler(len(dataset), cfg.train.batch_size, cfg.train.seed + 3) \
            if dataset is not None else None
        self.reference = ReferenceFIDTable(n=cfg.train.reference_n, seed=cfg.train.seed)
        self.fid_history = []
        self._token_cache = {}
        self._extractors = {}

    # ------------------------------------------------------------------ helpers
    @property
    def resolution(self):
        return self.schedule.resolution

    def tokens_for(self, captions):
        missing = [c for c in dict.fromkeys(captions) if c not in self._token_cache]
        if missing:
            enc = self.encoder.encode_text(missing)
            for i, c in enumerate(missing):
                self._token_cache[c] = enc.select(slice(i, i + 1))
        return TextTokens.cat([self._token_cache[c] for c in captions])

    def extractor(self, res):
        if res not in self._extractors:
            self._extractors[res] = FeatureExtractor(res, self.cfg.train.feature_dim,
                                                     self.cfg.train.feature_seed)
        return self._extractors[res]

    def next_batch(self):
        idx = self.sampler.next()
        images = self.dataset.images_at(self.resolution)[torch.as_tensor(idx)]
        return images, [self.dataset.captions[i] for i in idx]

    def loss_weights(self):
        return {"lambda_clip": self.cfg.loss.lambda_clip, "lambda_match": self.cfg.loss.lambda_match}

    # ------------------------------------------------------------- optimization
    def train_step(self, batch):
        """One discriminator update followed by one generator update.

        Returns a LossReport; a batch with non-finite values or a non-finite
        loss leaves all state untouched and sets ``flags['rejected']``.
        """
        images, captions = batch
        res = self.resolution
        if images.shape[-1] != res:
            raise ValueError(f"batch resolution {images.shape[-1]} does not match stage {res}")
        if not torch.isfinite(images).all():
            log.error("rejecting step %d: non-finite values in batch", self.step)
            return report_from({}, self.loss_weights(), {"rejected": True, "step": self.step})

        lc = self.cfg.loss
        B = images.shape[0]
        tokens = self.tokens_for(captions)
        snap = _Snapshot(self)
        flags = {"step": self.step, "resolution": res}

        # discriminator phase
        self.D.requires_grad_(True)
        z = torch.randn(B, self.cfg.model.z_dim, generator=self.z_gen)
        with torch.no_grad():
            fake = self.G(z, tokens).image
        real_scores = self.D(images, tokens.t_g)
        fake_scores = self.D(fake, tokens.t_g)
        d_adv = d_adversarial(real_scores, fake_scores)
        if B >= 2:
            perm = torch.as_tensor(derangement(B, self.rng))
            match, skipped = matching_aware(self.D(images, tokens.t_g[perm]))
        else:
            match, skipped = matching_aware(None)
        flags["match_skipped"] = skipped
        r1 = torch.zeros(())
        if lc.r1_every > 0 and self.step % lc.r1_every == 0 and lc.r1_gamma > 0:
            r1 = r1_penalty(self.D, images, tokens.t_g, lc.r1_gamma) * lc.r1_every
            flags["r1_applied"] = True
        total_d = d_adv + lc.lambda_match * match + r1
        if not torch.isfinite(total_d):
            snap.restore(self)
            log.error("rejecting step %d: non-finite discriminator loss", self.step)
            return report_from({}, self.loss_weights(), {**flags, "rejected": True})
        self.d_opt.zero_grad(set_to_none=True)
        total_d.backward()
        self.d_opt.step()

        # generator phase
        self.D.requires_grad_(False)
        z = torch.randn(B, self.cfg.model.z_dim, generator=self.z_gen)
        out = self.G(z, tokens)
        g_adv = g_adversarial(self.D(out.image, tokens.t_g))
        clip = self.clip(out.pyramid, tokens.t_g)
        moe = moe_loss(out.decisions, lc.moe_alpha)
        total_g = g_adv + lc.lambda_clip * clip + moe
        if not torch.isfinite(total_g):
            snap.restore(self)
            log.error("rejecting step %d: non-finite generator loss", self.step)
            return report_from({}, self.loss_weights(), {**flags, "rejected": True})
        self.g_opt.zero_grad(set_to_none=True)
        total_g.backward()
        self.g_opt.step()
        self.D.requires_grad_(True)

        self.update_ema()
        self.step += 1
        self.schedule.steps_in_stage += 1
        parts = {"g_adv": g_adv.item(), "d_adv": d_adv.item(), "r1": r1.item(),
                 "match": float(match.detach()), "clip_multi": clip.item(), "moe": float(moe.detach())}
        return report_from(parts, self.loss_weights(), flags)

    @torch.no_grad()
    def update_ema(self):
        decay = self.cfg.optim.ema_decay
        if self.cfg.optim.ema_rampup:
            decay = min(decay, (1 + self.step) / (10 + self.step))
        for p_ema, p in zip(self.G_ema.parameters(), self.G.parameters()):
            p_ema.copy_(p.detach().lerp(p_ema, decay))

    def eval_generator(self):
        return self.G_ema if self.cfg.optim.use_ema_for_eval else self.G

    # ------------------------------------------------------------------ growth
    def grow(self):
        """Add the next resolution to G, G_ema and D; new paths start as no-ops."""
        if self.schedule.is_final:
            raise ValueError("already at the final resolution")
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.train.seed + 100 * (self.schedule.index + 1))
            unit = self.G.add_stage()
            self.D.add_stage()
            ema_unit = self.G_ema.add_stage()
        ema_unit.load_state_dict(unit.state_dict())
        ema_unit.requires_grad_(False)
        self.g_opt.add_param_group({"params": _new_params(self.G, self.g_opt)})
        self.d_opt.add_param_group({"params": _new_params(self.D, self.d_opt)})
        self.schedule.advance()
        return self

    # --------------------------------------------------------------- evaluation
    def reference_for(self, res, cache=None):
        if res not in self.reference:
            n = min(self.cfg.train.reference_n, len(self.dataset) // 2)
            fn = cache.get if cache is not None else None
            value = fn(self.dataset, res, n, self.cfg.train.seed, self.extractor(res)) if fn \
                else reference_fid(self.dataset, res, n, self.cfg.train.seed, self.extractor(res))
            self.reference.values[res] = value
            self.reference.n = n
        return self.reference[res]

    def fid(self, n=None, seed=None):
        res = self.resolution
        return fid_score(self.eval_generator(), self.encoder, self.dataset,
                         n or self.cfg.train.fid_n,
                         self.cfg.train.seed + 10_000 if seed is None else seed,
                         res, self.extractor(res))

    # ------------------------------------------------------------ serialization
    def state_dict(self):
        return {
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "generator": self.G.state_dict(),
            "generator_ema": self.G_ema.state_dict(),
            "discriminator": self.D.state_dict(),
            "text_encoder": self.encoder.state_dict() if isinstance(self.encoder, torch.nn.Module) else {},
            "g_opt": self.g_opt.state_dict(),
            "d_opt": self.d_opt.state_dict(),
            "schedule": asdict(self.schedule),
            "step": self.step,
            "z_gen": self.z_gen.get_state(),
            "rng": self.rng.bit_generator.state,
            "sampler": self.sampler.state_dict() if self.sampler is not None else None,
            "reference": {"values": self.reference.values, "n": self.reference.n,
                          "seed": self.reference.seed},
            "fid_history": list(self.fid_history),
        }

    def load_state_dict(self, state):
        target = state["schedule"]["index"]
        while self.schedule.index < target:
            self.grow()
        self.G.load_state_dict(state["generator"])
        self.G_ema.load_state_dict(state["generator_ema"])
        self.D.load_state_dict(state["discriminator"])
        if state.get("text_encoder") and isinstance(self.encoder, torch.nn.Module):
            self.encoder.load_state_dict(state["text_encoder"])
        self.g_opt.load_state_dict(state["g_opt"])
        self.d_opt.load_state_dict(state["d_opt"])
        self.schedule = StageSchedule(**state["schedule"])
        self.step = state["step"]
        self.z_gen.set_state(state["z_gen"])
        self.rng.bit_generator.state = state["rng"]
        if self.sampler is not None and state.get("sampler"):
            self.sampler.load_state_dict(state["sampler"])
        ref = state["reference"]
        self.reference = ReferenceFIDTable({int(k): v for k, v in ref["values"].items()},
                                           ref["n"], ref["seed"])
        self.fid_history = list(state.get("fid_history", []))
        return self

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path, dataset=None):
        state = torch.load(path, map_location="cpu", weights_only=False)
        cfg = config_from_dict(state["config"])
        return cls(cfg, dataset).load_state_dict(state)


def _append_fid_csv(path, row):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "resolution", "n", "seed", "value"])
        writer.writerow(row)


def train_loop(cfg, dataset=None, fid_fn=None, resume=False, stop_after=None, ref_cache=None):
    """Alternate steps, periodic FID checks and growth until the last stage finishes.

    ``fid_fn(trainer) -> float`` overrides the FID evaluation (for scripted
    runs); ``stop_after`` interrupts after that many total steps, leaving a
    checkpoint to resume from.
    """
    out = Path(cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else dataset_from_config(cfg.data)
    ckpt = out / "checkpoint.pt"
    if resume and ckpt.exists():
        trainer = Trainer.load(ckpt, dataset)
        log.info("resumed from %s at step %d", ckpt, trainer.step)
    else:
        trainer = Trainer(cfg, dataset)
    cfg = trainer.cfg
    log_path = out / "log.jsonl"
    fid_csv = out / "fid.csv"
    with open(log_path, "a") as log_fh:
        while True:
            sched = trainer.schedule
            res = sched.resolution
            done = sched.steps_in_stage >= sched.cap
            if not done and sched.steps_in_stage and sched.steps_in_stage % cfg.train.eval_every == 0:
                value = fid_fn(trainer) if fid_fn else trainer.fid()
                trainer.fid_history.append((trainer.step, res, value))
                _append_fid_csv(fid_csv, [trainer.step, res, cfg.train.fid_n, cfg.train.seed, value])
                trainer.reference_for(res, ref_cache)
                done = stage_done(value, trainer.reference, res, sched, cfg.train.tau)
                log.info("step %d res %d fid %.4f ref %.4f", trainer.step, res, value, trainer.reference[res])
            if done:
                if sched.is_final:
                    break
                trainer.grow()
                log.info("grew to %dx%d at step %d", trainer.resolution, trainer.resolution, trainer.step)
                continue
            if stop_after is not None and trainer.step >= stop_after:
                trainer.save(ckpt)
                return trainer
            report = trainer.train_step(trainer.next_batch())
            if cfg.train.log_every and trainer.step % cfg.train.log_every == 0:
                log_fh.write(report.to_json() + "\n")
            if cfg.train.ckpt_every and trainer.step % cfg.train.ckpt_every == 0:
                trainer.save(ckpt)
    trainer.save(ckpt)
    return trainer
