#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# Non-meta references:
#   multitask   plain multi-speaker training on mixed-speaker batches
#   spk_enc     the TTS reads an utterance-level speaker vector from a speaker encoder instead of the store


import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from corpus import CorpusConfig, derive_seed, generate_corpus, oracle_embed
from lib.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from lib.errors import ConfigError, InputError, check_finite
from lib.file_util import ensure_dir
from lib.timer import Timer
from lib.train_log import TrainLog
from metalearn import OuterOptimizer, TrainResult
from model import collate, init_params, make_loss_fn

ENCODER_SETTINGS = ('scratch_joint', 'fixed_oracle', 'pretrained_joint')
LOG_COLUMNS = ('step', 'loss', 'mel_loss', 'duration_loss', 'pitch_loss', 'energy_loss', 'wall_time')

# held-out speakers for encoder pre-training get ids far from train/test ones
PRETRAIN_FIRST_SPEAKER_ID = 5000


@dataclass
class BaselineConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 80
    optimizer: str = 'sgd'
    adam_betas: tuple = (0.9, 0.999)
    clip_norm: float = 1.0
    log_every: int = 10
    checkpoint_every: int = 500
    encoder_hidden: int = 32
    pretrain_steps: int = 500
    pretrain_lr: float = 1e-2
    pretrain_speakers: int = 20
    pretrain_utts: int = 10
    pretrain_seed: int = 3
    frozen_encoder: str = None

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)

    def validate(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError('steps must be >= 0 and batch_size >= 1')
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError('learning rates must be > 0')
        if self.optimizer not in ('sgd', 'adam'):
            raise ConfigError('optimizer must be "sgd" or "adam", got {}'.format(self.optimizer))
        if self.log_every < 1 or self.checkpoint_every < 1 or self.encoder_hidden < 1:
            raise ConfigError('log_every, checkpoint_every and encoder_hidden must be >= 1')
        if self.pretrain_steps < 0 or self.pretrain_speakers < 1 or self.pretrain_utts < 1:
            raise ConfigError('pre-training sizes must be positive')
        return self

    def to_dict(self):
        d = asdict(self)
        d['adam_betas'] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class EncoderSetting(object):
    def __init__(self, mode):
        if isinstance(mode, EncoderSetting):
            mode = mode.mode
        if mode not in ENCODER_SETTINGS:
            raise ConfigError('encoder setting must be one of {}, got {}'.format(ENCODER_SETTINGS, mode))
        self.mode = mode

    @property
    def approach(self):
        return 'spk_enc:{}'.format(self.mode)

    @property
    def uses_oracle(self):
        return self.mode == 'fixed_oracle'

    def __str__(self):
        return self.mode

    def __eq__(self, other):
        return isinstance(other, EncoderSetting) and self.mode == other.mode


def _uniform(rng, shape):
    bound = 1.0 / math.sqrt(shape[0])
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


def _mlp_names():
    return ('spkenc.w1', 'spkenc.b1', 'spkenc.w2', 'spkenc.b2')


def mean_pooled_mel(utterances):
    return torch.from_numpy(np.stack([np.mean(u.mel, axis=0) for u in utterances]).astype(np.float64))


class SpeakerEncoder(object):
    """Utterance -> speaker vector.

    scratch_joint / pretrained_joint: mean-pooled mel -> 2-layer feed-forward -> D_emb -> projection
    fixed_oracle: frozen embedder (analytic oracle, or a frozen trained MLP) -> learned projection
    """

    def __init__(self, setting, tensors, corpus_config, frozen=None):
        self.setting = EncoderSetting(setting)
        self.tensors = OrderedDict(tensors)
        self.corpus_config = corpus_config
        self.frozen = OrderedDict(frozen) if frozen else None

    @classmethod
    def create(cls, setting, corpus_config, model_cfg, seed, hidden=32, frozen=None):
        setting = EncoderSetting(setting)
        rng = np.random.default_rng(derive_seed(seed, 4))
        D = corpus_config.emb_dim
        tensors = OrderedDict()
        if not setting.uses_oracle:
            tensors['spkenc.w1'] = _uniform(rng, (corpus_config.n_mel, hidden))
            tensors['spkenc.b1'] = torch.zeros(hidden, dtype=torch.float64)
            tensors['spkenc.w2'] = _uniform(rng, (hidden, D))
            tensors['spkenc.b2'] = torch.zeros(D, dtype=torch.float64)
        tensors['spkenc.proj.w'] = _uniform(rng, (D, model_cfg.spk_emb_dim))
        tensors['spkenc.proj.b'] = torch.zeros(model_cfg.spk_emb_dim, dtype=torch.float64)
        return cls(setting, tensors, corpus_config, frozen=frozen)

    @property
    def mlp_names(self):
        return [n for n in _mlp_names() if n in self.tensors]

    def raw(self, utterances, tensors=None):
        """Per-utterance embedding before projection, [B, D_emb]."""
        t = self.tensors if tensors is None else tensors
        if self.setting.uses_oracle:
            if self.frozen is not None:
                return _mlp(self.frozen, mean_pooled_mel(utterances))
            if not self.corpus_config.synthetic:
                raise ConfigError('fixed_oracle needs synthetic latents or a frozen encoder checkpoint')
            return torch.from_numpy(np.stack([oracle_embed(u, self.corpus_config) for u in utterances]))
        return _mlp(t, mean_pooled_mel(utterances))

    def vectors(self, utterances, tensors=None):
        t = self.tensors if tensors is None else tensors
        return self.raw(utterances, t) @ t['spkenc.proj.w'] + t['spkenc.proj.b']

    def state_tensors(self):
        # everything a checkpoint needs, frozen weights under their own prefix
        out = OrderedDict(self.tensors)
        if self.frozen is not None:
            for n, v in self.frozen.items():
                out[n.replace('spkenc.', 'spkenc.frozen.', 1)] = v
        return out

    @classmethod
    def from_state(cls, setting, state, corpus_config):
        tensors = OrderedDict((n, v) for n, v in state.items() if not n.startswith('spkenc.frozen.'))
        frozen = OrderedDict((n.replace('spkenc.frozen.', 'spkenc.', 1), v) for n, v in state.items()
                             if n.startswith('spkenc.frozen.'))
        return cls(setting, tensors, corpus_config, frozen=frozen or None)


def _mlp(t, pooled):
    h = torch.relu(pooled @ t['spkenc.w1'] + t['spkenc.b1'])
    return h @ t['spkenc.w2'] + t['spkenc.b2']


def encode_speaker_reference(encoder, references, tensors=None):
    """Average of the per-utterance speaker vectors of the reference utterances."""
    if len(references) == 0:
        raise InputError('speaker reference needs at least one utterance')
    return encoder.vectors(list(references), tensors).mean(dim=0)


def pretrain_encoder(encoder, bcfg, corpus_config, seed):
    """Regress the encoder's D_emb output onto oracle embeddings of held-out synthetic speakers."""
    names = encoder.mlp_names
    if not names:
        raise ConfigError('encoder setting {} has nothing to pre-train'.format(encoder.setting))
    config = CorpusConfig.from_dict(dict(corpus_config.to_dict(), synthetic=True))
    held_out = generate_corpus(bcfg.pretrain_speakers, bcfg.pretrain_utts, bcfg.pretrain_seed, config,
                               split_tag='pretrain', first_speaker_id=PRETRAIN_FIRST_SPEAKER_ID)
    pooled = mean_pooled_mel(held_out.utterances)
    targets = torch.from_numpy(np.stack([oracle_embed(u, config) for u in held_out.utterances]))

    leaves = [encoder.tensors[n].detach().clone().requires_grad_(True) for n in names]
    opt = torch.optim.Adam(leaves, lr=bcfg.pretrain_lr, foreach=False)
    losses = []
    for step in range(bcfg.pretrain_steps):
        opt.zero_grad()
        pred = _mlp(dict(zip(names, leaves)), pooled)
        loss = torch.mean((pred - targets) ** 2)
        check_finite(loss, 'encoder pre-training loss')
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if (step + 1) % 100 == 0:
            logging.info('encoder pre-training step {}/{}: mse={:.6f}'.format(
                step + 1, bcfg.pretrain_steps, losses[-1]))
    for n, leaf in zip(names, leaves):
        encoder.tensors[n] = leaf.detach().clone()
    return losses


def sample_batch(corpus, batch_size, rng):
    """Mixed-speaker batch, uniform over all utterances."""
    n = len(corpus.utterances)
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    return [corpus.utterances[i] for i in idx]


def _grads(loss, tensors):
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    return [(n, torch.zeros_like(t) if g is None else g) for (n, t), g in zip(tensors.items(), grads)]


def multitask_step(params, batch, lr, loss_fn, clip_norm=None, optimizer=None):
    """One joint step on every partition. Returns (new params, loss breakdown at the old params)."""
    leaves = params.replace({n: t.detach().requires_grad_(True) for n, t in params.tensors.items()})
    if isinstance(batch, (list, tuple)):
        batch = collate(list(batch))
    loss = loss_fn(leaves, batch)
    check_finite(loss.total, 'multi-task loss')
    if optimizer is None:
        optimizer = OuterOptimizer('sgd', lr=lr, clip_norm=clip_norm)
    return optimizer.step(params, _grads(loss.total, leaves.tensors)), loss


def _log_step(kind, step, total, stats):
    logging.info('{} step {}/{}: loss={:.6f} (mel {:.4f}, dur {:.4f}, pitch {:.4f}, energy {:.4f})'.format(
        kind, step, total, stats['total'], stats['mel_loss'], stats['duration_loss'], stats['pitch_loss'],
        stats['energy_loss']))


def _record(stats, step, timer):
    rec = dict(stats)
    rec['loss'] = stats['total']
    rec['step'] = step
    rec['wall_time'] = timer.elapsed()
    return rec


def _make_optimizer(bcfg):
    return OuterOptimizer(bcfg.optimizer, lr=bcfg.lr, clip_norm=bcfg.clip_norm, betas=bcfg.adam_betas)


def _info(approach, bcfg, seed, step, rng, opt_info, corpus, extra=None):
    info = {'approach': approach, 'baseline_config': bcfg.to_dict(), 'seed': int(seed), 'step': int(step),
            'rng_state': rng.bit_generator.state, 'optimizer': opt_info, 'corpus_seed': int(corpus.global_seed)}
    info.update(extra or {})
    return info


def train_multitask(corpus, bcfg, model_cfg, seed, out_dir=None, resume_from=None, loss_fn=None):
    bcfg.validate()
    model_cfg.validate()
    model_cfg.check_corpus(corpus.config)
    if loss_fn is None:
        loss_fn = make_loss_fn(model_cfg)
    optimizer = _make_optimizer(bcfg)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, model_cfg)
        if ckpt.approach != 'multitask':
            raise ConfigError('{} is a {} checkpoint, not a multitask one'.format(resume_from, ckpt.approach))
        params = ckpt.params
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.info['rng_state']
        optimizer.load_state(params.tensors, ckpt.arrays, ckpt.info.get('optimizer', {}))
        start = ckpt.step
    else:
        params = init_params(model_cfg, corpus.speaker_ids(), seed)
        rng = np.random.default_rng(derive_seed(seed, 2))
        start = 0

    log_path = os.path.join(ensure_dir(out_dir), 'train_log.tsv') if out_dir is not None else None
    log = TrainLog(log_path, LOG_COLUMNS).resume(start)
    logging.info('multi-task training: {} steps, batch {}, lr {}, emb_mode {}'.format(
        bcfg.steps, bcfg.batch_size, bcfg.lr, model_cfg.emb_mode))

    timer = Timer('multi-task training').start()
    checkpoints = []
    for step in range(start + 1, bcfg.steps + 1):
        batch = collate(sample_batch(corpus, bcfg.batch_size, rng))
        params, loss = multitask_step(params, batch, bcfg.lr, loss_fn, optimizer=optimizer)
        stats = loss.as_floats()
        log.append(_record(stats, step, timer))
        if step % bcfg.log_every == 0 or step == bcfg.steps:
            _log_step('multi-task', step, bcfg.steps, stats)

        if out_dir is not None and (step % bcfg.checkpoint_every == 0 or step == bcfg.steps):
            arrays, opt_info = optimizer.state_arrays()
            ckpt = Checkpoint(params, model_cfg, 'multitask',
                              info=_info('multitask', bcfg, seed, step, rng, opt_info, corpus), arrays=arrays)
            checkpoints.append(save_checkpoint(os.path.join(out_dir, 'step_{:06d}.ckpt'.format(step)), ckpt))
            log.save()
            if step == bcfg.steps:
                save_checkpoint(os.path.join(out_dir, 'final.ckpt'), ckpt)

    timer.mark('multi-task training done')
    logging.info(timer.summary())
    return TrainResult(params, log, checkpoints)


class SpeakerEncodingResult(TrainResult):
    def __init__(self, params, encoder, log, checkpoints, pretrain_losses=None):
        super(SpeakerEncodingResult, self).__init__(params, log, checkpoints)
        self.encoder = encoder
        self.pretrain_losses = pretrain_losses or []


def load_frozen_encoder(path):
    ckpt = load_checkpoint(path)
    state = ckpt.extra_tensors
    missing = [n for n in _mlp_names() if n not in state]
    if missing:
        raise ConfigError('{} carries no trained mel encoder (missing {})'.format(path, missing))
    return OrderedDict((n, state[n]) for n in _mlp_names())


def load_speaker_encoder(ckpt, corpus_config):
    setting = ckpt.info.get('encoder_setting')
    if setting is None:
        raise ConfigError('checkpoint {} is not a speaker-encoding one'.format(ckpt.approach))
    return SpeakerEncoder.from_state(setting, ckpt.extra_tensors, corpus_config)


def train_speaker_encoder_tts(corpus, setting, bcfg, model_cfg, seed, out_dir=None, resume_from=None, loss_fn=None):
    setting = EncoderSetting(setting)
    bcfg.validate()
    model_cfg.validate()
    model_cfg.check_corpus(corpus.config)

    frozen = None
    if setting.uses_oracle and bcfg.frozen_encoder:
        frozen = load_frozen_encoder(bcfg.frozen_encoder)
    if setting.uses_oracle and frozen is None and not corpus.has_latents:
        raise ConfigError('fixed_oracle needs a corpus with latent speaker fields or a frozen encoder checkpoint')
    if loss_fn is None:
        loss_fn = make_loss_fn(model_cfg)
    optimizer = _make_optimizer(bcfg)

    pretrain_losses = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, model_cfg)
        if ckpt.approach != setting.approach:
            raise ConfigError('{} is a {} checkpoint, expected {}'.format(resume_from, ckpt.approach, setting.approach))
        params = ckpt.params
        encoder = load_speaker_encoder(ckpt, corpus.config)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.info['rng_state']
        start = ckpt.step
    else:
        params = init_params(model_cfg, corpus.speaker_ids(), seed)
        encoder = SpeakerEncoder.create(setting, corpus.config, model_cfg, seed, hidden=bcfg.encoder_hidden,
                                        frozen=frozen)
        if setting.mode == 'pretrained_joint':
            pretrain_losses = pretrain_encoder(encoder, bcfg, corpus.config, seed)
            logging.info('encoder pre-training: mse {:.6f} -> {:.6f}'.format(pretrain_losses[0], pretrain_losses[-1])
                         if pretrain_losses else 'encoder pre-training skipped (0 steps)')
        rng = np.random.default_rng(derive_seed(seed, 3))
        start = 0

    def joint_tensors():
        joint = OrderedDict(params.tensors)
        joint.update(encoder.tensors)
        return joint

    if resume_from is not None:
        optimizer.load_state(joint_tensors(), ckpt.arrays, ckpt.info.get('optimizer', {}))

    log_path = os.path.join(ensure_dir(out_dir), 'train_log.tsv') if out_dir is not None else None
    log = TrainLog(log_path, LOG_COLUMNS).resume(start)
    logging.info('speaker-encoding training ({}): {} steps, batch {}, lr {}'.format(
        setting, bcfg.steps, bcfg.batch_size, bcfg.lr))

    timer = Timer('speaker-encoding training').start()
    checkpoints = []
    for step in range(start + 1, bcfg.steps + 1):
        utts = sample_batch(corpus, bcfg.batch_size, rng)
        batch = collate(utts)
        joint = OrderedDict((n, t.detach().requires_grad_(True)) for n, t in joint_tensors().items())
        tts = params.replace({n: joint[n] for n in params.names()})
        enc = OrderedDict((n, joint[n]) for n in encoder.tensors)
        # each utterance is its own reference
        spk_vecs = encoder.vectors(utts, enc)
        loss = loss_fn(tts, batch, spk_vecs=spk_vecs)
        check_finite(loss.total, 'speaker-encoding loss')

        updated = optimizer.step_tensors(joint, _grads(loss.total, joint))
        params = params.replace({n: updated[n] for n in params.names()}).detach()
        encoder.tensors = OrderedDict((n, updated[n]) for n in encoder.tensors)

        stats = loss.as_floats()
        log.append(_record(stats, step, timer))
        if step % bcfg.log_every == 0 or step == bcfg.steps:
            _log_step('speaker-encoding', step, bcfg.steps, stats)

        if out_dir is not None and (step % bcfg.checkpoint_every == 0 or step == bcfg.steps):
            arrays, opt_info = optimizer.state_arrays()
            extra = {'encoder_setting': setting.mode, 'encoder_hidden': bcfg.encoder_hidden,
                     'corpus_config': corpus.config.to_dict()}
            ckpt = Checkpoint(params, model_cfg, setting.approach,
                              info=_info(setting.approach, bcfg, seed, step, rng, opt_info, corpus, extra),
                              extra_tensors=encoder.state_tensors(), arrays=arrays)
            checkpoints.append(save_checkpoint(os.path.join(out_dir, 'step_{:06d}.ckpt'.format(step)), ckpt))
            log.save()
            if step == bcfg.steps:
                save_checkpoint(os.path.join(out_dir, 'final.ckpt'), ckpt)

    timer.mark('speaker-encoding training done')
    logging.info(timer.summary())
    return SpeakerEncodingResult(params, encoder, log, checkpoints, pretrain_losses)
