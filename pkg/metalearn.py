#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# Module-selective MAML.
#
# inner loop: N full-batch gradient steps on the support loss, touching only the masked partitions
#             (speaker embedding, optionally variance adaptor and decoder); the encoder is never adapted
# outer loop: F(theta) = 1/M sum_i L(theta_i, Q_i), one step on every partition (encoder included)


import logging
import os
from collections import OrderedDict, namedtuple
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from corpus import Utterance, derive_seed
from episodes import TaskEpisode, check_samplable, sample_episode
from lib.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from lib.errors import ConfigError, InputError, check_finite
from lib.file_util import ensure_dir
from lib.timer import Timer
from lib.train_log import TrainLog
from model import (DECODER, SPEAKER_STORE, VARIANCE_ADAPTOR, ModelParameters, collate, init_params, make_loss_fn,
                   partition_of)

EpisodeData = namedtuple('EpisodeData', ['support', 'query'])

LOG_COLUMNS = ('step', 'F', 'mel_loss', 'duration_loss', 'pitch_loss', 'energy_loss', 'wall_time')


class ModuleMask(object):
    """Which of {variance adaptor, decoder, speaker embedding} a task adapts."""

    def __init__(self, adapt_va=False, adapt_dec=False, adapt_emb=False):
        if (adapt_va or adapt_dec) and not adapt_emb:
            raise ConfigError('module mask {} adapts va/dec without the speaker embedding'.format(
                _mask_text(adapt_va, adapt_dec, adapt_emb)))
        self.adapt_va = bool(adapt_va)
        self.adapt_dec = bool(adapt_dec)
        self.adapt_emb = bool(adapt_emb)

    @classmethod
    def parse(cls, text):
        if isinstance(text, ModuleMask):
            return text
        tokens = [t for t in str(text).lower().replace(' ', '').split('+') if t]
        if tokens in ([], ['none']):
            return cls()
        unknown = sorted(set(tokens) - {'emb', 'va', 'dec'})
        if 'enc' in unknown:
            raise ConfigError('the encoder is never adapted; drop "enc" from mask {}'.format(text))
        if unknown:
            raise ConfigError('unknown module(s) {} in mask {}'.format(unknown, text))
        return cls(adapt_va='va' in tokens, adapt_dec='dec' in tokens, adapt_emb='emb' in tokens)

    def partitions(self):
        tags = []
        if self.adapt_emb:
            tags.append(SPEAKER_STORE)
        if self.adapt_va:
            tags.append(VARIANCE_ADAPTOR)
        if self.adapt_dec:
            tags.append(DECODER)
        return tuple(tags)

    def adapted_names(self, params):
        tags = set(self.partitions())
        return [n for n in params.names() if partition_of(n) in tags]

    def __str__(self):
        return _mask_text(self.adapt_va, self.adapt_dec, self.adapt_emb)

    def __repr__(self):
        return 'ModuleMask({})'.format(self)

    def __eq__(self, other):
        if not isinstance(other, ModuleMask):
            return NotImplemented
        return str(self) == str(other)

    def __hash__(self):
        return hash(str(self))


def _mask_text(va, dec, emb):
    parts = [name for name, on in (('emb', emb), ('va', va), ('dec', dec)) if on]
    return '+'.join(parts) if parts else 'none'


@dataclass
class MetaConfig:
    alpha: float = 1e-2
    beta: float = 1e-3
    N: int = 5
    M: int = 8
    K: int = 5
    Q: int = None
    order: str = 'second'
    total_meta_steps: int = 2000
    clip_norm: float = 1.0
    outer_optimizer: str = 'sgd'
    adam_betas: tuple = (0.9, 0.999)
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.Q is None:
            self.Q = self.K
        self.adam_betas = tuple(self.adam_betas)

    def validate(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError('alpha and beta must be > 0, got {}, {}'.format(self.alpha, self.beta))
        if self.N < 1 or self.M < 1 or self.K < 1 or self.Q < 1:
            raise ConfigError('N, M, K, Q must be >= 1')
        if self.order not in ('second', 'first'):
            raise ConfigError('order must be "second" or "first", got {}'.format(self.order))
        if self.outer_optimizer not in ('sgd', 'adam'):
            raise ConfigError('outer_optimizer must be "sgd" or "adam", got {}'.format(self.outer_optimizer))
        if self.total_meta_steps < 0 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError('total_meta_steps >= 0, checkpoint_every >= 1 and log_every >= 1 required')
        return self

    @property
    def samples_per_step(self):
        return self.M * (self.K + self.Q)

    def to_dict(self):
        d = asdict(self)
        d['adam_betas'] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def clip_by_global_norm(grads, clip_norm):
    # differentiable when the gradients carry a graph
    if clip_norm is None or clip_norm <= 0:
        return list(grads)
    sq = sum((g * g).sum() for g in grads)
    total = torch.sqrt(sq + 1e-30)
    scale = torch.clamp(clip_norm / total, max=1.0)
    return [g * scale for g in grads]


def adaptation_step(params, loss, names, lr, clip_norm=None, mode='plain'):
    """One gradient-descent step on the named tensors.

    mode 'second' keeps the graph through the gradient, 'first' treats the gradient as a constant offset,
    'plain' returns fresh leaves for the next step.
    """
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, create_graph=(mode == 'second'), allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    if mode != 'second':
        grads = [g.detach() for g in grads]
    grads = clip_by_global_norm(grads, clip_norm)

    updates = {}
    for n, t, g in zip(names, tensors, grads):
        if mode == 'plain':
            updates[n] = (t.detach() - lr * g).requires_grad_(True)
        else:
            updates[n] = t - lr * g
    return params.replace(updates)


def as_batch(data):
    if isinstance(data, (list, tuple)):
        if len(data) == 0:
            raise InputError('empty utterance set')
        if isinstance(data[0], Utterance):
            return collate(list(data))
    return data


def inner_adapt(params, support, mask, alpha, N, loss_fn, clip_norm=None, order=None):
    """N full-batch steps on the support loss over the masked partitions.

    order None runs plain fine-tuning and returns detached tensors; 'first'/'second' keep the adapted
    tensors connected to params for the outer gradient.
    """
    if N < 0:
        raise ConfigError('inner steps must be >= 0, got {}'.format(N))
    batch = as_batch(support)
    names = mask.adapted_names(params)
    if N == 0 or not names:
        return params.replace({})

    mode = order or 'plain'
    starts = {}
    for n in names:
        t = params[n]
        if mode == 'plain' or not t.requires_grad:
            t = t.detach().requires_grad_(True)
        starts[n] = t
    current = params.replace(starts)

    for _ in range(N):
        loss = loss_fn(current, batch)
        check_finite(loss.total, 'support loss')
        current = adaptation_step(current, loss.total, names, alpha, clip_norm, mode)

    if mode == 'plain':
        return params.replace({n: current[n].detach() for n in names})
    return current


def _resolve(episodes, corpus):
    data = []
    for ep in episodes:
        if isinstance(ep, TaskEpisode):
            if corpus is None:
                raise InputError('TaskEpisode inputs need the corpus they refer to')
            support, query = ep.resolve(corpus)
            ep = EpisodeData(collate(support), collate(query))
        data.append(ep)
    return data


def meta_gradient(params, episodes, cfg, mask, loss_fn, corpus=None):
    """Gradient of F at params w.r.t. every tensor, averaged over episodes in a fixed order."""
    episodes = _resolve(episodes, corpus)
    leaves = [(n, t.detach().clone().requires_grad_(True)) for n, t in params.tensors.items()]
    theta = ModelParameters(leaves, params.emb_mode, params.speaker_rows)
    leaf_list = [t for _, t in leaves]

    acc = [torch.zeros_like(t) for t in leaf_list]
    components = {}
    for ep in episodes:
        adapted = inner_adapt(theta, ep.support, mask, cfg.alpha, cfg.N, loss_fn, clip_norm=cfg.clip_norm,
                              order=cfg.order)
        q = loss_fn(adapted, as_batch(ep.query))
        check_finite(q.total, 'query loss')
        grads = torch.autograd.grad(q.total, leaf_list, allow_unused=True)
        for i, g in enumerate(grads):
            if g is not None:
                acc[i] = acc[i] + g.detach()
        for k, v in q.as_floats().items():
            components[k] = components.get(k, 0.0) + v

    M = float(len(episodes))
    grads = [(n, a / M) for (n, _), a in zip(leaves, acc)]
    stats = {k: v / M for k, v in components.items()}
    stats['F'] = stats['total']
    return grads, stats


def meta_objective(params, episodes, cfg, mask, loss_fn, corpus=None):
    """F(theta) as a float."""
    episodes = _resolve(episodes, corpus)
    total = 0.0
    for ep in episodes:
        adapted = inner_adapt(params, ep.support, mask, cfg.alpha, cfg.N, loss_fn, clip_norm=cfg.clip_norm)
        with torch.no_grad():
            total += float(loss_fn(adapted, as_batch(ep.query)).total)
    return total / len(episodes)


class OuterOptimizer(object):
    """Meta-update rule: plain step (sgd) or torch Adam, with global-norm clipping of the meta-gradient."""

    def __init__(self, kind='sgd', lr=1e-3, clip_norm=1.0, betas=(0.9, 0.999), eps=1e-8):
        if kind not in ('sgd', 'adam'):
            raise ConfigError('unknown outer optimizer {}'.format(kind))
        self.kind = kind
        self.lr = lr
        self.clip_norm = clip_norm
        self.betas = tuple(betas)
        self.eps = eps
        self._names = None
        self._leaves = None
        self._opt = None

    def _ensure(self, tensors):
        if self._leaves is None:
            self._names = list(tensors.keys())
            self._leaves = [tensors[n].detach().clone().requires_grad_(True) for n in self._names]
            self._opt = torch.optim.Adam(self._leaves, lr=self.lr, betas=self.betas, eps=self.eps, foreach=False)

    def step_tensors(self, tensors, grads):
        """tensors: name -> tensor; grads: [(name, grad)] in the same order. Returns name -> updated tensor."""
        names = [n for n, _ in grads]
        clipped = clip_by_global_norm([g for _, g in grads], self.clip_norm)
        if self.kind == 'sgd':
            return OrderedDict((n, tensors[n].detach() - self.lr * g) for n, g in zip(names, clipped))

        self._ensure(tensors)
        if names != self._names:
            raise ConfigError('optimizer was set up for a different parameter list')
        with torch.no_grad():
            for leaf, n, g in zip(self._leaves, names, clipped):
                leaf.copy_(tensors[n])
                leaf.grad = g.detach().clone()
        self._opt.step()
        return OrderedDict((n, leaf.detach().clone()) for n, leaf in zip(self._names, self._leaves))

    def step(self, params, grads):
        return params.replace(self.step_tensors(params.tensors, grads)).detach()

    def state_arrays(self):
        if self.kind == 'sgd' or self._opt is None or not self._opt.state:
            return {}, {'kind': self.kind, 'step': 0}
        m, v = [], []
        step = 0
        for leaf in self._leaves:
            st = self._opt.state[leaf]
            m.append(st['exp_avg'].numpy().reshape(-1))
            v.append(st['exp_avg_sq'].numpy().reshape(-1))
            step = int(float(st['step']))
        return {'optim_exp_avg': np.concatenate(m), 'optim_exp_avg_sq': np.concatenate(v)}, \
            {'kind': self.kind, 'step': step}

    def load_state(self, tensors, arrays, info):
        if self.kind == 'sgd' or int(info.get('step', 0)) == 0:
            return self
        self._ensure(tensors)
        m = arrays['optim_exp_avg']
        v = arrays['optim_exp_avg_sq']
        if m.size != sum(leaf.numel() for leaf in self._leaves):
            raise ConfigError('stored optimizer state does not fit the parameter list')
        offset = 0
        for leaf in self._leaves:
            size = leaf.numel()
            st = self._opt.state[leaf]
            st['step'] = torch.tensor(float(info['step']), dtype=torch.float32)
            st['exp_avg'] = torch.from_numpy(np.array(m[offset:offset + size])).reshape(leaf.shape)
            st['exp_avg_sq'] = torch.from_numpy(np.array(v[offset:offset + size])).reshape(leaf.shape)
            offset += size
        return self


def make_outer_optimizer(cfg):
    return OuterOptimizer(cfg.outer_optimizer, lr=cfg.beta, clip_norm=cfg.clip_norm, betas=cfg.adam_betas)


def meta_step(params, episodes, cfg, mask, loss_fn, corpus=None, optimizer=None):
    """One meta-update. Returns (new params, stats); the input params are left untouched."""
    if len(episodes) != cfg.M:
        raise InputError('meta_step needs M={} episodes, got {}'.format(cfg.M, len(episodes)))
    grads, stats = meta_gradient(params, episodes, cfg, mask, loss_fn, corpus=corpus)
    if optimizer is None:
        optimizer = make_outer_optimizer(cfg)
    return optimizer.step(params, grads), stats


class TrainResult(object):
    def __init__(self, params, log, checkpoints):
        self.params = params
        self.log = log
        self.checkpoints = checkpoints

    @property
    def losses(self):
        # second column: F for meta-training, the batch loss for the baselines
        return self.log.column(self.log.columns[1])


def _meta_info(cfg, mask, seed, step, rng, opt_info, corpus):
    return {'approach': 'meta', 'mask': str(mask), 'meta_config': cfg.to_dict(), 'seed': int(seed),
            'step': int(step), 'rng_state': rng.bit_generator.state, 'optimizer': opt_info,
            'corpus_seed': int(corpus.global_seed)}


def meta_train(corpus, cfg, model_cfg, mask, seed, out_dir=None, resume_from=None, loss_fn=None):
    cfg.validate()
    model_cfg.validate()
    model_cfg.check_corpus(corpus.config)
    mask = ModuleMask.parse(mask)
    check_samplable(corpus, cfg.K, cfg.Q)
    if loss_fn is None:
        loss_fn = make_loss_fn(model_cfg)
    optimizer = make_outer_optimizer(cfg)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, model_cfg)
        if ckpt.approach != 'meta':
            raise ConfigError('{} is a {} checkpoint, not a meta one'.format(resume_from, ckpt.approach))
        if ModuleMask.parse(ckpt.mask) != mask:
            raise ConfigError('resume mask {} differs from checkpoint mask {}'.format(mask, ckpt.mask))
        params = ckpt.params
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.info['rng_state']
        optimizer.load_state(params.tensors, ckpt.arrays, ckpt.info.get('optimizer', {}))
        start = ckpt.step
        logging.info('resuming meta-training from {} at step {}'.format(resume_from, start))
    else:
        params = init_params(model_cfg, corpus.speaker_ids(), seed)
        rng = np.random.default_rng(derive_seed(seed, 1))
        start = 0

    log_path = os.path.join(ensure_dir(out_dir), 'train_log.tsv') if out_dir is not None else None
    log = TrainLog(log_path, LOG_COLUMNS).resume(start)
    logging.info('meta-training: mask={}, order={}, alpha={}, beta={}, N={}, M={}, K={}, Q={}, {} parameters'.format(
        mask, cfg.order, cfg.alpha, cfg.beta, cfg.N, cfg.M, cfg.K, cfg.Q, params.num_parameters()))

    timer = Timer('meta-training').start()
    checkpoints = []
    for step in range(start + 1, cfg.total_meta_steps + 1):
        episodes = [sample_episode(corpus, cfg.K, cfg.Q, rng) for _ in range(cfg.M)]
        params, stats = meta_step(params, episodes, cfg, mask, loss_fn, corpus=corpus, optimizer=optimizer)
        check_finite(stats['F'], 'meta objective at step {}'.format(step))

        record = dict(stats)
        record['step'] = step
        record['wall_time'] = timer.elapsed()
        log.append(record)
        if step % cfg.log_every == 0 or step == cfg.total_meta_steps:
            logging.info('meta step {}/{}: F={:.6f} (mel {:.4f}, dur {:.4f}, pitch {:.4f}, energy {:.4f})'.format(
                step, cfg.total_meta_steps, stats['F'], stats['mel_loss'], stats['duration_loss'],
                stats['pitch_loss'], stats['energy_loss']))

        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == cfg.total_meta_steps):
            arrays, opt_info = optimizer.state_arrays()
            ckpt = Checkpoint(params, model_cfg, 'meta', info=_meta_info(cfg, mask, seed, step, rng, opt_info, corpus),
                              arrays=arrays)
            path = save_checkpoint(os.path.join(out_dir, 'step_{:06d}.ckpt'.format(step)), ckpt)
            checkpoints.append(path)
            log.save()
            if step == cfg.total_meta_steps:
                save_checkpoint(os.path.join(out_dir, 'final.ckpt'), ckpt)

    timer.mark('meta-training done')
    logging.info(timer.summary())
    return TrainResult(params, log, checkpoints)
