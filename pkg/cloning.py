#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# K-shot voice cloning: fresh embedding rows for unseen speakers, fine-tuning of the masked modules on the
# support set, and free-run synthesis of the query at each step mark.


import logging
import multiprocessing
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import torch

from baselines import encode_speaker_reference, load_speaker_encoder
from corpus import Utterance
from lib.errors import ConfigError, InputError, check_finite
from metalearn import ModuleMask, adaptation_step
from model import ModelParameters, collate, forward, make_loss_fn

DEFAULT_MARKS = (0, 5, 10, 20, 50, 100)
UNSEEN_STRATEGIES = ('zero', 'mean_of_train_rows')


@dataclass
class EvalConfig:
    tasks_per_speaker: int = 16
    K: int = 5
    seed: int = 0
    steps: int = 100
    lr: float = 1e-2
    marks: tuple = DEFAULT_MARKS
    mask: str = None
    unseen_init: str = 'zero'
    clip_norm: float = 1.0
    same_diff_ratio: float = 1.0
    pairing_seed: int = 0

    def __post_init__(self):
        self.marks = tuple(int(m) for m in self.marks)

    def validate(self):
        if self.tasks_per_speaker < 1 or self.K < 1:
            raise ConfigError('tasks_per_speaker and K must be >= 1')
        if self.steps < 0 or self.lr < 0:
            raise ConfigError('steps and lr must be >= 0')
        if not self.marks or list(self.marks) != sorted(set(self.marks)) or self.marks[0] < 0:
            raise ConfigError('marks must be distinct, ascending and >= 0, got {}'.format(list(self.marks)))
        if self.marks[-1] > self.steps:
            raise ConfigError('last mark {} exceeds the step budget {}'.format(self.marks[-1], self.steps))
        if self.unseen_init not in UNSEEN_STRATEGIES:
            raise ConfigError('unseen_init must be one of {}, got {}'.format(UNSEEN_STRATEGIES, self.unseen_init))
        if self.same_diff_ratio <= 0:
            raise ConfigError('same_diff_ratio must be > 0')
        if self.mask is not None:
            ModuleMask.parse(self.mask)
        return self

    def to_dict(self):
        d = asdict(self)
        d['marks'] = list(self.marks)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def prepare_unseen(params, test_speaker_ids, strategy='zero'):
    """Swap the training table for a fresh one holding only the test speakers."""
    if params.emb_mode != 'table':
        raise ConfigError('prepare_unseen applies to table mode only; the shared vector transfers as-is')
    if strategy not in UNSEEN_STRATEGIES:
        raise ConfigError('unknown unseen-speaker strategy {}'.format(strategy))
    test_speaker_ids = sorted(set(int(s) for s in test_speaker_ids))
    if not test_speaker_ids:
        raise InputError('no test speakers given')

    table = params['spk.table'].detach()
    if strategy == 'zero':
        row = torch.zeros(table.shape[1], dtype=table.dtype)
    else:
        row = table.mean(dim=0)
    fresh = row.unsqueeze(0).repeat(len(test_speaker_ids), 1)
    tensors = OrderedDict(params.tensors)
    tensors['spk.table'] = fresh
    return ModelParameters(tensors, 'table', {spk: i for i, spk in enumerate(test_speaker_ids)})


class Snapshot(object):
    def __init__(self, mark, params, support_loss):
        self.mark = mark
        self.params = params
        self.support_loss = support_loss


def check_meta_mask(mask, meta_mask):
    if meta_mask is None:
        return
    if ModuleMask.parse(meta_mask) != mask:
        raise ConfigError('fine-tuning mask {} differs from the meta-training mask {}'.format(mask, meta_mask))


def adapt_to_task(params, support, mask, steps, lr, loss_fn, marks=DEFAULT_MARKS, clip_norm=1.0, meta_mask=None):
    """Full-batch gradient descent on the support loss; returns snapshots at every mark <= steps."""
    mask = ModuleMask.parse(mask)
    check_meta_mask(mask, meta_mask)
    if steps < 0:
        raise ConfigError('steps must be >= 0, got {}'.format(steps))
    if len(support) == 0:
        raise InputError('empty support set')
    batch = collate(list(support))
    names = mask.adapted_names(params)
    marks = set(m for m in marks if m <= steps)

    def support_loss(p):
        with torch.no_grad():
            return check_finite(loss_fn(p, batch).total, 'support loss')

    snapshots = []
    if not names:
        base = params.detach()
        loss = support_loss(base)
        return [Snapshot(m, base, loss) for m in sorted(marks)]

    current = params.replace({n: params[n].detach().requires_grad_(True) for n in names})
    for step in range(steps + 1):
        if step == steps:
            if step in marks:
                frozen = current.detach()
                snapshots.append(Snapshot(step, frozen, support_loss(frozen)))
            break
        loss = loss_fn(current, batch)
        value = check_finite(loss.total, 'support loss')
        if step in marks:
            snapshots.append(Snapshot(step, current.detach(), value))
        current = adaptation_step(current, loss.total, names, lr, clip_norm, mode='plain')
    return snapshots


def synthesize_query(params, query, model_cfg, spk_vec=None):
    """Free-run synthesis of the query phonemes; one Utterance-like record per query item."""
    if len(query) == 0:
        raise InputError('empty query set')
    batch = collate(list(query), with_targets=False, n_phonemes=model_cfg.n_phonemes)
    with torch.no_grad():
        out = forward(params, batch, model_cfg, spk_vecs=spk_vec, teacher_forcing=False)
    synthesized = []
    for u, item in zip(query, out.split()):
        synthesized.append(Utterance(utt_id=u.utt_id + '_synth', speaker_id=u.speaker_id, phonemes=u.phonemes,
                                     durations=item['durations'], pitch=item['pitch'], energy=item['energy'],
                                     mel=item['mel']))
    return synthesized


class TaskResult(object):
    """Per-task record: synthesized query outputs and support loss at every mark."""

    def __init__(self, task_id, speaker_id, approach, mask, emb_mode, manifest_hash, outputs, support_losses,
                 query_ids):
        self.task_id = task_id
        self.speaker_id = speaker_id
        self.approach = approach
        self.mask = mask
        self.emb_mode = emb_mode
        self.manifest_hash = manifest_hash
        self.outputs = outputs                  # mark -> [Utterance]
        self.support_losses = support_losses    # mark -> float
        self.query_ids = query_ids

    @property
    def marks(self):
        return sorted(self.outputs.keys())

    def to_record(self):
        return {'task_id': self.task_id, 'speaker_id': self.speaker_id, 'approach': self.approach,
                'mask': self.mask, 'emb_mode': self.emb_mode, 'manifest_hash': self.manifest_hash,
                'query_ids': self.query_ids,
                'support_loss': {str(m): v for m, v in sorted(self.support_losses.items())},
                'mel': {str(m): [u.mel.tolist() for u in outs] for m, outs in sorted(self.outputs.items())}}


def eval_mask(ckpt, ecfg):
    # meta checkpoints fine-tune exactly the modules they were meta-trained for
    if ecfg.mask is not None:
        mask = ModuleMask.parse(ecfg.mask)
    elif ckpt.mask is not None:
        mask = ModuleMask.parse(ckpt.mask)
    else:
        mask = ModuleMask.parse('emb+va+dec')
    if ckpt.approach == 'meta':
        check_meta_mask(mask, ckpt.mask)
    return mask


def run_task(ckpt, params, task, test_corpus, ecfg, mask, manifest_hash, encoder=None):
    support, query = task.resolve(test_corpus)
    model_cfg = ckpt.model_cfg
    if encoder is not None:
        # speaker encoding: zero fine-tuning, the store is never read
        spk_vec = encode_speaker_reference(encoder, support).detach()
        outputs = {0: synthesize_query(params, query, model_cfg, spk_vec=spk_vec)}
        with torch.no_grad():
            loss = make_loss_fn(model_cfg)(params, collate(support), spk_vecs=spk_vec)
        losses = {0: float(loss.total)}
        mask_text = 'none'
    else:
        loss_fn = make_loss_fn(model_cfg)
        snapshots = adapt_to_task(params, support, mask, ecfg.steps, ecfg.lr, loss_fn, marks=ecfg.marks,
                                  clip_norm=ecfg.clip_norm,
                                  meta_mask=ckpt.mask if ckpt.approach == 'meta' else None)
        outputs = OrderedDict((s.mark, synthesize_query(s.params, query, model_cfg)) for s in snapshots)
        losses = OrderedDict((s.mark, s.support_loss) for s in snapshots)
        mask_text = str(mask)
    return TaskResult(task.task_id, task.speaker_id, ckpt.approach, mask_text, params.emb_mode, manifest_hash,
                      outputs, losses, list(task.query))


def _task_worker(args):
    torch.set_num_threads(1)
    return run_task(*args)


def run_eval_sweep(ckpt, test_corpus, tasks, ecfg, manifest_hash, workers=1):
    """Adapt and synthesize every task; results come back in task order."""
    ecfg.validate()
    ckpt.model_cfg.check_corpus(test_corpus.config)
    encoder = None
    mask = None
    if ckpt.approach.startswith('spk_enc:'):
        encoder = load_speaker_encoder(ckpt, test_corpus.config)
        params = ckpt.params
    else:
        mask = eval_mask(ckpt, ecfg)
        params = ckpt.params
        if params.emb_mode == 'table':
            params = prepare_unseen(params, test_corpus.speaker_ids(), ecfg.unseen_init)
    logging.info('evaluating {} on {} tasks (mask {}, emb_mode {}, {} workers)'.format(
        ckpt.approach, len(tasks), mask, params.emb_mode, workers))

    jobs = [(ckpt, params, task, test_corpus, ecfg, mask, manifest_hash, encoder) for task in tasks]
    if workers <= 1:
        results = []
        for i, job in enumerate(jobs):
            results.append(run_task(*job))
            if (i + 1) % 20 == 0:
                logging.info('finished {}/{} tasks'.format(i + 1, len(jobs)))
        return results

    pool = multiprocessing.Pool(min(workers, len(jobs)))
    pending = [pool.apply_async(_task_worker, args=(job,)) for job in jobs]
    pool.close()
    results = [p.get() for p in pending]
    pool.join()
    return results
