#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# experiment config: one JSON document merged over DEFAULTS, validated in full before anything runs;
# schema in exp_config/README.md


import copy
import json
import logging
import os

import torch

from baselines import ENCODER_SETTINGS, BaselineConfig
from cloning import EvalConfig
from corpus import CorpusConfig
from lib.errors import ConfigError
from metalearn import MetaConfig, ModuleMask
from model import ModelConfig

APPROACHES = ('meta', 'multitask', 'spk_enc')
STEPS = ('gen_corpus', 'train', 'adapt_eval', 'plot')

DEFAULTS = {
    'work_dir': None,
    'tag': None,
    'seed': 0,
    'approach': 'meta',
    'encoder_setting': None,
    'mask': 'emb+va+dec',
    'corpus': {
        'train': {'n_speakers': 20, 'utts_per_speaker': 20, 'seed': 1, 'first_speaker_id': 0},
        'test': {'n_speakers': 10, 'utts_per_speaker': 20, 'seed': 2, 'first_speaker_id': 1000},
        'config': CorpusConfig().to_dict(),
    },
    'model': {k: v for k, v in ModelConfig().to_dict().items() if k != 'spk_emb_dim'},
    'meta': MetaConfig().to_dict(),
    'baseline': dict(BaselineConfig().to_dict(), batch_size=None),
    'eval': EvalConfig().to_dict(),
    'steps_to_run': {step: True for step in STEPS},
}
DEFAULTS['model']['spk_emb_dim'] = None
DEFAULTS['meta']['Q'] = None


def _merge(defaults, user, where):
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError('unknown config key {}{}'.format(where, key))
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError('config key {}{} must be an object'.format(where, key))
            out[key] = _merge(defaults[key], value, '{}{}.'.format(where, key))
        else:
            out[key] = value
    return out


def _check_split(name, spec):
    for key in ('n_speakers', 'utts_per_speaker', 'seed', 'first_speaker_id'):
        if not isinstance(spec[key], int) or isinstance(spec[key], bool):
            raise ConfigError('corpus.{}.{} must be an integer'.format(name, key))
    if spec['n_speakers'] < 1 or spec['utts_per_speaker'] < 2:
        raise ConfigError('corpus.{} needs n_speakers >= 1 and utts_per_speaker >= 2'.format(name))


def _typed(section, cls, raw):
    try:
        return cls.from_dict(raw).validate()
    except TypeError as e:
        raise ConfigError('bad value in {} section: {}'.format(section, e))


class ExperimentConfig(object):
    def __init__(self, raw):
        self.raw = raw
        self.work_dir = raw['work_dir']
        self.seed = raw['seed']
        self.approach = raw['approach']
        self.encoder_setting = raw['encoder_setting']
        self.train_spec = raw['corpus']['train']
        self.test_spec = raw['corpus']['test']
        self.steps_to_run = raw['steps_to_run']
        self.validate()

    @classmethod
    def load(cls, config_file):
        try:
            with open(config_file) as fp:
                user = json.load(fp)
        except (OSError, ValueError) as e:
            raise ConfigError('cannot read config {}: {}'.format(config_file, e))
        if not isinstance(user, dict):
            raise ConfigError('config {} must hold a JSON object'.format(config_file))
        return cls.from_dict(user)

    @classmethod
    def from_dict(cls, user):
        return cls(_merge(DEFAULTS, user, ''))

    def validate(self):
        raw = self.raw
        if not self.work_dir or not isinstance(self.work_dir, str):
            raise ConfigError('work_dir is required')
        if not isinstance(self.seed, int):
            raise ConfigError('seed must be an integer')
        if self.approach not in APPROACHES:
            raise ConfigError('approach must be one of {}, got {}'.format(APPROACHES, self.approach))
        if self.approach == 'spk_enc':
            if self.encoder_setting not in ENCODER_SETTINGS:
                raise ConfigError('approach spk_enc needs encoder_setting in {}, got {}'.format(
                    ENCODER_SETTINGS, self.encoder_setting))
        elif self.encoder_setting is not None:
            raise ConfigError('encoder_setting only applies to approach spk_enc')

        self.mask = ModuleMask.parse(raw['mask'])
        if self.approach == 'meta' and not self.mask.partitions():
            raise ConfigError('meta-training needs a mask that adapts at least the speaker embedding')

        _check_split('train', self.train_spec)
        _check_split('test', self.test_spec)
        if self.train_spec['seed'] == self.test_spec['seed']:
            raise ConfigError('train and test corpora must use different seeds (unseen-speaker protocol)')
        train_ids = set(range(self.train_spec['first_speaker_id'],
                              self.train_spec['first_speaker_id'] + self.train_spec['n_speakers']))
        test_ids = set(range(self.test_spec['first_speaker_id'],
                             self.test_spec['first_speaker_id'] + self.test_spec['n_speakers']))
        if train_ids & test_ids:
            raise ConfigError('train and test speaker id ranges overlap')

        self.corpus_config = _typed('corpus.config', CorpusConfig, raw['corpus']['config'])
        self.model_cfg = _typed('model', ModelConfig, raw['model'])
        self.model_cfg.check_corpus(self.corpus_config)
        for name, spec in (('train', self.train_spec), ('test', self.test_spec)):
            if spec['utts_per_speaker'] < 2 * self.corpus_config.k_shot:
                raise ConfigError('corpus.{}.utts_per_speaker {} is below 2*k_shot={}'.format(
                    name, spec['utts_per_speaker'], 2 * self.corpus_config.k_shot))
        self.meta_cfg = _typed('meta', MetaConfig, raw['meta'])

        baseline = dict(raw['baseline'])
        budget = self.meta_cfg.samples_per_step
        if baseline.get('batch_size') is None:
            baseline['batch_size'] = budget
        elif baseline['batch_size'] != budget:
            raise ConfigError('baseline.batch_size {} differs from the meta sample budget M*(K+Q)={}'.format(
                baseline['batch_size'], budget))
        self.baseline_cfg = _typed('baseline', BaselineConfig, baseline)
        self.eval_cfg = _typed('eval', EvalConfig, raw['eval'])

        if self.meta_cfg.K + self.meta_cfg.Q > self.train_spec['utts_per_speaker']:
            raise ConfigError('meta episodes need K+Q={} utterances per train speaker, corpus has {}'.format(
                self.meta_cfg.K + self.meta_cfg.Q, self.train_spec['utts_per_speaker']))
        if self.eval_cfg.K + 1 > self.test_spec['utts_per_speaker']:
            raise ConfigError('evaluation tasks need K+1={} utterances per test speaker'.format(self.eval_cfg.K + 1))
        if self.baseline_cfg.pretrain_seed in (self.train_spec['seed'], self.test_spec['seed']):
            raise ConfigError('baseline.pretrain_seed must differ from the train and test corpus seeds')
        if self.approach == 'meta' and self.meta_cfg.total_meta_steps < 1:
            raise ConfigError('meta.total_meta_steps must be >= 1')
        if self.approach != 'meta' and self.baseline_cfg.steps < 1:
            raise ConfigError('baseline.steps must be >= 1')
        if self.approach == 'meta' and self.eval_cfg.mask is not None and \
                ModuleMask.parse(self.eval_cfg.mask) != self.mask:
            raise ConfigError('eval mask {} differs from the meta-training mask {}'.format(
                self.eval_cfg.mask, self.mask))

        unknown = sorted(set(self.steps_to_run) - set(STEPS))
        if unknown:
            raise ConfigError('unknown steps_to_run entries {}'.format(unknown))
        return self

    @property
    def train_tag(self):
        # one trained model per tag; the multi-task model is shared by every fine-tuning mask
        if self.raw['tag']:
            return self.raw['tag']
        if self.approach == 'meta':
            name = 'meta_{}_{}'.format(self.model_cfg.emb_mode, str(self.mask).replace('+', '-'))
        elif self.approach == 'multitask':
            name = 'multitask_{}'.format(self.model_cfg.emb_mode)
        else:
            name = 'spk_enc_{}'.format(self.encoder_setting)
        return '{}_s{}'.format(name, self.seed)

    @property
    def tag(self):
        if self.raw['tag']:
            return self.raw['tag']
        if self.approach == 'multitask':
            return 'multitask_{}_{}_s{}'.format(self.model_cfg.emb_mode, str(self.mask).replace('+', '-'), self.seed)
        return self.train_tag

    def corpus_dir(self, split):
        return os.path.join(self.work_dir, 'corpus', split)

    @property
    def checkpoint_dir(self):
        return os.path.join(self.work_dir, 'checkpoints', self.train_tag)

    @property
    def final_checkpoint(self):
        return os.path.join(self.checkpoint_dir, 'final.ckpt')

    @property
    def manifest_path(self):
        return os.path.join(self.work_dir, 'manifests', 'eval_tasks.jsonl')

    @property
    def report_dir(self):
        return os.path.join(self.work_dir, 'reports', self.tag)

    @property
    def report_path(self):
        return os.path.join(self.report_dir, 'report.json')

    @property
    def plots_dir(self):
        return os.path.join(self.work_dir, 'plots')

    @property
    def logs_dir(self):
        return os.path.join(self.work_dir, 'logs')

    def echo(self):
        raw = copy.deepcopy(self.raw)
        raw['baseline']['batch_size'] = self.baseline_cfg.batch_size
        return raw


def env_workers(default=1):
    value = os.environ.get('META_TTS_WORKERS')
    if value is None or value == '':
        return default
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError('META_TTS_WORKERS must be an integer, got {}'.format(value))
    if workers < 1:
        raise ConfigError('META_TTS_WORKERS must be >= 1')
    return workers


def env_deterministic():
    return os.environ.get('META_TTS_DETERMINISTIC', '1') not in ('0', 'false', 'False', 'no')


def apply_determinism():
    if env_deterministic():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        logging.info('deterministic mode on (single intra-op thread)')
