#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# experiment driver; one --config_file per experiment, verbs:
#   gen-corpus      synthetic train/test corpora
#   meta-train      meta-learning of the TTS (approach "meta")
#   train-baseline  multi-task or speaker-encoding baselines
#   adapt-eval      K-shot cloning sweep on the frozen task manifest, metric report
#   plot            curve files, trend tables and figures from one or more reports
#   inspect         print a checkpoint or report summary
#   run             every step enabled in steps_to_run, with runtime.txt
#   compare         meta_table / meta_shared / multitask over several seeds, with the ordering checks


import argparse
import glob
import logging
import os
import sys

from baselines import train_multitask, train_speaker_encoder_tts
from cloning import run_eval_sweep
from compare_approaches import DEFAULT_SEEDS, arm_config, load_comparison_config, run_comparison
from corpus import dump_embeddings, generate_corpus, load_corpus, save_corpus
from debuggers.inspect_artifact import inspect_path
from episodes import load_or_build_eval_tasks, manifest_hash
from lib.checkpoint import load_checkpoint
from lib.config import ExperimentConfig, apply_determinism, env_workers
from lib.errors import ConfigError, MetaTTSError
from lib.file_util import DirLock, atomic_write_json, atomic_write_text, canonical_json, ensure_dir
from lib.logger import GlobalLogger
from lib.timer import Timer
from metalearn import meta_train
from metrics import build_report
from visualization.plot_reports import plot_reports


class TTSPipeline(object):
    def __init__(self, config):
        # a config file path or a validated ExperimentConfig; validation happens before anything touches the work dir
        if isinstance(config, ExperimentConfig):
            self.config = config
        else:
            self.config = ExperimentConfig.load(config)

        ensure_dir(self.config.work_dir)
        ensure_dir(self.config.logs_dir)
        self.logger = GlobalLogger(log_dir=self.config.logs_dir)
        self.workers = env_workers()

    def run(self):
        cfg = self.config
        logging.info('experiment {} in {}'.format(cfg.tag, cfg.work_dir))

        steps = [('gen_corpus', self.run_gen_corpus),
                 ('train', self.run_train),
                 ('adapt_eval', self.run_adapt_eval),
                 ('plot', self.run_plot)]

        per_step_time = []  # (whether to run, step name, time in minutes)
        for step_name, step_fn in steps:
            if cfg.steps_to_run.get(step_name, False):
                step_timer = Timer(step_name).start()
                step_fn()
                step_timer.mark('{} done'.format(step_name))
                duration = step_timer.total_minutes()
                per_step_time.append((True, step_name, duration))
                print('step {}:\tfinished in {} minutes'.format(step_name, duration))
            else:
                per_step_time.append((False, step_name, 0.0))
                print('step {}:\tskipped'.format(step_name))

        lines = ['step_name, status, duration (minutes)']
        total = 0.0
        for (has_run, step_name, duration) in per_step_time:
            if has_run:
                lines.append('{}, success, {}'.format(step_name, duration))
            else:
                lines.append('{}, skipped'.format(step_name))
            total += duration
        lines.append('')
        lines.append('total: {} minutes'.format(total))
        atomic_write_text(os.path.join(cfg.work_dir, 'runtime.txt'), '\n'.join(lines) + '\n')
        print('total:\t{} minutes'.format(total))

    def run_gen_corpus(self, out_dir=None):
        cfg = self.config
        self.logger.open_step('gen_corpus')
        local_timer = Timer('Corpus generation module').start()

        out_dir = out_dir or os.path.join(cfg.work_dir, 'corpus')
        for split, spec in (('train', cfg.train_spec), ('test', cfg.test_spec)):
            c = generate_corpus(spec['n_speakers'], spec['utts_per_speaker'], spec['seed'], cfg.corpus_config,
                                split_tag=split, first_speaker_id=spec['first_speaker_id'])
            split_dir = os.path.join(out_dir, split)
            save_corpus(c, split_dir)
            dump_embeddings(c, os.path.join(out_dir, 'embeddings_{}.tsv'.format(split)))
            local_timer.mark('{} corpus done'.format(split))

        logging.info(local_timer.summary())
        return out_dir

    def _load_split(self, split):
        path = self.config.corpus_dir(split)
        if not os.path.exists(path):
            raise ConfigError('corpus {} not found at {}; run gen-corpus first'.format(split, path))
        c = load_corpus(path)
        self.config.model_cfg.check_corpus(c.config)
        return c

    def run_train(self, resume_from=None):
        cfg = self.config
        self.logger.open_step('train')
        local_timer = Timer('Training module').start()
        apply_determinism()

        corpus = self._load_split('train')
        out_dir = ensure_dir(cfg.checkpoint_dir)
        atomic_write_json(os.path.join(out_dir, 'config.json'), cfg.echo())

        if cfg.approach == 'meta':
            result = meta_train(corpus, cfg.meta_cfg, cfg.model_cfg, cfg.mask, cfg.seed, out_dir=out_dir,
                                resume_from=resume_from)
        elif cfg.approach == 'multitask':
            result = train_multitask(corpus, cfg.baseline_cfg, cfg.model_cfg, cfg.seed, out_dir=out_dir,
                                     resume_from=resume_from)
        else:
            result = train_speaker_encoder_tts(corpus, cfg.encoder_setting, cfg.baseline_cfg, cfg.model_cfg,
                                               cfg.seed, out_dir=out_dir, resume_from=resume_from)

        local_timer.mark('{} training done'.format(cfg.approach))
        logging.info('wrote {} checkpoints to {}'.format(len(result.checkpoints), out_dir))
        logging.info(local_timer.summary())
        return result

    def run_adapt_eval(self):
        cfg = self.config
        ecfg = cfg.eval_cfg
        self.logger.open_step('adapt_eval')
        local_timer = Timer('Adaptation and evaluation module').start()
        apply_determinism()

        test_corpus = self._load_split('test')
        if not os.path.exists(cfg.final_checkpoint):
            raise ConfigError('no final checkpoint at {}; train first'.format(cfg.final_checkpoint))
        ckpt = load_checkpoint(cfg.final_checkpoint, cfg.model_cfg)
        if ecfg.mask is None and cfg.approach != 'spk_enc':
            ecfg.mask = str(cfg.mask)

        tasks = load_or_build_eval_tasks(cfg.manifest_path, test_corpus, ecfg.tasks_per_speaker, ecfg.K, ecfg.seed)
        task_hash = manifest_hash(tasks)
        local_timer.mark('task manifest ready ({} tasks, {})'.format(len(tasks), task_hash[:12]))

        results = run_eval_sweep(ckpt, test_corpus, tasks, ecfg, task_hash, workers=self.workers)
        local_timer.mark('cloning sweep done')

        report = build_report(results, test_corpus, pairing_seed=ecfg.pairing_seed,
                              same_ratio=ecfg.same_diff_ratio,
                              meta={'tag': cfg.tag, 'seed': cfg.seed, 'eval_config': ecfg.to_dict()})
        ensure_dir(cfg.report_dir)
        atomic_write_json(cfg.report_path, report.to_dict())
        atomic_write_text(os.path.join(cfg.report_dir, 'tasks.jsonl'),
                          ''.join(canonical_json(r.to_record()) + '\n' for r in results))
        local_timer.mark('report written')
        logging.info(local_timer.summary())
        return report

    def run_plot(self, report_paths=None, out_dir=None):
        cfg = self.config
        self.logger.open_step('plot')
        local_timer = Timer('Plotting module').start()

        if report_paths is None:
            report_paths = sorted(glob.glob(os.path.join(cfg.work_dir, 'reports', '*', 'report.json')))
        written = plot_reports(report_paths, out_dir or cfg.plots_dir)

        local_timer.mark('plots done ({} files)'.format(len(written)))
        logging.info(local_timer.summary())
        return written


def _build_parser():
    parser = argparse.ArgumentParser(description='Desk-scale few-shot speaker-adaptive TTS')
    sub = parser.add_subparsers(dest='verb')
    sub.required = True

    p = sub.add_parser('gen-corpus', help='generate the synthetic train/test corpora')
    p.add_argument('--config_file', type=str, required=True, help='configuration file')
    p.add_argument('--out_dir', type=str, default=None, help='corpus root (default {work_dir}/corpus)')

    for verb, help_text in (('meta-train', 'meta-train the TTS'), ('train-baseline', 'train a baseline')):
        p = sub.add_parser(verb, help=help_text)
        p.add_argument('--config_file', type=str, required=True, help='configuration file')
        p.add_argument('--resume_from', type=str, default=None, help='checkpoint to resume from')

    p = sub.add_parser('adapt-eval', help='clone the test speakers and write the metric report')
    p.add_argument('--config_file', type=str, required=True, help='configuration file')

    p = sub.add_parser('plot', help='curves and figures from metric reports')
    p.add_argument('--config_file', type=str, default=None, help='configuration file')
    p.add_argument('--reports', type=str, nargs='+', default=None, help='report.json files to compare')
    p.add_argument('--out_dir', type=str, default=None, help='output directory')

    p = sub.add_parser('inspect', help='print a checkpoint or report summary')
    p.add_argument('path', type=str, help='checkpoint (.ckpt) or report.json')

    p = sub.add_parser('run', help='run every step enabled in steps_to_run')
    p.add_argument('--config_file', type=str, required=True, help='configuration file')

    p = sub.add_parser('compare', help='train and evaluate the reference arms over several seeds')
    p.add_argument('--config_file', type=str, required=True, help='shared configuration file')
    p.add_argument('--seeds', type=int, nargs='+', default=list(DEFAULT_SEEDS), help='training seeds')
    return parser


def _compare(args):
    # fails on a bad document before the work dir is locked
    work_dir = arm_config(load_comparison_config(args.config_file), 'meta_table', args.seeds[0]).work_dir
    with DirLock(work_dir):
        summary, written = run_comparison(args.config_file, TTSPipeline, seeds=args.seeds)
    for path in written:
        print(path)
    print('ordering: {}, diagonal: {}, saturation: {}'.format(
        'pass' if summary['ordering']['passed'] else 'fail', 'pass' if summary['diagonal']['passed'] else 'fail',
        summary['saturation']['status']))


def _dispatch(args):
    if args.verb == 'inspect':
        print(inspect_path(args.path))
        return

    if args.verb == 'plot' and args.config_file is None:
        if not args.reports or not args.out_dir:
            raise ConfigError('plot needs --config_file or both --reports and --out_dir')
        for path in plot_reports(args.reports, args.out_dir):
            print(path)
        return

    if args.verb == 'compare':
        _compare(args)
        return

    pipeline = TTSPipeline(args.config_file)
    cfg = pipeline.config
    if args.verb == 'meta-train' and cfg.approach != 'meta':
        raise ConfigError('meta-train needs approach "meta", config has {}'.format(cfg.approach))
    if args.verb == 'train-baseline' and cfg.approach == 'meta':
        raise ConfigError('train-baseline needs approach "multitask" or "spk_enc"')

    try:
        with DirLock(cfg.work_dir):
            if args.verb == 'gen-corpus':
                pipeline.run_gen_corpus(args.out_dir)
            elif args.verb in ('meta-train', 'train-baseline'):
                pipeline.run_train(resume_from=args.resume_from)
            elif args.verb == 'adapt-eval':
                pipeline.run_adapt_eval()
            elif args.verb == 'plot':
                for path in pipeline.run_plot(args.reports, args.out_dir):
                    print(path)
            else:
                pipeline.run()
    finally:
        pipeline.logger.turn_off_file_log()


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logger = GlobalLogger()
    logger.turn_on_terminal()
    try:
        _dispatch(args)
    except MetaTTSError as e:
        logging.error('{}: {}'.format(type(e).__name__, e))
        return e.exit_code
    finally:
        logger.turn_off_terminal()
    return 0


if __name__ == '__main__':
    sys.exit(main())
