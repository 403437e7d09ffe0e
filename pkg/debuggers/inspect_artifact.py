#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


import json
import os

from lib.checkpoint import load_checkpoint
from lib.errors import InputError
from metrics import MetricReport
from model import DECODER, ENCODER, SPEAKER_STORE, VARIANCE_ADAPTOR


def inspect_checkpoint(path):
    ckpt = load_checkpoint(path)
    params = ckpt.params
    lines = ['checkpoint: {}'.format(path),
             '\tapproach: {}'.format(ckpt.approach),
             '\tstep: {}'.format(ckpt.step),
             '\temb_mode: {}'.format(params.emb_mode),
             '\tmask: {}'.format(ckpt.mask),
             '\tspeaker rows: {}'.format(len(params.speaker_rows)),
             '\ttotal parameters: {}'.format(params.num_parameters())]
    for tag in (ENCODER, VARIANCE_ADAPTOR, DECODER, SPEAKER_STORE):
        names = params.names(tag)
        lines.append('\t{}: {} tensors, {} parameters'.format(tag, len(names),
                                                              sum(params[n].numel() for n in names)))
    if ckpt.extra_tensors:
        lines.append('\tspeaker encoder: {} ({} tensors)'.format(ckpt.info.get('encoder_setting'),
                                                                  len(ckpt.extra_tensors)))
    for name in sorted(ckpt.arrays):
        lines.append('\tarray {}: shape {}'.format(name, list(ckpt.arrays[name].shape)))

    # last row of the training log sidecar, when it sits next to the checkpoint
    log_path = os.path.join(os.path.dirname(os.path.abspath(path)), 'train_log.tsv')
    if os.path.exists(log_path):
        with open(log_path) as fp:
            rows = [line.rstrip('\n') for line in fp if line.strip()]
        if len(rows) > 1:
            lines.append('\ttrain log: {} rows, last: {}'.format(len(rows) - 1, rows[-1].replace('\t', ' ')))
    return '\n'.join(lines)


def inspect_report(path):
    with open(path) as fp:
        report = MetricReport.from_dict(json.load(fp))
    meta = report.meta
    lines = ['report: {}'.format(path),
             '\tapproach: {}, mask: {}, emb_mode: {}, tasks: {}'.format(
                 meta.get('approach'), meta.get('mask'), meta.get('emb_mode'), meta.get('n_tasks')),
             '\tmanifest: {}'.format(report.manifest_hash),
             '\tembedder: {}'.format(meta.get('embedder')),
             '\t{:>6} {:>10} {:>10} {:>8} {:>8} {:>9}'.format('mark', 'sim_mean', 'sim_std', 'eer', 'auc', 'diagonal')]
    rows = [(str(m), report.marks[m]) for m in sorted(report.marks)]
    if report.real is not None:
        rows.append(('real', report.real))
    for name, block in rows:
        lines.append('\t{:>6} {:>10.4f} {:>10.4f} {:>8.4f} {:>8.4f} {:>9.2f}'.format(
            name, block['similarity_mean'], block['similarity_std'], block['eer'], block['roc_auc'],
            block['diagonal_rate']))
    return '\n'.join(lines)


def inspect_path(path):
    if not os.path.exists(path):
        raise InputError('{} does not exist'.format(path))
    if path.endswith('.json'):
        return inspect_report(path)
    return inspect_checkpoint(path)
