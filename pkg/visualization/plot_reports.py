#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


import json
import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import norm

from lib.errors import MetricError
from lib.file_util import atomic_write_text, ensure_dir
from metrics import MetricReport


def load_reports(report_paths):
    """[(label, MetricReport)]; every report must come from the same task manifest."""
    if not report_paths:
        raise MetricError('no reports to plot')
    reports = []
    for path in report_paths:
        with open(path) as fp:
            report = MetricReport.from_dict(json.load(fp))
        label = report.meta.get('tag') or os.path.basename(os.path.dirname(os.path.abspath(path)))
        reports.append((label, report))

    hashes = sorted(set(r.manifest_hash for _, r in reports))
    if len(hashes) != 1:
        raise MetricError('reports were evaluated on different task manifests ({}); they cannot be compared'.format(
            ', '.join(h[:12] for h in hashes)))
    labels = [label for label, _ in reports]
    if len(set(labels)) != len(labels):
        raise MetricError('duplicate report labels {}'.format(labels))
    return reports


def save_points(points, out_file, header):
    np.savetxt(out_file, np.asarray(points, dtype=np.float64), fmt='%.12g', header=header)
    return out_file


def load_points(in_file):
    return np.atleast_2d(np.loadtxt(in_file))


def write_curve_files(label, report, out_dir):
    written = []
    for m in sorted(report.marks):
        block = report.marks[m]
        written.append(save_points(block['det'], os.path.join(out_dir, 'det_{}_m{:03d}.txt'.format(label, m)),
                                   'far frr'))
        written.append(save_points(block['roc'], os.path.join(out_dir, 'roc_{}_m{:03d}.txt'.format(label, m)),
                                   'fpr tpr'))
        matrix = report.matrices[m]
        written.append(save_points(matrix['values'],
                                   os.path.join(out_dir, 'matrix_{}_m{:03d}.txt'.format(label, m)),
                                   'speaker_ids ' + ' '.join(str(s) for s in matrix['speaker_ids'])))
    return written


TREND_COLUMNS = ('similarity_mean', 'similarity_std', 'eer', 'roc_auc', 'diagonal_rate')


def write_trend_table(reports, out_file):
    lines = ['\t'.join(('label', 'mark') + TREND_COLUMNS)]
    for label, report in reports:
        for m in sorted(report.marks):
            block = report.marks[m]
            lines.append('\t'.join([label, str(m)] + ['{:.12g}'.format(block[k]) for k in TREND_COLUMNS]))
        if report.real is not None:
            lines.append('\t'.join([label, 'real'] + ['{:.12g}'.format(report.real[k]) for k in TREND_COLUMNS]))
    atomic_write_text(out_file, '\n'.join(lines) + '\n')
    return out_file


def plot_trend(reports, out_file, key='similarity_mean', std_key='similarity_std', ylabel='similarity to target'):
    plt.figure(figsize=(7, 5), dpi=80)
    for label, report in reports:
        marks, values = report.trend(key)
        values = np.array(values)
        line, = plt.plot(marks, values, marker='o', label=label)
        if std_key is not None:
            _, stds = report.trend(std_key)
            stds = np.array(stds)
            plt.fill_between(marks, values - stds, values + stds, color=line.get_color(), alpha=0.2)
    plt.xlabel('adaptation steps')
    plt.ylabel(ylabel)
    plt.grid(True)
    plt.legend()
    plt.tight_layout()
    plt.savefig(out_file)
    plt.close('all')
    return out_file


def _probit(x):
    # normal deviate scale, clipped away from 0 and 1
    return norm.ppf(np.clip(x, 1e-3, 1 - 1e-3))


def plot_det(reports, mark, out_file):
    plt.figure(figsize=(6, 6), dpi=80)
    for label, report in reports:
        if mark not in report.marks:
            continue
        pts = np.array(report.marks[mark]['det'])
        plt.plot(_probit(pts[:, 0]), _probit(pts[:, 1]),
                 label='{} (EER {:.3f})'.format(label, report.marks[mark]['eer']))
    ticks = np.array([0.01, 0.05, 0.2, 0.5, 0.8, 0.95, 0.99])
    plt.xticks(_probit(ticks), ['{:g}'.format(100 * t) for t in ticks])
    plt.yticks(_probit(ticks), ['{:g}'.format(100 * t) for t in ticks])
    plt.xlabel('false acceptance rate (%)')
    plt.ylabel('false rejection rate (%)')
    plt.title('DET, {} adaptation steps'.format(mark))
    plt.grid(True)
    plt.legend()
    plt.tight_layout()
    plt.savefig(out_file)
    plt.close('all')
    return out_file


def plot_roc(reports, mark, out_file):
    plt.figure(figsize=(6, 6), dpi=80)
    for label, report in reports:
        if mark not in report.marks:
            continue
        pts = np.array(report.marks[mark]['roc'])
        plt.plot(pts[:, 0], pts[:, 1], label='{} (AUC {:.3f})'.format(label, report.marks[mark]['roc_auc']))
    plt.plot([0, 1], [0, 1], 'k--', linewidth=0.8)
    plt.xlabel('false positive rate')
    plt.ylabel('true positive rate')
    plt.title('ROC, {} adaptation steps'.format(mark))
    plt.grid(True)
    plt.legend()
    plt.tight_layout()
    plt.savefig(out_file)
    plt.close('all')
    return out_file


def plot_matrix(label, report, mark, out_file):
    matrix = report.matrices[mark]
    values = np.array(matrix['values'])
    ids = matrix['speaker_ids']

    fig, ax = plt.subplots(figsize=(6, 5), dpi=80)
    mpb = ax.imshow(values, cmap='magma', vmin=min(0.0, values.min()), vmax=1.0)
    ax.set_xticks(np.arange(len(ids)))
    ax.set_yticks(np.arange(len(ids)))
    ax.set_xticklabels(ids, rotation=-60, fontsize=7)
    ax.set_yticklabels(ids, fontsize=7)
    ax.set_xlabel('real speaker')
    ax.set_ylabel('synthesized speaker')
    ax.set_title('{}, {} steps (diagonal {:.2f})'.format(label, mark, report.marks[mark]['diagonal_rate']))
    fig.colorbar(mpb, ax=ax)
    fig.tight_layout()
    fig.savefig(out_file)
    plt.close(fig)
    return out_file


def plot_reports(report_paths, out_dir, render=True):
    """Point files, trend table and (optionally) figures for one comparison; returns the written paths."""
    reports = load_reports(report_paths)
    ensure_dir(out_dir)
    points_dir = ensure_dir(os.path.join(out_dir, 'points'))

    written = [write_trend_table(reports, os.path.join(out_dir, 'trend.tsv'))]
    for label, report in reports:
        written.extend(write_curve_files(label, report, points_dir))

    if render:
        written.append(plot_trend(reports, os.path.join(out_dir, 'similarity_trend.png')))
        written.append(plot_trend(reports, os.path.join(out_dir, 'eer_trend.png'), key='eer', std_key=None,
                                  ylabel='EER'))
        marks = sorted(set.union(*[set(r.marks) for _, r in reports]))
        for m in marks:
            written.append(plot_det(reports, m, os.path.join(out_dir, 'det_m{:03d}.png'.format(m))))
            written.append(plot_roc(reports, m, os.path.join(out_dir, 'roc_m{:03d}.png'.format(m))))
            for label, report in reports:
                if m in report.matrices:
                    written.append(plot_matrix(label, report, m,
                                               os.path.join(out_dir, 'matrix_{}_m{:03d}.png'.format(label, m))))
    logging.info('plotted {} reports into {} ({} files)'.format(len(reports), out_dir, len(written)))
    return written
