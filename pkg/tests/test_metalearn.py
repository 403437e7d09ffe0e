import os
from collections import OrderedDict

import numpy as np
import pytest
import torch

from episodes import sample_episode
from lib.errors import ConfigError, InputError
from lib.file_util import sha256_file
from metalearn import (EpisodeData, MetaConfig, ModuleMask, OuterOptimizer, inner_adapt, meta_gradient,
                       meta_objective, meta_step, meta_train)
from model import (DECODER, ENCODER, SPEAKER_STORE, VARIANCE_ADAPTOR, LossBreakdown, ModelParameters, collate,
                   init_params, make_loss_fn)

ZERO = torch.zeros((), dtype=torch.float64)


def _surrogate_loss(params, batch, spk_vecs=None):
    # smooth stand-in for the TTS loss over every partition
    x, y = batch['x'], batch['y']
    h = torch.tanh(x @ params['enc.w'] + params['spk.shared'][:2])
    g = torch.tanh(h @ params['va.w'] + params['spk.shared'][2:4])
    pred = g @ params['dec.w'] + params['spk.shared'][4:].sum()
    total = torch.mean((pred - y) ** 2)
    return LossBreakdown(ZERO, ZERO, ZERO, ZERO, total)


def _surrogate_params(seed):
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    tensors['enc.w'] = torch.from_numpy(rng.normal(0.0, 0.5, size=(3, 2)))
    tensors['va.w'] = torch.from_numpy(rng.normal(0.0, 0.5, size=(2, 2)))
    tensors['dec.w'] = torch.from_numpy(rng.normal(0.0, 0.5, size=(2,)))
    tensors['spk.shared'] = torch.from_numpy(rng.normal(0.0, 0.5, size=(6,)))
    return ModelParameters(tensors, 'shared')


def _surrogate_episodes(seed, M):
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(M):
        batches = []
        for n in (3, 2):
            x = torch.from_numpy(rng.normal(size=(n, 3)))
            y = torch.from_numpy(rng.normal(size=(n,)))
            batches.append({'x': x, 'y': y})
        episodes.append(EpisodeData(*batches))
    return episodes


def test_mask_parsing():
    assert str(ModuleMask.parse('emb+va+dec')) == 'emb+va+dec'
    assert str(ModuleMask.parse('dec+emb')) == 'emb+dec'
    assert ModuleMask.parse('none').partitions() == ()
    assert ModuleMask.parse('emb').partitions() == (SPEAKER_STORE,)
    with pytest.raises(ConfigError):
        ModuleMask.parse('enc')
    with pytest.raises(ConfigError):
        ModuleMask.parse('emb+enc')
    with pytest.raises(ConfigError):
        ModuleMask.parse('va+dec')
    with pytest.raises(ConfigError):
        ModuleMask.parse('emb+post')


@pytest.mark.parametrize('mask_text', ['emb', 'emb+va', 'emb+dec', 'emb+va+dec'])
def test_inner_loop_touches_only_masked_partitions(tiny_train, tiny_model_cfg, mask_text):
    params = init_params(tiny_model_cfg, tiny_train.speaker_ids(), seed=0)
    before = params.clone()
    mask = ModuleMask.parse(mask_text)
    support = tiny_train.utterances[:2]
    adapted = inner_adapt(params, support, mask, 0.05, 2, make_loss_fn(tiny_model_cfg))

    for tag in (ENCODER, VARIANCE_ADAPTOR, DECODER, SPEAKER_STORE):
        assert params.partition_equal(before, tag)
        if tag in mask.partitions():
            assert not adapted.partition_equal(before, tag)
        else:
            assert adapted.partition_equal(before, tag)


def test_single_embedding_step_is_plain_gradient_descent(tiny_train, tiny_model_cfg):
    params = init_params(tiny_model_cfg, tiny_train.speaker_ids(), seed=0)
    loss_fn = make_loss_fn(tiny_model_cfg)
    support = tiny_train.utterances[:2]
    adapted = inner_adapt(params, support, ModuleMask.parse('emb'), 0.1, 1, loss_fn)

    leaf = params['spk.table'].detach().clone().requires_grad_(True)
    loss = loss_fn(params.replace({'spk.table': leaf}), collate(support))
    grad, = torch.autograd.grad(loss.total, [leaf])
    assert torch.allclose(adapted['spk.table'], params['spk.table'] - 0.1 * grad, rtol=0, atol=1e-12)


def test_zero_inner_steps_return_the_input(tiny_train, tiny_model_cfg):
    params = init_params(tiny_model_cfg, tiny_train.speaker_ids(), seed=0)
    adapted = inner_adapt(params, tiny_train.utterances[:2], ModuleMask.parse('emb+va+dec'), 0.1, 0,
                          make_loss_fn(tiny_model_cfg))
    assert adapted.partition_equal(params, DECODER)
    with pytest.raises(ConfigError):
        inner_adapt(params, tiny_train.utterances[:2], ModuleMask.parse('emb'), 0.1, -1,
                    make_loss_fn(tiny_model_cfg))


def test_second_order_meta_gradient_matches_finite_differences():
    params = _surrogate_params(0)
    assert params.num_parameters() <= 100
    episodes = _surrogate_episodes(1, 2)
    cfg = MetaConfig(alpha=0.1, N=2, M=2, K=3, Q=2, order='second', clip_norm=None).validate()
    mask = ModuleMask.parse('emb+va+dec')

    grads, stats = meta_gradient(params, episodes, cfg, mask, _surrogate_loss)
    assert stats['F'] == pytest.approx(meta_objective(params, episodes, cfg, mask, _surrogate_loss), abs=1e-12)

    h = 1e-6
    for name, g in grads:
        flat = params[name].reshape(-1)
        for idx in range(flat.numel()):
            plus = flat.clone()
            minus = flat.clone()
            plus[idx] += h
            minus[idx] -= h
            f_plus = meta_objective(params.replace({name: plus.reshape(params[name].shape)}), episodes, cfg, mask,
                                    _surrogate_loss)
            f_minus = meta_objective(params.replace({name: minus.reshape(params[name].shape)}), episodes, cfg, mask,
                                     _surrogate_loss)
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(g.reshape(-1)[idx])
            assert abs(analytic - numeric) <= 1e-5 * max(abs(analytic), abs(numeric)) + 1e-8, (name, idx)


def _support_grad_norm(params, batch, loss_fn, names):
    leaves = [params[n].detach().clone().requires_grad_(True) for n in names]
    current = params.replace(dict(zip(names, leaves)))
    grads = torch.autograd.grad(loss_fn(current, batch).total, leaves)
    return float(torch.sqrt(sum((g * g).sum() for g in grads)))


def test_clipped_second_order_meta_gradient_matches_finite_differences():
    params = _surrogate_params(0)
    episodes = _surrogate_episodes(1, 2)
    clip_norm = 0.05
    cfg = MetaConfig(alpha=0.1, N=2, M=2, K=3, Q=2, order='second', clip_norm=clip_norm).validate()
    mask = ModuleMask.parse('emb+va+dec')
    # the clip binds on every inner step: alpha * clip_norm barely moves the parameters
    for ep in episodes:
        assert _support_grad_norm(params, ep.support, _surrogate_loss, mask.adapted_names(params)) > 2 * clip_norm

    grads, stats = meta_gradient(params, episodes, cfg, mask, _surrogate_loss)
    assert stats['F'] == pytest.approx(meta_objective(params, episodes, cfg, mask, _surrogate_loss), abs=1e-12)
    unclipped = MetaConfig(alpha=0.1, N=2, M=2, K=3, Q=2, order='second', clip_norm=None).validate()
    free, _ = meta_gradient(params, episodes, unclipped, mask, _surrogate_loss)
    assert not all(torch.allclose(g, f) for (_, g), (_, f) in zip(grads, free))

    h = 1e-6
    for name, g in grads:
        flat = params[name].reshape(-1)
        for idx in range(flat.numel()):
            plus = flat.clone()
            minus = flat.clone()
            plus[idx] += h
            minus[idx] -= h
            f_plus = meta_objective(params.replace({name: plus.reshape(params[name].shape)}), episodes, cfg, mask,
                                    _surrogate_loss)
            f_minus = meta_objective(params.replace({name: minus.reshape(params[name].shape)}), episodes, cfg, mask,
                                     _surrogate_loss)
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(g.reshape(-1)[idx])
            assert abs(analytic - numeric) <= 1e-5 * max(abs(analytic), abs(numeric)) + 1e-8, (name, idx)


def _quadratic_loss(params, batch, spk_vecs=None):
    total = 0.5 * batch['a'] * (params['spk.shared'][0] - batch['c']) ** 2
    return LossBreakdown(ZERO, ZERO, ZERO, ZERO, total)


def test_first_and_second_order_on_a_quadratic():
    # one inner step: w' = w - alpha a (w - c), query loss 0.5 a (w' - c)^2
    a, c, w, alpha = 2.0, 1.0, 3.0, 0.1
    params = ModelParameters(OrderedDict([('spk.shared', torch.tensor([w], dtype=torch.float64))]), 'shared')
    batch = {'a': torch.tensor(a, dtype=torch.float64), 'c': torch.tensor(c, dtype=torch.float64)}
    episodes = [EpisodeData(batch, batch)]
    mask = ModuleMask.parse('emb')
    w_adapted = w - alpha * a * (w - c)
    first_order = a * (w_adapted - c)
    second_order = first_order * (1 - alpha * a)

    for order, expected in (('second', second_order), ('first', first_order)):
        cfg = MetaConfig(alpha=alpha, N=1, M=1, K=1, order=order, clip_norm=None)
        grads, _ = meta_gradient(params, episodes, cfg, mask, _quadratic_loss)
        assert float(grads[0][1][0]) == pytest.approx(expected, abs=1e-12)


def test_meta_step_updates_every_partition(tiny_train, tiny_model_cfg):
    cfg = MetaConfig(alpha=0.05, beta=0.05, N=1, M=2, K=2, Q=2, clip_norm=None)
    params = init_params(tiny_model_cfg, tiny_train.speaker_ids(), seed=0)
    rng = np.random.default_rng(0)
    episodes = [sample_episode(tiny_train, 2, 2, rng) for _ in range(2)]
    before = params.clone()
    updated, stats = meta_step(params, episodes, cfg, ModuleMask.parse('emb+va+dec'),
                               make_loss_fn(tiny_model_cfg), corpus=tiny_train)
    for tag in (ENCODER, VARIANCE_ADAPTOR, DECODER, SPEAKER_STORE):
        assert params.partition_equal(before, tag)
        assert not updated.partition_equal(before, tag)
    assert np.isfinite(stats['F'])
    with pytest.raises(InputError):
        meta_step(params, episodes[:1], cfg, ModuleMask.parse('emb'), make_loss_fn(tiny_model_cfg),
                  corpus=tiny_train)
    with pytest.raises(InputError):
        meta_gradient(params, episodes, cfg, ModuleMask.parse('emb'), make_loss_fn(tiny_model_cfg))


def test_outer_optimizer_clips_and_steps():
    tensors = OrderedDict([('dec.w', torch.tensor([1.0, 1.0], dtype=torch.float64))])
    grads = [('dec.w', torch.tensor([3.0, 4.0], dtype=torch.float64))]
    out = OuterOptimizer('sgd', lr=0.1, clip_norm=1.0).step_tensors(tensors, grads)
    assert torch.allclose(out['dec.w'], torch.tensor([1.0 - 0.06, 1.0 - 0.08], dtype=torch.float64))
    adam = OuterOptimizer('adam', lr=0.1, clip_norm=None)
    out = adam.step_tensors(tensors, grads)
    # the first Adam step moves each coordinate by lr against the gradient sign
    assert torch.allclose(out['dec.w'], torch.tensor([0.9, 0.9], dtype=torch.float64), atol=1e-6)
    arrays, info = adam.state_arrays()
    assert info['step'] == 1
    assert arrays['optim_exp_avg'].size == 2
    with pytest.raises(ConfigError):
        OuterOptimizer('rmsprop')


def _meta_cfg(**kw):
    base = dict(alpha=0.05, beta=0.01, N=1, M=2, K=2, Q=2, total_meta_steps=4, checkpoint_every=2, log_every=1,
                outer_optimizer='adam')
    base.update(kw)
    return MetaConfig(**base)


def test_meta_train_writes_checkpoints(tiny_train, tiny_model_cfg, tmp_path):
    out_dir = str(tmp_path / 'run')
    result = meta_train(tiny_train, _meta_cfg(), tiny_model_cfg, 'emb+va', seed=0, out_dir=out_dir)
    assert sorted(os.listdir(out_dir)) == ['final.ckpt', 'step_000002.ckpt', 'step_000004.ckpt', 'train_log.tsv']
    assert len(result.losses) == 4
    assert all(np.isfinite(result.losses))
    assert sha256_file(os.path.join(out_dir, 'final.ckpt')) == sha256_file(os.path.join(out_dir, 'step_000004.ckpt'))


def test_meta_train_is_reproducible(tiny_train, tiny_model_cfg, tmp_path):
    a = str(tmp_path / 'a')
    b = str(tmp_path / 'b')
    meta_train(tiny_train, _meta_cfg(), tiny_model_cfg, 'emb', seed=3, out_dir=a)
    meta_train(tiny_train, _meta_cfg(), tiny_model_cfg, 'emb', seed=3, out_dir=b)
    assert sha256_file(os.path.join(a, 'final.ckpt')) == sha256_file(os.path.join(b, 'final.ckpt'))


def test_resume_matches_an_uninterrupted_run(tiny_train, tiny_model_cfg, tmp_path):
    full = str(tmp_path / 'full')
    meta_train(tiny_train, _meta_cfg(), tiny_model_cfg, 'emb+dec', seed=1, out_dir=full)

    part = str(tmp_path / 'part')
    meta_train(tiny_train, _meta_cfg(total_meta_steps=2), tiny_model_cfg, 'emb+dec', seed=1, out_dir=part)
    resumed = meta_train(tiny_train, _meta_cfg(), tiny_model_cfg, 'emb+dec', seed=1, out_dir=part,
                         resume_from=os.path.join(part, 'step_000002.ckpt'))
    assert sha256_file(os.path.join(full, 'final.ckpt')) == sha256_file(os.path.join(part, 'final.ckpt'))
    assert [int(s) for s in resumed.log.column('step')] == [1, 2, 3, 4]

    with pytest.raises(ConfigError):
        meta_train(tiny_train, _meta_cfg(), tiny_model_cfg, 'emb', seed=1, out_dir=str(tmp_path / 'other'),
                   resume_from=os.path.join(part, 'step_000002.ckpt'))


@pytest.mark.slow
def test_meta_objective_falls_during_training(tiny_train, tiny_model_cfg):
    cfg = _meta_cfg(beta=0.01, total_meta_steps=200, checkpoint_every=200, log_every=50)
    result = meta_train(tiny_train, cfg, tiny_model_cfg, 'emb+va+dec', seed=0)
    losses = np.asarray(result.losses, dtype=np.float64)
    assert losses.size == 200
    assert np.all(np.isfinite(losses))
    assert losses[:50].mean() > losses[-50:].mean()
