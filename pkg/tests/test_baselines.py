import os

import numpy as np
import pytest
import torch

from baselines import (BaselineConfig, EncoderSetting, SpeakerEncoder, encode_speaker_reference, load_speaker_encoder,
                       multitask_step, pretrain_encoder, sample_batch, train_multitask, train_speaker_encoder_tts)
from corpus import CorpusConfig, generate_corpus, oracle_embed
from lib.checkpoint import load_checkpoint
from lib.errors import ConfigError, InputError
from model import DECODER, ENCODER, SPEAKER_STORE, VARIANCE_ADAPTOR, init_params, make_loss_fn


def _bcfg(**kw):
    base = dict(steps=3, lr=0.01, batch_size=4, log_every=1, checkpoint_every=2, encoder_hidden=6,
                pretrain_steps=30, pretrain_speakers=4, pretrain_utts=3, pretrain_seed=99)
    base.update(kw)
    return BaselineConfig(**base)


def test_sample_batch_mixes_speakers(tiny_train):
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(10):
        batch = sample_batch(tiny_train, 8, rng)
        assert len(batch) == 8
        seen |= {u.speaker_id for u in batch}
    assert seen == set(tiny_train.speaker_ids())
    # more samples than utterances falls back to drawing with replacement
    assert len(sample_batch(tiny_train, 30, rng)) == 30


def test_multitask_step_updates_every_partition(tiny_train, tiny_model_cfg):
    params = init_params(tiny_model_cfg, tiny_train.speaker_ids(), seed=0)
    before = params.clone()
    batch = tiny_train.utterances[::5]
    updated, loss = multitask_step(params, batch, 0.05, make_loss_fn(tiny_model_cfg))
    assert np.isfinite(float(loss.total))
    for tag in (ENCODER, VARIANCE_ADAPTOR, DECODER, SPEAKER_STORE):
        assert params.partition_equal(before, tag)
        assert not updated.partition_equal(before, tag)


def test_single_speaker_step_moves_only_that_speaker_row(tiny_train, tiny_model_cfg):
    params = init_params(tiny_model_cfg, tiny_train.speaker_ids(), seed=0)
    table = torch.from_numpy(np.random.default_rng(3).normal(0.0, 0.1, size=tuple(params['spk.table'].shape)))
    params = params.replace({'spk.table': table})
    speaker = tiny_train.speaker_ids()[1]
    batch = tiny_train.utterances_of(speaker)[:3]
    updated, _ = multitask_step(params, batch, 0.05, make_loss_fn(tiny_model_cfg), clip_norm=None)

    row = params.speaker_rows[speaker]
    for spk, r in params.speaker_rows.items():
        if r == row:
            assert not torch.equal(updated['spk.table'][r], params['spk.table'][r])
        else:
            assert torch.equal(updated['spk.table'][r], params['spk.table'][r]), spk


def test_train_multitask(tiny_train, tiny_model_cfg, tmp_path):
    out_dir = str(tmp_path / 'mt')
    result = train_multitask(tiny_train, _bcfg(), tiny_model_cfg, seed=0, out_dir=out_dir)
    assert sorted(os.listdir(out_dir)) == ['final.ckpt', 'step_000002.ckpt', 'step_000003.ckpt', 'train_log.tsv']
    assert len(result.losses) == 3
    ckpt = load_checkpoint(os.path.join(out_dir, 'final.ckpt'), tiny_model_cfg)
    assert ckpt.approach == 'multitask'
    assert ckpt.step == 3
    assert ckpt.params.speaker_rows == {0: 0, 1: 1, 2: 2, 3: 3}


def test_multitask_resume_checks_the_approach(tiny_train, tiny_model_cfg, tmp_path):
    out_dir = str(tmp_path / 'mt')
    train_multitask(tiny_train, _bcfg(), tiny_model_cfg, seed=0, out_dir=out_dir)
    with pytest.raises(ConfigError):
        train_speaker_encoder_tts(tiny_train, 'scratch_joint', _bcfg(), tiny_model_cfg, seed=0,
                                  resume_from=os.path.join(out_dir, 'final.ckpt'))


def test_encoder_settings():
    assert EncoderSetting('fixed_oracle').uses_oracle
    assert EncoderSetting('scratch_joint').approach == 'spk_enc:scratch_joint'
    with pytest.raises(ConfigError):
        EncoderSetting('finetuned')


@pytest.mark.parametrize('setting', ['scratch_joint', 'fixed_oracle', 'pretrained_joint'])
def test_speaker_encoder_vectors(tiny_train, tiny_model_cfg, setting):
    encoder = SpeakerEncoder.create(setting, tiny_train.config, tiny_model_cfg, seed=0, hidden=6)
    utts = tiny_train.utterances[:3]
    assert tuple(encoder.raw(utts).shape) == (3, tiny_train.config.emb_dim)
    assert tuple(encoder.vectors(utts).shape) == (3, tiny_model_cfg.spk_emb_dim)
    ref = encode_speaker_reference(encoder, utts)
    assert tuple(ref.shape) == (tiny_model_cfg.spk_emb_dim,)
    assert torch.allclose(ref, encoder.vectors(utts).mean(dim=0))
    with pytest.raises(InputError):
        encode_speaker_reference(encoder, [])


def test_encoder_pretraining_lowers_the_regression_loss(tiny_train, tiny_model_cfg):
    encoder = SpeakerEncoder.create('pretrained_joint', tiny_train.config, tiny_model_cfg, seed=0, hidden=6)
    losses = pretrain_encoder(encoder, _bcfg(pretrain_steps=60, pretrain_lr=0.02), tiny_train.config, seed=0)
    assert len(losses) == 60
    assert losses[-1] < losses[0]
    oracle = SpeakerEncoder.create('fixed_oracle', tiny_train.config, tiny_model_cfg, seed=0)
    with pytest.raises(ConfigError):
        pretrain_encoder(oracle, _bcfg(), tiny_train.config, seed=0)


@pytest.mark.parametrize('setting', ['scratch_joint', 'fixed_oracle', 'pretrained_joint'])
def test_train_speaker_encoding_tts(tiny_train, tiny_model_cfg, tmp_path, setting):
    out_dir = str(tmp_path / setting)
    result = train_speaker_encoder_tts(tiny_train, setting, _bcfg(), tiny_model_cfg, seed=0, out_dir=out_dir)
    assert len(result.losses) == 3
    assert all(np.isfinite(result.losses))
    if setting == 'pretrained_joint':
        assert len(result.pretrain_losses) == 30

    ckpt = load_checkpoint(os.path.join(out_dir, 'final.ckpt'), tiny_model_cfg)
    assert ckpt.approach == 'spk_enc:' + setting
    encoder = load_speaker_encoder(ckpt, tiny_train.config)
    assert encoder.setting == EncoderSetting(setting)
    utts = tiny_train.utterances[:2]
    assert torch.allclose(encoder.vectors(utts), result.encoder.vectors(utts))


def test_scratch_encoder_is_trained_jointly(tiny_train, tiny_model_cfg):
    bcfg = _bcfg(steps=1)
    fresh = SpeakerEncoder.create('scratch_joint', tiny_train.config, tiny_model_cfg, seed=0,
                                  hidden=bcfg.encoder_hidden)
    result = train_speaker_encoder_tts(tiny_train, 'scratch_joint', bcfg, tiny_model_cfg, seed=0)
    assert fresh.mlp_names == ['spkenc.w1', 'spkenc.b1', 'spkenc.w2', 'spkenc.b2']
    for name in fresh.mlp_names:
        assert not torch.equal(result.encoder.tensors[name], fresh.tensors[name]), name


def test_fixed_oracle_embedder_stays_the_oracle(tiny_train, tiny_model_cfg):
    result = train_speaker_encoder_tts(tiny_train, 'fixed_oracle', _bcfg(steps=2), tiny_model_cfg, seed=0)
    encoder = result.encoder
    assert encoder.frozen is None
    assert encoder.mlp_names == []
    utts = tiny_train.utterances[:4]
    expected = np.stack([oracle_embed(u, tiny_train.config) for u in utts])
    # bit-identical: no trainable tensor sits before the projection
    assert np.array_equal(encoder.raw(utts).numpy(), expected)


def test_fixed_oracle_can_reuse_a_frozen_encoder(tiny_train, tiny_model_cfg, tmp_path):
    scratch_dir = str(tmp_path / 'scratch')
    train_speaker_encoder_tts(tiny_train, 'scratch_joint', _bcfg(), tiny_model_cfg, seed=0, out_dir=scratch_dir)
    frozen = os.path.join(scratch_dir, 'final.ckpt')

    result = train_speaker_encoder_tts(tiny_train, 'fixed_oracle', _bcfg(frozen_encoder=frozen), tiny_model_cfg,
                                       seed=0)
    before = result.encoder.frozen['spkenc.w1']
    assert torch.equal(before, load_checkpoint(frozen).extra_tensors['spkenc.w1'])
    assert set(result.encoder.tensors) == {'spkenc.proj.w', 'spkenc.proj.b'}


def test_fixed_oracle_needs_latents(tiny_model_cfg):
    cfg = CorpusConfig(n_phonemes=8, n_mel=4, min_len=3, max_len=5, k_shot=2, synthetic=False)
    corpus = generate_corpus(2, 4, 5, cfg)
    assert not corpus.has_latents
    with pytest.raises(ConfigError):
        train_speaker_encoder_tts(corpus, 'fixed_oracle', _bcfg(), tiny_model_cfg, seed=0)


def test_baseline_config_validation():
    with pytest.raises(ConfigError):
        _bcfg(optimizer='lbfgs').validate()
    with pytest.raises(ConfigError):
        _bcfg(batch_size=0).validate()
    with pytest.raises(ConfigError):
        _bcfg(lr=0.0).validate()
    assert BaselineConfig.from_dict(_bcfg().to_dict()).to_dict() == _bcfg().to_dict()


@pytest.mark.slow
def test_multitask_loss_falls_during_training(tiny_train, tiny_model_cfg):
    bcfg = _bcfg(steps=500, batch_size=8, optimizer='adam', lr=0.01, log_every=100, checkpoint_every=500)
    result = train_multitask(tiny_train, bcfg, tiny_model_cfg, seed=0)
    losses = np.asarray(result.losses, dtype=np.float64)
    assert losses.size == 500
    assert losses[:50].mean() > losses[-50:].mean()
