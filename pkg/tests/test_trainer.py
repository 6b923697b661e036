import io

import numpy as np
import pytest
import torch

from ullava.data.synthetic import make_corpus
from ullava.errors import BadCorpus, CorruptCheckpoint, ValidationError, VersionMismatch
from ullava.losses import LossConfig, bce_loss, dice_loss
from ullava.model import ModelConfig, ULlava
from ullava.trainer import (
    STAGE_DEFAULTS,
    BatchSampler,
    StageConfig,
    batch_loss,
    in_scope,
    load_checkpoint,
    prepare,
    pretrain_language_model,
    run_stage,
    save_checkpoint,
    train_stage1,
    train_stage2,
)


def snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def mixed():
    parts = [make_corpus(k, 2, seed=i) for i, k in enumerate(["res", "rec", "vqa", "captioning", "video_caption"])]
    samples = [s for p, _ in parts for s in p]
    store = parts[0][1]
    for _, st in parts[1:]:
        store.arrays.update(st.arrays)
    return samples, store


def test_stage_defaults():
    one, two = StageConfig.for_stage("I"), StageConfig.for_stage("II")
    assert (one.learning_rate, one.batch_size, one.token_limit) == (2e-3, 48, 1024)
    assert (two.learning_rate, two.batch_size, two.token_limit) == (2e-5, 16, 512)
    assert one.weight_decay == two.weight_decay == 0
    assert one.trainable_scopes == ("projector",)
    with pytest.raises(ValueError):
        StageConfig.for_stage("II", learning_rate=0)


def test_in_scope():
    assert in_scope("lm.blocks.0.w", ["lm"]) and not in_scope("lmx.w", ["lm"])
    assert in_scope("lm.video_embed", ["lm.video_embed"])


def test_parameter_budget():
    samples, _ = mixed()
    assert ULlava.for_samples(ModelConfig(), samples).n_parameters() <= 1_000_000


def test_stage1_freezes_everything_but_projector():
    samples, store = make_corpus("captioning", 6, seed=3)
    model = ULlava.for_samples(ModelConfig(), samples)
    before = snapshot(model)
    rep = train_stage1(model, samples, StageConfig.for_stage("I", max_steps=5), store)
    after = snapshot(model)
    assert len(rep.history) == 5
    for n in before:
        same = torch.equal(before[n], after[n])
        assert same != n.startswith("projector."), n
    assert all(p.requires_grad for p in model.parameters())  # flags restored


def test_stage1_rejects_non_caption_corpus():
    samples, store = make_corpus("res", 2, seed=3)
    model = ULlava.for_samples(ModelConfig(), samples)
    with pytest.raises(BadCorpus):
        train_stage1(model, samples, StageConfig.for_stage("I", max_steps=1), store)


def test_stage1_loss_decreases():
    a, store = make_corpus("captioning", 12, seed=3)
    b, st2 = make_corpus("video_caption", 4, seed=4)
    store.arrays.update(st2.arrays)
    model = ULlava.for_samples(ModelConfig(), a + b)
    rep = train_stage1(model, a + b, StageConfig.for_stage("I", max_steps=200, batch_size=16), store)
    assert rep.losses[-1] < rep.losses[0]


def test_training_is_deterministic():
    samples, store = mixed()

    def run():
        model = ULlava.for_samples(ModelConfig(), samples)
        return train_stage2(model, samples, StageConfig.for_stage("II", max_steps=6, batch_size=4, learning_rate=1e-3), store).losses

    assert run() == run()


def test_breakdowns_by_task():
    samples, store = mixed()
    model = ULlava.for_samples(ModelConfig(), samples)
    prepared = prepare(model, samples, store, 512)
    _, breakdowns = batch_loss(model, prepared, LossConfig())
    by_kind = {p.sample.task_kind: b for p, b in zip(prepared, breakdowns)}
    assert by_kind["vqa"].l_pixel is None and by_kind["vqa"].l_region is None
    assert by_kind["vqa"].l_fgl is by_kind["vqa"].l_cgl
    assert by_kind["rec"].branch == "region"
    res = by_kind["res"]
    assert res.l_pixel.item() == pytest.approx(2.0 * res.l_bce.item() + 0.5 * res.l_dice.item())


def test_mixed_batch_matches_per_sample_gradients():
    """Right padding must not leak between samples: batched loss gradient equals the mean of singles."""
    samples, store = mixed()
    model = ULlava.for_samples(ModelConfig(), samples).double()
    prepared = prepare(model, samples, store, 512)
    params = [p for p in model.parameters()]

    loss, _ = batch_loss(model, prepared, LossConfig())
    batched = torch.autograd.grad(loss, params, allow_unused=True)
    singles = [torch.zeros_like(p) for p in params]
    for p in prepared:
        l, _ = batch_loss(model, [p], LossConfig())
        for acc, g in zip(singles, torch.autograd.grad(l, params, allow_unused=True)):
            if g is not None:
                acc += g / len(prepared)
    for b, s in zip(batched, singles):
        torch.testing.assert_close(torch.zeros_like(s) if b is None else b, s, rtol=1e-9, atol=1e-12)


def test_batch_sampler():
    samples, store = mixed()
    model = ULlava.for_samples(ModelConfig(), samples)
    prepared = prepare(model, samples, store, 512)
    assert BatchSampler(prepared, 64, 0).next() == prepared
    a, b = BatchSampler(prepared, 4, 7), BatchSampler(prepared, 4, 7)
    seq_a = [[p.sample.id for p in a.next()] for _ in range(20)]
    seq_b = [[p.sample.id for p in b.next()] for _ in range(20)]
    assert seq_a == seq_b and all(len(x) == 4 for x in seq_a)
    kinds = {i.split("_")[0] for batch in seq_a for i in batch}
    assert kinds == {"res", "rec", "vqa", "captioning", "video"}


def test_stage2_validates_samples():
    samples, store = make_corpus("res", 2, seed=1)
    samples[0].target_masks = []
    model = ULlava.for_samples(ModelConfig(), samples)
    with pytest.raises(ValidationError):
        train_stage2(model, samples, StageConfig.for_stage("II", max_steps=1), store)


def test_lm_pretraining_touches_only_lm():
    samples, _ = make_corpus("captioning", 8, seed=1)
    model = ULlava.for_samples(ModelConfig(), samples)
    before = snapshot(model)
    rep = pretrain_language_model(model, samples, StageConfig.for_stage("LM", max_steps=20, batch_size=8))
    after = snapshot(model)
    assert rep.losses[-1] < rep.losses[0]
    assert all(torch.equal(before[n], after[n]) != n.startswith("lm.") for n in before if n != "lm.video_embed")


def test_checkpoint_round_trip(tmp_path, res_corpus):
    samples, store = res_corpus
    model = ULlava.for_samples(ModelConfig(), samples)
    path = save_checkpoint(model, tmp_path / "m.pt", "abc")
    loaded = load_checkpoint(path, ModelConfig())
    assert loaded.checkpoint_config_hash == "abc"
    for (n, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), n
    lay = model.render(samples[0])
    feat = model.encode(store.load(samples[0].visual), "image")
    model.eval()
    with torch.no_grad():
        x = model.forward_batch([lay], [feat])[0].logits
        y = loaded.forward_batch([lay], [feat])[0].logits
    assert torch.equal(x, y)


def test_checkpoint_config_mismatch(tmp_path, res_corpus):
    model = ULlava.for_samples(ModelConfig(), res_corpus[0])
    path = save_checkpoint(model, tmp_path / "m.pt")
    with pytest.raises(VersionMismatch):
        load_checkpoint(path, ModelConfig(d_lm=32))


def test_checkpoint_version_mismatch(tmp_path, res_corpus):
    model = ULlava.for_samples(ModelConfig(), res_corpus[0])
    path = save_checkpoint(model, tmp_path / "m.pt")
    payload = torch.load(path, weights_only=True)
    payload["version"] = 99
    torch.save(payload, path)
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_truncated_checkpoint(tmp_path, res_corpus):
    model = ULlava.for_samples(ModelConfig(), res_corpus[0])
    path = save_checkpoint(model, tmp_path / "m.pt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_double_precision_training(res_corpus):
    samples, store = res_corpus
    model = ULlava.for_samples(ModelConfig(), samples).double()
    rep = train_stage2(model, samples, StageConfig.for_stage("II", max_steps=2), store)
    assert len(rep.losses) == 2 and model.dtype == torch.float64
