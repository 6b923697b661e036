"""Central finite differences against autograd, in float64."""

import numpy as np
import pytest
import torch

from ullava.data.synthetic import make_corpus
from ullava.encoders import ImageFeature
from ullava.heads import PixelHead, RegionHead
from ullava.lm import LMConfig, TinyCausalLM, coarse_grained_loss
from ullava.losses import LossConfig, bce_loss, dice_loss, fine_grained_loss, giou_loss, l1_box_loss
from ullava.model import ModelConfig, ULlava
from ullava.tokens import Tokenizer, render_turns
from ullava.types import Turn

D = torch.float64
H = 1e-6


def fd_check(fn, x, rtol, coords=None, floor=1e-8):
    """Compare d fn / d x against central differences on ``coords`` (all when None)."""
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    flat = x.detach().view(-1)
    idx = range(flat.numel()) if coords is None else coords
    num, ana = [], []
    for i in idx:
        old = flat[i].item()
        flat[i] = old + H
        up = fn(x.detach()).item()
        flat[i] = old - H
        down = fn(x.detach()).item()
        flat[i] = old
        num.append((up - down) / (2 * H))
        ana.append(g.view(-1)[i].item())
    num, ana = np.array(num), np.array(ana)
    err = np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), floor)
    assert err < rtol, f"relative error {err:.2e}"
    return err


def param_check(module, loss_fn, rtol, n_per_param=6, seed=0):
    """FD on a few random coordinates of every parameter tensor of ``module``."""
    g = np.random.default_rng(seed)
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    worst = 0.0
    for (name, p), gp in zip(params, grads):
        gp = torch.zeros_like(p) if gp is None else gp
        flat = p.data.view(-1)
        coords = g.choice(flat.numel(), size=min(n_per_param, flat.numel()), replace=False)
        num, ana = [], []
        with torch.no_grad():
            for i in coords:
                old = flat[i].item()
                flat[i] = old + H
                up = loss_fn().item()
                flat[i] = old - H
                down = loss_fn().item()
                flat[i] = old
                num.append((up - down) / (2 * H))
                ana.append(gp.view(-1)[i].item())
        num, ana = np.array(num), np.array(ana)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana))
        if scale < 1e-7:
            continue  # parameter does not influence this loss at these coordinates
        err = np.linalg.norm(num - ana) / scale
        assert err < rtol, f"{name}: relative error {err:.2e}"
        worst = max(worst, err)
    return worst


def _rand(shape, seed=0, scale=1.0):
    return torch.from_numpy(np.random.default_rng(seed).normal(0, scale, shape))


def test_bce_gradient():
    target = np.random.default_rng(1).random((6, 7)) > 0.5
    fd_check(lambda x: bce_loss(x, target), _rand((6, 7), 2, 2.0), 1e-4)


def test_dice_gradient():
    target = np.random.default_rng(3).random((2, 6, 7)) > 0.5
    fd_check(lambda x: dice_loss(x, target), _rand((2, 6, 7), 4, 2.0), 1e-4)


def test_l1_gradient():
    target = torch.tensor([[0.1, 0.2, 0.6, 0.7], [0.3, 0.1, 0.9, 0.5]], dtype=D)
    pred = torch.tensor([[0.15, 0.1, 0.5, 0.9], [0.2, 0.3, 0.8, 0.6]], dtype=D)
    fd_check(lambda x: l1_box_loss(x, target), pred, 1e-4)


def test_giou_gradient():
    target = torch.tensor([[0.1, 0.2, 0.6, 0.7], [0.5, 0.5, 0.9, 0.95]], dtype=D)
    pred = torch.tensor([[0.15, 0.1, 0.5, 0.9], [0.05, 0.1, 0.3, 0.4]], dtype=D)  # overlapping, disjoint
    fd_check(lambda x: giou_loss(x, target), pred, 1e-4)


def test_composed_fgl_gradient():
    mask = np.random.default_rng(5).random((1, 8, 8)) > 0.6
    box_t = torch.tensor([[0.1, 0.2, 0.6, 0.7]], dtype=D)
    n_px = 64

    def fn(x):
        cgl = (x[-1] ** 2).sum()
        logits = x[:n_px].view(1, 8, 8)
        box = x[n_px : n_px + 4].view(1, 4)
        return fine_grained_loss(cgl, (logits, mask), (box, box_t), LossConfig()).l_fgl

    x = torch.cat([_rand(n_px, 6), torch.tensor([0.15, 0.1, 0.5, 0.9], dtype=D), torch.tensor([0.7], dtype=D)])
    fd_check(fn, x, 1e-4)


def test_pixel_head_gradient():
    torch.manual_seed(0)
    head = PixelHead(32, 16, 8, d_prompt=16, channels=8, up_channels=8).to(D)
    feats = _rand((1, 16, 16), 7)
    state = _rand((1, 32), 8)
    target = np.random.default_rng(9).random((1, 32, 32)) > 0.5

    def loss():
        lg = head(state, feats, (4, 4))
        return 2.0 * bce_loss(lg, target) + 0.5 * dice_loss(lg, target)

    param_check(head, loss, 1e-3)
    fd_check(lambda s: bce_loss(head(s, feats, (4, 4)), target), state, 1e-3)


def test_region_head_gradient():
    torch.manual_seed(0)
    head = RegionHead(32, 16).to(D)
    states = _rand((3, 32), 10)
    target = torch.tensor([[0.1, 0.2, 0.6, 0.7]] * 3, dtype=D)

    def loss():
        b = head(states)
        return l1_box_loss(b, target) + giou_loss(b, target)

    param_check(head, loss, 1e-3)
    fd_check(lambda s: giou_loss(head(s), target), states, 1e-3)


def test_lm_gradient():
    torch.manual_seed(0)
    tok = Tokenizer(["a", "red", "dog", "is", "the"], n_img_patches=4, n_frames=2)
    lm = TinyCausalLM(LMConfig(tok.vocab_size, d_lm=32, n_layers=2, n_heads=4, video_token_ids=tok.table.video_ids)).to(D)
    lay = render_turns([Turn("user", "the dog"), Turn("assistant", "a red dog <SEG>")], "image", tok)
    vis = _rand((4, 32), 11, 0.5)

    def loss(v=vis):
        return coarse_grained_loss(lm.forward_layout(lay, v), lay)

    param_check(lm, loss, 1e-3)
    fd_check(loss, vis, 1e-3)


def test_full_model_fgl_gradient():
    samples, store = make_corpus("res+rec", 1, seed=12, size=32)
    cfg = ModelConfig(image_size=32, patch_size=8, d_vis=16, d_lm=32, d_prompt=16, d_box=16,
                      decoder_channels=8, upsample_channels=8)
    model = ULlava.for_samples(cfg, samples).to(D)
    lay = model.render(samples[0])
    feat = model.encode(store.load(samples[0].visual), "image")
    feat = ImageFeature(feat.patch_embeddings.to(D), feat.grid_shape)

    def loss():
        return model.sample_losses(samples, [lay], [feat])[0].l_fgl

    assert model.sample_losses(samples, [lay], [feat])[0].branch == "pixel+region"
    for scope in ("projector", "lm", "pixel_head", "region_head"):
        param_check(getattr(model, scope), loss, 1e-3, n_per_param=3)
