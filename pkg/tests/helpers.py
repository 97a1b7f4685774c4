"""Shared fixtures-as-functions: tiny models and a finite-difference gradient check."""
import numpy as np
import torch

from jointspo.model import JointModel, ModelConfig

TINY = dict(vocab_size=12, num_tags=5, num_relations=2, hidden=8, char_dim=6, label_dim=4,
            pair_dim=6, selection_hidden=5, dropout=0.0, max_len=16)


def tiny_model(seed=0, **over):
    torch.manual_seed(seed)
    cfg = ModelConfig(**{**TINY, **over})
    return JointModel(cfg).double().eval()


def tiny_batch(K=4, B=2, seed=0, cfg=TINY):
    g = torch.Generator().manual_seed(seed)
    mask = torch.ones(B, K, dtype=torch.bool)
    mask[1:, K - 1:] = False  # second sentence one token shorter
    chars = torch.randint(2, cfg["vocab_size"], (B, K), generator=g) * mask
    tags = torch.randint(0, cfg["num_tags"], (B, K), generator=g) * mask
    R = cfg["num_relations"]
    pair_y = (torch.rand(B, K, K, R, generator=g) < 0.2).double()
    pair_y *= (mask.unsqueeze(2) & mask.unsqueeze(1)).unsqueeze(-1)
    global_y = (pair_y.sum((1, 2)) > 0).double()
    return {"chars": chars, "mask": mask, "tags": tags, "pair_y": pair_y, "global_y": global_y}


def finite_difference_check(model, loss_fn, n_params=100, eps=1e-3, seed=0):
    """Max relative error between autograd and central differences on sampled coordinates."""
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(tuple(p.shape))]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(n_params, len(coords)), replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            pi, idx = coords[k]
            p = params[pi]
            analytic = float(p.grad[idx])
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss_fn())
            p[idx] = orig - eps
            down = float(loss_fn())
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
