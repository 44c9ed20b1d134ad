"""Central-difference gradient checking against autograd."""
import numpy as np
import torch

STEP = 1e-4


def relative_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def group_relative_error(rows):
    """``|a - n| / max(|a|, |n|)`` over the vectors of checked coordinates."""
    a = np.array([r[2] for r in rows])
    n = np.array([r[3] for r in rows])
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0


def sample_coordinates(named_params, fraction, minimum, rng):
    """Pick at least ``max(minimum, fraction * size)`` scalar entries from a parameter group."""
    sizes = [p.numel() for _, p in named_params]
    total = sum(sizes)
    count = min(total, max(minimum, int(np.ceil(fraction * total))))
    flat = rng.choice(total, size=count, replace=False)
    offsets = np.cumsum([0] + sizes)
    picks = []
    for f in np.sort(flat):
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((named_params[t][0], named_params[t][1], int(f - offsets[t])))
    return picks


def check_coordinates(loss_fn, picks, step=STEP):
    """Compare autograd against central differences for each picked entry.

    Returns a list of ``(name, index, analytic, numeric)``.
    """
    params = {id(p): p for _, p, _ in picks}
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {k: p.grad.detach().clone().reshape(-1) for k, p in params.items()}
    rows = []
    with torch.no_grad():
        for name, p, index in picks:
            flat = p.view(-1)
            old = flat[index].item()
            flat[index] = old + step
            up = loss_fn().item()
            flat[index] = old - step
            down = loss_fn().item()
            flat[index] = old
            rows.append((name, index, grads[id(p)][index].item(), (up - down) / (2 * step)))
    return rows


def check_direction(loss_fn, params, rng, step=STEP):
    """Directional derivative along a random unit direction over ``params``.

    Returns ``(analytic, numeric)``.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    dirs = [torch.as_tensor(rng.normal(size=p.shape), dtype=p.dtype) for p in params]
    norm = torch.sqrt(sum((d**2).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum((p.grad * d).sum() for p, d in zip(params, dirs)).item()
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p += step * d
        up = loss_fn().item()
        for p, d in zip(params, dirs):
            p -= 2 * step * d
        down = loss_fn().item()
        for p, d in zip(params, dirs):
            p += step * d
    return analytic, (up - down) / (2 * step)
