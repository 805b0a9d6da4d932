import torch


def randomize_bn(graph, weights, seed=0):
    """Non-trivial batchnorm statistics so eval-mode forward is not the identity."""
    gen = torch.Generator().manual_seed(seed)
    for l in graph.layers:
        if l.kind == "batchnorm":
            c = l.out_channels
            k = str(l.layer_id)
            weights[f"{k}.weight"] = torch.rand(c, generator=gen, dtype=weights[f"{k}.weight"].dtype) + 0.5
            weights[f"{k}.bias"] = torch.randn(c, generator=gen, dtype=weights[f"{k}.bias"].dtype) * 0.2
            weights[f"{k}.running_mean"] = torch.randn(c, generator=gen, dtype=weights[f"{k}.weight"].dtype) * 0.1
            weights[f"{k}.running_var"] = torch.rand(c, generator=gen, dtype=weights[f"{k}.weight"].dtype) + 0.5
    return weights


def finite_difference_check(fn, w, eps=1e-6, floor=1e-4, skip=None):
    """Worst relative error between autograd and central differences of ``fn``.

    Every entry of every tensor in ``w`` is perturbed.  Errors are relative
    to the larger magnitude, with ``floor`` guarding near-zero gradients.
    """
    params = {k: v.clone().requires_grad_(True) for k, v in w.items()}
    grads = torch.autograd.grad(fn(params), list(params.values()), allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params.values(), grads)]
    worst = 0.0
    for (name, p), g in zip(params.items(), grads):
        flat = w[name].reshape(-1)
        for i in range(flat.numel()):
            if skip is not None and skip(name, flat[i]):
                continue
            plus = {k: v.clone() for k, v in w.items()}
            minus = {k: v.clone() for k, v in w.items()}
            plus[name].view(-1)[i] += eps
            minus[name].view(-1)[i] -= eps
            num = (fn(plus).item() - fn(minus).item()) / (2 * eps)
            ana = g.reshape(-1)[i].item()
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            worst = max(worst, err)
    return worst
