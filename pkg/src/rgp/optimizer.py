"""Single training steps: carrier-space private steps, the dense per-sample
baseline, and plain non-private SGD.

A private step runs, in order: carrier generation from historical updates,
reparametrized forward/backward with per-sample carrier gradients, clipping
of the concatenated per-sample vector, summation, Gaussian perturbation of
each layer's aggregates, reconstruction of a dense update from the noisy
carrier gradients, and a momentum-SGD parameter update.  The noisy sum is
divided by the nominal batch size, so with clipping and noise effectively
disabled the step reduces to plain mini-batch SGD.
"""

import numpy as np

from dataclasses import dataclass, field

from . import seeding
from .carriers import (CarrierConfig, historical_update, power_decompose,
                       projection_residual, random_carriers, top_r_factors)
from .nn import (aggregate_grads, per_sample_carrier_grads,
                 per_sample_full_grads, per_sample_output_grads,
                 softmax_cross_entropy)
from .errors import ConfigError
from .privacy import gaussian_perturb
from .seeding import seeded_rng

__all__ = [
    "HistoryState",
    "MomentumSGD",
    "reconstruct_update",
    "rgp_step",
    "dpsgd_step",
    "nonprivate_step",
    "layer_ranks",
]


@dataclass
class HistoryState:
    """Initial weights (flat view per trainable layer) and the warm-up length."""

    initial_weights: list
    warmup_steps: int = 0

    @classmethod
    def capture(cls, net, warmup_steps=0):
        return cls([layer.flat_weight.copy() for layer in net.trainable_layers],
                   warmup_steps)


@dataclass
class MomentumSGD:
    """Heavy-ball SGD; parameters are updated in place."""

    lr: float
    momentum: float = 0.9
    _buffers: dict = field(default_factory=dict, repr=False)

    def apply(self, key, param, grad):
        buf = self._buffers.get(key)
        if buf is None:
            buf = np.zeros_like(param)
            self._buffers[key] = buf
        buf *= self.momentum
        buf += grad
        param -= self.lr * buf


def _check_orthonormal(mat, tol, what):
    gram = mat.T @ mat
    if np.abs(gram - np.eye(gram.shape[0])).max() > tol:
        raise ValueError(f"{what} is not orthonormal (tolerance {tol})")


def reconstruct_update(left, right, grad_left, grad_right, tol=1e-8):
    """Dense update from carrier gradients:
    ``grad_left R + L grad_right - L L^T grad_left R``.

    Requires orthonormal carriers; with exact (noiseless) carrier gradients
    this equals the projection of the dense gradient onto the carrier
    subspaces.
    """
    _check_orthonormal(left, tol, "left carrier columns")
    _check_orthonormal(right.T, tol, "right carrier rows")
    return grad_left @ right + left @ grad_right - left @ (left.T @ grad_left) @ right


def layer_ranks(net, rank):
    """Per-layer carrier rank: the configured rank clamped to min(p, d)."""
    out = []
    for layer in net.trainable_layers:
        p, d = layer.flat_weight.shape
        out.append(min(rank, p, d))
    return out


def _clip_and_sum(groups, clip_norm, m):
    """Clip each sample's concatenated gradient vector and sum over the batch.

    Streaming equivalent of concatenating all per-layer pieces into one
    (m, D) matrix, applying :func:`rgp.privacy.clip_per_sample` and summing:
    the squared norm of sample i is accumulated across pieces, and the sum
    of clipped vectors is a scale-weighted reduction of each piece.  Returns
    (per-layer tuples of summed arrays, pre-clip norms).
    """
    if clip_norm <= 0:
        raise ConfigError("clipping threshold must be positive")
    sq = np.zeros(m)
    for group in groups:
        for arr in group:
            flat = arr.reshape(m, -1)
            sq += np.einsum("mx,mx->m", flat, flat)
    norms = np.sqrt(sq)
    scale = np.ones(m)
    over = norms > clip_norm
    scale[over] = clip_norm / norms[over]
    sums = [tuple(np.tensordot(scale, arr, axes=1) for arr in group)
            for group in groups]
    return sums, norms


def _quantiles(norms):
    if norms is None or len(norms) == 0:
        return None
    return {
        "median": float(np.quantile(norms, 0.5)),
        "p90": float(np.quantile(norms, 0.9)),
        "max": float(norms.max()),
    }


def _perturb_groups(groups, noise_multiplier, clip_norm, seed, step):
    noisy = []
    for layer_idx, group in enumerate(groups):
        out = []
        for part_idx, arr in enumerate(group):
            rng = seeded_rng(seed, seeding.NOISE, step, layer_idx, part_idx)
            out.append(gaussian_perturb(arr, noise_multiplier, clip_norm, rng))
        noisy.append(tuple(out))
    return noisy


def _zero_groups(shapes_per_layer):
    return [tuple(np.zeros(s) for s in shapes) for shapes in shapes_per_layer]


def rgp_step(net, batch_x, batch_y, *, step, history, rank, power_iters,
             clip_norm, noise_multiplier, optimizer, denom, seed=0,
             accountant=None, random_subspace=False, counter=None,
             dense_check=False, dense_tol=1e-8, track_residuals=False):
    """One private step through low-rank gradient carriers.

    ``denom`` is the nominal batch size: the noisy clipped sum is divided by
    it before the optimizer update, which keeps empty Poisson batches
    well-defined.  Returns a metrics dict.
    """
    layers = net.trainable_layers
    ranks = layer_ranks(net, rank)
    carriers = []
    for idx, layer in enumerate(layers):
        rng = seeded_rng(seed, seeding.CARRIERS, step, idx)
        cfg = CarrierConfig(rank=ranks[idx], power_iters=power_iters, seed=seed)
        if random_subspace:
            p, d = layer.flat_weight.shape
            left, right = random_carriers(p, d, cfg, rng=rng)
        else:
            delta = historical_update(layer.flat_weight, history.initial_weights[idx],
                                      step, history.warmup_steps)
            left, right = power_decompose(delta, cfg, rng=rng)
        layer.set_carriers(left, right)
        carriers.append((left, right))

    m = batch_x.shape[0]
    metrics = {"step": step, "batch_size": int(m), "loss": None, "preclip": None}
    if m > 0:
        logits, caches = net.forward(batch_x)
        loss, dlogits = softmax_cross_entropy(logits, batch_y)
        net.backward(caches, per_sample_output_grads(dlogits, m))
        grads = per_sample_carrier_grads(net, caches, counter=counter)
        sums, norms = _clip_and_sum(grads, clip_norm, m)
        metrics["loss"] = loss
        metrics["preclip"] = _quantiles(norms)
        if dense_check or track_residuals:
            dense = aggregate_grads(net, caches)
    else:
        shape_list = [[left.shape, right.shape, (left.shape[0],)]
                      for left, right in carriers]
        sums = _zero_groups(shape_list)
        dense = None

    if dense_check and m > 0:
        worst = 0.0
        for (left, right), (sum_dl, sum_dr, _), (dw, _) in zip(carriers, sums, dense):
            # Compare the unclipped reconstruction with the dense projection.
            raw_dl = dw @ right.T
            raw_dr = left.T @ dw
            recon = reconstruct_update(left, right, raw_dl, raw_dr)
            proj = left @ (left.T @ dw) + (dw @ right.T) @ right \
                - left @ (left.T @ dw @ right.T) @ right
            denom_norm = np.linalg.norm(proj)
            err = np.linalg.norm(recon - proj) / denom_norm if denom_norm else 0.0
            worst = max(worst, err)
        if worst > dense_tol:
            raise RuntimeError(f"dense projection check failed: {worst:.3e} > {dense_tol}")
        metrics["dense_check_max_err"] = worst

    if track_residuals and m > 0:
        residuals = []
        for rnk, (left, right), (dw, _) in zip(ranks, carriers, dense):
            if np.linalg.norm(dw) == 0.0:
                residuals.append(None)
                continue
            self_l, self_r = top_r_factors(dw, rnk)
            residuals.append({
                "historical": projection_residual(dw, left, right),
                "self": projection_residual(dw, self_l, self_r),
            })
        metrics["residuals"] = residuals

    noisy = _perturb_groups(sums, noise_multiplier, clip_norm, seed, step)
    update_norms = []
    for idx, (layer, (left, right), (sum_dl, sum_dr, sum_db)) in enumerate(
            zip(layers, carriers, noisy)):
        update = reconstruct_update(left, right, sum_dl, sum_dr) / denom
        update_norms.append(float(np.linalg.norm(update)))
        optimizer.apply((idx, "w"), layer.flat_weight, update)
        optimizer.apply((idx, "b"), layer.bias, sum_db / denom)
        layer.clear_carriers()
    metrics["update_norms"] = update_norms

    if accountant is not None:
        accountant.step()
    return metrics


def dpsgd_step(net, batch_x, batch_y, *, step, clip_norm, noise_multiplier,
               optimizer, denom, seed=0, accountant=None, counter=None):
    """One private step with explicit dense per-sample gradients."""
    layers = net.trainable_layers
    m = batch_x.shape[0]
    metrics = {"step": step, "batch_size": int(m), "loss": None, "preclip": None}
    if m > 0:
        logits, caches = net.forward(batch_x)
        loss, dlogits = softmax_cross_entropy(logits, batch_y)
        net.backward(caches, per_sample_output_grads(dlogits, m))
        grads = per_sample_full_grads(net, caches, counter=counter)
        sums, norms = _clip_and_sum(grads, clip_norm, m)
        metrics["loss"] = loss
        metrics["preclip"] = _quantiles(norms)
    else:
        shape_list = [[layer.flat_weight.shape, layer.bias.shape] for layer in layers]
        sums = _zero_groups(shape_list)

    noisy = _perturb_groups(sums, noise_multiplier, clip_norm, seed, step)
    update_norms = []
    for idx, (layer, (sum_dw, sum_db)) in enumerate(zip(layers, noisy)):
        update = sum_dw / denom
        update_norms.append(float(np.linalg.norm(update)))
        optimizer.apply((idx, "w"), layer.flat_weight, update)
        optimizer.apply((idx, "b"), layer.bias, sum_db / denom)
    metrics["update_norms"] = update_norms

    if accountant is not None:
        accountant.step()
    return metrics


def nonprivate_step(net, batch_x, batch_y, *, step, optimizer, head_only=False):
    """Plain mini-batch SGD on the mean loss; optionally only the final layer."""
    layers = net.trainable_layers
    m = batch_x.shape[0]
    metrics = {"step": step, "batch_size": int(m), "loss": None, "preclip": None}
    if m == 0:
        metrics["update_norms"] = [0.0] * len(layers)
        return metrics
    logits, caches = net.forward(batch_x)
    loss, dlogits = softmax_cross_entropy(logits, batch_y)
    net.backward(caches, dlogits)
    grads = aggregate_grads(net, caches)
    metrics["loss"] = loss
    update_norms = []
    head_idx = len(layers) - 1
    for idx, (layer, (dw, db)) in enumerate(zip(layers, grads)):
        if head_only and idx != head_idx:
            update_norms.append(0.0)
            continue
        update_norms.append(float(np.linalg.norm(dw)))
        optimizer.apply((idx, "w"), layer.flat_weight, dw)
        optimizer.apply((idx, "b"), layer.bias, db)
    metrics["update_norms"] = update_norms
    return metrics
