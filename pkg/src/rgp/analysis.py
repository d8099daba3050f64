"""Diagnostics: gradient subspace invariance under full-batch gradient
descent on least squares, stable-rank tracking of layer gradients, and a
loss-threshold membership inference attack.
"""

import numpy as np

from dataclasses import dataclass

from .linalg import stable_rank, svd_oracle
from .nn import aggregate_grads, softmax_cross_entropy
from .seeding import seeded_rng

__all__ = [
    "LeastSquaresProblem",
    "ls_gradient_subspace_check",
    "track_stable_rank",
    "mi_attack",
]


@dataclass
class LeastSquaresProblem:
    """Multi-output least squares ``min_W sum_i ||y_i - W x_i||^2``.

    The gradient is taken in sum form, ``sum_i (W x_i - y_i) x_i^T``
    (constant factors are absorbed into the step size), so full-batch
    gradient descent satisfies the closed-form recursion
    ``grad_t = grad_0 (I - eta * sum_i x_i x_i^T)^t`` exactly.
    """

    features: np.ndarray   # (n, d)
    targets: np.ndarray    # (n, p)
    weight0: np.ndarray    # (p, d)
    step_size: float

    def gradient(self, weight):
        return (weight @ self.features.T - self.targets.T) @ self.features

    @classmethod
    def random(cls, n, d, p, seed, step_fraction=0.5):
        """Random instance; with n < min(p, d) the gradient has rank n.

        ``step_fraction`` scales the step size relative to the stability
        limit ``2 / lambda_max(sum_i x_i x_i^T)``.
        """
        rng = seeded_rng(seed)
        features = rng.standard_normal((n, d))
        targets = rng.standard_normal((n, p))
        weight0 = rng.standard_normal((p, d))
        gram = features.T @ features
        lam_max = max(np.linalg.eigvalsh(gram).max(), 1e-12)
        return cls(features, targets, weight0, step_fraction * 2.0 / lam_max)


def ls_gradient_subspace_check(problem, n_steps):
    """Run gradient descent and measure how far each gradient leaves the
    row/column spaces of the first gradient.

    Returns one record per step with the relative column/row projection
    residuals (using the first gradient's rank-r factors) and the relative
    deviation from the closed-form gradient recursion.
    """
    weight = problem.weight0.copy()
    grad0 = problem.gradient(weight)
    u, s, v = svd_oracle(grad0)
    rank = int((s > 1e-10 * max(s[0], 1e-300)).sum())
    u_r = u[:, :rank]
    v_r = v[:, :rank]
    gram = problem.features.T @ problem.features
    propagator = np.eye(gram.shape[0]) - problem.step_size * gram
    closed = grad0.copy()
    records = []
    for step in range(n_steps):
        grad = problem.gradient(weight)
        norm = np.linalg.norm(grad)
        col_resid = np.linalg.norm(grad - u_r @ (u_r.T @ grad))
        row_resid = np.linalg.norm(grad - (grad @ v_r) @ v_r.T)
        closed_err = np.linalg.norm(grad - closed) / norm if norm else 0.0
        records.append({
            "step": step,
            "grad_norm": float(norm),
            "col_residual": float(col_resid),
            "row_residual": float(row_resid),
            "closed_form_rel_err": float(closed_err),
        })
        weight = weight - problem.step_size * grad
        closed = closed @ propagator
    return records


def track_stable_rank(net, batch_x, batch_y):
    """Stable rank of each layer's aggregated dense gradient.

    Layers with an exactly zero gradient report None instead of raising.
    """
    logits, caches = net.forward(batch_x)
    _, dlogits = softmax_cross_entropy(logits, batch_y)
    net.backward(caches, dlogits)
    out = []
    for dw, _ in aggregate_grads(net, caches):
        if np.linalg.norm(dw) == 0.0:
            out.append(None)
        else:
            out.append(stable_rank(dw))
    return out


def _balanced_accuracy(threshold, member_sorted, nonmember_sorted):
    m_hit = np.searchsorted(member_sorted, threshold, side="left") / len(member_sorted)
    nm_hit = 1.0 - np.searchsorted(nonmember_sorted, threshold, side="left") / len(nonmember_sorted)
    return 0.5 * (m_hit + nm_hit)


def mi_attack(member_losses, nonmember_losses):
    """Loss-threshold membership inference: success rate in [0, 1].

    A sample is predicted to be a training member when its loss falls below
    a threshold.  The threshold maximizing balanced accuracy is selected on
    the first half of each loss list and evaluated on the held-out second
    half; ties prefer the lower threshold.
    """
    member = np.asarray(member_losses, dtype=np.float64)
    nonmember = np.asarray(nonmember_losses, dtype=np.float64)
    if member.size == 0 or nonmember.size == 0:
        raise ValueError("both loss lists must be nonempty")
    if member.size != nonmember.size:
        raise ValueError("member and non-member counts must be equal")
    if member.size < 2:
        raise ValueError("need at least two samples per side to split")
    half = member.size // 2
    sel_m, eval_m = np.sort(member[:half]), np.sort(member[half:])
    sel_nm, eval_nm = np.sort(nonmember[:half]), np.sort(nonmember[half:])
    candidates = np.unique(np.concatenate([sel_m, sel_nm, [np.inf]]))
    best_thr = candidates[0]
    best_acc = -1.0
    for thr in candidates:
        acc = _balanced_accuracy(thr, sel_m, sel_nm)
        if acc > best_acc:
            best_acc = acc
            best_thr = thr
    return float(_balanced_accuracy(best_thr, eval_m, eval_nm))
