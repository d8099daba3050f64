"""Minimal reverse-mode neural network with per-sample gradient capture.

Layers store their weights as plain float64 arrays.  A trainable layer can
be switched into reparametrized mode by attaching a pair of gradient-carrier
matrices ``(L, R)``: the forward pass then computes the carrier branch
``L (R x)`` plus a frozen residual ``(W - L R) x``, so the layer output equals
the plain-mode output while gradients are observed through the carriers.

Per-sample gradients come in two flavours:

* carrier gradients ``dL_i = g_i (R x_i)^T`` and ``dR_i = (L^T g_i) x_i^T``,
  which never materialize the full ``p x d`` per-sample weight gradient and
  cost only ``r (p + d)`` floats per sample and layer;
* full gradients ``dW_i = g_i x_i^T`` for the baseline that clips whole
  weight gradients.
"""

import numpy as np

from dataclasses import dataclass

__all__ = [
    "LinearLayer",
    "ConvLayer",
    "ReluLayer",
    "FlattenLayer",
    "Network",
    "GradStorageCounter",
    "build_mlp",
    "build_convnet",
    "softmax_cross_entropy",
    "mean_squared_error",
    "per_sample_output_grads",
    "aggregate_grads",
    "per_sample_carrier_grads",
    "per_sample_full_grads",
    "im2col",
    "col2im",
]


@dataclass
class GradStorageCounter:
    """Counts floats stored for per-sample weight and bias gradients."""

    weight_floats: int = 0
    bias_floats: int = 0

    def add(self, weight=0, bias=0):
        self.weight_floats += int(weight)
        self.bias_floats += int(bias)

    @property
    def total(self):
        return self.weight_floats + self.bias_floats

    def reset(self):
        self.weight_floats = 0
        self.bias_floats = 0


class ReluLayer:
    trainable = False

    def forward(self, x):
        return np.maximum(x, 0.0), {"mask": x > 0.0}

    def backward(self, grad_out, cache):
        return grad_out * cache["mask"]


class FlattenLayer:
    trainable = False

    def forward(self, x):
        return x.reshape(x.shape[0], -1), {"shape": x.shape}

    def backward(self, grad_out, cache):
        return grad_out.reshape(cache["shape"])


class _Reparametrizable:
    """Carrier bookkeeping shared by linear and convolutional layers."""

    def __init__(self):
        self.carriers = None
        self.residual_enabled = True
        self._resid_weight = None

    @property
    def mode(self):
        return "plain" if self.carriers is None else "reparametrized"

    def set_carriers(self, left, right):
        weight = self.flat_weight
        p, d = weight.shape
        left = np.asarray(left, dtype=np.float64)
        right = np.asarray(right, dtype=np.float64)
        if left.ndim != 2 or right.ndim != 2 or left.shape[0] != p \
                or right.shape[1] != d or left.shape[1] != right.shape[0]:
            raise ValueError(
                f"carrier shapes {left.shape}, {right.shape} do not fit weight {weight.shape}")
        self.carriers = (left, right)
        # Residual is frozen at attach time: it never receives gradient, and
        # perturbing L or R afterwards must not change it (stop-gradient).
        self._resid_weight = weight - left @ right

    def clear_carriers(self):
        self.carriers = None
        self._resid_weight = None


class LinearLayer(_Reparametrizable):
    """Fully connected layer ``h = W x + b`` with weight of shape (p, d)."""

    trainable = True

    def __init__(self, weight, bias=None):
        super().__init__()
        self.weight = np.array(weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("linear weight must be 2-D")
        p = self.weight.shape[0]
        self.bias = np.zeros(p) if bias is None else np.array(bias, dtype=np.float64)
        if self.bias.shape != (p,):
            raise ValueError("bias length must match output features")

    @property
    def flat_weight(self):
        return self.weight

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected input (m, {self.in_features}), got {x.shape}")
        cache = {"x": x}
        if self.carriers is None:
            out = x @ self.weight.T + self.bias
        else:
            left, right = self.carriers
            u = x @ right.T
            out = u @ left.T
            if self.residual_enabled:
                out = out + x @ self._resid_weight.T
            out = out + self.bias
            cache["u"] = u
        return out, cache

    def backward(self, grad_out, cache):
        cache["g"] = grad_out
        if self.carriers is None:
            return grad_out @ self.weight
        left, right = self.carriers
        grad_in = (grad_out @ left) @ right
        if self.residual_enabled:
            grad_in = grad_in + grad_out @ self._resid_weight
        return grad_in


def im2col(x, kernel, stride=1, padding=0):
    """Unfold (m, c, h, w) into patch rows of shape (m, out_h*out_w, c*k*k)."""
    m, c, h, w = x.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"kernel {kernel} does not fit input {h}x{w} with padding {padding}")
    img = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    col = np.empty((m, c, kernel, kernel, out_h, out_w))
    for i in range(kernel):
        for j in range(kernel):
            col[:, :, i, j] = img[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    col = col.transpose(0, 4, 5, 1, 2, 3).reshape(m, out_h * out_w, c * kernel * kernel)
    return col, (out_h, out_w)


def col2im(col, x_shape, kernel, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter patch rows back, accumulating overlaps."""
    m, c, h, w = x_shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    col = col.reshape(m, out_h, out_w, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((m, c, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            img[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += col[:, :, i, j]
    if padding:
        return img[:, :, padding:padding + h, padding:padding + w]
    return img


class ConvLayer(_Reparametrizable):
    """2-D convolution over (m, c, h, w) inputs, computed through im2col.

    The kernel (p, d, k, k) is viewed as a flat (p, d*k*k) matrix, so carrier
    reparametrization is the same machinery as for linear layers; the carrier
    branch is exactly an r x d x k x k convolution followed by a p x r x 1 x 1
    convolution.
    """

    trainable = True

    def __init__(self, kernel, bias=None, stride=1, padding=0):
        super().__init__()
        self.kernel = np.array(kernel, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ValueError("conv kernel must have shape (out, in, k, k)")
        p = self.kernel.shape[0]
        self.bias = np.zeros(p) if bias is None else np.array(bias, dtype=np.float64)
        if self.bias.shape != (p,):
            raise ValueError("bias length must match output channels")
        self.stride = int(stride)
        self.padding = int(padding)
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def flat_weight(self):
        p = self.kernel.shape[0]
        return self.kernel.reshape(p, -1)

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.kernel.shape[1]:
            raise ValueError(f"expected input (m, {self.kernel.shape[1]}, h, w), got {x.shape}")
        k = self.kernel.shape[2]
        cols, (out_h, out_w) = im2col(x, k, self.stride, self.padding)
        cache = {"x_shape": x.shape, "cols": cols, "out_hw": (out_h, out_w)}
        if self.carriers is None:
            out = cols @ self.flat_weight.T
        else:
            left, right = self.carriers
            u = cols @ right.T
            out = u @ left.T
            if self.residual_enabled:
                # The residual convolution reuses the same im2col buffer.
                out = out + cols @ self._resid_weight.T
            cache["u"] = u
        out = out + self.bias
        m = x.shape[0]
        return out.transpose(0, 2, 1).reshape(m, self.out_channels, out_h, out_w), cache

    def backward(self, grad_out, cache):
        m = grad_out.shape[0]
        g_mat = grad_out.reshape(m, self.out_channels, -1).transpose(0, 2, 1)
        cache["g"] = g_mat
        if self.carriers is None:
            grad_cols = g_mat @ self.flat_weight
        else:
            left, right = self.carriers
            grad_cols = (g_mat @ left) @ right
            if self.residual_enabled:
                grad_cols = grad_cols + g_mat @ self._resid_weight
        k = self.kernel.shape[2]
        return col2im(grad_cols, cache["x_shape"], k, self.stride, self.padding)


class Network:
    """A simple layer stack with explicit forward caches."""

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def trainable_layers(self):
        return [layer for layer in self.layers if layer.trainable]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            raise ValueError("batch must be nonempty")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dlogits):
        grad = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache)
        return grad

    def clear_carriers(self):
        for layer in self.trainable_layers:
            layer.clear_carriers()


def _he_weight(rng, p, d):
    return rng.standard_normal((p, d)) * np.sqrt(2.0 / d)


def build_mlp(in_features, hidden_sizes, n_classes, rng):
    """ReLU MLP; the final linear layer is the classification head."""
    layers = []
    prev = in_features
    for width in hidden_sizes:
        layers.append(LinearLayer(_he_weight(rng, width, prev)))
        layers.append(ReluLayer())
        prev = width
    layers.append(LinearLayer(_he_weight(rng, n_classes, prev)))
    return Network(layers)


def build_convnet(input_shape, conv_channels, kernel_size, stride, padding,
                  hidden_sizes, n_classes, rng):
    """Conv/ReLU blocks followed by a flatten and an MLP head."""
    c, h, w = input_shape
    layers = []
    for out_c in conv_channels:
        fan_in = c * kernel_size * kernel_size
        kernel = rng.standard_normal((out_c, c, kernel_size, kernel_size)) * np.sqrt(2.0 / fan_in)
        layers.append(ConvLayer(kernel, stride=stride, padding=padding))
        layers.append(ReluLayer())
        h = (h + 2 * padding - kernel_size) // stride + 1
        w = (w + 2 * padding - kernel_size) // stride + 1
        if h <= 0 or w <= 0:
            raise ValueError("conv stack shrinks the input to nothing")
        c = out_c
    layers.append(FlattenLayer())
    flat = c * h * w
    prev = flat
    for width in hidden_sizes:
        layers.append(LinearLayer(_he_weight(rng, width, prev)))
        layers.append(ReluLayer())
        prev = width
    layers.append(LinearLayer(_he_weight(rng, n_classes, prev)))
    return Network(layers)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy loss and its gradient w.r.t. the logits.

    ``labels`` are integer class indices; out-of-range labels raise.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m, n_classes = logits.shape
    if labels.shape != (m,):
        raise ValueError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range for {n_classes} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(m), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(m), labels] -= 1.0
    return float(loss), dlogits / m


def mean_squared_error(pred, target):
    """Mean over the batch of the squared error, with gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    m = pred.shape[0]
    diff = pred - target
    loss = float((diff ** 2).sum() / m)
    return loss, 2.0 * diff / m


def per_sample_output_grads(dlogits_mean, batch_size):
    """Rescale mean-loss logit gradients to per-sample-loss gradients."""
    return dlogits_mean * batch_size


def _trainable_caches(net, caches):
    pairs = []
    for layer, cache in zip(net.layers, caches):
        if layer.trainable:
            if "g" not in cache:
                raise ValueError("backward() must run on this cache before extracting gradients")
            pairs.append((layer, cache))
    return pairs


def aggregate_grads(net, caches):
    """Summed weight/bias gradients per trainable layer (flat view for conv)."""
    grads = []
    for layer, cache in _trainable_caches(net, caches):
        if isinstance(layer, ConvLayer):
            g_mat, cols = cache["g"], cache["cols"]
            dw = np.einsum("mnp,mnc->pc", g_mat, cols)
            db = g_mat.sum(axis=(0, 1))
        else:
            g, x = cache["g"], cache["x"]
            dw = g.T @ x
            db = g.sum(axis=0)
        grads.append((dw, db))
    return grads


def per_sample_carrier_grads(net, caches, counter=None):
    """Per-sample gradients on the carriers, one (dL, dR, db) tuple per layer.

    Computed sample by sample from the cached layer inputs and output
    gradients, without ever forming the dense per-sample weight gradient.
    """
    out = []
    for layer, cache in _trainable_caches(net, caches):
        if layer.carriers is None:
            raise ValueError("per-sample carrier gradients need a reparametrized layer")
        left, right = layer.carriers
        p, r = left.shape
        d = right.shape[1]
        g = cache["g"]
        m = g.shape[0]
        dl = np.empty((m, p, r))
        dr = np.empty((m, r, d))
        db = np.empty((m, p))
        if isinstance(layer, ConvLayer):
            u, cols = cache["u"], cache["cols"]
            for i in range(m):
                gi = g[i].T  # (p, positions)
                dl[i] = gi @ u[i]
                dr[i] = (left.T @ gi) @ cols[i]
                db[i] = gi.sum(axis=1)
        else:
            u, x = cache["u"], cache["x"]
            for i in range(m):
                dl[i] = np.outer(g[i], u[i])
                dr[i] = np.outer(left.T @ g[i], x[i])
                db[i] = g[i]
        if counter is not None:
            counter.add(weight=dl.size + dr.size, bias=db.size)
        out.append((dl, dr, db))
    return out


def per_sample_full_grads(net, caches, counter=None):
    """Per-sample dense weight gradients, one (dW, db) tuple per layer.

    Batched (einsum): unlike the carrier path there is no small-memory story
    to preserve, the O(m p d) footprint is the defining cost of this route.
    """
    out = []
    for layer, cache in _trainable_caches(net, caches):
        g = cache["g"]
        if isinstance(layer, ConvLayer):
            cols = cache["cols"]
            dw = np.einsum("mnp,mnc->mpc", g, cols)
            db = g.sum(axis=1)
        else:
            x = cache["x"]
            dw = np.einsum("mp,md->mpd", g, x)
            db = g.copy()
        if counter is not None:
            counter.add(weight=dw.size, bias=db.size)
        out.append((dw, db))
    return out
