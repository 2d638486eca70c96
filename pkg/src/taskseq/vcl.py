"""Mean-field Gaussian posteriors over multi-head networks.

Parameters are addressed by string keys: ``trunk.{i}.w``, ``trunk.{i}.b``,
``head.{name}.w`` and ``head.{name}.b``. Two Monte Carlo estimators of the
expected log-likelihood are available:

``"weights"``
    one weight matrix per sample, ``w = mean + std * eps``;
``"local"``
    per-example Gaussian pre-activations (local reparameterization). Each
    example's predictive distribution is identical to the weight-sampling
    one; only the coupling across examples, and hence the variance of the
    minibatch estimate, changes. Much cheaper for wide inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DivergenceError, OptimizerConfig, ParamBlock, adam_step, glorot_uniform, log_softmax, softmax

REPARAM_MODES = ("weights", "local")


def trunk_keys(n_layers: int) -> list[str]:
    return [f"trunk.{i}.{p}" for i in range(n_layers) for p in ("w", "b")]


def head_keys(head: str) -> list[str]:
    return [f"head.{head}.w", f"head.{head}.b"]


@dataclass
class GaussianPosterior:
    mean: dict[str, np.ndarray]
    log_std: dict[str, np.ndarray]
    prior_mean: dict[str, np.ndarray]
    prior_log_std: dict[str, np.ndarray]
    layer_sizes: list[int] = field(default_factory=list)
    n_outputs: int = 2

    @classmethod
    def create(cls, layer_sizes, rng: np.random.Generator, init_log_std: float = -3.0,
               prior_std: float = 1.0, n_outputs: int = 2) -> "GaussianPosterior":
        post = cls({}, {}, {}, {}, [int(s) for s in layer_sizes], n_outputs)
        for i, (a, b) in enumerate(zip(post.layer_sizes[:-1], post.layer_sizes[1:])):
            post._add_layer(f"trunk.{i}", a, b, rng, init_log_std, prior_std)
        return post

    def _add_layer(self, prefix, fan_in, fan_out, rng, init_log_std, prior_std):
        shapes = {f"{prefix}.w": (fan_in, fan_out), f"{prefix}.b": (fan_out,)}
        self.mean[f"{prefix}.w"] = glorot_uniform(fan_in, fan_out, rng)
        self.mean[f"{prefix}.b"] = np.zeros(fan_out)
        for key, shape in shapes.items():
            self.log_std[key] = np.full(shape, float(init_log_std))
            self.prior_mean[key] = np.zeros(shape)
            self.prior_log_std[key] = np.full(shape, float(np.log(prior_std)))

    def add_head(self, name: str, rng: np.random.Generator, init_log_std: float = -3.0,
                 prior_std: float = 1.0):
        if f"head.{name}.w" in self.mean:
            raise ValueError(f"head {name!r} already exists")
        self._add_layer(f"head.{name}", self.layer_sizes[-1], self.n_outputs, rng, init_log_std, prior_std)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def heads(self) -> list[str]:
        return [k[5:-2] for k in self.mean if k.startswith("head.") and k.endswith(".w")]

    def copy(self) -> "GaussianPosterior":
        dup = lambda d: {k: v.copy() for k, v in d.items()}
        return GaussianPosterior(dup(self.mean), dup(self.log_std), dup(self.prior_mean),
                                 dup(self.prior_log_std), list(self.layer_sizes), self.n_outputs)

    def as_prior(self) -> "GaussianPosterior":
        """A copy whose prior is this posterior."""
        out = self.copy()
        out.prior_mean = {k: v.copy() for k, v in self.mean.items()}
        out.prior_log_std = {k: v.copy() for k, v in self.log_std.items()}
        return out


def kl_diag_gaussian(q: GaussianPosterior, keys=None, with_grad: bool = False):
    """KL(q || prior) summed over ``keys`` (default: every parameter)."""
    keys = list(q.mean) if keys is None else list(keys)
    total = 0.0
    grads = {}
    for k in keys:
        mq, lq = q.mean[k], q.log_std[k]
        mp, lp = q.prior_mean[k], q.prior_log_std[k]
        var_ratio = np.exp(2.0 * (lq - lp))
        diff2 = (mq - mp) ** 2 * np.exp(-2.0 * lp)
        total += 0.5 * float(np.sum(2.0 * (lp - lq) + var_ratio + diff2 - 1.0))
        if with_grad:
            grads[k] = ((mq - mp) * np.exp(-2.0 * lp), var_ratio - 1.0)
    if not np.isfinite(total):
        raise DivergenceError("non-finite KL")
    return (total, grads) if with_grad else total


def _layers(post: GaussianPosterior, head: str) -> list[tuple[str, str]]:
    keys = [(f"trunk.{i}.w", f"trunk.{i}.b") for i in range(post.n_layers)]
    keys.append((f"head.{head}.w", f"head.{head}.b"))
    return keys


def draw_noise(post: GaussianPosterior, head: str, n_samples: int, batch: int,
               rng: np.random.Generator, mode: str) -> list[np.ndarray]:
    """Standard normal draws in the layout the estimator ``mode`` consumes."""
    out = []
    for wk, bk in _layers(post, head):
        if mode == "weights":
            out.append(rng.standard_normal((n_samples,) + post.mean[wk].shape))
            out.append(rng.standard_normal((n_samples,) + post.mean[bk].shape))
        else:
            out.append(rng.standard_normal((n_samples, batch, post.mean[bk].shape[0])))
    return out


def _log_lik_weights(post, x, y, head, eps, coeff, x_sq=None):
    """Sum over samples of ``coeff * sum_b log p``, with gradients."""
    layers = _layers(post, head)
    n_samples = eps[0].shape[0]
    grads = {k: [np.zeros_like(post.mean[k]), np.zeros_like(post.mean[k])] for pair in layers for k in pair}
    value = 0.0
    rows = np.arange(len(y))
    for s in range(n_samples):
        ws, bs = [], []
        for li, (wk, bk) in enumerate(layers):
            ws.append(post.mean[wk] + np.exp(post.log_std[wk]) * eps[2 * li][s])
            bs.append(post.mean[bk] + np.exp(post.log_std[bk]) * eps[2 * li + 1][s])
        acts = [x]
        h = x
        for w, b in zip(ws[:-1], bs[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        logits = h @ ws[-1] + bs[-1]
        logp = log_softmax(logits)
        value += coeff * float(logp[rows, y].sum())
        dz = -np.exp(logp)
        dz[rows, y] += 1.0
        dz *= coeff
        for li in range(len(layers) - 1, -1, -1):
            wk, bk = layers[li]
            dw = acts[li].T @ dz
            db = dz.sum(axis=0)
            grads[wk][0] += dw
            grads[wk][1] += dw * eps[2 * li][s] * np.exp(post.log_std[wk])
            grads[bk][0] += db
            grads[bk][1] += db * eps[2 * li + 1][s] * np.exp(post.log_std[bk])
            if li > 0:
                dz = (dz @ ws[li].T) * (acts[li] > 0)
    return value, grads


def _layer_moments(h, mean_w, mean_b, var_w, var_b, h_sq=None):
    if h_sq is None:
        h_sq = h * h
    m = h @ mean_w + mean_b
    v = h_sq @ var_w + var_b
    return m, v, h_sq


def _log_lik_local(post, x, y, head, eps, coeff, x_sq=None):
    layers = _layers(post, head)
    n_samples, batch = eps[0].shape[:2]
    grads = {}
    var = {k: np.exp(2.0 * post.log_std[k]) for pair in layers for k in pair}
    # the input layer is shared by every sample; deeper activations are (S*B, width)
    wk, bk = layers[0]
    m0, v0, x_sq = _layer_moments(x, post.mean[wk], post.mean[bk], var[wk], var[bk], x_sq)
    sd0 = np.sqrt(v0)
    z = eps[0] * sd0
    z += m0
    z = z.reshape(n_samples * batch, -1)
    inputs, sq_inputs, sds = [x], [x_sq], [sd0]
    for li, (wk, bk) in enumerate(layers[1:], start=1):
        h = np.maximum(z, 0.0)
        m, v, h_sq = _layer_moments(h, post.mean[wk], post.mean[bk], var[wk], var[bk])
        sd = np.sqrt(v)
        z = eps[li].reshape(sd.shape) * sd
        z += m
        inputs.append(h)
        sq_inputs.append(h_sq)
        sds.append(sd)
    logp = log_softmax(z)
    labels = np.tile(y, n_samples)
    rows = np.arange(len(labels))
    value = coeff * float(logp[rows, labels].sum())
    dz = np.exp(logp)
    dz *= -coeff
    dz[rows, labels] += coeff
    for li in range(len(layers) - 1, 0, -1):
        wk, bk = layers[li]
        hin, hsq = inputs[li], sq_inputs[li]
        dv = dz * eps[li].reshape(dz.shape)
        dv /= 2.0 * sds[li]
        grads[wk] = [hin.T @ dz, (hsq.T @ dv) * (2.0 * var[wk])]
        grads[bk] = [dz.sum(axis=0), dv.sum(axis=0) * (2.0 * var[bk])]
        dh = dv @ var[wk].T
        dh *= 2.0 * hin
        dh += dz @ post.mean[wk].T
        dh *= hin > 0
        dz = dh
    wk, bk = layers[0]
    dz = dz.reshape(n_samples, batch, -1)
    dm_s = dz.sum(axis=0)
    dz *= eps[0]
    dv_s = dz.sum(axis=0)
    dv_s /= 2.0 * sd0
    grads[wk] = [x.T @ dm_s, (x_sq.T @ dv_s) * (2.0 * var[wk])]
    grads[bk] = [dm_s.sum(axis=0), dv_s.sum(axis=0) * (2.0 * var[bk])]
    return value, grads


def expected_log_lik(post: GaussianPosterior, x, y, head: str, n_samples: int, rng=None,
                     eps=None, mode: str = "local", coeff: float = 1.0, x_sq=None):
    """``coeff`` times the sample-mean of ``sum_b log p(y_b | x_b, w)`` and its gradient.

    Gradients are returned as ``{key: (d/d mean, d/d log_std)}``. ``x_sq``
    optionally supplies the precomputed ``x * x`` for the local estimator.
    """
    if mode not in REPARAM_MODES:
        raise ValueError(f"unknown reparameterization {mode!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if eps is None:
        eps = draw_noise(post, head, n_samples, len(y), rng, mode)
    fn = _log_lik_weights if mode == "weights" else _log_lik_local
    value, grads = fn(post, x, y, head, eps, coeff / n_samples, x_sq)
    return value, {k: tuple(v) for k, v in grads.items()}


def elbo_objective(post: GaussianPosterior, x, y, head: str, n_samples: int, dataset_size: int,
                   rng=None, eps=None, mode: str = "local", kl_keys=None, x_sq=None):
    """Negative ELBO ``-(N/B) * sum_b E_q log p(y|x,w) + KL(q || prior)``.

    ``kl_keys`` defaults to the trunk plus ``head``; other heads have no
    data and sit at their prior, so they contribute nothing.
    """
    n_batch = len(y)
    keys = trunk_keys(post.n_layers) + head_keys(head) if kl_keys is None else list(kl_keys)
    kl, kl_grads = kl_diag_gaussian(post, keys, with_grad=True)
    if n_batch == 0:
        data, data_grads = 0.0, {}
    else:
        data, data_grads = expected_log_lik(post, x, y, head, n_samples, rng, eps, mode,
                                            coeff=-dataset_size / n_batch, x_sq=x_sq)
    total = data + kl
    if not np.isfinite(total):
        raise DivergenceError("non-finite ELBO")
    grads = {}
    for k in set(kl_grads) | set(data_grads):
        gm = np.zeros_like(post.mean[k])
        gs = np.zeros_like(post.mean[k])
        for src in (kl_grads, data_grads):
            if k in src:
                gm = gm + src[k][0]
                gs = gs + src[k][1]
        grads[k] = (gm, gs)
    return total, grads


def predict_proba(post: GaussianPosterior, x, head: str, n_samples: int, rng: np.random.Generator,
                  mode: str = "local", chunk: int = 10) -> np.ndarray:
    """Monte Carlo average of the predictive class probabilities."""
    x = np.asarray(x, dtype=np.float64)
    layers = _layers(post, head)
    total = np.zeros((len(x), post.n_outputs))
    done = 0
    if mode == "local":
        var = {k: np.exp(2.0 * post.log_std[k]) for pair in layers for k in pair}
        wk, bk = layers[0]
        m0, v0, _ = _layer_moments(x, post.mean[wk], post.mean[bk], var[wk], var[bk])
        sd0 = np.sqrt(v0)
    while done < n_samples:
        s = min(chunk, n_samples - done)
        if mode == "local":
            h = m0 + sd0 * rng.standard_normal((s,) + m0.shape)
            for wk, bk in layers[1:]:
                h = np.maximum(h, 0.0)
                m, v, _ = _layer_moments(h, post.mean[wk], post.mean[bk], var[wk], var[bk])
                h = m + np.sqrt(v) * rng.standard_normal(m.shape)
            total += softmax(h).sum(axis=0)
        else:
            for _ in range(s):
                h = x
                for li, (wk, bk) in enumerate(layers):
                    w = post.mean[wk] + np.exp(post.log_std[wk]) * rng.standard_normal(post.mean[wk].shape)
                    b = post.mean[bk] + np.exp(post.log_std[bk]) * rng.standard_normal(post.mean[bk].shape)
                    h = h @ w + b
                    if li < len(layers) - 1:
                        h = np.maximum(h, 0.0)
                total += softmax(h)
        done += s
    return total / n_samples


class PosteriorOptimizer:
    """Adam over the mean and log-std of a chosen set of keys."""

    def __init__(self, post: GaussianPosterior, keys, config: OptimizerConfig):
        self.post = post
        self.keys = list(keys)
        self.config = config
        self.blocks = {k: (ParamBlock(post.mean[k]), ParamBlock(post.log_std[k])) for k in self.keys}

    def step(self, grads):
        for k in self.keys:
            if k not in grads:
                continue
            bm, bs = self.blocks[k]
            bm.value = self.post.mean[k]
            bs.value = self.post.log_std[k]
            bm.grad, bs.grad = grads[k]
            adam_step(bm, self.config)
            adam_step(bs, self.config)
