"""Fully-connected network trained on neighborhood vectors, from scratch.

The network stacks dense layers with per-feature batch normalization and
ReLU between them; the final dense layer emits one logit per distribution
coreset element. Training is plain mini-batch softmax cross-entropy with
Adam and a stepwise learning-rate decay. Everything is numpy so the
backward pass can be verified against central finite differences.

Batch statistics are used while training; inference freezes the running
estimates. All randomness flows through one seeded generator, so training
is bit-reproducible in single-threaded use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorio


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries epoch and batch."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class MlpTrainConfig:
    epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 2048
    sched_gamma: float = 0.1
    sched_step: int = 5
    seed: int = 0

    def validate(self):
        for name in ("epochs", "learning_rate", "batch_size", "sched_gamma", "sched_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class NeighborhoodMlp:
    """Dense -> [BatchNorm -> ReLU -> Dense] * (L-1), logits over classes.

    ``widths`` is the full chain (input, hidden..., output); the number of
    dense layers is ``len(widths) - 1``.
    """

    BN_EPS = 1e-5
    BN_MOMENTUM = 0.1

    def __init__(self, widths, seed=0, temperature=1.0):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = [int(w) for w in widths]
        self.temperature = float(temperature)
        rng = np.random.default_rng(seed)
        self.W, self.b = [], []
        self.gamma, self.beta = [], []
        self.run_mean, self.run_var = [], []
        for i in range(len(self.widths) - 1):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            self.W.append(rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in))
            self.b.append(np.zeros(n_out))
            if i < len(self.widths) - 2:
                self.gamma.append(np.ones(n_out))
                self.beta.append(np.zeros(n_out))
                self.run_mean.append(np.zeros(n_out))
                self.run_var.append(np.ones(n_out))

    @property
    def n_dense(self):
        return len(self.W)

    @property
    def input_width(self):
        return self.widths[0]

    @property
    def output_width(self):
        return self.widths[-1]

    # -- forward / backward ------------------------------------------------

    def forward(self, x, training, update_stats=None):
        """Returns (logits, cache). ``update_stats`` defaults to ``training``."""
        if update_stats is None:
            update_stats = training
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.input_width:
            raise ValueError(f"input width {a.shape} does not match {self.input_width}")
        cache = {"inputs": [], "bn": []}
        for i in range(self.n_dense):
            cache["inputs"].append(a)
            z = a @ self.W[i] + self.b[i]
            if i == self.n_dense - 1:
                return z, cache
            if training:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    m = self.BN_MOMENTUM
                    self.run_mean[i] = (1 - m) * self.run_mean[i] + m * mu
                    self.run_var[i] = (1 - m) * self.run_var[i] + m * var
            else:
                mu, var = self.run_mean[i], self.run_var[i]
            inv_std = 1.0 / np.sqrt(var + self.BN_EPS)
            xhat = (z - mu) * inv_std
            h = self.gamma[i] * xhat + self.beta[i]
            relu_mask = h > 0
            cache["bn"].append((xhat, inv_std, relu_mask, training))
            a = h * relu_mask
        raise AssertionError("unreachable")

    def loss_and_grads(self, x, y, training=True, update_stats=None):
        """Mean softmax cross-entropy and gradients for every parameter.

        Returns (loss, grads) where grads mirrors ``parameters()``.
        """
        logits, cache = self.forward(x, training, update_stats)
        m = logits.shape[0]
        probs = softmax(logits)
        y = np.asarray(y)
        with np.errstate(divide="ignore"):
            # a zero probability on a true class is a real divergence and
            # must surface as an infinite loss, not get clamped away
            loss = float(-np.mean(np.log(probs[np.arange(m), y])))
        dlogits = probs
        dlogits[np.arange(m), y] -= 1.0
        dlogits /= m

        gW = [None] * self.n_dense
        gb = [None] * self.n_dense
        gGamma = [None] * len(self.gamma)
        gBeta = [None] * len(self.beta)
        da = dlogits
        for i in reversed(range(self.n_dense)):
            if i < self.n_dense - 1:
                xhat, inv_std, relu_mask, was_training = cache["bn"][i]
                dh = da * relu_mask
                gGamma[i] = (dh * xhat).sum(axis=0)
                gBeta[i] = dh.sum(axis=0)
                dxhat = dh * self.gamma[i]
                if was_training:
                    # batch statistics participate in the graph
                    n = dh.shape[0]
                    dz = (inv_std / n) * (
                        n * dxhat
                        - dxhat.sum(axis=0)
                        - xhat * (dxhat * xhat).sum(axis=0)
                    )
                else:
                    dz = dxhat * inv_std
            else:
                dz = da
            a_in = cache["inputs"][i]
            gW[i] = a_in.T @ dz
            gb[i] = dz.sum(axis=0)
            da = dz @ self.W[i].T
        return loss, self._pack(gW, gb, gGamma, gBeta)

    # -- parameter plumbing -------------------------------------------------

    def _pack(self, W, b, gamma, beta):
        out = []
        for i in range(self.n_dense):
            out.append(W[i])
            out.append(b[i])
            if i < len(gamma):
                out.append(gamma[i])
                out.append(beta[i])
        return out

    def parameters(self):
        """Live parameter arrays, in the same order as gradients."""
        return self._pack(self.W, self.b, self.gamma, self.beta)

    def get_flat_params(self):
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_params(self, flat):
        pos = 0
        for p in self.parameters():
            p.flat[:] = flat[pos:pos + p.size]
            pos += p.size
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    # -- training / inference ----------------------------------------------

    def fit(self, x, y, cfg: MlpTrainConfig):
        """Mini-batch Adam training with stepwise learning-rate decay."""
        cfg.validate()
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n = x.shape[0]
        rng = np.random.default_rng(cfg.seed)
        adam = Adam(self.parameters())
        history = []
        for epoch in range(cfg.epochs):
            lr = cfg.learning_rate * cfg.sched_gamma ** (epoch // cfg.sched_step)
            order = rng.permutation(n)
            epoch_loss = 0.0
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                loss, grads = self.loss_and_grads(x[idx], y[idx], training=True)
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, bi, loss)
                adam.step(self.parameters(), grads, lr)
                epoch_loss += loss * len(idx)
            history.append(epoch_loss / n)
        return history

    def predict_proba(self, x, temperature=None):
        """Softmax of logits / T using frozen normalization statistics."""
        t = self.temperature if temperature is None else float(temperature)
        logits, _ = self.forward(np.atleast_2d(x), training=False)
        return softmax(logits / t)

    # -- serialization --------------------------------------------------------

    def save(self, directory):
        directory.mkdir(parents=True, exist_ok=True)
        widths = ",".join(str(w) for w in self.widths)
        (directory / "header.txt").write_text(
            f"widths = {widths}\ntemperature = {self.temperature}\n"
            f"bn_eps = {self.BN_EPS}\nbn_momentum = {self.BN_MOMENTUM}\n"
        )
        for i in range(self.n_dense):
            tensorio.write_tensor(directory / f"dense{i}_w.pnit", self.W[i])
            tensorio.write_tensor(directory / f"dense{i}_b.pnit", self.b[i])
        for i in range(len(self.gamma)):
            tensorio.write_tensor(directory / f"bn{i}_gamma.pnit", self.gamma[i])
            tensorio.write_tensor(directory / f"bn{i}_beta.pnit", self.beta[i])
            tensorio.write_tensor(directory / f"bn{i}_mean.pnit", self.run_mean[i])
            tensorio.write_tensor(directory / f"bn{i}_var.pnit", self.run_var[i])

    @classmethod
    def load(cls, directory):
        header = {}
        for line in (directory / "header.txt").read_text().splitlines():
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
        widths = [int(w) for w in header["widths"].split(",")]
        net = cls(widths, seed=0, temperature=float(header["temperature"]))
        for i in range(net.n_dense):
            net.W[i] = tensorio.read_tensor(directory / f"dense{i}_w.pnit").astype(np.float64)
            net.b[i] = tensorio.read_tensor(directory / f"dense{i}_b.pnit").astype(np.float64)
        for i in range(len(net.gamma)):
            net.gamma[i] = tensorio.read_tensor(directory / f"bn{i}_gamma.pnit").astype(np.float64)
            net.beta[i] = tensorio.read_tensor(directory / f"bn{i}_beta.pnit").astype(np.float64)
            net.run_mean[i] = tensorio.read_tensor(directory / f"bn{i}_mean.pnit").astype(np.float64)
            net.run_var[i] = tensorio.read_tensor(directory / f"bn{i}_var.pnit").astype(np.float64)
        return net


class Adam:
    """Adam update rule with bias correction."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
