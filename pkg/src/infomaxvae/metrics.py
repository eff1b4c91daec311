"""Evaluation battery for trained models.

Post-hoc MI estimation with a freshly trained critic, active-unit counts,
the KL regularizer value, ELBO / importance-weighted likelihood reporting,
and classifier probes on posterior means.  Everything here operates on
frozen parameters; the only training that happens is of throwaway critics
and probes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from . import nets, objectives
from .data import Dataset

AU_EPSILON = 0.05


# ---------------------------------------------------------------------------
# mutual information
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiEstimatorConfig:
    steps: int = 1500
    batch: int = 128
    critic_width: int = 128
    lr: float = 5e-4
    ema_decay: float = 0.99
    ema_window: int = 500
    # EMA std over the final window above this value flags non-convergence
    convergence_std: float = 0.25


class MiEstimate(NamedTuple):
    value: float
    converged: bool
    ema_std: float

    def __float__(self):
        return self.value


def _logged_bound(t_joint: np.ndarray, t_marg: np.ndarray) -> float:
    """Batch DV bound with the diagonal folded into the marginal term.

    The empirical marginal over a batch of b pairs puts mass 1/b on matched
    pairs; folding that mass in keeps the estimate below the finite-sample
    ceiling log(b) instead of diverging when the critic separates pairs
    perfectly.
    """
    b = t_joint.size
    tj = np.clip(t_joint, -objectives.SCORE_CLAMP, objectives.SCORE_CLAMP)
    tm = np.clip(t_marg, -objectives.SCORE_CLAMP, objectives.SCORE_CLAMP)
    m = max(tj.max(), tm.max())
    mix = np.exp(tj - m).mean() / b + (1.0 - 1.0 / b) * np.exp(tm - m).mean()
    return float(tj.mean() - (m + np.log(mix)))


def _run_mi_estimator(sample_pairs: Callable[[np.random.Generator, int], tuple],
                      input_dim: int, z_dim: int,
                      config: MiEstimatorConfig, seed: int) -> MiEstimate:
    streams = np.random.SeedSequence(seed).spawn(3)
    rng_init = np.random.default_rng(streams[0])
    rng_batch = np.random.default_rng(streams[1])
    rng_perm = np.random.default_rng(streams[2])

    critic = nets.build_critic(rng_init, input_dim, z_dim, config.critic_width)
    opt = ad.Adam(critic.net.parameters(), lr=config.lr)
    dv = objectives.donsker_varadhan()

    ema = None
    tail = []
    for step in range(config.steps):
        x_b, z_b = sample_pairs(rng_batch, config.batch)
        perm = objectives.sample_batch_permutation(rng_perm, x_b.shape[0])
        x_node = ad.constant(x_b)
        t_joint = nets.critic_score(critic, x_node, ad.constant(z_b))
        t_marg = nets.critic_score(critic, x_node, ad.constant(z_b[perm]))
        loss = ad.negate(objectives.mi_lower_bound(dv, t_joint, t_marg))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

        bound = _logged_bound(t_joint.value, t_marg.value)
        ema = bound if ema is None else \
            config.ema_decay * ema + (1.0 - config.ema_decay) * bound
        if step >= config.steps - config.ema_window:
            tail.append(ema)

    ema_std = float(np.std(tail))
    return MiEstimate(float(ema), ema_std <= config.convergence_std, ema_std)


def estimate_mi_pairs(x: np.ndarray, z: np.ndarray,
                      config: Optional[MiEstimatorConfig] = None,
                      seed: int = 0) -> MiEstimate:
    """MI estimate for explicitly paired (x, z) samples."""
    config = config or MiEstimatorConfig()
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape[0] != z.shape[0]:
        raise ValueError(f"pair counts differ: {x.shape[0]} vs {z.shape[0]}")

    def sample(rng, b):
        idx = rng.integers(0, x.shape[0], size=b)
        return x[idx], z[idx]

    return _run_mi_estimator(sample, x.shape[1], z.shape[1], config, seed)


def estimate_mi(encoder: nets.Encoder, dataset: Dataset,
                config: Optional[MiEstimatorConfig] = None,
                seed: int = 0) -> MiEstimate:
    """MI between inputs and fresh posterior samples, per a throwaway critic."""
    config = config or MiEstimatorConfig()
    x_all = dataset.examples

    def sample(rng, b):
        idx = rng.integers(0, x_all.shape[0], size=b)
        x_b = x_all[idx]
        mu, log_var = nets.posterior_values(encoder, x_b)
        z_b = mu + np.exp(0.5 * log_var) * rng.standard_normal(mu.shape)
        return x_b, z_b

    return _run_mi_estimator(sample, dataset.input_dim, encoder.z_dim, config, seed)


# ---------------------------------------------------------------------------
# simple frozen-model statistics
# ---------------------------------------------------------------------------

def _posterior_over(encoder, dataset, chunk=4096):
    mus, lvs = [], []
    for start in range(0, dataset.count, chunk):
        mu, lv = nets.posterior_values(encoder, dataset.examples[start:start + chunk])
        mus.append(mu)
        lvs.append(lv)
    return np.concatenate(mus), np.concatenate(lvs)


def active_units(encoder: nets.Encoder, dataset: Dataset,
                 epsilon: float = AU_EPSILON) -> int:
    """Count latent dimensions whose posterior-mean variance clears epsilon."""
    mu, _ = _posterior_over(encoder, dataset)
    return int(np.count_nonzero(np.var(mu, axis=0) >= epsilon))


def kl_term(encoder: nets.Encoder, dataset: Dataset) -> float:
    mu, lv = _posterior_over(encoder, dataset)
    per_example = 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=1)
    return float(per_example.mean())


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def bernoulli_gaussian_log_joint(decoder: nets.Decoder):
    """log p(x,z) for a Bernoulli decoder under the standard-normal prior."""

    def log_joint(x: np.ndarray, z: np.ndarray) -> np.ndarray:
        xhat = nets.decode_values(decoder, z)
        ll = np.sum(x * np.log(xhat) + (1.0 - x) * np.log(1.0 - xhat), axis=1)
        log_prior = -0.5 * np.sum(z * z + np.log(2.0 * np.pi), axis=1)
        return ll + log_prior

    return log_joint


def importance_log_weights(x: np.ndarray, mu: np.ndarray, log_var: np.ndarray,
                           k: int, rng: np.random.Generator,
                           log_joint_fn) -> np.ndarray:
    """(n, k) matrix of log p(x,z_j) - log q(z_j|x) with z_j ~ q(z|x)."""
    n, d = mu.shape
    sigma = np.exp(0.5 * log_var)
    out = np.empty((n, k))
    for j in range(k):
        eps = rng.standard_normal((n, d))
        z = mu + sigma * eps
        log_q = -0.5 * np.sum(eps * eps + log_var + np.log(2.0 * np.pi), axis=1)
        out[:, j] = log_joint_fn(x, z) - log_q
    return out


def single_sample_elbo(encoder: nets.Encoder, decoder: nets.Decoder,
                       x: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Per-example reconstruction term with analytic KL, for one z draw."""
    mu, lv = nets.posterior_values(encoder, x)
    z = mu + np.exp(0.5 * lv) * noise
    xhat = nets.decode_values(decoder, z)
    recon = np.sum(x * np.log(xhat) + (1.0 - x) * np.log(1.0 - xhat), axis=1)
    kl = 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=1)
    return recon - kl


def log_likelihood(encoder: nets.Encoder, decoder: nets.Decoder,
                   dataset: Dataset, k: int = 1, seed: int = 0) -> float:
    """Dataset-mean likelihood bound: single-sample ELBO at k=1, else the
    importance-weighted log-mean of k posterior samples."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    x = dataset.examples
    mu, lv = _posterior_over(encoder, dataset)
    if k == 1:
        values = single_sample_elbo(encoder, decoder, x, rng.standard_normal(mu.shape))
        return float(values.mean())
    log_w = importance_log_weights(x, mu, lv, k, rng,
                                   bernoulli_gaussian_log_joint(decoder))
    shift = log_w.max(axis=1, keepdims=True)
    iwae = shift[:, 0] + np.log(np.exp(log_w - shift).mean(axis=1))
    return float(iwae.mean())


# ---------------------------------------------------------------------------
# classifier probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    hidden: tuple = (128, 64)  # () gives the linear-separability variant
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 128


def probe_accuracy_from_features(train_x, train_y, test_x, test_y,
                                 config: Optional[ProbeConfig] = None,
                                 seed: int = 0) -> float:
    config = config or ProbeConfig()
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    classes = int(max(train_y.max(), test_y.max())) + 1
    missing = sorted(set(test_y.tolist()) - set(train_y.tolist()))
    if missing:
        raise ValueError(f"classes absent from the training split: {missing}")

    streams = np.random.SeedSequence(seed).spawn(2)
    net = nets.init_mlp(np.random.default_rng(streams[0]),
                        [train_x.shape[1], *config.hidden, classes])
    opt = ad.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(streams[1])

    n = train_x.shape[0]
    onehot = np.eye(classes)[train_y]
    batch = min(config.batch, n)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            logits = net.forward(ad.constant(train_x[idx]))
            picked = ad.sum_rows(ad.mul(logits, ad.constant(onehot[idx])))
            loss = ad.mean_all(ad.sub(ad.logsumexp_rows(logits), picked))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()

    predictions = nets.forward_values(net, test_x).argmax(axis=1)
    return float((predictions == test_y).mean())


def probe_accuracy(encoder: nets.Encoder, train: Dataset, test: Dataset,
                   config: Optional[ProbeConfig] = None, seed: int = 0) -> float:
    """Classification accuracy of a probe trained on posterior means."""
    if train.labels is None or test.labels is None:
        raise ValueError("probe requires labeled datasets")
    train_mu, _ = _posterior_over(encoder, train)
    test_mu, _ = _posterior_over(encoder, test)
    return probe_accuracy_from_features(train_mu, train.labels, test_mu,
                                        test.labels, config, seed)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

CSV_HEADER = ["step", "mi", "kl", "au", "elbo", "probe_acc"]


@dataclass
class MetricsRecord:
    step: int
    mi: float = float("nan")
    kl: float = float("nan")
    au: int = 0
    elbo: float = float("nan")
    probe_acc: float = float("nan")
    mi_converged: bool = True  # quality flag; not part of the CSV schema

    def csv_row(self):
        return [str(self.step), f"{self.mi:.6f}", f"{self.kl:.6f}", str(self.au),
                f"{self.elbo:.6f}", f"{self.probe_acc:.6f}"]


def write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for record in records:
            writer.writerow(record.csv_row())


def read_metrics_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected metrics header: {header}")
        for row in reader:
            records.append(MetricsRecord(
                step=int(row[0]), mi=float(row[1]), kl=float(row[2]),
                au=int(row[3]), elbo=float(row[4]), probe_acc=float(row[5])))
    return records
