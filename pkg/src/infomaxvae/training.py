"""The training loop and run-directory operations.

One training step follows the alternating two-optimizer scheme: sample a
batch, encode, reparameterize, permute the latent codes across the batch
for marginal samples, update the encoder/decoder on the full objective,
then update the critic on the MI bound — both updates differentiate the
same forward pass.  Plain ELBO objectives skip the critic entirely.

Every run directory receives a config snapshot, a manifest, a metrics CSV,
and at least one checkpoint.  With a fixed seed and one thread, reruns are
bitwise identical in checkpoints and CSVs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as datamod
from . import metrics as metricsmod
from . import nets, objectives
from .config import ConfigError, TrainConfig, config_to_text


class TrainingAborted(ArithmeticError):
    """Numeric failure mid-run; carries the last checkpoint that parsed clean."""

    def __init__(self, message: str, last_checkpoint: str | None, manifest=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.manifest = manifest


@dataclass
class RunManifest:
    config: dict
    run_dir: str
    checkpoint_paths: list = field(default_factory=list)
    metrics_csv: str = ""
    version: str = f"infomaxvae-{__version__}"
    status: str = "ok"
    failure: str = ""
    timings: dict = field(default_factory=dict)

    def save(self):
        path = Path(self.run_dir) / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
        return path


def load_manifest(run_dir) -> RunManifest:
    with open(Path(run_dir) / "manifest.json") as fh:
        return RunManifest(**json.load(fh))


def load_dataset(config: TrainConfig) -> datamod.Dataset:
    if not config.data_path:
        raise ConfigError("data_path is required")
    labels = config.labels_path or None
    ds = datamod.load_idx_files(config.data_path, labels)
    if config.subset:
        ds = datamod.subset(ds, config.subset, seed=config.seed,
                            stratified=ds.labels is not None)
    if config.binarize != "none":
        ds = datamod.binarize(ds, config.binarize, seed=config.seed)
    return ds


def _objective_config(config: TrainConfig) -> objectives.ObjectiveConfig:
    divergence = objectives.kl_f_dual() if config.divergence == "kl-f-dual" \
        else objectives.donsker_varadhan()
    if config.objective == "vae":
        return objectives.ObjectiveConfig(alpha=0.0, beta=1.0, divergence=divergence)
    if config.objective == "beta-vae":
        return objectives.ObjectiveConfig(alpha=0.0, beta=config.beta,
                                          divergence=divergence)
    if config.objective == "info-vae-mmd":
        return objectives.ObjectiveConfig(alpha=0.0, beta=1.0, divergence=divergence,
                                          mmd_alpha=config.mmd_alpha,
                                          mmd_lambda=config.mmd_lambda)
    return objectives.ObjectiveConfig(alpha=config.alpha, beta=config.beta,
                                      divergence=divergence)


def _checkpoint_path(run_dir: Path, step: int) -> Path:
    return run_dir / f"checkpoint_{step:07d}.ckpt"


def _metrics_for(encoder, decoder, heldout, config: TrainConfig, step: int):
    eval_seed = config.seed * 1_000_003 + step
    record = metricsmod.MetricsRecord(
        step=step,
        kl=metricsmod.kl_term(encoder, heldout),
        au=metricsmod.active_units(encoder, heldout),
        elbo=metricsmod.log_likelihood(encoder, decoder, heldout, k=1, seed=eval_seed),
    )
    if config.eval_mi:
        estimate = metricsmod.estimate_mi(encoder, heldout, seed=eval_seed)
        record.mi = estimate.value
        record.mi_converged = estimate.converged
    if config.eval_probe and heldout.labels is not None:
        record.probe_acc = metricsmod.probe_accuracy(
            encoder, heldout, heldout, seed=eval_seed)
    return record


def train(config: TrainConfig, dataset: datamod.Dataset | None = None) -> RunManifest:
    """Run the full training job and return its manifest.

    `dataset` bypasses file loading (tests, sweeps over in-memory data);
    when omitted the config's data_path is read.
    """
    config.validate()
    started = time.time()
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config_to_text(config))

    if dataset is None:
        dataset = load_dataset(config)
    train_split, heldout = datamod.holdout_split(dataset)

    # independent streams so optional components (critic, permutation) can
    # be toggled without shifting the draws every objective shares
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    rng_init = np.random.default_rng(seeds[0])
    rng_batch = np.random.default_rng(seeds[1])
    rng_noise = np.random.default_rng(seeds[2])
    rng_perm = np.random.default_rng(seeds[3])
    rng_prior = np.random.default_rng(seeds[4])

    encoder, decoder, critic = nets.init_params(
        rng_init, dataset.input_dim, config.z_dim, config.width, config.critic_width)
    obj = _objective_config(config)
    uses_critic = config.objective == "infomax" and config.alpha > 0
    trains_critic = uses_critic and config.critic_inner_steps > 0

    opt_vae = ad.Adam(encoder.net.parameters() + decoder.net.parameters(),
                      lr=config.lr_vae)
    opt_critic = ad.Adam(critic.net.parameters(), lr=config.lr_critic)

    manifest = RunManifest(config={f: getattr(config, f) for f in
                                   config.__dataclass_fields__},
                           run_dir=str(run_dir))
    records = []

    def checkpoint(step):
        path = _checkpoint_path(run_dir, step)
        nets.save_model(path, encoder, decoder)
        manifest.checkpoint_paths.append(str(path))
        records.append(_metrics_for(encoder, decoder, heldout, config, step))
        metricsmod.write_metrics_csv(run_dir / "metrics.csv", records)
        manifest.metrics_csv = str(run_dir / "metrics.csv")
        manifest.save()

    checkpoint(0)
    batches = datamod.BatchIterator(train_split, config.batch, rng_batch)

    try:
        for step in range(1, config.steps + 1):
            x_batch = batches.next_batch()
            x = ad.constant(x_batch)
            posterior = nets.encode(encoder, x)
            noise = rng_noise.standard_normal((config.batch, config.z_dim))
            z = nets.reparameterize(posterior, noise)
            reconstruction = nets.decode(decoder, z)

            if config.objective == "info-vae-mmd":
                prior_draw = rng_prior.standard_normal((config.batch, config.z_dim))
                parts = objectives.mmd_infovae_loss(obj, x, posterior,
                                                    reconstruction, z, prior_draw)
            elif uses_critic:
                perm = objectives.sample_batch_permutation(rng_perm, config.batch)
                z_marg = objectives.permute_codes(z, perm)
                t_joint = nets.critic_score(critic, x, z)
                t_marg = nets.critic_score(critic, x, z_marg)
                parts = objectives.infomax_loss(obj, x, posterior, reconstruction,
                                                t_joint, t_marg)
            else:
                parts = objectives.infomax_loss(obj, x, posterior, reconstruction)

            if not np.isfinite(parts.vae_loss.value[0, 0]):
                raise ad.NumericError(f"loss went non-finite at step {step}")

            opt_vae.zero_grad()
            ad.backward(parts.vae_loss)
            opt_vae.step()

            if trains_critic and parts.critic_loss is not None:
                opt_critic.zero_grad()
                ad.backward(parts.critic_loss)
                opt_critic.step()
                # optional extra critic refinements on the same batch
                for _ in range(config.critic_inner_steps - 1):
                    t_joint = nets.critic_score(critic, x, z)
                    t_marg = nets.critic_score(critic, x, z_marg)
                    extra = ad.negate(objectives.mi_lower_bound(
                        obj.divergence, t_joint, t_marg))
                    opt_critic.zero_grad()
                    ad.backward(extra)
                    opt_critic.step()

            if step % config.checkpoint_every == 0 or step == config.steps:
                checkpoint(step)
    except ad.NumericError as err:
        manifest.status = "failed"
        manifest.failure = str(err)
        manifest.timings = {"seconds": time.time() - started}
        manifest.save()
        last = manifest.checkpoint_paths[-1] if manifest.checkpoint_paths else None
        raise TrainingAborted(str(err), last, manifest) from err

    manifest.timings = {"seconds": time.time() - started}
    manifest.save()
    if config.make_plots:
        from . import plots
        plots.plot_metrics(run_dir / "metrics.csv")
    return manifest


# ---------------------------------------------------------------------------
# frozen-model operations
# ---------------------------------------------------------------------------

def evaluate(checkpoint_path, dataset: datamod.Dataset, which=("kl", "au", "elbo"),
             seed: int = 0, step: int | None = None, csv_path=None):
    """Metrics on a frozen checkpoint; appends a row when csv_path is given."""
    encoder, decoder = nets.load_model(checkpoint_path)
    if step is None:
        stem = Path(checkpoint_path).stem
        digits = stem.rsplit("_", 1)[-1]
        step = int(digits) if digits.isdigit() else 0
    record = metricsmod.MetricsRecord(step=step)
    if "kl" in which:
        record.kl = metricsmod.kl_term(encoder, dataset)
    if "au" in which:
        record.au = metricsmod.active_units(encoder, dataset)
    if "elbo" in which:
        record.elbo = metricsmod.log_likelihood(encoder, decoder, dataset,
                                                k=1, seed=seed)
    if "mi" in which:
        estimate = metricsmod.estimate_mi(encoder, dataset, seed=seed)
        record.mi = estimate.value
        record.mi_converged = estimate.converged
    if "probe" in which:
        if dataset.labels is None:
            raise ValueError("probe metric requires labels")
        train_split, heldout = datamod.holdout_split(dataset)
        record.probe_acc = metricsmod.probe_accuracy(encoder, train_split,
                                                     heldout, seed=seed)
    if csv_path is not None:
        csv_path = Path(csv_path)
        existing = metricsmod.read_metrics_csv(csv_path) if csv_path.exists() else []
        metricsmod.write_metrics_csv(csv_path, existing + [record])
    return record


def export_latents(checkpoint_path, dataset: datamod.Dataset, out_path,
                   make_plot: bool = False):
    """Write one CSV row of posterior parameters per example."""
    encoder, _ = nets.load_model(checkpoint_path)
    mu, log_var = nets.posterior_values(encoder, dataset.examples)
    d = mu.shape[1]
    header = ["label"] + [f"mu_{i + 1}" for i in range(d)] \
        + [f"logvar_{i + 1}" for i in range(d)]
    labels = dataset.labels if dataset.labels is not None \
        else np.full(dataset.count, -1, dtype=np.int64)
    out_path = Path(out_path)
    with open(out_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(dataset.count):
            row = [str(int(labels[i]))]
            row += [f"{v:.6f}" for v in mu[i]]
            row += [f"{v:.6f}" for v in log_var[i]]
            fh.write(",".join(row) + "\n")
    if make_plot:
        from . import plots
        plots.plot_latents(out_path)
    return out_path


def sweep(base: TrainConfig, axis: str, values,
          dataset: datamod.Dataset | None = None) -> list:
    """One full run per value; failures are recorded and the sweep continues."""
    if axis not in ("alpha", "beta"):
        raise ConfigError(f"sweep axis must be alpha or beta, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    manifests = []
    root = Path(base.out_dir)
    for value in values:
        from dataclasses import replace
        sub = replace(base, **{axis: float(value)},
                      out_dir=str(root / f"{axis}-{value}")).validate()
        try:
            manifests.append(train(sub, dataset=dataset))
        except TrainingAborted as err:
            manifests.append(err.manifest)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w") as fh:
        fh.write(f"{axis},status,kl,au,elbo,run_dir\n")
        for value, manifest in zip(values, manifests):
            final = metricsmod.read_metrics_csv(manifest.metrics_csv)[-1] \
                if manifest.metrics_csv else None
            if final is None:
                fh.write(f"{value},{manifest.status},nan,0,nan,{manifest.run_dir}\n")
            else:
                fh.write(f"{value},{manifest.status},{final.kl:.6f},{final.au},"
                         f"{final.elbo:.6f},{manifest.run_dir}\n")
    return manifests
