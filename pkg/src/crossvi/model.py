"""Joint model over RNA and spatial counts with a shared latent space.

Both modalities decode through one softmax decoder conditioned on a
dataset one-hot; the two z-encoders differ in their input trunk but end
in one physically shared affine head producing (mu_z, log_var_z). RNA
cells additionally infer a log-normal library size against an empirical
prior; spatial cells use their observed total as the library. An
optional adversarial classifier on z, routed through gradient reversal
with weight kappa, pushes the two latent clouds to mix.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import kernels, nn
from .data import RNA, SPATIAL, CountMatrix, GenePanel
from .errors import (
    ContractError,
    DataError,
    DegenerateMassError,
    DomainError,
    ParseError,
    TrainingDivergedError,
)

RNA_LIKELIHOODS = ("zinb", "nb")
SPATIAL_LIKELIHOODS = ("poisson", "nb")
MASS_FLOOR = 1e-12
SIGMA_FLOOR = 1e-4
LIB_LOG_VAR_CAP = 8.0


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 10
    rna_likelihood: str = "zinb"
    spatial_likelihood: str = "poisson"
    kappa: float = 0.0
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    hidden_width: int = 128
    learning_rate: float = 1e-3
    renorm_denominator: str = "observed"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise DomainError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not math.isfinite(self.kappa) or self.kappa < 0:
            raise DomainError(f"kappa must be finite and >= 0, got {self.kappa}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be positive")
        if self.rna_likelihood not in RNA_LIKELIHOODS:
            raise DomainError(f"rna_likelihood must be one of {RNA_LIKELIHOODS}")
        if self.spatial_likelihood not in SPATIAL_LIKELIHOODS:
            raise DomainError(
                f"spatial_likelihood must be one of {SPATIAL_LIKELIHOODS}"
            )
        if self.renorm_denominator not in ("observed", "all"):
            raise DomainError("renorm_denominator must be 'observed' or 'all'")
        if self.hidden_width < 1:
            raise DomainError("hidden_width must be positive")


def _onehot(label, n):
    if label == RNA:
        row = (1.0, 0.0)
    elif label == SPATIAL:
        row = (0.0, 1.0)
    else:
        raise ContractError(f"unknown dataset label {label!r}")
    return np.tile(row, (n, 1))


@dataclass
class ModelState:
    """All trainable pieces plus the frozen panel, prior, and config."""

    config: TrainConfig
    panel: GenePanel
    lib_mu: float
    lib_sigma: float
    rna_trunk: nn.DenseLayer
    spatial_trunk: nn.DenseLayer
    z_head: nn.DenseLayer  # shared by both z-encoders
    rna_encoder_l: nn.DenseNet
    decoder_eta: nn.DenseNet
    decoder_nu: nn.DenseNet
    discriminator: nn.DenseNet
    log_theta: nn.Param
    log_theta_prime: nn.Param

    @property
    def rna_encoder_z(self):
        return nn.DenseNet([self.rna_trunk, self.z_head])

    @property
    def spatial_encoder_z(self):
        return nn.DenseNet([self.spatial_trunk, self.z_head])

    def generative_params(self):
        return nn.collect_params(
            self.rna_trunk, self.spatial_trunk, self.z_head, self.rna_encoder_l,
            self.decoder_eta, self.decoder_nu, self.log_theta,
            self.log_theta_prime,
        )

    def discriminator_params(self):
        return nn.collect_params(self.discriminator)

    def all_params(self):
        return self.generative_params() + self.discriminator_params()


def init_state(panel: GenePanel, config: TrainConfig, rng,
               lib_mu=0.0, lib_sigma=1.0) -> ModelState:
    d, h = config.latent_dim, config.hidden_width
    G, Gp = panel.n_genes, panel.n_observed

    rna_trunk = nn.glorot_layer(G + 2, h, "softplus", rng, "enc_rna")
    spatial_trunk = nn.glorot_layer(Gp + 2, h, "softplus", rng, "enc_sp")
    z_head = nn.glorot_layer(h, 2 * d, "identity", rng, "z_head")
    rna_encoder_l = nn.DenseNet([
        nn.glorot_layer(G + 2, h, "softplus", rng, "enc_l.0"),
        nn.glorot_layer(h, 2, "identity", rng, "enc_l.1"),
    ])
    decoder_eta = nn.DenseNet([
        nn.glorot_layer(d + 2, h, "softplus", rng, "dec_eta.0"),
        nn.glorot_layer(h, G, "softmax", rng, "dec_eta.1"),
    ])
    decoder_nu = nn.DenseNet([
        nn.glorot_layer(d + 2, h, "softplus", rng, "dec_nu.0"),
        nn.glorot_layer(h, G, "identity", rng, "dec_nu.1"),
    ])
    # two hidden layers: the classifier must out-model the encoders it
    # competes with or its loss understates the latent divergence
    discriminator = nn.DenseNet([
        nn.glorot_layer(d, h, "softplus", rng, "disc.0"),
        nn.glorot_layer(h, h, "softplus", rng, "disc.1"),
        nn.glorot_layer(h, 1, "identity", rng, "disc.2"),
    ])
    return ModelState(
        config=config,
        panel=panel,
        lib_mu=lib_mu,
        lib_sigma=lib_sigma,
        rna_trunk=rna_trunk,
        spatial_trunk=spatial_trunk,
        z_head=z_head,
        rna_encoder_l=rna_encoder_l,
        decoder_eta=decoder_eta,
        decoder_nu=decoder_nu,
        discriminator=discriminator,
        log_theta=nn.Param(np.zeros(G), "log_theta"),
        log_theta_prime=nn.Param(np.zeros(Gp), "log_theta_prime"),
    )


def library_prior(rna: CountMatrix):
    """Empirical (mean, std) of ln(row sum) over RNA cells; fixed pre-training."""
    sums = rna.row_sums()
    if np.any(sums <= 0):
        raise DataError("RNA cells with zero total count have no library size")
    logs = np.log(sums)
    return float(logs.mean()), float(max(logs.std(), SIGMA_FLOOR))


# ---------------------------------------------------------------------------
# Decoding


def decode_rho(state: ModelState, z, label) -> np.ndarray:
    """Expected gene frequencies f(z, s); rows on the simplex over G."""
    z = np.asarray(z, dtype=float)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    if z.shape[1] != state.config.latent_dim:
        raise ContractError(
            f"latent width {z.shape[1]} != configured {state.config.latent_dim}"
        )
    rho = state.decoder_eta.forward(np.hstack([z, _onehot(label, z.shape[0])]))
    return rho[0] if squeeze else rho


def renormalize_rho(rho, panel: GenePanel, denominator="observed") -> np.ndarray:
    """Restrict frequencies to the observed panel.

    ``denominator='observed'`` rescales by the observed mass so rows sum
    to 1; ``'all'`` divides by the total mass instead (for a softmax
    output this leaves the selected entries unchanged).
    """
    rho = np.asarray(rho, dtype=float)
    squeeze = rho.ndim == 1
    if squeeze:
        rho = rho[None, :]
    if rho.shape[1] != panel.n_genes:
        raise ContractError(f"rho width {rho.shape[1]} != |G| {panel.n_genes}")
    obs = rho[:, panel.observed_idx()]
    if denominator == "observed":
        mass = obs.sum(axis=1, keepdims=True)
    elif denominator == "all":
        mass = rho.sum(axis=1, keepdims=True)
    else:
        raise DomainError("denominator must be 'observed' or 'all'")
    if mass.min() < MASS_FLOOR:
        raise DegenerateMassError(
            f"observed-panel mass {mass.min():.3e} below {MASS_FLOOR:.0e}"
        )
    out = obs / mass
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Likelihood tape ops


def _check_counts(x, width, what):
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != width:
        raise DataError(f"{what} batch must be 2D with {width} genes, got {x.shape}")
    if x.size == 0:
        raise ContractError(f"{what} batch is empty")
    if not np.all(np.isfinite(x)) or x.min() < 0:
        raise DataError(f"{what} counts must be finite and non-negative")
    return x


def _ll_sum_poisson(tape, x, rate_v):
    ll, drate = kernels.poisson_logpmf_grad(x, np.ascontiguousarray(nn._val(rate_v)))
    return nn.custom(tape, ll.sum(), [(rate_v, lambda g: g * drate)])


def _ll_sum_nb(tape, x, mean_v, theta_v):
    ll, dmean, dtheta = kernels.nb_logpmf_grad(
        x, np.ascontiguousarray(nn._val(mean_v)),
        np.ascontiguousarray(nn._val(theta_v)))
    return nn.custom(tape, ll.sum(), [
        (mean_v, lambda g: g * dmean),
        (theta_v, lambda g: g * dtheta.sum(axis=0)),
    ])


def _ll_sum_zinb(tape, x, mean_v, theta_v, logit_v):
    ll, dmean, dtheta, dlogit = kernels.zinb_logpmf_grad(
        x, np.ascontiguousarray(nn._val(mean_v)),
        np.ascontiguousarray(nn._val(theta_v)),
        np.ascontiguousarray(nn._val(logit_v)))
    return nn.custom(tape, ll.sum(), [
        (mean_v, lambda g: g * dmean),
        (theta_v, lambda g: g * dtheta.sum(axis=0)),
        (logit_v, lambda g: g * dlogit),
    ])


def _kl_z_mean(mu, log_var, batch):
    per_cell = nn.sum_axis(
        nn.exp(log_var) + mu * mu - log_var + (-1.0), axis=1)
    return nn.sum_all(per_cell) * (0.5 / batch)


def _encode_z(state, net, x, label, tape, noise):
    enc_in = np.hstack([np.log1p(x), _onehot(label, x.shape[0])])
    d = state.config.latent_dim
    out = net.forward(enc_in, tape)
    mu = nn.cols(out, 0, d)
    log_var = nn.cols(out, d, 2 * d)
    z, _ = nn.reparam_gaussian(mu, log_var, noise)
    return enc_in, mu, log_var, z


def elbo_rna(state: ModelState, x, tape: nn.Tape, noise):
    """Mean RNA ELBO over the batch; returns (elbo Var, sampled z Var)."""
    x = _check_counts(x, state.panel.n_genes, "RNA")
    B = x.shape[0]
    enc_in, mu_z, log_var_z, z = _encode_z(
        state, state.rna_encoder_z, x, RNA, tape, noise)

    lib_out = state.rna_encoder_l.forward(enc_in, tape)
    mu_l = nn.cols(lib_out, 0, 1)
    # soft upper clamp on the library log-variance: the row sum is
    # observed, so a legitimate posterior is narrow, but on small inputs
    # the raw head can start wide enough that exp(log l) overflows
    # before the KL pulls it back; identity far below the cap
    raw_lv = nn.cols(lib_out, 1, 2)
    log_var_l = nn.neg(
        nn.softplus(nn.neg(raw_lv) + LIB_LOG_VAR_CAP)) + LIB_LOG_VAR_CAP
    log_l, _ = nn.reparam_gaussian(mu_l, log_var_l, noise)
    lib = nn.exp(log_l)

    dec_in = nn.hstack([z, _onehot(RNA, B)])
    rho = state.decoder_eta.forward(dec_in, tape)
    mean = lib * rho
    theta = nn.exp(tape.leaf(state.log_theta))
    if state.config.rna_likelihood == "zinb":
        logits = state.decoder_nu.forward(dec_in, tape)
        recon = _ll_sum_zinb(tape, x, mean, theta, logits)
    else:
        recon = _ll_sum_nb(tape, x, mean, theta)

    kl_z = _kl_z_mean(mu_z, log_var_z, B)
    # KL of q(ln l) = N(mu_l, var) against the fixed empirical prior
    sp2 = 2.0 * state.lib_sigma**2
    diff = mu_l + (-state.lib_mu)
    per_cell = (
        (nn.exp(log_var_l) + diff * diff) * (1.0 / sp2)
        + log_var_l * (-0.5)
        + (math.log(state.lib_sigma) - 0.5)
    )
    kl_l = nn.sum_all(per_cell) * (1.0 / B)

    elbo = recon * (1.0 / B) - kl_z - kl_l
    return elbo, z


def elbo_spatial(state: ModelState, x, tape: nn.Tape, noise):
    """Mean spatial ELBO; library is the observed per-cell total."""
    x = _check_counts(x, state.panel.n_observed, "spatial")
    B = x.shape[0]
    lib = x.sum(axis=1, keepdims=True)
    if lib.min() <= 0:
        raise DataError("spatial cells with zero total count must be dropped")
    _, mu_z, log_var_z, z = _encode_z(
        state, state.spatial_encoder_z, x, SPATIAL, tape, noise)

    dec_in = nn.hstack([z, _onehot(SPATIAL, B)])
    rho = state.decoder_eta.forward(dec_in, tape)
    obs = nn.take_cols(rho, state.panel.observed_idx())
    if state.config.renorm_denominator == "observed":
        mass = nn.sum_axis(obs, axis=1)
    else:
        mass = nn.sum_axis(rho, axis=1)
    if nn._val(mass).min() < MASS_FLOOR:
        raise DegenerateMassError("observed-panel mass underflow during decode")
    rate = lib * (obs * nn.reciprocal(mass))
    if state.config.spatial_likelihood == "poisson":
        recon = _ll_sum_poisson(tape, x, rate)
    else:
        theta = nn.exp(tape.leaf(state.log_theta_prime))
        recon = _ll_sum_nb(tape, x, rate, theta)

    elbo = recon * (1.0 / B) - _kl_z_mean(mu_z, log_var_z, B)
    return elbo, z


def adversarial_bce(state: ModelState, z_rna, z_spatial, tape: nn.Tape,
                    kappa: float):
    """Mean BCE of the dataset classifier on both latent batches.

    The classifier reads z through gradient reversal scaled by kappa, so
    one backward pass trains the classifier on the BCE while pushing the
    encoders in the opposite direction.
    """
    n_r = nn._val(z_rna).shape[0]
    n_s = nn._val(z_spatial).shape[0]
    if n_r == 0 or n_s == 0:
        raise ContractError("adversarial loss needs both batches nonempty")
    logit_r = state.discriminator.forward(nn.grad_reverse(z_rna, kappa), tape)
    logit_s = state.discriminator.forward(nn.grad_reverse(z_spatial, kappa), tape)
    # targets: RNA -> 0, spatial -> 1; BCE on logits
    loss_r = nn.sum_all(nn.softplus(logit_r))
    loss_s = nn.sum_all(nn.softplus(logit_s) - logit_s)
    return (loss_r + loss_s) * (1.0 / (n_r + n_s))


def discriminator_prob(state: ModelState, z) -> np.ndarray:
    """P(s = spatial | z) under the adversarial classifier."""
    logit = state.discriminator.forward(np.asarray(z, dtype=float))
    return nn._sigmoid_np(logit)[..., 0]


# ---------------------------------------------------------------------------
# Training


def train(rna, spatial, panel: GenePanel, config: TrainConfig,
          update_discriminator=True):
    """Fit the joint model; returns (ModelState, per-epoch trace).

    Either matrix may be None to fit a single-modality variant (used as
    the reference embedding for the purity metric); the adversarial term
    then drops out. Deterministic given config.seed.
    """
    if rna is None and spatial is None:
        raise ContractError("at least one modality is required")
    x_rna = x_spatial = None
    if rna is not None:
        if rna.modality != RNA:
            raise DataError("rna argument must have RNA modality")
        if tuple(rna.gene_ids) != tuple(panel.genes):
            raise DataError("RNA gene list does not match the panel's gene universe")
        x_rna = rna.counts
        if np.any(x_rna.sum(axis=1) <= 0):
            raise DataError("RNA cells with zero total count are not trainable")
    if spatial is not None:
        if spatial.modality != SPATIAL:
            raise DataError("spatial argument must have spatial modality")
        if set(spatial.gene_ids) != set(panel.observed):
            raise DataError("spatial gene set does not match the panel's observed set")
        x_spatial = spatial.columns(panel.observed)
        if np.any(x_spatial.sum(axis=1) <= 0):
            raise DataError("spatial cells with zero total count must be dropped")

    rng = np.random.default_rng(config.seed)
    if rna is not None:
        lib_mu, lib_sigma = library_prior(rna)
    else:
        lib_mu, lib_sigma = 0.0, 1.0
    state = init_state(panel, config, rng, lib_mu, lib_sigma)

    params = state.generative_params()
    if update_discriminator:
        params = params + state.discriminator_params()
    opt = nn.Adam(params, learning_rate=config.learning_rate)
    noise = nn.RngNoise(rng)

    sizes = [m.shape[0] for m in (x_rna, x_spatial) if m is not None]
    steps = max(1, math.ceil(max(sizes) / config.batch_size))
    dual = x_rna is not None and x_spatial is not None

    def batch(data):
        idx = rng.integers(0, data.shape[0], size=min(config.batch_size,
                                                      data.shape[0]))
        return data[idx]

    trace = []
    for epoch in range(1, config.epochs + 1):
        acc = np.zeros(3)
        for _ in range(steps):
            tape = nn.Tape()
            parts = []
            e_r = e_s = bce = None
            z_r = z_s = None
            if x_rna is not None:
                e_r, z_r = elbo_rna(state, batch(x_rna), tape, noise)
                parts.append(nn.neg(e_r))
            if x_spatial is not None:
                e_s, z_s = elbo_spatial(state, batch(x_spatial), tape, noise)
                parts.append(nn.neg(e_s))
            if dual:
                bce = adversarial_bce(state, z_r, z_s, tape, config.kappa)
                parts.append(bce)
            objective = parts[0]
            for p in parts[1:]:
                objective = objective + p
            opt.zero_grad()
            tape.backward(objective)
            opt.step()
            vals = [float(v.value) if v is not None else math.nan
                    for v in (e_r, e_s, bce)]
            for v, term in zip(vals, (e_r, e_s, bce)):
                if term is not None and not math.isfinite(v):
                    raise TrainingDivergedError(epoch)
            acc += [0.0 if v != v else v for v in vals]
        means = acc / steps
        e_r_m = float(means[0]) if x_rna is not None else math.nan
        e_s_m = float(means[1]) if x_spatial is not None else math.nan
        adv_m = float(means[2]) if dual else math.nan
        total = -(0.0 if e_r_m != e_r_m else e_r_m) \
            - (0.0 if e_s_m != e_s_m else e_s_m) \
            + config.kappa * (0.0 if adv_m != adv_m else adv_m)
        trace.append({
            "epoch": epoch,
            "elbo_rna": e_r_m,
            "elbo_spatial": e_s_m,
            "adv_loss": adv_m,
            "total_loss": total,
        })
    return state, trace


def encode(state: ModelState, cells: CountMatrix):
    """Posterior (mu_z, log_var_z) per cell, routed by modality."""
    if cells.modality == RNA:
        if tuple(cells.gene_ids) != tuple(state.panel.genes):
            raise DataError("RNA gene list does not match the trained panel")
        x, net, label = cells.counts, state.rna_encoder_z, RNA
    else:
        if set(cells.gene_ids) != set(state.panel.observed):
            raise DataError("spatial gene set does not match the trained panel")
        x = cells.columns(state.panel.observed)
        net, label = state.spatial_encoder_z, SPATIAL
    enc_in = np.hstack([np.log1p(x), _onehot(label, x.shape[0])])
    out = net.forward(enc_in)
    d = state.config.latent_dim
    return out[:, :d], out[:, d:]


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(state: ModelState, path) -> None:
    from . import blob

    nets = {
        "rna_trunk": nn.DenseNet([state.rna_trunk]),
        "spatial_trunk": nn.DenseNet([state.spatial_trunk]),
        "z_head": nn.DenseNet([state.z_head]),
        "rna_encoder_l": state.rna_encoder_l,
        "decoder_eta": state.decoder_eta,
        "decoder_nu": state.decoder_nu,
        "discriminator": state.discriminator,
    }
    arrays = {}
    for name in sorted(nets):
        arrays.update(nets[name].arrays(name + "."))
    arrays["log_theta"] = state.log_theta.value
    arrays["log_theta_prime"] = state.log_theta_prime.value
    meta = {
        "kind": "model_checkpoint",
        "config": dataclasses.asdict(state.config),
        "panel": {
            "genes": list(state.panel.genes),
            "observed": list(state.panel.observed),
            "held_out": list(state.panel.held_out),
            "seed": state.panel.seed,
        },
        "library_prior": [state.lib_mu, state.lib_sigma],
        "nets": {name: net.spec() for name, net in nets.items()},
    }
    blob.save(path, meta, arrays)


def load_model(path) -> ModelState:
    from . import blob

    meta, arrays = blob.load(path)
    if meta.get("kind") != "model_checkpoint":
        raise ParseError("not a model checkpoint", path=str(path))
    config = TrainConfig(**meta["config"])
    p = meta["panel"]
    panel = GenePanel(p["genes"], p["observed"], p["held_out"], p["seed"])
    nets = {
        name: nn.DenseNet.from_spec(spec, arrays, name + ".")
        for name, spec in meta["nets"].items()
    }
    return ModelState(
        config=config,
        panel=panel,
        lib_mu=meta["library_prior"][0],
        lib_sigma=meta["library_prior"][1],
        rna_trunk=nets["rna_trunk"].layers[0],
        spatial_trunk=nets["spatial_trunk"].layers[0],
        z_head=nets["z_head"].layers[0],
        rna_encoder_l=nets["rna_encoder_l"],
        decoder_eta=nets["decoder_eta"],
        decoder_nu=nets["decoder_nu"],
        discriminator=nets["discriminator"],
        log_theta=nn.Param(arrays["log_theta"], "log_theta"),
        log_theta_prime=nn.Param(arrays["log_theta_prime"], "log_theta_prime"),
    )
