"""Manifold parameterizations: the exact analytic chart for the planar
closed chain and a learned VAE decoder with its training pipeline.

Both decoders expose the same surface (``latent_dim``, ``decode``,
``decode_batch``, ``encode``) so the planner is agnostic to which one
parameterizes the manifold. The chart is exact (decoded configurations
satisfy h = 0 to machine precision) and serves as the zero-mismatch
oracle for the full pipeline; the VAE carries the approximation error
("manifold mismatch") that the execution-stage QP must cancel.

The VAE is a small tanh MLP trained with hand-derived backpropagation
(Adam updates on minibatches); training is single-threaded and fully
determined by its seed. Inference uses the deterministic mean path; the
reparameterization trick is applied during training only.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import kinematics as kin
from .kinematics import ChainModel

PARAMS_MAGIC = b"MCVP"
DATASET_MAGIC = b"MCVD"
FORMAT_VERSION = 1


class UnreachableError(ValueError):
    """Tray pose outside the dual-arm reachable set."""


class CodecFileError(IOError):
    """Corrupted or incompatible params/dataset file."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# analytic chart (planar model)

class AnalyticChart:
    """Exact chart z = (x, y, theta) tray pose -> joint configuration.

    Closed-form 3R inverse kinematics per arm with a fixed elbow branch;
    the branch sign and the wrist-angle unwrap center are derived from
    each arm's joint bounds so chart and model cannot diverge.
    """

    def __init__(self, model: ChainModel):
        if model.group != "SE2":
            raise kin.ModelError("analytic chart requires the planar model")
        self.model = model
        self.latent_dim = 3
        self._branch = []
        for arm in model.arms:
            mid2 = 0.5 * (arm.q_lb[1] + arm.q_ub[1])
            mid3 = 0.5 * (arm.q_lb[2] + arm.q_ub[2])
            self._branch.append((1.0 if mid2 >= 0 else -1.0, mid3))

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.decode_batch(np.asarray(z, dtype=float)[None, :])[0]

    def decode_batch(self, Z: np.ndarray) -> np.ndarray:
        Q, ok = self._decode_batch_checked(np.asarray(Z, dtype=float))
        if not np.all(ok):
            bad = Z[~ok][0]
            raise UnreachableError(f"tray pose {bad} outside reachable set")
        return Q

    def _decode_batch_checked(self, Z: np.ndarray):
        """Vectorized decode; returns (Q, reachable_mask). Unreachable rows
        are filled with the clamped-triangle solution (mask marks them)."""
        m = self.model
        x, y, th = Z[:, 0], Z[:, 1], Z[:, 2]
        ct, st = np.cos(th), np.sin(th)
        half = 0.5 * m.bar_length
        Q = np.empty((Z.shape[0], 6))
        ok = np.ones(Z.shape[0], dtype=bool)
        for idx, (arm, (sign, wrist_center)) in enumerate(zip(m.arms, self._branch)):
            L1, L2, L3 = arm.link_lengths
            offset = -half if idx == 0 else half
            px = x + offset * ct
            py = y + offset * st
            base_yaw = np.arctan2(arm.base.rotation[1, 0], arm.base.rotation[0, 0])
            a3 = th - arm.tool_rotation
            wx = px - L3 * np.cos(a3) - arm.base.translation[0]
            wy = py - L3 * np.sin(a3) - arm.base.translation[1]
            d2 = wx * wx + wy * wy
            cos_q2 = (d2 - L1 * L1 - L2 * L2) / (2.0 * L1 * L2)
            ok &= np.abs(cos_q2) <= 1.0
            q2 = sign * np.arccos(np.clip(cos_q2, -1.0, 1.0))
            a1 = np.arctan2(wy, wx) - np.arctan2(L2 * np.sin(q2), L1 + L2 * np.cos(q2))
            q1 = _wrap(a1 - base_yaw)
            q3 = _wrap_center(a3 - (a1 + q2), wrist_center)
            Q[:, 3 * idx] = q1
            Q[:, 3 * idx + 1] = q2
            Q[:, 3 * idx + 2] = q3
        return Q, ok

    def encode(self, q: np.ndarray) -> np.ndarray:
        """Tray pose of a configuration (the chart's left inverse on M)."""
        return kin.task_pose(self.model, q, "tray_center")

    def decode_total(self, Z: np.ndarray):
        """Non-raising batch decode for samplers: (Q, reachable_mask).
        Unreachable rows carry the clamped-triangle solution so the cost
        machinery stays total; the mask lets it penalize them."""
        return self._decode_batch_checked(np.asarray(Z, dtype=float))

    def reachable(self, Z: np.ndarray, check_bounds: bool = True) -> np.ndarray:
        """Boolean mask of chart-reachable (and in-bounds) tray poses."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Q, ok = self._decode_batch_checked(Z)
        if check_bounds:
            ok = ok & np.all((Q >= self.model.q_lb) & (Q <= self.model.q_ub), axis=1)
        return ok


def _wrap(a):
    return np.arctan2(np.sin(a), np.cos(a))


def _wrap_center(a, center):
    return a - 2.0 * np.pi * np.round((a - center) / (2.0 * np.pi))


# ---------------------------------------------------------------------------
# dataset generation

@dataclass(frozen=True)
class ManifoldDataset:
    configurations: np.ndarray  # (count, n), every row with ||h|| <= 1e-8
    seed: int
    model_name: str

    @property
    def count(self) -> int:
        return self.configurations.shape[0]

    def content_hash(self) -> bytes:
        return hashlib.sha256(np.ascontiguousarray(self.configurations).tobytes()).digest()


class DatasetGenerationError(RuntimeError):
    """Projection acceptance rate collapsed below 1%."""


def generate_dataset(
    model: ChainModel,
    count: int,
    seed: int,
    residual_tol: float = 1e-10,
) -> ManifoldDataset:
    """Uniform joint-space seeds projected onto the manifold.

    Failed projections (non-convergent, out of bounds, or clamp-infeasible)
    are discarded and resampled; the result is deterministic given the seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    lb, ub = model.q_lb, model.q_ub
    samples = []
    attempts = 0
    max_attempts = 100 * count
    while len(samples) < count:
        if attempts >= max_attempts:
            raise DatasetGenerationError(
                f"{len(samples)}/{count} accepted after {attempts} attempts"
            )
        attempts += 1
        q0 = rng.uniform(lb, ub)
        try:
            q = kin.project_to_manifold(model, q0, tol=residual_tol, max_iter=50)
        except kin.ProjectionError:
            continue
        if np.any(q < lb) or np.any(q > ub):
            continue
        samples.append(q)
    return ManifoldDataset(np.asarray(samples), seed=seed, model_name=model.name)


def save_dataset(dataset: ManifoldDataset, path) -> None:
    name = dataset.model_name.encode()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIQQH", FORMAT_VERSION, dataset.configurations.shape[1],
                            dataset.count, dataset.seed, len(name)))
        f.write(name)
        f.write(np.ascontiguousarray(dataset.configurations, dtype="<f8").tobytes())


def load_dataset(path) -> ManifoldDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DATASET_MAGIC:
        raise CodecFileError("bad dataset magic")
    version, n, count, seed, name_len = struct.unpack("<IIQQH", raw[4:30])
    if version != FORMAT_VERSION:
        raise CodecFileError(f"unsupported dataset version {version}")
    name = raw[30 : 30 + name_len].decode()
    payload = raw[30 + name_len :]
    if len(payload) != count * n * 8:
        raise CodecFileError("dataset payload truncated")
    data = np.frombuffer(payload, dtype="<f8").reshape(count, n).copy()
    return ManifoldDataset(data, seed=seed, model_name=name)


# ---------------------------------------------------------------------------
# VAE

_WEIGHT_KEYS = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "enc_wmu", "enc_bmu", "enc_wlv", "enc_blv",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_w3", "dec_b3",
)


@dataclass(frozen=True)
class DecoderParams:
    """MLP weights for decoder and encoder plus training metadata.

    Joint angles are normalized to [-1, 1] by the recorded bounds before
    encoding and denormalized after decoding, to keep the tanh layers out
    of saturation.
    """

    weights: dict
    layer_sizes: tuple  # (n, hidden..., m)
    beta: float
    q_lb: np.ndarray
    q_ub: np.ndarray
    model_name: str
    activation: str = "tanh"
    epochs: int = 0
    final_recon: float = float("nan")
    final_kl: float = float("nan")
    recon_bound: float = float("nan")
    dataset_hash: bytes = b"\x00" * 32

    @property
    def ambient_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def latent_dim(self) -> int:
        return self.layer_sizes[-1]

    def normalize(self, q):
        return 2.0 * (q - self.q_lb) / (self.q_ub - self.q_lb) - 1.0

    def denormalize(self, x):
        return self.q_lb + 0.5 * (x + 1.0) * (self.q_ub - self.q_lb)


def init_params(
    model: ChainModel,
    hidden=(64, 64),
    beta: float = 1e-3,
    seed: int = 0,
) -> DecoderParams:
    n, m = model.joint_count, model.latent_dim
    rng = np.random.default_rng(seed)
    sizes_enc = [(n, hidden[0]), (hidden[0], hidden[1])]
    w = {}

    def glorot(shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)

    w["enc_w1"] = glorot(sizes_enc[0]); w["enc_b1"] = np.zeros(hidden[0])
    w["enc_w2"] = glorot(sizes_enc[1]); w["enc_b2"] = np.zeros(hidden[1])
    w["enc_wmu"] = glorot((hidden[1], m)); w["enc_bmu"] = np.zeros(m)
    w["enc_wlv"] = glorot((hidden[1], m)); w["enc_blv"] = np.zeros(m)
    w["dec_w1"] = glorot((m, hidden[0])); w["dec_b1"] = np.zeros(hidden[0])
    w["dec_w2"] = glorot((hidden[0], hidden[1])); w["dec_b2"] = np.zeros(hidden[1])
    w["dec_w3"] = glorot((hidden[1], n)); w["dec_b3"] = np.zeros(n)
    return DecoderParams(
        weights=w,
        layer_sizes=(n, *hidden, m),
        beta=beta,
        q_lb=model.q_lb.copy(),
        q_ub=model.q_ub.copy(),
        model_name=model.name,
    )


def decode(params: DecoderParams, z: np.ndarray) -> np.ndarray:
    return decode_batch(params, np.asarray(z, dtype=float)[None, :])[0]


def decode_batch(params: DecoderParams, Z: np.ndarray) -> np.ndarray:
    w = params.weights
    h1 = np.tanh(Z @ w["dec_w1"] + w["dec_b1"])
    h2 = np.tanh(h1 @ w["dec_w2"] + w["dec_b2"])
    return params.denormalize(h2 @ w["dec_w3"] + w["dec_b3"])


def encode_mean(params: DecoderParams, q: np.ndarray) -> np.ndarray:
    return encode_mean_batch(params, np.asarray(q, dtype=float)[None, :])[0]


def encode_mean_batch(params: DecoderParams, Q: np.ndarray) -> np.ndarray:
    w = params.weights
    x = params.normalize(Q)
    h1 = np.tanh(x @ w["enc_w1"] + w["enc_b1"])
    h2 = np.tanh(h1 @ w["enc_w2"] + w["enc_b2"])
    return h2 @ w["enc_wmu"] + w["enc_bmu"]


class VaeDecoder:
    """Planner-facing wrapper matching the AnalyticChart surface."""

    def __init__(self, params: DecoderParams):
        self.params = params
        self.latent_dim = params.latent_dim

    def decode(self, z):
        return decode(self.params, z)

    def decode_batch(self, Z):
        return decode_batch(self.params, Z)

    def encode(self, q):
        return encode_mean(self.params, q)

    def decode_total(self, Z):
        """(Q, mask) like the chart's; an MLP decodes everywhere."""
        Q = decode_batch(self.params, Z)
        return Q, np.ones(Q.shape[0], dtype=bool)


def elbo_loss_and_grads(params: DecoderParams, x_batch: np.ndarray, eps: np.ndarray):
    """Mean negative ELBO over a normalized batch and its weight gradients.

    ``eps`` is the reparameterization noise, passed explicitly so the loss
    is a deterministic function of the weights (finite-difference checks
    rely on this).
    """
    w = params.weights
    B = x_batch.shape[0]
    x = x_batch
    h1 = np.tanh(x @ w["enc_w1"] + w["enc_b1"])
    h2 = np.tanh(h1 @ w["enc_w2"] + w["enc_b2"])
    mu = h2 @ w["enc_wmu"] + w["enc_bmu"]
    lv = h2 @ w["enc_wlv"] + w["enc_blv"]
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    d1 = np.tanh(z @ w["dec_w1"] + w["dec_b1"])
    d2 = np.tanh(d1 @ w["dec_w2"] + w["dec_b2"])
    xh = d2 @ w["dec_w3"] + w["dec_b3"]

    recon = 0.5 * np.sum((xh - x) ** 2) / B
    kl = 0.5 * np.sum(np.exp(lv) + mu * mu - 1.0 - lv) / B
    loss = recon + params.beta * kl

    g = {}
    dxh = (xh - x) / B
    g["dec_w3"] = d2.T @ dxh
    g["dec_b3"] = dxh.sum(axis=0)
    dd2 = (dxh @ w["dec_w3"].T) * (1.0 - d2 * d2)
    g["dec_w2"] = d1.T @ dd2
    g["dec_b2"] = dd2.sum(axis=0)
    dd1 = (dd2 @ w["dec_w2"].T) * (1.0 - d1 * d1)
    g["dec_w1"] = z.T @ dd1
    g["dec_b1"] = dd1.sum(axis=0)
    dz = dd1 @ w["dec_w1"].T
    dmu = dz + params.beta * mu / B
    dlv = dz * eps * 0.5 * std + params.beta * 0.5 * (np.exp(lv) - 1.0) / B
    g["enc_wmu"] = h2.T @ dmu
    g["enc_bmu"] = dmu.sum(axis=0)
    g["enc_wlv"] = h2.T @ dlv
    g["enc_blv"] = dlv.sum(axis=0)
    dh2 = (dmu @ w["enc_wmu"].T + dlv @ w["enc_wlv"].T) * (1.0 - h2 * h2)
    g["enc_w2"] = h1.T @ dh2
    g["enc_b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ w["enc_w2"].T) * (1.0 - h1 * h1)
    g["enc_w1"] = x.T @ dh1
    g["enc_b1"] = dh1.sum(axis=0)
    return loss, recon, kl, g


def train_vae(
    dataset: ManifoldDataset,
    model: ChainModel,
    hidden=(64, 64),
    epochs: int = 200,
    seed: int = 0,
    beta: float = 1e-3,
    batch_size: int = 128,
    learning_rate: float = 1e-3,
) -> DecoderParams:
    """Minibatch stochastic gradient training (Adam) of the VAE.

    Deterministic given the seed: it controls the initialization, the
    minibatch order, and the reparameterization noise. epochs = 0 returns
    the initialized parameters unchanged.
    """
    if dataset.count == 0:
        raise ValueError("dataset is empty")
    params = init_params(model, hidden=hidden, beta=beta, seed=seed)
    if epochs == 0:
        return replace(params, dataset_hash=dataset.content_hash())
    rng = np.random.default_rng(seed + 1)
    X = params.normalize(dataset.configurations)
    N = X.shape[0]
    weights = {k: v.copy() for k, v in params.weights.items()}
    adam_m = {k: np.zeros_like(v) for k, v in weights.items()}
    adam_v = {k: np.zeros_like(v) for k, v in weights.items()}
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    step = 0
    recon = kl = float("nan")
    work = replace(params, weights=weights)
    for epoch in range(epochs):
        order = rng.permutation(N)
        for lo in range(0, N, batch_size):
            idx = order[lo : lo + batch_size]
            xb = X[idx]
            eps = rng.standard_normal(size=(xb.shape[0], params.latent_dim))
            loss, recon, kl, grads = elbo_loss_and_grads(work, xb, eps)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            step += 1
            corr = np.sqrt(1.0 - b2 ** step) / (1.0 - b1 ** step)
            for k in _WEIGHT_KEYS:
                adam_m[k] = b1 * adam_m[k] + (1.0 - b1) * grads[k]
                adam_v[k] = b2 * adam_v[k] + (1.0 - b2) * grads[k] ** 2
                weights[k] -= learning_rate * corr * adam_m[k] / (
                    np.sqrt(adam_v[k]) + eps_adam
                )
    # reconstruction bound: max roundtrip error over the training set
    trained = replace(
        params,
        weights=weights,
        epochs=epochs,
        final_recon=float(recon),
        final_kl=float(kl),
        dataset_hash=dataset.content_hash(),
    )
    q_rt = decode_batch(trained, encode_mean_batch(trained, dataset.configurations))
    bound = float(np.max(np.linalg.norm(q_rt - dataset.configurations, axis=1)))
    return replace(trained, recon_bound=bound)


def decoder_mismatch(model: ChainModel, decoder, Z: np.ndarray) -> np.ndarray:
    """||h(decode(z))|| per latent sample; the planner-side feasibility gap."""
    Q = decoder.decode_batch(np.asarray(Z, dtype=float))
    if model.group == "SE2":
        return np.linalg.norm(kin.planar_constraint_batch(model, Q), axis=1)
    return np.array([kin.constraint(model, q).norm() for q in Q])


# ---------------------------------------------------------------------------
# params file I/O

def save_params(params: DecoderParams, path) -> None:
    w = params.weights
    blocks = b"".join(np.ascontiguousarray(w[k], dtype="<f8").tobytes() for k in _WEIGHT_KEYS)
    bounds = np.ascontiguousarray(
        np.concatenate([params.q_lb, params.q_ub]), dtype="<f8"
    ).tobytes()
    payload = bounds + blocks
    name = params.model_name.encode()
    header = PARAMS_MAGIC + struct.pack(
        "<IIIII", FORMAT_VERSION, *params.layer_sizes
    ) + struct.pack(
        "<dIddd", params.beta, params.epochs, params.final_recon,
        params.final_kl, params.recon_bound,
    ) + params.dataset_hash + struct.pack("<H", len(name)) + name + struct.pack(
        "<Q", len(payload)
    )
    with open(path, "wb") as f:
        f.write(header + payload)


def load_params(path) -> DecoderParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != PARAMS_MAGIC:
        raise CodecFileError("bad params magic")
    version, n, h1, h2, m = struct.unpack("<IIIII", raw[4:24])
    if version != FORMAT_VERSION:
        raise CodecFileError(f"unsupported params version {version}")
    beta, epochs, final_recon, final_kl, recon_bound = struct.unpack("<dIddd", raw[24:60])
    dataset_hash = raw[60:92]
    (name_len,) = struct.unpack("<H", raw[92:94])
    name = raw[94 : 94 + name_len].decode()
    off = 94 + name_len
    (payload_len,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    payload = raw[off:]
    if len(payload) != payload_len:
        raise CodecFileError(
            f"payload size {len(payload)} != declared {payload_len}"
        )
    bounds = np.frombuffer(payload[: 2 * n * 8], dtype="<f8")
    q_lb, q_ub = bounds[:n].copy(), bounds[n:].copy()
    shapes = {
        "enc_w1": (n, h1), "enc_b1": (h1,), "enc_w2": (h1, h2), "enc_b2": (h2,),
        "enc_wmu": (h2, m), "enc_bmu": (m,), "enc_wlv": (h2, m), "enc_blv": (m,),
        "dec_w1": (m, h1), "dec_b1": (h1,), "dec_w2": (h1, h2), "dec_b2": (h2,),
        "dec_w3": (h2, n), "dec_b3": (n,),
    }
    pos = 2 * n * 8
    w = {}
    for k in _WEIGHT_KEYS:
        shape = shapes[k]
        size = int(np.prod(shape)) * 8
        if pos + size > len(payload):
            raise CodecFileError("weight blocks truncated")
        w[k] = np.frombuffer(payload[pos : pos + size], dtype="<f8").reshape(shape).copy()
        pos += size
    if pos != len(payload):
        raise CodecFileError("trailing bytes after weight blocks")
    return DecoderParams(
        weights=w,
        layer_sizes=(n, h1, h2, m),
        beta=beta,
        q_lb=q_lb,
        q_ub=q_ub,
        model_name=name,
        epochs=epochs,
        final_recon=final_recon,
        final_kl=final_kl,
        recon_bound=recon_bound,
        dataset_hash=dataset_hash,
    )
