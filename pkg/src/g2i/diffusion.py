"""Toy conditional latent diffusion.

Latents are node image latents (mean image-feature columns). The denoiser
projects ``z_t`` to a few tokens, adds a learned timestep embedding, lets the
tokens cross-attend to the conditioning tokens ``[h_T, h_G]`` and maps back
to a noise estimate. Missing conditions are replaced by learned null tokens.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensorcore as tc
from .guidance import GuidanceSpec, ScoreTriple, compose_multi
from .mmag import MultimodalGraph
from .qformer import QFormerConfig, QFormerWeights, encode, qformer_param_dict
from .sampling import GraphCondition, SamplerConfig, sample_neighbors_batch

log = logging.getLogger(__name__)

ENCODERS = ("qformer", "baseline")


# --
# Noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return self.betas.size

    def at(self, t):
        """``(beta_t, alpha_bar_t)`` for 1-based ``t``."""
        t = np.asarray(t)
        return self.betas[t - 1], self.alpha_bar[t - 1]


def make_schedule(T: int) -> NoiseSchedule:
    """Linear betas from 1e-4 to 0.02, rescaled so short schedules still end near pure noise."""
    if T < 2:
        raise ValueError("T must be >= 2")
    # Cap keeps beta_T below 1 for very short schedules.
    scale = min(1000.0 / T, 0.999 / 0.02)
    betas = np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def forward_noise(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any((t < 1) | (t > sched.T)):
        raise ValueError(f"t must lie in [1, {sched.T}]")
    ab = sched.alpha_bar[t - 1]
    if np.ndim(z0) > 1:
        ab = np.reshape(ab, (-1,) + (1,) * (np.ndim(z0) - 1))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# --
# Model


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    d_z: int = 16
    T: int = 100
    latent_tokens: int = 4
    heads: int = 2
    qf_layers: int = 4
    cross_period: int = 2
    encoder: str = "qformer"
    seed: int = 0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if self.T < 2 or self.latent_tokens < 1:
            raise ValueError("T must be >= 2 and latent_tokens >= 1")
        self.qformer_config  # validates head/layer layout

    @property
    def qformer_config(self) -> QFormerConfig:
        return QFormerConfig(d=self.d, n_layers=self.qf_layers, heads=self.heads,
                             cross_period=self.cross_period, seed=self.seed, ffn_mult=self.ffn_mult)


@dataclass
class Model:
    """Denoiser and (optionally) Graph-QFormer parameters in one named dict."""

    config: ModelConfig
    params: dict = field(repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def qformer(self) -> QFormerWeights:
        return QFormerWeights(self.config.qformer_config, self.params)

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.config.T)


def init_model(config: ModelConfig, zero_out: bool = True) -> Model:
    rng = np.random.default_rng(config.seed)
    d, dz, nt = config.d, config.d_z, config.latent_tokens
    p = {}
    if config.encoder == "qformer":
        p.update(qformer_param_dict(config.qformer_config, rng, zero_out))
    p["den.in_w"] = rng.standard_normal((dz, nt * d)) / math.sqrt(dz)
    p["den.in_b"] = np.zeros(nt * d)
    p["den.temb"] = rng.standard_normal((config.T, d)) * 0.1
    p["den.null_text"] = rng.standard_normal((1, d)) * 0.1
    p["den.null_graph"] = rng.standard_normal((1, d)) * 0.1
    p.update(tc.attention_params("den.ca", d, rng, zero_out))
    p.update(tc.ffn_params("den.ff", d, rng, zero_out, config.ffn_mult))
    p.update(tc.ffn_params("den.ff2", d, rng, zero_out, config.ffn_mult))
    p["den.ln_f_g"] = np.ones(d)
    p["den.ln_f_b"] = np.zeros(d)
    s = 1.0 / math.sqrt(nt * d)
    p["den.out_w"] = np.zeros((nt * d, dz)) if zero_out else rng.standard_normal((nt * d, dz)) * s
    p["den.out_b"] = np.zeros(dz)
    p["den.skip_w"] = np.zeros((dz, dz)) if zero_out else rng.standard_normal((dz, dz)) / math.sqrt(dz)
    return Model(config, tc.round_to_float32(p))


@dataclass
class CondBatch:
    """A batch of conditions in row layout.

    ``text`` is ``(B, l, d)``; ``z`` is ``(B, n, d)`` padded, ``zmask`` marks
    real feature rows. ``drop_text``/``drop_graph`` select the null tokens.
    """

    text: np.ndarray
    z: np.ndarray
    zmask: np.ndarray
    drop_text: np.ndarray
    drop_graph: np.ndarray

    @property
    def size(self) -> int:
        return self.text.shape[0]


def make_cond_batch(text_tokens, zs, drop_text=None, drop_graph=None) -> CondBatch:
    """Stack per-item ``d x l`` text tokens and ``d x n_i`` feature matrices."""
    B = len(text_tokens)
    text = np.stack([np.asarray(t, dtype=np.float64).T for t in text_tokens])
    d = text.shape[-1]
    n = max((z.shape[1] for z in zs), default=0)
    zb = np.zeros((B, n, d))
    zmask = np.zeros((B, n), dtype=bool)
    for i, z in enumerate(zs):
        zb[i, :z.shape[1]] = z.T
        zmask[i, :z.shape[1]] = True
    drop_text = np.zeros(B, dtype=bool) if drop_text is None else np.asarray(drop_text, dtype=bool)
    drop_graph = np.zeros(B, dtype=bool) if drop_graph is None else np.asarray(drop_graph, dtype=bool)
    return CondBatch(text, zb, zmask, drop_text, drop_graph)


def graph_tokens(tape: tc.ParamTape, model: Model, cond: CondBatch):
    """Graph tokens ``(B, l_g, d)`` and their validity mask (before dropping)."""
    if model.config.encoder == "baseline":
        return tc.const(cond.z), cond.zmask.copy()
    hg, _ = encode(tape, model.config.qformer_config, tc.const(cond.text), tc.const(cond.z), cond.zmask)
    return hg, np.ones(hg.shape[:2], dtype=bool)


def condition_tokens(tape: tc.ParamTape, model: Model, cond: CondBatch):
    """Assemble ``[h_T, null_T, h_G, null_G]`` with a key mask.

    A dropped text condition masks ``h_T`` and unmasks ``null_T``; the same
    for the graph side. A baseline item without neighbours falls back to the
    graph null token.
    """
    B = cond.size
    l = cond.text.shape[1]
    null_t = tc.reshape(tc.broadcast_batch(tape.p("den.null_text"), B), (B, 1, -1))
    null_g = tc.reshape(tc.broadcast_batch(tape.p("den.null_graph"), B), (B, 1, -1))
    drop_g = cond.drop_graph.copy()
    if model.config.encoder == "baseline":
        drop_g |= ~cond.zmask.any(axis=1)
    if drop_g.all():
        hg = tc.const(np.zeros((B, 0, cond.text.shape[2])))
        gmask = np.zeros((B, 0), dtype=bool)
    else:
        hg, gmask = graph_tokens(tape, model, cond)
    tmask = np.repeat(~cond.drop_text[:, None], l, axis=1)
    mask = np.concatenate(
        [tmask, cond.drop_text[:, None], gmask & ~drop_g[:, None], drop_g[:, None]], axis=1
    )
    tokens = tc.concat([tc.const(cond.text), null_t, hg, null_g], axis=1)
    return tokens, mask


def denoise_tokens(tape: tc.ParamTape, model: Model, z_t, t, tokens: tc.Var, mask):
    """Noise estimate ``(B, d_z)`` given assembled conditioning tokens."""
    cfg = model.config
    P = tape.p
    z_t = z_t if isinstance(z_t, tc.Var) else tc.const(z_t)
    B = z_t.shape[0]
    x = tc.reshape(tc.linear(z_t, P("den.in_w"), P("den.in_b")), (B, cfg.latent_tokens, cfg.d))
    temb = tc.reshape(tc.gather_rows(P("den.temb"), np.asarray(t) - 1), (B, 1, cfg.d))
    x = tc.add(x, temb)
    x, _ = tc.multi_head_attention(tape, "den.ca", x, kv=tokens, mask=mask, heads=cfg.heads)
    x = tc.feed_forward(tape, "den.ff", x)
    x = tc.feed_forward(tape, "den.ff2", x)
    x = tc.layer_norm(x, P("den.ln_f_g"), P("den.ln_f_b"))
    x = tc.reshape(x, (B, cfg.latent_tokens * cfg.d))
    out = tc.linear(x, P("den.out_w"), P("den.out_b"))
    return tc.add(out, tc.linear(z_t, P("den.skip_w")))


def denoise_batch(tape: tc.ParamTape, model: Model, z_t, t, cond: CondBatch) -> tc.Var:
    tokens, mask = condition_tokens(tape, model, cond)
    return denoise_tokens(tape, model, z_t, t, tokens, mask)


def denoise(model: Model, z_t, t: int, bundle, drop_text: bool = False, drop_graph: bool = False) -> np.ndarray:
    """Single-item noise prediction from a :class:`ConditioningBundle`.

    ``bundle.h_graph`` is used as-is (already encoded); the null flags swap in
    the learned null tokens.
    """
    cfg = model.config
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape != (cfg.d_z,):
        raise ValueError(f"z_t must have length {cfg.d_z}")
    if bundle.h_text.shape[0] != cfg.d or bundle.h_graph.shape[0] != cfg.d:
        raise ValueError(f"conditioning tokens must have {cfg.d} rows")
    if not 1 <= t <= cfg.T:
        raise ValueError(f"t must lie in [1, {cfg.T}]")
    tape = tc.ParamTape(model.params, record=False)
    h_g = bundle.h_graph
    drop_graph = drop_graph or h_g.shape[1] == 0
    null_t = tape.p("den.null_text").value
    null_g = tape.p("den.null_graph").value
    parts = [null_t if drop_text else bundle.h_text.T, null_g if drop_graph else h_g.T]
    tokens = tc.const(np.concatenate(parts, axis=0)[None])
    out = denoise_tokens(tape, model, z_t[None], np.array([t]), tokens, None)
    return out.value[0]


# --
# Training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 3e-3
    drop_text_prob: float = 0.1
    drop_graph_prob: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 1.0
    epochs: int = 0

    def __post_init__(self):
        for name in ("drop_text_prob", "drop_graph_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate < 0:
            raise ValueError("invalid batch_size/steps/learning_rate")

    def n_steps(self, n_train: int) -> int:
        if self.epochs > 0:
            return self.epochs * math.ceil(n_train / self.batch_size)
        return self.steps


def clip_gradients(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / total
        for g in grads.values():
            g *= f
    return total


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def training_loss(model: Model, z0, t, eps, cond: CondBatch, record: bool = True):
    """MSE noise-prediction loss on one batch; returns ``(loss, tape)``."""
    tape = tc.ParamTape(model.params, record=record)
    z_t = forward_noise(z0, t, eps, model.schedule)
    pred = denoise_batch(tape, model, z_t, t, cond)
    return tc.mse(pred, eps), tape


@dataclass
class TrainResult:
    model: Model
    losses: list
    conditions: dict = field(repr=False, default_factory=dict)


def train(graph: MultimodalGraph, sampler_cfg: SamplerConfig, model: Model, cfg: TrainConfig,
          test_ids=(), workers: int = 1, log_every: int = 200) -> TrainResult:
    """Joint encoder + denoiser training on all non-test nodes.

    Graph conditions are deterministic given the graph and masks, so they are
    computed once up front. The input model is not mutated.
    """
    test = frozenset(int(i) for i in test_ids)
    train_ids = np.array([i for i in range(graph.n_nodes) if i not in test], dtype=np.int64)
    if train_ids.size == 0:
        raise ValueError("empty training set")
    sampler_cfg = SamplerConfig(ppr=sampler_cfg.ppr, k_ppr=sampler_cfg.k_ppr, k=sampler_cfg.k,
                                similarity=sampler_cfg.similarity, exclude=sampler_cfg.exclude | test)
    conds = dict(zip(train_ids.tolist(), sample_neighbors_batch(graph, train_ids, sampler_cfg, workers)))
    latents = np.stack([graph.nodes[i].image_latent for i in range(graph.n_nodes)])

    params = {k: v.copy() for k, v in model.params.items()}
    out = Model(model.config, params, dict(model.meta))
    sched = out.schedule
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else None
    losses = []
    steps = cfg.n_steps(train_ids.size)
    for step in range(steps):
        ids = rng.choice(train_ids, size=cfg.batch_size, replace=True)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, out.config.d_z))
        drop_t = rng.random(cfg.batch_size) < cfg.drop_text_prob
        drop_g = rng.random(cfg.batch_size) < cfg.drop_graph_prob
        cond = make_cond_batch([graph.nodes[i].text_tokens for i in ids], [conds[i].z for i in ids],
                               drop_t, drop_g)
        loss, tape = training_loss(out, latents[ids], t, eps, cond)
        grads = tape.backward(loss)
        clip_gradients(grads, cfg.clip_norm)
        if cfg.learning_rate > 0:
            if opt is None:
                for k in params:
                    params[k] -= cfg.learning_rate * grads[k]
            else:
                opt.step(params, grads)
        losses.append(float(loss.value))
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d/%d loss %.4f", step + 1, steps, np.mean(losses[-log_every:]))
    out.params = tc.round_to_float32(params)
    return TrainResult(out, losses, conds)


def moving_average(x, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    window = max(1, min(window, x.size))
    return np.convolve(x, np.ones(window) / window, mode="valid")


# --
# Sampling


@dataclass
class SampleRequest:
    """One generation: the target's text tokens, per-graph-term features, a seed.

    ``graph_z`` holds one ``d x n`` matrix per graph guidance term (``n`` may
    be 0 for an empty condition).
    """

    text_tokens: np.ndarray
    graph_z: tuple
    seed: int


def _encode_requests(model: Model, requests) -> tuple:
    """Token tensors for the (M + 2) denoiser variants of every request."""
    M = len(requests[0].graph_z)
    if any(len(r.graph_z) != M for r in requests):
        raise ValueError("all requests must carry the same number of graph terms")
    B = len(requests)
    tape = tc.ParamTape(model.params, record=False)
    texts = [r.text_tokens for r in requests]
    variants = []
    # (null, null), (null, text), then one (graph_k, text) per term.
    variants.append(make_cond_batch(texts, [np.zeros((model.config.d, 0))] * B,
                                    np.ones(B, bool), np.ones(B, bool)))
    variants.append(make_cond_batch(texts, [np.zeros((model.config.d, 0))] * B,
                                    np.zeros(B, bool), np.ones(B, bool)))
    for k in range(M):
        variants.append(make_cond_batch(texts, [r.graph_z[k] for r in requests]))
    toks = [condition_tokens(tape, model, c) for c in variants]
    width = max(t.shape[1] for t, _ in toks)
    d = model.config.d
    tokens = np.zeros((len(toks) * B, width, d))
    mask = np.zeros((len(toks) * B, width), dtype=bool)
    for v, (t, m) in enumerate(toks):
        tokens[v * B:(v + 1) * B, :t.shape[1]] = t.value
        mask[v * B:(v + 1) * B, :m.shape[1]] = m
    return tc.const(tokens), mask, M


def sample_batch(model: Model, requests, s_text: float, s_graph, return_trace: bool = False):
    """Guided ancestral sampling for a batch of requests.

    ``s_graph`` is a list with one scale per graph term. Each request draws
    its noise from ``default_rng(seed)``, so a sample does not depend on the
    rest of the batch composition.
    """
    requests = list(requests)
    cfg = model.config
    sched = model.schedule
    tokens, mask, M = _encode_requests(model, requests)
    s_graph = list(s_graph)
    if len(s_graph) != M:
        raise ValueError(f"{len(s_graph)} graph scales for {M} graph terms")
    B = len(requests)
    rngs = [np.random.default_rng(r.seed) for r in requests]
    z = np.stack([g.standard_normal(cfg.d_z) for g in rngs])
    tape = tc.ParamTape(model.params, record=False)
    V = M + 2
    for t in range(sched.T, 0, -1):
        zz = np.tile(z, (V, 1))
        eps = denoise_tokens(tape, model, zz, np.full(V * B, t), tokens, mask).value.reshape(V, B, -1)
        triple = ScoreTriple(eps[0], eps[1], tuple(eps[2:]))
        eps_hat = compose_multi(triple, (s_text, s_graph))
        beta, ab = sched.betas[t - 1], sched.alpha_bar[t - 1]
        mean = (z - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 1:
            ab_prev = sched.alpha_bar[t - 2]
            sigma = math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
            noise = np.stack([g.standard_normal(cfg.d_z) for g in rngs])
            z = mean + sigma * noise
        else:
            z = mean
    return z


def sample(model: Model, text_tokens, conditions, guidance: GuidanceSpec, seed: int) -> np.ndarray:
    """One latent; ``guidance.graph_terms`` pairs each condition with its scale.

    A condition may be a :class:`GraphCondition` or a raw ``d x n`` matrix.
    """
    zs = []
    for cond, _ in guidance.graph_terms:
        zs.append(cond.z if isinstance(cond, GraphCondition) else np.asarray(cond, dtype=np.float64))
    req = SampleRequest(np.asarray(text_tokens, dtype=np.float64), tuple(zs), seed)
    return sample_batch(model, [req], guidance.s_text, guidance.graph_scales)[0]


# --
# Checkpoints

MAGIC = b"IG2I"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_config(model: Model, n_tensors: int) -> bytes:
    lines = [f"{k}={v}" for k, v in asdict(model.config).items()]
    lines += [f"meta.{k}={v}" for k, v in sorted(model.meta.items())]
    lines.append(f"tensors={n_tensors}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_checkpoint(model: Model, path) -> None:
    names = sorted(model.params)
    blob = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _encode_config(model, len(names))
    blob += [struct.pack("<I", len(cfg)), cfg]
    for name in names:
        arr = np.asarray(model.params[name])
        nb = name.encode("utf-8")
        blob.append(struct.pack("<H", len(nb)) + nb)
        blob.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_value(typ, text: str):
    if typ is int or typ == "int":
        return int(text)
    if typ is float or typ == "float":
        return float(text)
    return text


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    entries = {}
    for line in r.take(clen).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            entries[key] = value
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name in entries:
            kwargs[f.name] = _parse_value(f.type, entries[f.name])
    meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta.")}
    n_tensors = int(entries.get("tensors", -1))
    params = {}
    while r.pos < len(r.data):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float64)
    if n_tensors >= 0 and len(params) != n_tensors:
        raise CheckpointError(f"truncated checkpoint: {len(params)} of {n_tensors} tensors")
    return Model(ModelConfig(**kwargs), params, meta)
