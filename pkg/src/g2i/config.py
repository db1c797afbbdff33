"""``key = value`` run configuration and seed splitting."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .diffusion import ModelConfig, TrainConfig
from .mmag import SyntheticConfig
from .sampling import PPRConfig, SamplerConfig


class ConfigError(ValueError):
    pass


# key -> (section, type)
KEYS = {
    "seed": ("run", int),
    "workers": ("run", int),
    "n_test": ("run", int),
    # synthetic graph
    "n_nodes": ("synth", int),
    "n_clusters": ("synth", int),
    "p_in": ("synth", float),
    "p_out": ("synth", float),
    "d": ("synth", int),
    "style_scale": ("synth", float),
    "content_scale": ("synth", float),
    "noise_scale": ("synth", float),
    "m": ("synth", int),
    "l_text": ("synth", int),
    "n_topics": ("synth", int),
    "topic_spread": ("synth", float),
    "text_noise": ("synth", float),
    "text_dims": ("synth", int),
    # sampler
    "beta": ("sampler", float),
    "max_iters": ("sampler", int),
    "tolerance": ("sampler", float),
    "k_ppr": ("sampler", int),
    "k": ("sampler", int),
    "sim": ("sampler", str),
    # model
    "T": ("model", int),
    "latent_tokens": ("model", int),
    "heads": ("model", int),
    "qf_layers": ("model", int),
    "cross_period": ("model", int),
    "encoder": ("model", str),
    "ffn_mult": ("model", int),
    # training
    "steps": ("train", int),
    "batch_size": ("train", int),
    "learning_rate": ("train", float),
    "drop_text_prob": ("train", float),
    "drop_graph_prob": ("train", float),
    "optimizer": ("train", str),
    "clip_norm": ("train", float),
    "epochs": ("train", int),
    # guidance
    "s_text": ("guidance", float),
    "s_graph": ("guidance", float),
}


def _defaults() -> dict:
    syn, ppr, samp, model, tr = SyntheticConfig(), PPRConfig(), SamplerConfig(), ModelConfig(), TrainConfig()
    out = {"seed": 0, "workers": 1, "n_test": 100, "s_text": 7.5, "s_graph": 1.5}
    for key, (section, _) in KEYS.items():
        src = {"synth": syn, "model": model, "train": tr}.get(section)
        if src is not None and hasattr(src, key):
            out[key] = getattr(src, key)
    out.update(beta=ppr.beta, max_iters=ppr.max_iters, tolerance=ppr.tolerance,
               k_ppr=samp.k_ppr, k=samp.k, sim=samp.similarity)
    return out


DEFAULTS = _defaults()


def derive_seed(seed: int, name: str) -> int:
    """Per-purpose seed from the global seed.

    Mixes the global seed with the CRC32 of ``name``, so adding a new purpose
    never changes the seeds handed to existing ones.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return values


def _convert(key: str, value, where: str):
    typ = KEYS[key][1]
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {key} expects {typ.__name__}, got {value!r}") from exc


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


@dataclass
class RunConfig:
    """Effective settings: defaults, then config file, then flag overrides."""

    values: dict = field(default_factory=dict)

    @classmethod
    def build(cls, file_values: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        values.update(file_values or {})
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = _convert(key, value, "flag")
        cfg = cls(values)
        cfg.validate()
        return cfg

    def get(self, key, default=None):
        return self.values.get(key, default)

    def section(self, name: str) -> dict:
        return {k: v for k, v in self.values.items() if KEYS.get(k, ("", None))[0] == name}

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(seed=derive_seed(self.seed, "synth"), **self.section("synth"))

    def sampler(self, exclude=frozenset()) -> SamplerConfig:
        s = self.section("sampler")
        ppr = PPRConfig(**{k: s[k] for k in ("beta", "max_iters", "tolerance") if k in s})
        kw = {k: s[k] for k in ("k_ppr", "k") if k in s}
        if "sim" in s:
            kw["similarity"] = s["sim"]
        return SamplerConfig(ppr=ppr, exclude=frozenset(exclude), **kw)

    def model(self, d: int) -> ModelConfig:
        return ModelConfig(d=d, d_z=d, seed=derive_seed(self.seed, "model"), **self.section("model"))

    def train(self) -> TrainConfig:
        return TrainConfig(seed=derive_seed(self.seed, "train"), **self.section("train"))

    def validate(self) -> None:
        """Build every module config once so bad values fail before any work."""
        try:
            self.synthetic().validate()
            self.sampler()
            self.model(self.values.get("d", 16))
            self.train()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.values["workers"] < 1 or self.values["n_test"] < 0:
            raise ConfigError("workers must be >= 1 and n_test >= 0")
