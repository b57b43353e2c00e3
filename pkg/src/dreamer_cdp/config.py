"""Run configuration, flat key-value config files and ablation flag algebra."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration, shape mismatch or conflicting flags."""


ABLATIONS = (
    "no_cdp",
    "no_reward_grad",
    "no_dyn_rep",
    "cdp_only",
    "dreamer_recon",
    "mudreamer_action",
)

_CONFLICTS = {
    frozenset({"no_cdp", "cdp_only"}),
    frozenset({"cdp_only", "dreamer_recon"}),
    frozenset({"cdp_only", "mudreamer_action"}),
}


@dataclass
class Config:
    # run
    seed: int = 0
    steps: int = 50_000
    mode: str = "serial"
    log_every: int = 1
    checkpoint_every: int = 10_000
    eval_episodes: int = 100
    # environment
    env: str = "minigather"
    image_size: int = 32
    time_limit: int = 200
    # world model widths
    deter: int = 256
    embed: int = 512
    groups: int = 8
    classes: int = 8
    hidden: int = 256
    cdp_hidden: int = 256
    cnn_depth: int = 16
    cnn_stages: int = 4
    unimix: float = 0.01
    # objective weights
    beta_cdp: float = 500.0
    beta_aux: float = 1.0
    beta_dyn: float = 1.0
    beta_rep: float = 0.1
    beta_recon: float = 0.0
    beta_action: float = 0.0
    free_bits: float = 1.0
    # optimisation
    optimizer: str = "adam"
    lr_encoder: float = 6e-6
    lr_rssm: float = 4e-4
    lr_other: float = 4e-5
    lr_policy: float = 4e-5
    lr_viz: float = 4e-5
    adam_eps: float = 1e-8
    grad_clip: float = 1000.0
    batch: int = 16
    seq_len: int = 32
    train_ratio: float = 32.0
    prefill: int = 1000
    replay_capacity: int = 1_000_000
    viz_decoder: bool = False
    # actor-critic
    gamma: float = 0.997
    lam: float = 0.95
    horizon: int = 15
    imag_starts: int = 128  # 0 imagines from every posterior state
    entropy: float = 3e-4
    actor_hidden: int = 256
    # ablation toggles, comma separated in files
    ablations: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.ablations = tuple(self.ablations)
        self.validate()

    def validate(self) -> None:
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablation(s): {', '.join(unknown)}")
        active = set(self.ablations)
        for pair in _CONFLICTS:
            if pair <= active:
                a, b = sorted(pair)
                raise ConfigError(f"conflicting ablations: {a} + {b}")
        if self.mode not in ("serial", "threaded"):
            raise ConfigError(f"mode must be serial or threaded, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.train_ratio <= 0:
            raise ConfigError("train_ratio must be > 0")
        for name in ("beta_cdp", "beta_aux", "beta_dyn", "beta_rep", "beta_recon", "beta_action"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 < self.gamma < 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError("gamma must lie in (0,1) and lam in [0,1]")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        side = self.image_size // 2**self.cnn_stages
        if side < 1 or self.image_size % 2**self.cnn_stages:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2**{self.cnn_stages}"
            )
        flat = self.cnn_depth * 2 ** (self.cnn_stages - 1) * side * side
        if flat != self.embed:
            raise ConfigError(
                f"embed={self.embed} but the conv stack yields {flat} features "
                f"(cnn_depth={self.cnn_depth}, image_size={self.image_size})"
            )

    # -- derived loss routing -------------------------------------------------

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    @property
    def weights(self) -> "LossWeights":
        from .objectives import LossWeights

        cdp, dyn, rep = self.beta_cdp, self.beta_dyn, self.beta_rep
        recon, action = self.beta_recon, self.beta_action
        if self.has("no_cdp"):
            cdp = 0.0
        if self.has("no_dyn_rep") or self.has("cdp_only"):
            dyn = rep = 0.0
        if self.has("dreamer_recon"):
            recon = recon or 1.0
        if self.has("mudreamer_action"):
            action = action or 1.0
        return LossWeights(
            cdp=cdp, aux=self.beta_aux, dyn=dyn, rep=rep, recon=recon, action=action
        )

    @property
    def sever_aux(self) -> bool:
        """Aux heads train on detached features (reward gradient ablation)."""
        return self.has("no_reward_grad") or self.has("cdp_only")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    # -- serialisation --------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "ablations":
                value = ",".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if name == "ablations":
        return tuple(a.strip() for a in raw.split(",") if a.strip())
    try:
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_overrides(pairs: dict[str, str]) -> dict:
    kinds = {f.name: f.type for f in fields(Config)}
    out = {}
    for key, raw in pairs.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = _coerce(key, raw, kinds[key])
    return out


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, **overrides) -> Config:
    """Read a flat ``key = value`` file; keyword overrides win."""
    pairs = parse_text(Path(path).read_text()) if path else {}
    values = parse_overrides(pairs)
    values.update(overrides)
    return Config(**values)


def desk_config(**overrides) -> Config:
    return Config(**overrides)


def longrun_config(**overrides) -> Config:
    """Crafter-scale widths and rates (1M interactions, 64x64 images)."""
    values = dict(
        steps=1_000_000,
        env="crafter",
        image_size=64,
        time_limit=10_000,
        deter=8192,
        embed=4096,
        groups=32,
        classes=32,
        hidden=1024,
        cdp_hidden=4096,
        cnn_depth=32,
        batch=16,
        seq_len=64,
        horizon=15,
        imag_starts=0,
        actor_hidden=1024,
        checkpoint_every=50_000,
    )
    values.update(overrides)
    return Config(**values)
