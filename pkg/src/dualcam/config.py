"""Experiment configuration and the flat `key = value` config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError

ABLATION_TOKENS = {
    "ds": "dual_student",
    "dis": "use_dis",
    "dta": "use_dta",
    "anf": "use_anf",
    "reg": "use_reg",
}


@dataclass
class TrainConfig:
    # dataset / run layout
    data_dir: str = "data"
    out_dir: str = "runs/default"
    image_size: int = 64
    num_classes: int = 4
    # loop
    batch_size: int = 4
    total_iters: int = 3000
    warmup_cls_iters: int = 300
    warmup_seg_iters: int = 1200      # noise filtering + consistency activate here
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    # pseudo-label thresholds
    tau_l: float = 0.25
    tau_h_start: float = 0.70
    tau_h_end: float = 0.55
    # noise filter
    gamma: float = 0.9
    eta: float = 1.0
    min_valid_pixels: int = 64
    max_em_iters: int = 50
    em_tol: float = 1e-4
    variance_floor: float = 1e-8
    # loss weights
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.05
    # optimizer
    lr: float = 6e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # model (comma-separated conv widths; last entry is the feature dim)
    widths: str = "16,32,48,64"
    head_dilation: int = 5
    # run identity and switches
    seed: int = 0
    dual_student: bool = True
    use_dis: bool = True
    use_dta: bool = True
    use_anf: bool = True
    use_reg: bool = True
    dump_labels: bool = False

    def widths_tuple(self) -> tuple[int, ...]:
        try:
            return tuple(int(tok) for tok in self.widths.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"bad widths {self.widths!r}") from exc

    def validate(self) -> "TrainConfig":
        if not (0 < self.warmup_cls_iters < self.warmup_seg_iters < self.total_iters):
            raise ConfigurationError(
                "need 0 < warmup_cls_iters < warmup_seg_iters < total_iters, got "
                f"({self.warmup_cls_iters}, {self.warmup_seg_iters}, {self.total_iters})")
        if not (0.0 <= self.tau_l < self.tau_h_end <= self.tau_h_start <= 1.0):
            raise ConfigurationError(
                f"bad thresholds ({self.tau_l}, {self.tau_h_start}, {self.tau_h_end})")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        self.widths_tuple()
        return self


def _coerce(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigurationError(f"expected true/false, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def load_config(path) -> TrainConfig:
    """Parse a flat `key = value` file (TOML-compatible scalars, # comments)
    into a TrainConfig; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    # dataclass field types arrive as strings under `from __future__ import annotations`
    typemap = {"str": str, "int": int, "float": float, "bool": bool}
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        typ = types[key]
        overrides[key] = _coerce(raw, typemap.get(typ, typ) if isinstance(typ, str) else typ)
    return TrainConfig(**overrides).validate()


def save_config(cfg: TrainConfig, path):
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            lines.append(f"{f.name} = {'true' if value else 'false'}")
        elif isinstance(value, str):
            lines.append(f'{f.name} = "{value}"')
        else:
            lines.append(f"{f.name} = {value!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def apply_ablations(cfg: TrainConfig, tokens: str) -> TrainConfig:
    """Disable mechanisms listed in a comma-separated token list
    (ds, dis, dta, anf, reg)."""
    for tok in tokens.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok not in ABLATION_TOKENS:
            raise ConfigurationError(
                f"unknown ablation token {tok!r}; valid: {sorted(ABLATION_TOKENS)}")
        setattr(cfg, ABLATION_TOKENS[tok], False)
    return cfg
