"""Flat key=value configuration covering every model and training knob.

Defaults mirror the full-scale system; ``desk()`` swaps in the small
configuration that the bundled corpus and the end-to-end tests run on.  A
config file is plain text, one ``key = value`` per line, ``#`` comments;
lists are comma-separated.  Parsing then serializing reproduces the file
key-for-key, and unknown keys are rejected by name so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


def _tup(*xs):
    return field(default_factory=lambda: tuple(xs))


@dataclass
class Config:
    # audio front end
    sample_rate: int = 22050
    fft_size: int = 1024
    win_size: int = 1024
    hop: int = 256
    n_mels: int = 80

    # phoneme encoder (theta_pho)
    hidden: int = 192
    enc_blocks: int = 6
    enc_heads: int = 2
    enc_kernel: int = 3
    enc_filter: int = 768
    enc_dropout: float = 0.1
    max_phonemes: int = 512
    sup_vocab: int = 30088

    # durator (theta_dur)
    dur_kernel: int = 3
    dur_filter: int = 192
    dur_dropout: float = 0.5
    up_kernel: int = 3
    up_filter: int = 8
    up_p: int = 2
    up_q: int = 4
    up_mlp_hidden: int = 16

    # bidirectional prior/posterior (theta_bpp)
    flow_layers: int = 4
    flow_net_layers: int = 4
    flow_kernel: int = 5
    flow_filter: int = 192
    sdtw_gamma: float = 0.01
    sdtw_warp: float = 0.07

    # posterior encoder (phi)
    post_layers: int = 16
    post_filter: int = 192
    post_kernel: int = 5
    post_dilation: int = 1

    # waveform decoder (theta_dec) and memory
    dec_ratios: tuple = _tup(8, 8, 2, 2)
    dec_channels: tuple = _tup(256, 128, 64, 32)
    dec_kernels: tuple = _tup(3, 7, 11)
    dec_dilations: tuple = _tup(1, 3, 5)
    memory_size: int = 1000
    memory_heads: int = 2

    # discriminators
    disc_periods: tuple = _tup(1, 2, 3, 5, 7, 11)
    disc_channels: tuple = _tup(8, 16, 32)
    disc_kernel: int = 5
    disc_stride: int = 3

    # optimization
    adam_beta1: float = 0.8
    adam_beta2: float = 0.99
    learning_rate: float = 2e-4
    lr_decay: float = 0.999875
    weight_decay: float = 0.01
    batch_size: int = 8
    segment_frames: int = 16

    # schedule
    warmup_epochs: int = 1000
    main_epochs: int = 12000
    tuning_epochs: int = 2000

    # loss weights (GAN-side weights are conventional, not derived)
    gan_weight: float = 1.0
    fm_weight: float = 2.0
    mel_weight: float = 45.0
    dur_weight: float = 1.0

    # inference
    infer_temperature: float = 0.667

    # bookkeeping
    seed: int = 0
    heldout: int = 8

    def __post_init__(self):
        if not (0.0 < self.lr_decay < 1.0):
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.warmup_epochs < 0 or self.main_epochs < 0 or self.tuning_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if len(self.dec_ratios) != len(self.dec_channels):
            raise ValueError("dec_ratios and dec_channels must pair up")

    @property
    def total_epochs(self):
        return self.warmup_epochs + self.main_epochs + self.tuning_epochs

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1


def full_scale():
    return Config()


def desk():
    """Small configuration keeping every structural choice of the big one."""
    return Config(
        sample_rate=8000, fft_size=256, win_size=256, hop=64, n_mels=40,
        hidden=64, enc_blocks=2, enc_filter=128, sup_vocab=56,
        dur_filter=64,
        flow_net_layers=2, flow_filter=48,
        post_layers=3, post_filter=64,
        dec_ratios=(8, 4, 2), dec_channels=(48, 24, 12),
        dec_kernels=(3, 7), dec_dilations=(1, 3),
        memory_size=64,
        disc_periods=(1, 2, 3), disc_channels=(4, 8, 16),
        warmup_epochs=6, main_epochs=48, tuning_epochs=6,
    )


_FIELDS = {f.name: f for f in fields(Config)}


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, text):
    f = _FIELDS[name]
    text = text.strip()
    kind = f.type
    try:
        if kind == "tuple":
            if not text:
                return ()
            return tuple(int(t) for t in text.split(","))
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return text
    except ValueError as exc:
        raise ValueError(f"bad value for config key {name!r}: {text!r}") from exc


def serialize(cfg):
    lines = []
    for f in fields(Config):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(serialize(cfg))


def parse(text, base=None):
    """Parse key=value lines on top of ``base`` (default: full-scale)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    cfg = base if base is not None else full_scale()
    return replace(cfg, **values)


def load_config(path, base=None):
    with open(path) as fh:
        return parse(fh.read(), base=base)


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings from the command line."""
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, val = (part.strip() for part in item.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    return replace(cfg, **values)
