"""Experiment configuration: plain-text parsing, validation, presets.

The config format is line-oriented: `[section]` headers, `key = value` pairs,
`#` comment lines, blank lines. Unknown sections or keys are hard errors with
line numbers; missing keys take documented defaults. `render_config` emits a
canonical document that parses back to the same configuration, which is what
run manifests embed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .fed import LOCAL_EPOCH_ABLATION, parse_personalization

SCENARIOS = ("baseline", "personalization", "pretrained", "finetune",
             "local-epochs-ablation", "residual-ablation")


@dataclass
class DataConfig:
    kind: str = "synthetic"            # synthetic | idx
    clients: int = 4
    classes: int = 5
    input_dim: int = 20
    train_per_client: int = 500
    test_per_client: int = 500
    anchor_scale: float = 3.0
    within_class_scale: float = 1.0
    scale_min: float = 0.5
    scale_max: float = 2.0
    offset_scale: float = 1.0
    rotation: str = "random"           # random | identity
    label_noise: float = 0.0
    balanced: bool = True
    idx_dir: str = ""


@dataclass
class ModelConfig:
    hidden: tuple = (32, 32, 32, 32, 16)
    activation: str = "relu"           # relu | linear
    residual: bool = False
    residual_width: int = 32
    residual_inner: int = 2


@dataclass
class FedSection:
    rounds: int = 30
    local_epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.5
    batch_size: int = 64
    eval_cadence: int = 2
    personalization: str = "none"
    pretrain_epochs: int = 0
    seed: int = 1


@dataclass
class MetricsConfig:
    taps: tuple = ()                   # empty = every layer input
    eval_per_class: int = 40
    distances: bool = True
    probe_rounds: tuple = ()
    probe_epochs: int = 100
    probe_lr: float = 0.01
    probe_batch: int = 64
    finetune_epochs: int = 10
    finetune_lr: float = 0.01
    finetune_momentum: float = 0.1
    finetune_batch: int = 64


@dataclass
class OutputConfig:
    dir: str = "runs/out"
    dump_features: bool = False
    dump_models: bool = False


@dataclass
class ExperimentConfig:
    scenario: str = "baseline"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fed: FedSection = field(default_factory=FedSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def num_layers(self) -> int:
        return len(self.model.hidden) + 1


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "fed": FedSection,
             "metrics": MetricsConfig, "output": OutputConfig}


def _parse_value(text: str, template, section: str, key: str, line_no: int):
    text = text.strip()
    if isinstance(template, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}",
                          field=f"{section}.{key}", line=line_no)
    if isinstance(template, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got {text!r}",
                              field=f"{section}.{key}", line=line_no) from None
    if isinstance(template, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}",
                              field=f"{section}.{key}", line=line_no) from None
    if isinstance(template, tuple):
        if not text:
            return ()
        try:
            return tuple(int(p.strip()) for p in text.split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"expected a comma-separated integer list, got {text!r}",
                              field=f"{section}.{key}", line=line_no) from None
    return text


def parse_config(text: str) -> ExperimentConfig:
    """Parse a config document; unknown sections or keys raise ConfigError."""
    cfg = ExperimentConfig()
    sections = {name: getattr(cfg, name) for name in _SECTIONS}
    current = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in sections:
                raise ConfigError(f"unknown section [{name}]", line=line_no)
            current = name
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", line=line_no)
        key, _, value = line.partition("=")
        key = key.strip()
        if current is None:
            if key == "scenario":
                cfg.scenario = value.strip()
                continue
            raise ConfigError(f"key {key!r} outside any section", line=line_no)
        target = sections[current]
        names = {f.name for f in fields(target)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r}", field=f"{current}.{key}",
                              line=line_no)
        template = getattr(type(target)(), key)
        setattr(target, key, _parse_value(value, template, current, key, line_no))
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    return parse_config(text)


def validate_config(cfg: ExperimentConfig) -> None:
    """Cross-field checks; raises ConfigError naming the offending field."""
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}, expected one of "
                          f"{', '.join(SCENARIOS)}", field="scenario")
    d = cfg.data
    if d.kind not in ("synthetic", "idx"):
        raise ConfigError(f"unknown data kind {d.kind!r}", field="data.kind")
    if d.kind == "idx" and not d.idx_dir:
        raise ConfigError("idx data needs idx_dir", field="data.idx_dir")
    if d.clients < 1:
        raise ConfigError("need at least one client", field="data.clients")
    if d.classes < 2:
        raise ConfigError("need at least two classes", field="data.classes")
    if d.rotation not in ("random", "identity"):
        raise ConfigError(f"unknown rotation {d.rotation!r}", field="data.rotation")
    if not 0.0 <= d.label_noise < 1.0:
        raise ConfigError("label_noise must be in [0, 1)", field="data.label_noise")
    if d.scale_min > d.scale_max:
        raise ConfigError("scale_min exceeds scale_max", field="data.scale_min")
    m = cfg.model
    if not m.hidden:
        raise ConfigError("need at least one hidden layer", field="model.hidden")
    if any(h < 1 for h in m.hidden):
        raise ConfigError("hidden widths must be positive", field="model.hidden")
    if m.activation not in ("relu", "linear"):
        raise ConfigError(f"unknown activation {m.activation!r}",
                          field="model.activation")
    f = cfg.fed
    if f.rounds < 1:
        raise ConfigError("rounds must be positive", field="fed.rounds")
    if f.local_epochs < 0:
        raise ConfigError("local_epochs must be non-negative",
                          field="fed.local_epochs")
    if f.eval_cadence < 1:
        raise ConfigError("eval_cadence must be positive", field="fed.eval_cadence")
    if f.pretrain_epochs < 0:
        raise ConfigError("pretrain_epochs must be non-negative",
                          field="fed.pretrain_epochs")
    num_layers = cfg.num_layers
    name, payload = parse_personalization(f.personalization)
    if name == "successive" and not 0 <= payload <= num_layers:
        raise ConfigError(f"successive count {payload} out of range 0..{num_layers}",
                          field="fed.personalization")
    if name == "skip":
        bad = [p for p in payload if not 1 <= p <= num_layers]
        if bad:
            raise ConfigError(f"skip layers {bad} out of range 1..{num_layers}",
                              field="fed.personalization")
    if cfg.scenario == "personalization" and name == "none":
        raise ConfigError("personalization scenario needs a mode",
                          field="fed.personalization")
    mt = cfg.metrics
    for t in mt.taps:
        if not 0 <= t < num_layers:
            raise ConfigError(f"tap layer {t} out of range 0..{num_layers - 1}",
                              field="metrics.taps")
    if mt.eval_per_class < 1:
        raise ConfigError("eval_per_class must be positive",
                          field="metrics.eval_per_class")
    if any(r < 1 for r in mt.probe_rounds):
        raise ConfigError("probe rounds must be positive",
                          field="metrics.probe_rounds")
    for knob in ("probe_epochs", "probe_batch", "finetune_epochs", "finetune_batch"):
        if getattr(mt, knob) < 1:
            raise ConfigError(f"{knob} must be positive", field=f"metrics.{knob}")
    if not cfg.output.dir:
        raise ConfigError("output dir must be set", field="output.dir")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse_config(render_config(cfg)) == cfg."""
    lines = [f"scenario = {cfg.scenario}", ""]
    for name in _SECTIONS:
        target = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(target):
            lines.append(f"{f.name} = {_format_value(getattr(target, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _base_config(seed: int = 1) -> ExperimentConfig:
    # Desk-scale heterogeneous federation: shared class anchors, per-client
    # Haar rotations, low anchor separation and half-split batches so local
    # models keep diverging instead of memorizing within the first rounds.
    cfg = ExperimentConfig()
    cfg.fed.seed = seed
    cfg.data.anchor_scale = 1.5
    cfg.data.scale_min = 1.0
    cfg.data.scale_max = 1.0
    cfg.data.offset_scale = 0.0
    cfg.fed.batch_size = 250
    cfg.metrics.eval_per_class = 100
    return cfg


def preset(name: str, seed: int = 1):
    """Named experiment presets; returns a list of (name, config) pairs."""
    builders = {
        "baseline": _preset_baseline,
        "iid-control": _preset_iid,
        "personalization-classifier": _preset_classifier,
        "personalization-successive": _preset_successive,
        "personalization-skip": _preset_skip,
        "pretrained": _preset_pretrained,
        "finetune": _preset_finetune,
        "local-epochs-ablation": _preset_local_epochs,
        "residual-ablation": _preset_residual,
    }
    if name not in builders:
        raise ConfigError(f"unknown preset {name!r}, expected one of "
                          f"{', '.join(sorted(builders))}")
    out = builders[name](seed)
    for sub_name, cfg in out:
        cfg.output.dir = f"runs/{sub_name}"
        validate_config(cfg)
    return out


def preset_names():
    return ("baseline", "iid-control", "personalization-classifier",
            "personalization-successive", "personalization-skip", "pretrained",
            "finetune", "local-epochs-ablation", "residual-ablation")


def _preset_baseline(seed):
    return [("baseline", _base_config(seed))]


def _preset_iid(seed):
    cfg = _base_config(seed)
    cfg.data.rotation = "identity"
    cfg.data.scale_min = 1.0
    cfg.data.scale_max = 1.0
    cfg.data.offset_scale = 0.0
    return [("iid-control", cfg)]


def _preset_classifier(seed):
    cfg = _base_config(seed)
    cfg.scenario = "personalization"
    cfg.fed.personalization = "classifier"
    return [("personalization-classifier", cfg)]


def _preset_successive(seed):
    out = []
    num_layers = len(ModelConfig().hidden) + 1
    for k in range(num_layers + 1):
        cfg = _base_config(seed)
        cfg.scenario = "personalization"
        cfg.fed.personalization = f"successive:{k}"
        out.append((f"personalization-successive-k{k}", cfg))
    return out


def _preset_skip(seed):
    out = []
    num_layers = len(ModelConfig().hidden) + 1
    for layer in range(1, num_layers + 1):
        cfg = _base_config(seed)
        cfg.scenario = "personalization"
        cfg.fed.personalization = f"skip:{layer}"
        out.append((f"personalization-skip-l{layer}", cfg))
    return out


def _mature_config(seed: int) -> ExperimentConfig:
    # Faster local regime for the mitigation scenarios: stronger class
    # separation plus scale/offset shift, so features mature within a few
    # rounds and classifier-level effects are visible.
    cfg = ExperimentConfig()
    cfg.fed.seed = seed
    cfg.metrics.eval_per_class = 100
    return cfg


def _preset_pretrained(seed):
    cfg = _mature_config(seed)
    cfg.scenario = "pretrained"
    cfg.fed.pretrain_epochs = 20
    twin = _mature_config(seed)
    twin.scenario = "pretrained"
    twin.fed.pretrain_epochs = 0
    return [("pretrained", cfg), ("pretrained-random-init", twin)]


def _preset_finetune(seed):
    cfg = _base_config(seed)
    cfg.scenario = "finetune"
    cfg.fed.batch_size = 128
    cfg.metrics.finetune_batch = 8
    return [("finetune", cfg)]


def _preset_local_epochs(seed):
    out = []
    for e, r in LOCAL_EPOCH_ABLATION:
        cfg = _base_config(seed)
        cfg.scenario = "local-epochs-ablation"
        cfg.fed.local_epochs = e
        cfg.fed.rounds = r
        cfg.fed.eval_cadence = max(1, 20 // e)
        out.append((f"local-epochs-e{e}-r{r}", cfg))
    return out


def _preset_residual(seed):
    out = []
    for flag in (False, True):
        cfg = _base_config(seed)
        cfg.scenario = "residual-ablation"
        cfg.model.residual = flag
        tag = "on" if flag else "off"
        out.append((f"residual-{tag}", cfg))
    return out
