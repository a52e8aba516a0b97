"""Line-oriented ``section.key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .cart import TreeParams
from .evaluation import DEFAULT_HIDDEN, ExperimentConfig
from .mlp import TrainSchedule
from .prep import SplitSpec
from .schema import InjurySeverity
from .synthgen import RULE_PRESETS, GeneratorSpec


class ConfigError(ValueError):
    pass


KEYS = {
    "split": ("test_fraction", "seed", "stratified"),
    "tree": ("min_node_n", "min_node_fraction", "max_nodes", "max_depth", "n_surrogates",
             "priors", "prune_fraction"),
    "schedule": ("bp_epochs", "bp_learning_rate", "cg_epochs", "seed"),
    "experiment": ("hidden_neurons", "repeats", "permutations"),
    "generator": ("n_rows", "seed", "class_weights", "rules", "missingness", "proxy_pairs",
                  "head_on_front_fraction"),
}


@dataclass(frozen=True)
class RunConfig:
    split: SplitSpec = SplitSpec()
    tree: TreeParams = TreeParams()
    schedule: TrainSchedule = TrainSchedule()
    hidden_neurons: dict = field(default_factory=lambda: dict(DEFAULT_HIDDEN))
    repeats: int = 1
    permutations: int = 10
    prune_fraction: float = 0.2
    rules: str = "planted"
    generator: GeneratorSpec = GeneratorSpec()

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            hidden_neurons=self.hidden_neurons,
            tree_params=self.tree,
            schedule=self.schedule,
            split=self.split,
            repeats=self.repeats,
            prune_fraction=self.prune_fraction,
            permutations=self.permutations,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            split=replace(self.split, seed=seed),
            schedule=replace(self.schedule, seed=seed),
            generator=replace(self.generator, seed=seed),
        )

    def resolved(self) -> str:
        """Every setting as config text; feeding it back reproduces the run."""
        t, s, g = self.tree, self.schedule, self.generator
        lines = [
            f"split.test_fraction = {self.split.test_fraction!r}",
            f"split.seed = {self.split.seed}",
            f"split.stratified = {str(self.split.stratified).lower()}",
            f"tree.min_node_n = {t.min_node_n}",
            f"tree.min_node_fraction = {t.min_node_fraction!r}",
            f"tree.max_nodes = {t.max_nodes}",
            f"tree.max_depth = {t.max_depth}",
            f"tree.n_surrogates = {t.n_surrogates}",
            "tree.priors = " + ("equal" if t.priors is None else ", ".join(repr(p) for p in t.priors)),
            f"tree.prune_fraction = {self.prune_fraction!r}",
            f"schedule.bp_epochs = {s.bp_epochs}",
            f"schedule.bp_learning_rate = {s.bp_learning_rate!r}",
            f"schedule.cg_epochs = {s.cg_epochs}",
            f"schedule.seed = {s.seed}",
            "experiment.hidden_neurons = "
            + ", ".join(f"{c.token}:{self.hidden_neurons[c]}" for c in InjurySeverity),
            f"experiment.repeats = {self.repeats}",
            f"experiment.permutations = {self.permutations}",
            f"generator.n_rows = {g.n_rows}",
            f"generator.seed = {g.seed}",
            "generator.class_weights = " + ", ".join(repr(w) for w in g.class_weights),
            f"generator.rules = {self.rules}",
            "generator.missingness = "
            + (", ".join(f"{k}:{v!r}" for k, v in sorted(g.missingness.items())) or "none"),
            "generator.proxy_pairs = "
            + (", ".join(f"{a}:{b}:{lvl!r}" for a, b, lvl in g.proxy_pairs) or "none"),
            f"generator.head_on_front_fraction = {g.head_on_front_fraction!r}",
        ]
        return "\n".join(lines) + "\n"


def _int(v):
    return int(v)


def _bool(v):
    low = v.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    return tuple(float(x) for x in v.split(","))


def _pairs(v):
    if v.strip().lower() in ("", "none"):
        return []
    return [tuple(p.strip() for p in item.split(":")) for item in v.split(",")]


def parse(text: str) -> dict:
    """Parse config text into ``{(section, key): raw value}``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        section, dot, key = name.strip().partition(".")
        if not dot or section not in KEYS or key not in KEYS[section]:
            raise ConfigError(f"line {lineno}: unknown key {name.strip()!r}")
        if (section, key) in out:
            raise ConfigError(f"line {lineno}: duplicate key {name.strip()!r}")
        out[(section, key)] = value.strip()
    return out


def load(text: str = "") -> RunConfig:
    raw = parse(text)

    def get(section, key, conv, default):
        if (section, key) not in raw:
            return default
        try:
            return conv(raw[(section, key)])
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None

    base = RunConfig()
    try:
        split = SplitSpec(
            get("split", "test_fraction", float, base.split.test_fraction),
            get("split", "seed", _int, base.split.seed),
            get("split", "stratified", _bool, base.split.stratified),
        )
        priors = get("tree", "priors", lambda v: None if v.lower() == "equal" else _floats(v), None)
        tree = TreeParams(
            min_node_n=get("tree", "min_node_n", _int, base.tree.min_node_n),
            min_node_fraction=get("tree", "min_node_fraction", float, base.tree.min_node_fraction),
            max_nodes=get("tree", "max_nodes", _int, base.tree.max_nodes),
            max_depth=get("tree", "max_depth", _int, base.tree.max_depth),
            n_surrogates=get("tree", "n_surrogates", _int, base.tree.n_surrogates),
            priors=priors,
        )
        schedule = TrainSchedule(
            get("schedule", "bp_epochs", _int, base.schedule.bp_epochs),
            get("schedule", "bp_learning_rate", float, base.schedule.bp_learning_rate),
            get("schedule", "cg_epochs", _int, base.schedule.cg_epochs),
            get("schedule", "seed", _int, base.schedule.seed),
        )
        hidden = dict(base.hidden_neurons)
        for token, value in get("experiment", "hidden_neurons", _pairs, []):
            hidden[InjurySeverity.from_token(token)] = int(value)
        rules = get("generator", "rules", str, base.rules)
        if rules not in RULE_PRESETS:
            raise ConfigError(f"generator.rules: unknown preset {rules!r}; valid: {', '.join(RULE_PRESETS)}")
        g = base.generator
        missingness = get(
            "generator", "missingness", lambda v: {k: float(f) for k, f in _pairs(v)}, dict(g.missingness)
        )
        proxies = get(
            "generator", "proxy_pairs", lambda v: tuple((a, b, float(l)) for a, b, l in _pairs(v)),
            g.proxy_pairs,
        )
        generator = GeneratorSpec(
            n_rows=get("generator", "n_rows", _int, g.n_rows),
            seed=get("generator", "seed", _int, g.seed),
            class_weights=get("generator", "class_weights", _floats, g.class_weights),
            rule_table=RULE_PRESETS[rules],
            missingness=missingness,
            proxy_pairs=proxies,
            head_on_front_fraction=get("generator", "head_on_front_fraction", float,
                                       g.head_on_front_fraction),
        )
        cfg = RunConfig(
            split=split,
            tree=tree,
            schedule=schedule,
            hidden_neurons=hidden,
            repeats=get("experiment", "repeats", _int, base.repeats),
            permutations=get("experiment", "permutations", _int, base.permutations),
            prune_fraction=get("tree", "prune_fraction", float, base.prune_fraction),
            rules=rules,
            generator=generator,
        )
        cfg.experiment()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
