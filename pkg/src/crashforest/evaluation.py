"""One-against-all experiments, the per-class results table and sensitivity."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import cart, mlp
from .cart import Table, TreeParams
from .mlp import TrainSchedule
from .prep import EncodedDataset, SplitSpec, one_vs_all, split, split_indices
from .schema import MODEL_FIELDS, InjurySeverity

DEFAULT_HIDDEN = {
    InjurySeverity.NoInjury: 65,
    InjurySeverity.PossibleInjury: 65,
    InjurySeverity.NonIncapacitating: 75,
    InjurySeverity.Incapacitating: 65,
    InjurySeverity.Fatal: 42,
}

# Published per-class values: (hidden neurons, ANN accuracy, DT accuracy),
# kept as printed so the report reproduces them digit for digit.
PUBLISHED = {
    InjurySeverity.NoInjury: ("65", "60.45", "67.54"),
    InjurySeverity.PossibleInjury: ("65", "57.58", "64.40"),
    InjurySeverity.NonIncapacitating: ("75", "56.8", "60.37"),
    InjurySeverity.Incapacitating: ("65", "61.32", "71.38"),
    InjurySeverity.Fatal: ("42", "75.51", "89.46"),
}


class DataPreconditionError(ValueError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    hidden_neurons: Mapping = field(default_factory=lambda: dict(DEFAULT_HIDDEN))
    tree_params: TreeParams = TreeParams()
    schedule: TrainSchedule = TrainSchedule()
    split: SplitSpec = SplitSpec()
    repeats: int = 1
    prune_fraction: float = 0.2
    permutations: int = 10

    def __post_init__(self):
        missing = [c.token for c in InjurySeverity if c not in self.hidden_neurons]
        if missing:
            raise ValueError(f"hidden_neurons lacks classes: {', '.join(missing)}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not 0.0 < self.prune_fraction < 1.0:
            raise ValueError("prune_fraction must lie in (0, 1)")
        if self.permutations < 1:
            raise ValueError("permutations must be >= 1")

    def canonical(self) -> str:
        d = asdict(self)
        d["hidden_neurons"] = {InjurySeverity(k).token: v for k, v in self.hidden_neurons.items()}
        return json.dumps(d, sort_keys=True, default=list)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if len(p) == 0 or len(p) != len(y):
        raise ValueError("accuracy needs two non-empty vectors of equal length")
    return 100.0 * float(np.sum(p == y)) / len(y)


class Confusion(NamedTuple):
    tn: int
    fp: int
    fn: int
    tp: int


def confusion(predictions, labels) -> Confusion:
    p, y = np.asarray(predictions, dtype=int), np.asarray(labels, dtype=int)
    if len(p) == 0 or len(p) != len(y):
        raise ValueError("confusion needs two non-empty vectors of equal length")
    return Confusion(
        int(np.sum((p == 0) & (y == 0))),
        int(np.sum((p == 1) & (y == 0))),
        int(np.sum((p == 0) & (y == 1))),
        int(np.sum((p == 1) & (y == 1))),
    )


def _mean_sd(values) -> tuple:
    a = np.asarray(values, dtype=float)
    sd = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return float(a.mean()), sd


@dataclass
class ClassReport:
    positive: InjurySeverity
    hidden_neurons: int
    nn_accuracy: list = field(default_factory=list)
    dt_accuracy: list = field(default_factory=list)
    nn_confusion: list = field(default_factory=list)
    dt_confusion: list = field(default_factory=list)
    test_rows: list = field(default_factory=list)
    tree_nodes: list = field(default_factory=list)
    # Wall-clock seconds per phase; never written to reports.
    timing: list = field(default_factory=list)

    @property
    def nn_mean_sd(self) -> tuple:
        return _mean_sd(self.nn_accuracy)

    @property
    def dt_mean_sd(self) -> tuple:
        return _mean_sd(self.dt_accuracy)


@dataclass
class ResultsTable:
    reports: tuple
    provenance: dict


def dataset_fingerprint(ds: EncodedDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.severity, dtype=np.int64).tobytes())
    h.update(repr(ds.raw_columns).encode())
    return h.hexdigest()


@dataclass
class FittedRepeat:
    train: EncodedDataset
    test: EncodedDataset
    tree: cart.Tree
    model: mlp.MlpModel
    timing: dict


def repeat_split(ds: EncodedDataset, config: ExperimentConfig, repeat: int):
    """Train/test partition for one repeat; identical for every positive class."""
    spec = SplitSpec(config.split.test_fraction, derive_seed(config.split.seed, repeat),
                     config.split.stratified)
    try:
        return split(ds, spec)
    except ValueError as exc:
        raise DataPreconditionError(f"repeat {repeat}: {exc}") from exc


def fit_repeat(train: EncodedDataset, test: EncodedDataset, positive: InjurySeverity,
               config: ExperimentConfig, repeat: int) -> FittedRepeat:
    """Binarize, then grow+prune the tree and train the perceptron."""
    train, test = one_vs_all(train, positive), one_vs_all(test, positive)
    if train.targets.sum() < 2:
        raise DataPreconditionError(
            f"repeat {repeat}: fewer than 2 {positive.token} rows in the training partition"
        )
    timing = {}
    t0 = time.perf_counter()
    grow_idx, prune_idx = split_indices(
        train.targets, SplitSpec(config.prune_fraction, derive_seed(config.split.seed, repeat, 1))
    )
    raw = train.raw_columns
    tree = cart.grow([raw[i] for i in grow_idx], train.targets[grow_idx], config.tree_params, n_classes=2)
    tree = cart.prune(tree, [raw[i] for i in prune_idx], train.targets[prune_idx])
    timing["tree"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        model, _ = mlp.train(train.features, train.targets, config.hidden_neurons[positive],
                             _repeat_schedule(config.schedule, repeat))
    except mlp.TrainingError as exc:
        raise mlp.TrainingError(f"repeat {repeat}: {exc}") from exc
    timing["mlp"] = time.perf_counter() - t0
    return FittedRepeat(train, test, tree, model, timing)


def _repeat_schedule(schedule: TrainSchedule, repeat: int) -> TrainSchedule:
    return TrainSchedule(schedule.bp_epochs, schedule.bp_learning_rate, schedule.cg_epochs,
                         derive_seed(schedule.seed, repeat))


def _score(report: ClassReport, fit: FittedRepeat):
    y = fit.test.targets
    dt_pred = fit.tree.predict(fit.test.raw_columns)
    nn_pred = mlp.predict_binary(fit.model, fit.test.features)
    report.dt_accuracy.append(accuracy(dt_pred, y))
    report.nn_accuracy.append(accuracy(nn_pred, y))
    report.dt_confusion.append(confusion(dt_pred, y))
    report.nn_confusion.append(confusion(nn_pred, y))
    report.test_rows.append(len(y))
    report.tree_nodes.append(fit.tree.node_count)
    report.timing.append(fit.timing)


def run_one_vs_all(ds: EncodedDataset, positive: InjurySeverity, config: ExperimentConfig,
                   splits=None) -> ClassReport:
    positive = InjurySeverity(positive)
    report = ClassReport(positive, int(config.hidden_neurons[positive]))
    for r in range(config.repeats):
        train, test = splits[r] if splits is not None else repeat_split(ds, config, r)
        _score(report, fit_repeat(train, test, positive, config, r))
    return report


def check_classes(ds: EncodedDataset):
    present = set(np.unique(ds.severity).tolist())
    missing = [c.token for c in InjurySeverity if int(c) not in present]
    if missing:
        raise DataPreconditionError(f"classes absent from the data: {', '.join(missing)}")


def run_all(ds: EncodedDataset, config: ExperimentConfig) -> ResultsTable:
    """Five paired one-against-all experiments sharing each repeat's test rows."""
    check_classes(ds)
    splits = [repeat_split(ds, config, r) for r in range(config.repeats)]
    reports = tuple(run_one_vs_all(ds, c, config, splits) for c in InjurySeverity)
    provenance = {
        "config_hash": config.fingerprint(),
        "dataset_fingerprint": dataset_fingerprint(ds),
        "rows": len(ds),
        "repeats": config.repeats,
        "split_seed": config.split.seed,
        "schedule_seed": config.schedule.seed,
        "repeat_split_seeds": [derive_seed(config.split.seed, r) for r in range(config.repeats)],
        "test_fraction": config.split.test_fraction,
        "pairing": "all five classes share each repeat's test rows",
    }
    return ResultsTable(reports, provenance)


# -- sensitivity --------------------------------------------------------------

@dataclass
class VariableScore:
    name: str
    tree_permutation: float
    nn_permutation: float
    tree_importance: float


@dataclass
class SensitivityReport:
    positive: InjurySeverity
    scores: list  # ranked by tree permutation drop
    provenance: dict


def permutation_drops(fit: FittedRepeat, config: ExperimentConfig, repeat: int):
    """Mean accuracy drop (points) per model field over seeded permutations."""
    test = fit.test
    y = test.targets
    table = Table(test.raw_columns, fit.tree.variables)
    base_dt = accuracy(fit.tree.predict(table), y)
    base_nn = accuracy(mlp.predict_binary(fit.model, test.features), y)
    tree_drop, nn_drop = {}, {}
    for j, name in enumerate(MODEL_FIELDS):
        cols = test.encoder.field_columns(name)
        dt, nn = [], []
        for p in range(config.permutations):
            rng = np.random.default_rng(derive_seed(config.split.seed, repeat, 2, j, p))
            perm = rng.permutation(len(y))
            dt.append(base_dt - accuracy(fit.tree.predict(table.permuted(j, perm)), y))
            x = test.features.copy()
            x[:, cols] = x[perm][:, cols]
            nn.append(base_nn - accuracy(mlp.predict_binary(fit.model, x), y))
        tree_drop[name] = float(np.mean(dt))
        nn_drop[name] = float(np.mean(nn))
    return tree_drop, nn_drop


def sensitivity(ds: EncodedDataset, positive: InjurySeverity, config: ExperimentConfig) -> SensitivityReport:
    positive = InjurySeverity(positive)
    check_classes(ds)
    sums = {name: np.zeros(3) for name in MODEL_FIELDS}
    for r in range(config.repeats):
        train, test = repeat_split(ds, config, r)
        fit = fit_repeat(train, test, positive, config, r)
        tree_drop, nn_drop = permutation_drops(fit, config, r)
        imp = cart.importance(fit.tree)
        for name in MODEL_FIELDS:
            sums[name] += (tree_drop[name], nn_drop[name], imp[name])
    scores = [VariableScore(name, *(float(v) for v in sums[name] / config.repeats)) for name in MODEL_FIELDS]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i].tree_permutation, i))
    provenance = {
        "config_hash": config.fingerprint(),
        "dataset_fingerprint": dataset_fingerprint(ds),
        "repeats": config.repeats,
        "permutations": config.permutations,
    }
    return SensitivityReport(positive, [scores[i] for i in order], provenance)


# -- rendering ----------------------------------------------------------------

_BOLD, _RESET = "\x1b[1m", "\x1b[0m"


def _fmt(mean_sd) -> str:
    return f"{mean_sd[0]:6.2f} ± {mean_sd[1]:5.2f}"


def render_text(table: ResultsTable, color: bool = False) -> str:
    b, r = (_BOLD, _RESET) if color else ("", "")
    w = 28
    repeats = table.provenance["repeats"]
    lines = [
        f"{b}Test results for the different approaches{r}",
        f"one-against-all; accuracy mean ± sd over {repeats} seeded repeat(s); "
        "all classes scored on the same test rows",
        "",
        f"{b}{'Injury Class':<{w}}{'ANN':<34}{'DT'}{r}",
        f"{b}{'':<{w}}{'# Hidden Neurons':<18}{'Accuracy (%)':<16}{'Accuracy (%)'}{r}",
    ]
    for rep in table.reports:
        label = rep.positive.label + ":"
        lines.append(f"{label:<{w}}{rep.hidden_neurons:<18d}{_fmt(rep.nn_mean_sd):<16}{_fmt(rep.dt_mean_sd)}")
    lines += [
        "",
        f"{b}Published reference values (paper-reported, not reproduced on this data){r}",
        f"{'Injury Class':<{w}}{'# Hidden Neurons':<18}{'ANN Accuracy (%)':<18}{'DT Accuracy (%)'}",
    ]
    for cls, (hidden, ann, dt) in PUBLISHED.items():
        lines.append(f"{cls.label + ':':<{w}}{hidden:<18}{ann:<18}{dt}")
    lines += ["", f"{b}Provenance{r}"]
    for key in sorted(table.provenance):
        lines.append(f"  {key:<22}{table.provenance[key]}")
    return "\n".join(lines) + "\n"


def render_records(table: ResultsTable) -> str:
    out = []
    for rep in table.reports:
        nn, dt = rep.nn_mean_sd, rep.dt_mean_sd
        out.append({
            "record": "class",
            "class": rep.positive.token,
            "label": rep.positive.label,
            "hidden_neurons": rep.hidden_neurons,
            "nn_accuracy_mean": nn[0],
            "nn_accuracy_sd": nn[1],
            "dt_accuracy_mean": dt[0],
            "dt_accuracy_sd": dt[1],
            "nn_accuracy": rep.nn_accuracy,
            "dt_accuracy": rep.dt_accuracy,
            "nn_confusion": [list(c) for c in rep.nn_confusion],
            "dt_confusion": [list(c) for c in rep.dt_confusion],
            "test_rows": rep.test_rows,
            "tree_nodes": rep.tree_nodes,
        })
    for cls, (hidden, ann, dt) in PUBLISHED.items():
        out.append({"record": "reference", "status": "paper-reported, not reproduced",
                    "class": cls.token, "hidden_neurons": int(hidden),
                    "nn_accuracy": float(ann), "dt_accuracy": float(dt)})
    out.append({"record": "provenance", **table.provenance})
    return "".join(json.dumps(o, sort_keys=True) + "\n" for o in out)


def render_sensitivity_text(rep: SensitivityReport, color: bool = False) -> str:
    b, r = (_BOLD, _RESET) if color else ("", "")
    lines = [
        f"{b}Variable sensitivity for {rep.positive.label} (one-against-all){r}",
        f"permutation scores: mean test-accuracy drop in points over "
        f"{rep.provenance['permutations']} permutations x {rep.provenance['repeats']} repeat(s)",
        "",
        f"{b}{'Rank':<6}{'Variable':<20}{'DT permutation':>16}{'ANN permutation':>17}{'DT split importance':>21}{r}",
    ]
    for i, s in enumerate(rep.scores, 1):
        lines.append(f"{i:<6}{s.name:<20}{s.tree_permutation:>16.3f}{s.nn_permutation:>17.3f}{s.tree_importance:>21.2f}")
    lines += ["", f"{b}Provenance{r}"]
    for key in sorted(rep.provenance):
        lines.append(f"  {key:<22}{rep.provenance[key]}")
    return "\n".join(lines) + "\n"


def render_sensitivity_records(rep: SensitivityReport) -> str:
    out = [
        {"record": "variable", "class": rep.positive.token, "rank": i, "variable": s.name,
         "tree_permutation": s.tree_permutation, "nn_permutation": s.nn_permutation,
         "tree_importance": s.tree_importance}
        for i, s in enumerate(rep.scores, 1)
    ]
    out.append({"record": "provenance", **rep.provenance})
    return "".join(json.dumps(o, sort_keys=True) + "\n" for o in out)
