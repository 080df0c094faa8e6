"""Weighted cross-entropy training, metrics, k-fold runner and ablation grid."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.metrics import f1_score, precision_recall_fscore_support, roc_auc_score

from .encoder import backward, draw_permutations, forward, Layout
from .params import N_CLASSES, ModelConfig, ModelParams, init_params
from .records import Cohort, PreprocessConfig, preprocess
from .sequencer import FoldAssignment, build_sequences, kfold_split, observations_by_patient, synchronize
from .tokenizer import ENCODINGS, SampleInput, sample_sources

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    eval_seed: int = 1234
    K: int = 4
    train_policy: str = "all-eligible-queries"
    eval_policy: str = "all-eligible-queries"
    # "constant" or "linear" (decay to zero over the run)
    lr_schedule: str = "constant"
    # half-width of the log-uniform joint rescaling of a sample's accelerometer inputs
    scale_augment: float = 0.0
    # random 3-D rotation of the accelerometer axes, shared by a sample's records
    rotation_augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.scale_augment < 0:
            raise ValueError("scale_augment must be >= 0")

    def lr_at(self, progress: float) -> float:
        """Learning rate after ``progress`` (0..1) of the run."""
        if self.lr_schedule == "linear":
            return self.learning_rate * max(1.0 - progress, 0.0)
        return self.learning_rate


# -- loss -------------------------------------------------------------------

def class_weights(labels: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights over the classes present in the batch.

    ``w_c = n / (n_present * n_c)``, so the count-weighted mean of present
    weights is 1; absent classes get 0.
    """
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=N_CLASSES).astype(float)
    n = counts.sum()
    present = counts > 0
    w = np.zeros(N_CLASSES)
    w[present] = n / (present.sum() * counts[present])
    return w


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, labels, weights) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    logp = log_softmax(logits)[np.arange(len(labels)), labels]
    return float(-(np.asarray(weights)[labels] * logp).sum() / len(labels))


def cross_entropy_grad(logits, labels, weights) -> np.ndarray:
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=int)
    probs = np.exp(log_softmax(logits))
    probs[np.arange(len(labels)), labels] -= 1.0
    return probs * (np.asarray(weights)[labels] / len(labels))[:, None]


# -- gradients --------------------------------------------------------------

def sample_permutations(batch, config: ModelConfig, rng):
    return [draw_permutations(Layout.of(inp), config, rng) for inp in batch]


def batch_loss(batch, params: ModelParams, config: ModelConfig, perms, weights=None) -> float:
    logits = np.array([forward(inp, params, config, perms=pm).logits for inp, pm in zip(batch, perms)])
    labels = [inp.label for inp in batch]
    if weights is None:
        weights = class_weights(labels)
    return weighted_cross_entropy(logits, labels, weights)


@dataclass
class GradientResult:
    loss: float
    grads: ModelParams
    logits: np.ndarray
    input_grads: Optional[list] = None


def compute_gradients(batch, params: ModelParams, config: ModelConfig,
                      rng: Optional[np.random.Generator] = None, perms=None, weights=None,
                      want_inputs: bool = False) -> GradientResult:
    """Loss and exact reverse-mode gradients of the mean batch loss.

    Shuffle permutations are drawn once from ``rng`` (or taken from ``perms``)
    and held fixed for the call.
    """
    if perms is None:
        perms = sample_permutations(batch, config, rng)
    results = [forward(inp, params, config, perms=pm, keep_cache=True)
               for inp, pm in zip(batch, perms)]
    logits = np.array([r.logits for r in results])
    labels = [inp.label for inp in batch]
    if weights is None:
        weights = class_weights(labels)
    loss = weighted_cross_entropy(logits, labels, weights)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    dlogits = cross_entropy_grad(logits, labels, weights)
    grads = params.zeros_like()
    input_grads = []
    for i, (inp, res) in enumerate(zip(batch, results)):
        ig = backward(dlogits[i], res, inp, params, config, grads, want_inputs)
        input_grads.append(ig)
    return GradientResult(loss, grads, logits, input_grads if want_inputs else None)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: Optional[ModelParams] = None
    v: Optional[ModelParams] = None

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamWState":
        return cls(0, params.zeros_like(), params.zeros_like())


def optimizer_step(params: ModelParams, grads: ModelParams, state: AdamWState,
                   config: TrainConfig, lr: Optional[float] = None) -> AdamWState:
    """AdamW with decoupled weight decay and bias correction; updates ``params`` in place."""
    if state.m is None:
        state = AdamWState.zeros(params)
    t = state.step + 1
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, w in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w *= 1.0 - lr * config.weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    state.step = t
    return state


# -- data -------------------------------------------------------------------

class SeriesCache:
    """Preprocessed (L_m, C_m) inputs, computed once per record."""

    def __init__(self, model_config: ModelConfig, preprocess_config=PreprocessConfig()):
        self.lengths = model_config.tokenizer.lengths
        self.preprocess_config = preprocess_config
        self._cache = {}

    def __call__(self, record):
        key = id(record)
        hit = self._cache.get(key)
        if hit is None:
            hit = (record, preprocess(record, self.preprocess_config, self.lengths))
            self._cache[key] = hit
        return hit[1]


def age_bucket(age) -> Optional[str]:
    """Five-year buckets: [45,50], (50,55], ..., (75,+)."""
    if age is None:
        return None
    if age <= 50:
        return "[45,50]"
    lo = min(50 + 5 * math.floor((float(age) - 50 - 1e-9) / 5), 75)
    return f"({lo},+)" if lo == 75 else f"({lo},{lo + 5}]"


class PatientData:
    """Synchronized observations and preprocessed series for a cohort."""

    def __init__(self, cohort: Cohort, model_config: ModelConfig,
                 preprocess_config=PreprocessConfig()):
        self.cohort = cohort
        self.observations = observations_by_patient(synchronize(cohort.all_records()))
        self.series = SeriesCache(model_config, preprocess_config)

    def inputs(self, patients, model_config: ModelConfig, K: int, policy: str, history: str,
               rng=None):
        obs = {p: self.observations[p] for p in patients if p in self.observations}
        seqs = build_sequences(obs, K=K, policy=policy, rng=rng, history=history)
        out = []
        for s in seqs.samples:
            inp = sample_sources(s, model_config.tokenizer, self.series,
                                 with_history=model_config.sequence_modeling)
            demo = self.cohort.demographics(s.patient_id)
            inp.meta["age_bucket"] = age_bucket(demo["age"])
            inp.meta["same_label_history"] = sum(
                int(o.status) == int(s.label) for o in s.history)
            out.append(inp)
        return out


# -- train / predict --------------------------------------------------------

def rescale(inp: SampleInput, factor: float) -> SampleInput:
    """Scale every accelerometer source of a sample by the same factor.

    Status then has to be read from amplitude relative to the history, not
    from absolute amplitude.
    """
    sources = [replace(s, segments=s.segments * factor) if s.modality.is_accelerometer else s
               for s in inp.sources]
    return replace(inp, sources=sources)


def rotate(inp: SampleInput, R: np.ndarray) -> SampleInput:
    """Apply one 3x3 axis rotation to every accelerometer source of a sample.

    Segments are time-major with the 3 axes innermost. Band energies are
    unchanged, but the per-patient mix of axes no longer identifies the patient.
    """
    def turn(seg):
        return (seg.reshape(-1, 3) @ R.T).reshape(seg.shape)

    sources = [replace(s, segments=turn(s.segments)) if s.modality.is_accelerometer else s
               for s in inp.sources]
    return replace(inp, sources=sources)


def augment(inp: SampleInput, config: TrainConfig, rng: np.random.Generator) -> SampleInput:
    if config.scale_augment > 0:
        a = config.scale_augment
        inp = rescale(inp, math.exp(rng.uniform(-a, a)))
    if config.rotation_augment:
        inp = rotate(inp, Rotation.random(random_state=rng).as_matrix())
    return inp


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)


def train(dataset: Union[Sequence, Callable], model_config: ModelConfig, config: TrainConfig,
          params: Optional[ModelParams] = None) -> TrainResult:
    """Minibatch AdamW training.

    ``dataset`` is a list of sample inputs, or a callable ``(epoch, rng)`` that
    returns the inputs for one epoch (used to redraw histories per epoch).
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(model_config, rng)
    state = AdamWState.zeros(params)
    history = []
    steps_done, total_steps = 0, None
    for epoch in range(config.epochs):
        samples = dataset(epoch, rng) if callable(dataset) else dataset
        if not samples:
            raise ValueError("empty training set")
        order = rng.permutation(len(samples))
        n_batches = -(-len(order) // config.batch_size)
        if total_steps is None:
            total_steps = n_batches * config.epochs
        losses, correct = [], 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            if config.scale_augment > 0 or config.rotation_augment:
                batch = [augment(s, config, rng) for s in batch]
            try:
                res = compute_gradients(batch, params, model_config, rng=rng)
            except (DivergenceError, FloatingPointError) as exc:
                raise DivergenceError(f"diverged at epoch {epoch}, batch {b}: {exc}") from None
            state = optimizer_step(params, res.grads, state, config,
                                   lr=config.lr_at(steps_done / total_steps))
            steps_done += 1
            losses.append(res.loss * len(batch))
            correct += int((res.logits.argmax(axis=1) == [s.label for s in batch]).sum())
        history.append({
            "epoch": epoch,
            "loss": float(np.sum(losses) / len(samples)),
            "accuracy": correct / len(samples),
            "samples": len(samples),
        })
        logger.info("epoch %d loss %.4f acc %.3f", epoch, history[-1]["loss"],
                    history[-1]["accuracy"])
    return TrainResult(params, history)


def predict_proba(params: ModelParams, inputs, model_config: ModelConfig,
                  eval_seed: int = 1234) -> np.ndarray:
    """Class probabilities; each sample's shuffles come from a generator seeded with ``eval_seed``."""
    out = np.zeros((len(inputs), N_CLASSES))
    for i, inp in enumerate(inputs):
        logits = forward(inp, params, model_config, rng=np.random.default_rng(eval_seed)).logits
        out[i] = np.exp(log_softmax(logits))
    return out


# -- metrics ----------------------------------------------------------------

@dataclass
class Metrics:
    n: int
    accuracy: float
    macro_f1: float
    auc: Optional[float]
    class_auc: list
    precision: list
    recall: list
    groups: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["groups"] = {k: v.to_json() for k, v in self.groups.items()}
        return out


def one_vs_rest_auc(labels, scores) -> tuple[Optional[float], list]:
    """Per-class ROC AUC (class vs rest) and their mean over classes where it is defined."""
    labels = np.asarray(labels)
    per_class = []
    for c in range(N_CLASSES):
        pos = labels == c
        if pos.all() or not pos.any():
            per_class.append(None)
        else:
            per_class.append(float(roc_auc_score(pos, scores[:, c])))
    defined = [a for a in per_class if a is not None]
    return (float(np.mean(defined)) if defined else None), per_class


def compute_metrics(labels, probs, groups=None) -> Metrics:
    labels = np.asarray(labels, dtype=int)
    probs = np.asarray(probs, dtype=float)
    pred = probs.argmax(axis=1)
    classes = list(range(N_CLASSES))
    prec, rec, _, _ = precision_recall_fscore_support(labels, pred, labels=classes,
                                                      zero_division=0)
    present = sorted(set(labels.tolist()) | set(pred.tolist()))
    f1 = f1_score(labels, pred, labels=present, average="macro", zero_division=0)
    auc, per_class = one_vs_rest_auc(labels, probs)
    metrics = Metrics(len(labels), float((pred == labels).mean()), float(f1), auc, per_class,
                      prec.tolist(), rec.tolist())
    if groups is not None:
        groups = np.asarray(groups, dtype=object)
        for key in sorted({g for g in groups if g is not None}, key=str):
            mask = groups == key
            metrics.groups[str(key)] = compute_metrics(labels[mask], probs[mask])
    return metrics


def evaluate(params: ModelParams, inputs, model_config: ModelConfig, eval_seed: int = 1234,
             group_by: Optional[str] = None) -> tuple[Metrics, np.ndarray]:
    if not inputs:
        raise ValueError("empty evaluation set")
    probs = predict_proba(params, inputs, model_config, eval_seed)
    labels = [inp.label for inp in inputs]
    groups = [inp.meta.get(group_by) for inp in inputs] if group_by else None
    return compute_metrics(labels, probs, groups), probs


# -- experiments ------------------------------------------------------------

def _epoch_sampler(data: PatientData, patients, model_config, config: TrainConfig):
    if config.train_policy == "last-as-query":
        fixed = data.inputs(patients, model_config, config.K, "last-as-query", "recent")
        return fixed

    def sample(epoch, rng):
        return data.inputs(patients, model_config, config.K, config.train_policy, "random", rng)
    return sample


@dataclass
class FoldResult:
    fold: int
    train_patients: list
    test_patients: list
    metrics: Metrics
    history: list
    predictions: list


@dataclass
class KFoldResult:
    folds: list
    summary: dict

    def predictions(self) -> list:
        return [row for f in self.folds for row in f.predictions]


def summarize(metric_list: Sequence[Metrics]) -> dict:
    out = {}
    for key in ("accuracy", "macro_f1", "auc"):
        vals = [getattr(m, key) for m in metric_list if getattr(m, key) is not None]
        out[key] = {"mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None}
    return out


def prediction_rows(inputs, probs, fold=None) -> list[dict]:
    rows = []
    for inp, pr in zip(inputs, probs):
        rows.append({
            "fold": fold,
            "patient_id": inp.meta["patient_id"],
            "query_time": inp.meta["query_time"],
            "label": inp.label,
            "pred": int(np.argmax(pr)),
            "p0": float(pr[0]), "p1": float(pr[1]), "p2": float(pr[2]),
            "age_bucket": inp.meta.get("age_bucket"),
            "same_label_history": inp.meta.get("same_label_history"),
        })
    return rows


def run_kfold(cohort: Cohort, model_config: ModelConfig, config: TrainConfig, folds: int = 5,
              assignment: Optional[FoldAssignment] = None, data: Optional[PatientData] = None,
              group_by: Optional[str] = None) -> KFoldResult:
    if assignment is None:
        assignment = kfold_split(cohort, folds, config.seed)
    if data is None:
        data = PatientData(cohort, model_config)
    results = []
    for fold in range(assignment.folds):
        test = assignment.patients_in(fold)
        train_p = [p for p in cohort.patients if assignment.assignment[p] != fold]
        if set(test) & set(train_p):
            raise AssertionError(f"fold {fold}: train/test patient overlap")
        fold_cfg = replace(config, seed=config.seed + fold)
        trained = train(_epoch_sampler(data, train_p, model_config, fold_cfg), model_config, fold_cfg)
        eval_inputs = data.inputs(test, model_config, config.K, config.eval_policy, "recent")
        metrics, probs = evaluate(trained.params, eval_inputs, model_config, config.eval_seed,
                                  group_by)
        logger.info("fold %d: auc %s acc %.3f", fold, metrics.auc, metrics.accuracy)
        results.append(FoldResult(fold, train_p, test, metrics, trained.history,
                                  prediction_rows(eval_inputs, probs, fold)))
    return KFoldResult(results, summarize([r.metrics for r in results]))


# -- ablations --------------------------------------------------------------

ENCODING_STEPS = (
    ("none", ()),
    ("+status", ("status",)),
    ("+positional", ("status", "positional")),
    ("+modality", ("status", "positional", "modality")),
    ("+time", ("status", "positional", "modality", "time")),
)


def ablation_grid(base: ModelConfig) -> list[tuple[str, str, ModelConfig]]:
    """The 12 (axis, setting, config) rows: sequence, merge length, encodings, shuffle-merge."""
    enc = base.encoder
    rows = [
        ("sequence_modeling", "on", base.with_(sequence_modeling=True)),
        ("sequence_modeling", "off", base.with_(sequence_modeling=False)),
    ]
    for G in (1, 2, 4):
        rows.append(("merge_length", f"G={G}", base.with_(encoder=replace(enc, G=G))))
    for name, encs in ENCODING_STEPS:
        rows.append(("encodings", name, base.with_(encodings=encs)))
    rows.append(("shuffle_merge", "on", base.with_(encoder=replace(enc, shuffle=True, G=max(enc.G, 2)))))
    rows.append(("shuffle_merge", "off", base.with_(encoder=replace(enc, shuffle=False, G=1))))
    return rows


def same_model_family(a: ModelConfig, b: ModelConfig) -> bool:
    """True when two configs define the same function class.

    With G=1 nothing is merged, and attention plus mean pooling is
    permutation-equivariant, so the shuffle flag is irrelevant.
    """
    if a.encoder.G == 1 and b.encoder.G == 1:
        a = a.with_(encoder=replace(a.encoder, shuffle=False))
        b = b.with_(encoder=replace(b.encoder, shuffle=False))
    return a == b


def run_ablations(cohort: Cohort, base: ModelConfig, config: TrainConfig, folds: int = 5,
                  assignment: Optional[FoldAssignment] = None) -> list[dict]:
    if assignment is None:
        assignment = kfold_split(cohort, folds, config.seed)
    data = PatientData(cohort, base)
    done = []  # (config, summary) for configs already run
    rows = []
    for axis, setting, cfg in ablation_grid(base):
        summary = next((s for c, s in done if same_model_family(c, cfg)), None)
        if summary is None:
            summary = run_kfold(cohort, cfg, config, assignment=assignment, data=data).summary
            done.append((cfg, summary))
        rows.append({
            "axis": axis, "setting": setting,
            "sequence_modeling": cfg.sequence_modeling, "G": cfg.encoder.G,
            "shuffle": cfg.encoder.shuffle, "encodings": "+".join(cfg.encodings) or "none",
            **{f"{k}_{stat}": v[stat] for k, v in summary.items() for stat in ("mean", "std")},
        })
    return rows
