"""The query-limited hard-label attack: shifted-Gaussian latent sampling,
perturbation clipping, the candidate/query loop, a random-noise baseline,
and the ASR / query-count metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tff
from .data import Dataset
from .flow import FlowConfig, FlowModel, LatentVec
from .models import (
    BudgetExceededError,
    QueryOracle,
    SmallCNN,
    condition_features,
    predict_labels,
)
from .tensor import Prng, Tensor, no_grad

SIGMA_FLOOR = 1e-3


@dataclass
class GaussianStats:
    """Elementwise mean/std of the encoded training adversarial examples."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, np.float32).reshape(-1)
        self.sigma = np.asarray(self.sigma, np.float32).reshape(-1)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu/sigma length mismatch")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive everywhere")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def standard(cls, dim: int) -> "GaussianStats":
        return cls(np.zeros(dim, np.float32), np.ones(dim, np.float32))

    def save(self, path) -> None:
        tff.save_container(path, {"kind": "latent_stats", "dim": self.dim},
                           [("mu", self.mu), ("sigma", self.sigma)])

    @classmethod
    def load(cls, path) -> "GaussianStats":
        meta, tensors = tff.load_container(path)
        if meta.get("kind") != "latent_stats":
            raise tff.FormatError(f"not a stats file: {meta.get('kind')}")
        named = dict(tensors)
        return cls(named["mu"], named["sigma"])


def compute_latent_stats(
    flow: FlowModel,
    pairs,
    condition_net: SmallCNN,
    batch_size: int = 128,
    scalar_mode: bool = False,
) -> GaussianStats:
    """Encode every training adversarial example and take elementwise mean and
    population std of the flattened latents (std floored at 1e-3).

    scalar_mode collapses both statistics to single values over all dims.
    """
    if len(pairs) == 0:
        raise ValueError("cannot compute latent statistics from an empty pair set")
    flats = []
    with no_grad():
        for lo in range(0, len(pairs), batch_size):
            clean = pairs.clean[lo : lo + batch_size]
            adv = pairs.adversarial[lo : lo + batch_size]
            cond = condition_features(condition_net, clean)
            z, _ = flow.encode(Tensor(adv), cond)
            flats.append(z.flatten().data)
    latents = np.concatenate(flats, axis=0)
    if scalar_mode:
        mu = np.full(latents.shape[1], latents.mean(), np.float32)
        sigma = np.full(latents.shape[1], latents.std(), np.float32)
    else:
        mu = latents.mean(axis=0)
        sigma = latents.std(axis=0)
    return GaussianStats(mu, np.maximum(sigma, SIGMA_FLOOR))


def sample_latent(stats: GaussianStats, prng: Prng, config: FlowConfig) -> LatentVec:
    """One draw z = mu + sigma * n, unflattened into the flow layout."""
    flat = stats.mu + stats.sigma * prng.normal((stats.dim,))
    return LatentVec.unflatten(Tensor(flat[None, :]), config)


def clip_adversarial(x_gen: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Nested clip: perturbation into [-eps, eps], result into [0, 1]."""
    return np.clip(x + np.clip(x_gen - x, -epsilon, epsilon), 0.0, 1.0)


@dataclass
class AttackRecord:
    example_id: int
    label: int
    success: bool
    queries_used: int
    adversarial: np.ndarray | None = None


def run_query_loop(candidates, oracle: QueryOracle, clean_label: int, budget: int):
    """Query candidates one at a time until misclassification or exhaustion.

    The oracle's own budget exhausting mid-loop is the failure path, not an
    error. Returns (success, queries_used, adversarial-or-None).
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    for q in range(1, budget + 1):
        cand = next(candidates)
        try:
            pred = oracle.hard_label(cand)
        except BudgetExceededError:
            return False, q - 1, None
        if pred != clean_label:
            return True, q, cand
    return False, budget, None


def dta_candidates(
    flow: FlowModel,
    stats: GaussianStats,
    cond: Tensor,
    clean: np.ndarray,
    epsilon: float,
    prng: Prng,
    block: int = 8,
):
    """Clipped flow samples, decoded in small blocks; semantics stay one
    candidate per draw, in draw order."""
    cond_block = Tensor(np.repeat(cond.data, block, axis=0))
    while True:
        zs = [stats.mu + stats.sigma * prng.normal((stats.dim,)) for _ in range(block)]
        flat = Tensor(np.stack(zs))
        with no_grad():
            x_gen = flow.decode(LatentVec.unflatten(flat, flow.config), cond_block)
        for i in range(block):
            yield clip_adversarial(x_gen.data[i], clean, epsilon)


def dta_attack(
    flow: FlowModel,
    stats: GaussianStats,
    condition_net: SmallCNN,
    oracle: QueryOracle,
    example,
    epsilon: float,
    budget: int,
    prng: Prng,
    example_id: int = 0,
) -> AttackRecord:
    """The generative attack loop for one (eligible) example: sample a latent,
    decode with the example's condition features, clip, query."""
    clean = example.image
    cond = condition_features(condition_net, clean[None])
    gen = dta_candidates(flow, stats, cond, clean, epsilon, prng)
    success, queries, adv = run_query_loop(gen, oracle, example.label, budget)
    return AttackRecord(example_id, example.label, success, queries, adv)


def noise_candidates(clean: np.ndarray, epsilon: float, prng: Prng):
    """Uniform sign-noise candidates at the full budget radius."""
    while True:
        yield np.clip(clean + epsilon * prng.choice_signs(clean.shape), 0.0, 1.0)


def random_noise_baseline(
    oracle: QueryOracle,
    example,
    epsilon: float,
    budget: int,
    prng: Prng,
    example_id: int = 0,
) -> AttackRecord:
    gen = noise_candidates(example.image, epsilon, prng)
    success, queries, adv = run_query_loop(gen, oracle, example.label, budget)
    return AttackRecord(example_id, example.label, success, queries, adv)


def attack_dataset(
    dataset: Dataset,
    target: SmallCNN,
    budget: int,
    seed: int,
    method: str = "dta",
    flow: FlowModel | None = None,
    stats: GaussianStats | None = None,
    condition_net: SmallCNN | None = None,
    epsilon: float = 16 / 255,
    limit: int | None = None,
    count_eligibility_query: bool = False,
) -> tuple[list[AttackRecord], int]:
    """Attack the first `limit` eligible examples of a dataset.

    The clean-classification eligibility check runs outside the query budget
    (set count_eligibility_query to spend a query on it instead). Returns the
    records plus the number of skipped (misclassified) examples.
    """
    if method == "dta" and (flow is None or stats is None or condition_net is None):
        raise ValueError("dta attacks need flow, stats and condition_net")
    n = len(dataset) if limit is None else min(limit, len(dataset))
    oracle = QueryOracle(target)
    records: list[AttackRecord] = []
    skipped = 0
    eligible_labels = predict_labels(target, dataset.images[:n])
    for i in range(n):
        example = dataset[i]
        if count_eligibility_query:
            eligible = oracle.hard_label(example.image) == example.label
        else:
            eligible = int(eligible_labels[i]) == example.label
        if not eligible:
            skipped += 1
            continue
        prng = Prng.from_path(seed, "attack", i)
        if method == "dta":
            rec = dta_attack(
                flow, stats, condition_net, oracle, example, epsilon, budget, prng, i
            )
        elif method == "noise":
            rec = random_noise_baseline(oracle, example, epsilon, budget, prng, i)
        else:
            raise ValueError(f"unknown attack method {method!r}")
        records.append(rec)
    return records, skipped


# ---- metrics -----------------------------------------------------------------


HISTOGRAM_BUCKETS = 20


@dataclass
class MetricsReport:
    budgets: list[int]
    n_records: int
    asr: dict[int, float]
    avg_query: dict[int, float | None]
    med_query: dict[int, float | None]
    histogram: list[tuple[int, int, int]]  # (lo, hi, count) over success queries

    def to_json_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "budgets": list(self.budgets),
            "per_budget": {
                str(b): {
                    "asr": self.asr[b],
                    "avg_query": self.avg_query[b],
                    "med_query": self.med_query[b],
                }
                for b in self.budgets
            },
            "histogram": [
                {"lo": lo, "hi": hi, "count": count} for lo, hi, count in self.histogram
            ],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    def csv_rows(self, label: str) -> list[str]:
        cells = [label]
        for b in self.budgets:
            cells.append(f"{100 * self.asr[b]:.2f}")
        for b in self.budgets:
            v = self.avg_query[b]
            cells.append("-" if v is None else f"{v:.2f}")
        for b in self.budgets:
            v = self.med_query[b]
            cells.append("-" if v is None else f"{v:g}")
        return cells


def evaluate(records: list[AttackRecord], budgets: list[int]) -> MetricsReport:
    """ASR plus average/median query counts (over successes) at each budget."""
    if not records:
        raise ValueError("no attack records to evaluate")
    budgets = sorted(budgets)
    max_budget = budgets[-1]
    if any(r.queries_used > max_budget for r in records):
        raise ValueError("records exceed the largest requested budget")
    asr: dict[int, float] = {}
    avg_q: dict[int, float | None] = {}
    med_q: dict[int, float | None] = {}
    for b in budgets:
        wins = [r.queries_used for r in records if r.success and r.queries_used <= b]
        asr[b] = len(wins) / len(records)
        avg_q[b] = float(np.mean(wins)) if wins else None
        med_q[b] = float(np.median(wins)) if wins else None
    success_q = [r.queries_used for r in records if r.success]
    edges = np.linspace(1, max_budget + 1, HISTOGRAM_BUCKETS + 1)
    counts, _ = np.histogram(success_q, bins=edges)
    histogram = [
        (int(np.ceil(edges[i])), int(np.ceil(edges[i + 1]) - 1), int(counts[i]))
        for i in range(HISTOGRAM_BUCKETS)
    ]
    return MetricsReport(budgets, len(records), asr, avg_q, med_q, histogram)


def metrics_table(reports: dict[str, MetricsReport], budgets: list[int]) -> str:
    """CSV with one row per method: ASR / Avg.Q / Med.Q columns per budget."""
    header = (
        ["method"]
        + [f"asr@{b}" for b in budgets]
        + [f"avg_q@{b}" for b in budgets]
        + [f"med_q@{b}" for b in budgets]
    )
    lines = [",".join(header)]
    for label, report in reports.items():
        lines.append(",".join(report.csv_rows(label)))
    return "\n".join(lines) + "\n"


def transfer_matrix(
    records_by_source: dict[str, list[AttackRecord]],
    targets: dict[str, SmallCNN],
) -> tuple[list[str], list[str], np.ndarray]:
    """Fraction of source-successful adversarial images misclassified by each
    target model. The diagonal is 1.0 by construction."""
    source_names = list(records_by_source)
    target_names = list(targets)
    matrix = np.zeros((len(source_names), len(target_names)))
    for i, src in enumerate(source_names):
        wins = [r for r in records_by_source[src] if r.success]
        if not wins:
            raise ValueError(f"no successful records for source {src!r}")
        advs = np.stack([r.adversarial for r in wins])
        labels = np.array([r.label for r in wins])
        for j, tgt in enumerate(target_names):
            preds = predict_labels(targets[tgt], advs)
            matrix[i, j] = float(np.mean(preds != labels))
    return source_names, target_names, matrix


def transfer_matrix_csv(source_names, target_names, matrix) -> str:
    lines = ["source\\target," + ",".join(target_names)]
    for i, src in enumerate(source_names):
        lines.append(src + "," + ",".join(f"{100 * v:.2f}" for v in matrix[i]))
    return "\n".join(lines) + "\n"


def evasion_rate(
    flow: FlowModel,
    stats: GaussianStats,
    condition_net: SmallCNN,
    oracle: QueryOracle,
    images: np.ndarray,
    epsilon: float,
    budget: int,
    seed: int,
) -> tuple[float, list[AttackRecord]]:
    """Label-free attack success: the oracle's clean and adversarial outputs
    differ. Uses the same candidate/query loop as the labeled attack."""
    records = []
    clean_labels = predict_labels(oracle.model, images)
    for i in range(images.shape[0]):
        clean = images[i]
        prng = Prng.from_path(seed, "evasion", i)
        cond = condition_features(condition_net, clean[None])
        gen = dta_candidates(flow, stats, cond, clean, epsilon, prng)
        success, queries, adv = run_query_loop(gen, oracle, int(clean_labels[i]), budget)
        records.append(AttackRecord(i, int(clean_labels[i]), success, queries, adv))
    rate = float(np.mean([r.success for r in records])) if records else 0.0
    return rate, records
