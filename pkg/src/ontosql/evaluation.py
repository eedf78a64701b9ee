"""Hierarchical ontology scoring.

Three matching modes per node category:

* literal — exact label equality.
* fuzzy — a predicted node counts as a true positive when its similarity to
  at least one gold node exceeds the threshold (strictly).
* continuous — stricter: per gold node only the single highest-similarity
  prediction above the threshold counts; extra predictions for the same gold
  node are false positives.

Categories are matched top-down: domains first, then the slot sets of
matched domain pairs, then the value sets of matched slot pairs; intents
and actions are flat sets.  Children of unmatched parents are excluded
from the counts on both sides (optionally, gold children can be counted
as false negatives instead).  Scores are reported per category plus a
macro average over the five categories and a micro average over pooled
counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

from .ontology import OntologyGraph
from .providers import CachedEmbedder, EmbeddingProvider, cosine_similarity

DEFAULT_THRESHOLD = 0.436

CATEGORIES = ("domains", "slots", "values", "user_intents", "system_actions")
MODES = ("literal", "fuzzy", "continuous")

SimFn = Callable[[str, str], float]


@dataclass
class MatchOutcome:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    # (predicted label, gold label) for matched predictions.
    mapping: list[tuple[str, str]] = field(default_factory=list)

    def add(self, other: "MatchOutcome") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.mapping.extend(other.mapping)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, harmonic F1; zero when a denominator is zero."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall
        else 0.0
    )
    return precision, recall, f1


def match_literal(pred: set[str], gold: set[str]) -> MatchOutcome:
    """Exact term matches only."""
    common = pred & gold
    return MatchOutcome(
        tp=len(common),
        fp=len(pred - gold),
        fn=len(gold - pred),
        mapping=sorted((label, label) for label in common),
    )


def match_fuzzy(pred: set[str], gold: set[str], sim: SimFn,
                threshold: float) -> MatchOutcome:
    """Every prediction with similarity strictly above the threshold to some
    gold node is a true positive; gold nodes no prediction clears are false
    negatives."""
    outcome = MatchOutcome()
    for p in sorted(pred):
        best_gold = None
        best_sim = None
        for g in sorted(gold):
            s = sim(p, g)
            if best_sim is None or s > best_sim:
                best_gold, best_sim = g, s
        if best_sim is not None and best_sim > threshold:
            outcome.tp += 1
            outcome.mapping.append((p, best_gold))
        else:
            outcome.fp += 1
    for g in sorted(gold):
        if not any(sim(p, g) > threshold for p in pred):
            outcome.fn += 1
    return outcome


def match_continuous(pred: set[str], gold: set[str], sim: SimFn,
                     threshold: float) -> MatchOutcome:
    """Per gold node, only the highest-similarity prediction above the
    threshold is a true positive (argmax ties broken by label order); all
    other predictions are false positives.  False negatives are as in the
    fuzzy mode."""
    # winner -> (similarity, gold) of its best win; one mapping entry per
    # winning prediction even when it is the argmax for several gold nodes.
    wins: dict[str, tuple[float, str]] = {}
    ordered_pred = sorted(pred)
    for g in sorted(gold):
        best_pred = None
        best_sim = None
        for p in ordered_pred:
            s = sim(p, g)
            if best_sim is None or s > best_sim:
                best_pred, best_sim = p, s
        if best_sim is not None and best_sim > threshold:
            held = wins.get(best_pred)
            if held is None or best_sim > held[0]:
                wins[best_pred] = (best_sim, g)
    fn = sum(
        1 for g in gold if not any(sim(p, g) > threshold for p in pred)
    )
    return MatchOutcome(
        tp=len(wins),
        fp=len(pred) - len(wins),
        fn=fn,
        mapping=sorted((p, g) for p, (_s, g) in wins.items()),
    )


def pair_for_gating(pred: set[str], gold: set[str], mode: str,
                    sim: SimFn | None, threshold: float
                    ) -> list[tuple[str, str]]:
    """One-to-one (predicted, gold) pairs used to gate the next level.

    Literal pairs are the exact matches.  Fuzzy/continuous pairing is greedy
    by descending similarity over pairs above the threshold, one gold per
    predicted node (and vice versa), ties broken by label order.
    """
    if mode == "literal":
        return sorted((label, label) for label in pred & gold)
    assert sim is not None
    candidates = []
    for p in sorted(pred):
        for g in sorted(gold):
            s = sim(p, g)
            if s > threshold:
                candidates.append((-s, p, g))
    candidates.sort()
    used_pred: set[str] = set()
    used_gold: set[str] = set()
    pairs = []
    for _neg, p, g in candidates:
        if p in used_pred or g in used_gold:
            continue
        used_pred.add(p)
        used_gold.add(g)
        pairs.append((p, g))
    return sorted(pairs)


@dataclass
class EvalReport:
    """Per-category precision/recall/F1 plus macro and micro rows, keyed by
    mode."""

    threshold: float
    # mode -> row name -> (precision, recall, f1)
    scores: dict[str, dict[str, tuple[float, float, float]]] = field(
        default_factory=dict
    )
    # mode -> category -> (tp, fp, fn)
    counts: dict[str, dict[str, tuple[int, int, int]]] = field(
        default_factory=dict
    )

    def merge(self, other: "EvalReport") -> None:
        self.scores.update(other.scores)
        self.counts.update(other.counts)

    def to_document(self) -> dict:
        return {
            "threshold": self.threshold,
            "scores": {
                mode: {
                    row: {"precision": p, "recall": r, "f1": f}
                    for row, (p, r, f) in rows.items()
                }
                for mode, rows in self.scores.items()
            },
            "counts": {
                mode: {
                    cat: {"tp": tp, "fp": fp, "fn": fn}
                    for cat, (tp, fp, fn) in rows.items()
                }
                for mode, rows in self.counts.items()
            },
        }

    def render_text(self) -> str:
        """Plain-text table: rows per category, mode-major P/R/F1 columns."""
        modes = [m for m in MODES if m in self.scores]
        header = ["category".ljust(16)]
        for mode in modes:
            header.append(f"{mode:^26}")
        lines = ["  ".join(header)]
        sub = [" " * 16] + [f"{'F1':>8}{'P':>9}{'R':>9}" for _ in modes]
        lines.append("  ".join(sub))
        for row in (*CATEGORIES, "macro", "micro"):
            cells = [row.ljust(16)]
            for mode in modes:
                p, r, f = self.scores[mode].get(row, (0.0, 0.0, 0.0))
                cells.append(f"{100 * f:8.2f}{100 * p:9.2f}{100 * r:9.2f}")
            lines.append("  ".join(cells))
        return "\n".join(lines)


def _matcher_for(mode: str, sim: SimFn | None, threshold: float
                 ) -> Callable[[set[str], set[str]], MatchOutcome]:
    if mode == "literal":
        return match_literal
    assert sim is not None
    if mode == "fuzzy":
        return lambda p, g: match_fuzzy(p, g, sim, threshold)
    if mode == "continuous":
        return lambda p, g: match_continuous(p, g, sim, threshold)
    raise ValueError(f"unknown mode {mode!r}")


def embedding_sim(embedder: EmbeddingProvider,
                  texts: Iterable[str]) -> SimFn:
    """Similarity function backed by (cached) embeddings of ``texts``."""
    cached = embedder if isinstance(embedder, CachedEmbedder) else CachedEmbedder(embedder)
    labels = sorted(set(texts))
    vectors = dict(zip(labels, cached.embed(labels))) if labels else {}

    def sim(a: str, b: str) -> float:
        return cosine_similarity(vectors[a], vectors[b])

    return sim


def category_match_counts(
    pred: OntologyGraph,
    gold: OntologyGraph,
    mode: str,
    sim: SimFn | None,
    threshold: float,
    unmatched_gold_children_as_fn: bool = False,
) -> dict[str, MatchOutcome]:
    """Top-down matching of the five categories with hierarchy gating."""
    matcher = _matcher_for(mode, sim, threshold)

    outcomes = {cat: MatchOutcome() for cat in CATEGORIES}
    outcomes["domains"] = matcher(pred.domains, gold.domains)
    domain_pairs = pair_for_gating(pred.domains, gold.domains, mode, sim,
                                   threshold)
    paired_gold_domains = {g for _p, g in domain_pairs}

    for pred_domain, gold_domain in domain_pairs:
        pred_slots = pred.slots.get(pred_domain, set())
        gold_slots = gold.slots.get(gold_domain, set())
        outcomes["slots"].add(matcher(pred_slots, gold_slots))
        slot_pairs = pair_for_gating(pred_slots, gold_slots, mode, sim,
                                     threshold)
        paired_gold_slots = {g for _p, g in slot_pairs}
        for pred_slot, gold_slot in slot_pairs:
            outcomes["values"].add(
                matcher(
                    pred.slot_values(pred_domain, pred_slot),
                    gold.slot_values(gold_domain, gold_slot),
                )
            )
        if unmatched_gold_children_as_fn:
            for gold_slot in gold_slots - paired_gold_slots:
                outcomes["values"].fn += len(
                    gold.slot_values(gold_domain, gold_slot)
                )

    if unmatched_gold_children_as_fn:
        for gold_domain in gold.domains - paired_gold_domains:
            gold_slots = gold.slots.get(gold_domain, set())
            outcomes["slots"].fn += len(gold_slots)
            for gold_slot in gold_slots:
                outcomes["values"].fn += len(
                    gold.slot_values(gold_domain, gold_slot)
                )

    outcomes["user_intents"] = matcher(pred.user_intents, gold.user_intents)
    outcomes["system_actions"] = matcher(pred.system_actions,
                                         gold.system_actions)
    return outcomes


def evaluate(
    pred: OntologyGraph,
    gold: OntologyGraph,
    mode: str = "continuous",
    embedder: EmbeddingProvider | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    sim_fn: SimFn | None = None,
    unmatched_gold_children_as_fn: bool = False,
) -> EvalReport:
    """Score a predicted ontology against a gold one in a single mode.

    Fuzzy/continuous modes need either an embedding provider or an explicit
    ``sim_fn``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sim = sim_fn
    if mode != "literal" and sim is None:
        if embedder is None:
            raise ValueError(f"mode {mode!r} requires an embedder or sim_fn")
        labels = set(pred.iter_labels()) | set(gold.iter_labels())
        sim = embedding_sim(embedder, labels)

    outcomes = category_match_counts(
        pred, gold, mode, sim, threshold,
        unmatched_gold_children_as_fn=unmatched_gold_children_as_fn,
    )
    rows: dict[str, tuple[float, float, float]] = {}
    for category in CATEGORIES:
        out = outcomes[category]
        rows[category] = prf(out.tp, out.fp, out.fn)
    per_axis = list(zip(*(rows[c] for c in CATEGORIES)))
    rows["macro"] = tuple(sum(axis) / len(CATEGORIES) for axis in per_axis)
    rows["micro"] = prf(
        sum(outcomes[c].tp for c in CATEGORIES),
        sum(outcomes[c].fp for c in CATEGORIES),
        sum(outcomes[c].fn for c in CATEGORIES),
    )
    report = EvalReport(threshold=threshold)
    report.scores[mode] = rows
    report.counts[mode] = {
        c: (outcomes[c].tp, outcomes[c].fp, outcomes[c].fn) for c in CATEGORIES
    }
    return report


def evaluate_modes(
    pred: OntologyGraph,
    gold: OntologyGraph,
    modes: Iterable[str] = MODES,
    embedder: EmbeddingProvider | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    sim_fn: SimFn | None = None,
    unmatched_gold_children_as_fn: bool = False,
) -> EvalReport:
    """Score several modes into one merged report."""
    report = EvalReport(threshold=threshold)
    for mode in modes:
        report.merge(
            evaluate(
                pred, gold, mode, embedder=embedder, threshold=threshold,
                sim_fn=sim_fn,
                unmatched_gold_children_as_fn=unmatched_gold_children_as_fn,
            )
        )
    return report
