"""The per-batch construction loop.

For every batch of dialogues the runner walks up to four chat steps:

1. list the current tables and ask the model to inspect the relevant ones
   (PRAGMA only),
2. ask for SELECT queries probing what is already stored, optionally with
   sampled column values and embedding-similar stored concepts spliced in,
3. optionally ask for a dialogue-state summary of the overlap between the
   dialogue and the query results,
4. ask for the update statements and execute them.

The ``direct_update`` variant skips straight to step 4 with no database
context.  Batches run strictly sequentially: the database state after batch
``i`` is input to batch ``i+1``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .datasets import Corpus, DialogueRecord, batch as make_batches
from .ontology import OntologyGraph, extract_ontology
from .providers import (
    CachedEmbedder,
    ChatProvider,
    ChatRequest,
    EmbeddingProvider,
    ProviderError,
    cosine_similarity,
    estimate_tokens,
)
from .sandbox import (
    RETRIEVAL,
    UPDATE_KINDS,
    DbSession,
    QueryResult,
    SqlStatement,
    UpdateOutcome,
    extract_statements,
)

logger = logging.getLogger(__name__)

VARIANTS = ("direct_update", "query_update")

TEMPLATE_FILES = {
    "step1": "step1_inspect.txt",
    "step2": "step2_select.txt",
    "step3": "step3_dst.txt",
    "step4": "step4_update.txt",
}

# Injected into the update prompt when the success switch is on.
SUCCESS_CLAUSE = (
    "- When you are done, the database must contain everything required to "
    "carry out and resolve the user's goal in the dialogue(s) from stored "
    "information alone; add whatever generalized intents, actions, or entity "
    "rows that requires."
)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
_LITERAL_RE = re.compile(r"'((?:[^']|'')*)'")


@dataclass
class RunConfig:
    """Ablation switches and budgets for one construction run."""

    variant: str = "query_update"
    use_dst: bool = False
    use_similarity: bool = False
    use_value_examples: bool = False
    use_success: bool = False
    batch_size: int = 1
    prompt_budget: int = 32768
    seed: int = 0
    prompt_set: str | Path | None = None
    similarity_threshold: float = 0.436
    similarity_top_k: int = 5
    value_example_count: int = 5
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.variant == "direct_update":
            enabled = [
                name
                for name in ("use_dst", "use_similarity", "use_value_examples",
                             "use_success")
                if getattr(self, name)
            ]
            if enabled:
                raise ValueError(
                    f"{', '.join(enabled)} require variant='query_update'"
                )
        if not 0.0 < self.similarity_threshold < 1.0:
            raise ValueError("similarity_threshold must be in (0, 1)")
        if self.similarity_top_k < 1:
            raise ValueError("similarity_top_k must be >= 1")
        if self.prompt_budget < 1:
            raise ValueError("prompt_budget must be >= 1")


@dataclass
class PromptTemplates:
    step1: str
    step2: str
    step3: str
    step4: str

    @classmethod
    def load(cls, prompt_set: str | Path | None = None) -> "PromptTemplates":
        """Read the four template files from a directory, or the packaged
        defaults when no directory is given."""
        texts = {}
        if prompt_set is None:
            root = resources.files("ontosql") / "prompts"
            for key, filename in TEMPLATE_FILES.items():
                texts[key] = (root / filename).read_text(encoding="utf-8")
        else:
            directory = Path(prompt_set)
            for key, filename in TEMPLATE_FILES.items():
                path = directory / filename
                if not path.is_file():
                    raise FileNotFoundError(f"missing prompt template {path}")
                texts[key] = path.read_text(encoding="utf-8")
        return cls(**texts)


@dataclass
class StepTrace:
    """Everything one batch did; fields stay None for disabled steps."""

    batch_index: int
    dialogue_ids: list[str]
    failed: bool = False
    failure: str | None = None
    chat_calls: int = 0
    violations: list[str] = field(default_factory=list)
    prompts: dict[str, str] = field(default_factory=dict)
    replies: dict[str, str] = field(default_factory=dict)
    tables_listed: list[str] | None = None
    pragma_results: list[QueryResult] | None = None
    select_results: list[QueryResult] | None = None
    similar_concepts: list[tuple[str, list[tuple[str, float]]]] | None = None
    value_examples: dict[str, list[str]] | None = None
    dst_summary: str | None = None
    update_statements: list[SqlStatement] = field(default_factory=list)
    update_outcome: UpdateOutcome | None = None


@dataclass
class RunStats:
    dialogues: int = 0
    batches: int = 0
    batches_failed: int = 0
    chat_calls: int = 0
    retrieval_statements: int = 0
    update_statements: int = 0
    update_failures: int = 0
    table_count: int = 0

    @property
    def error_ratio(self) -> float:
        return self.update_failures / max(1, self.update_statements)

    def to_document(self) -> dict:
        return {
            "dialogues": self.dialogues,
            "batches": self.batches,
            "batches_failed": self.batches_failed,
            "chat_calls": self.chat_calls,
            "retrieval_statements": self.retrieval_statements,
            "update_statements": self.update_statements,
            "update_failures": self.update_failures,
            "error_ratio": self.error_ratio,
            "table_count": self.table_count,
        }


def fill_template(template: str, values: dict[str, str]) -> str:
    """Replace {name} placeholders; unknown names become empty strings."""
    return _PLACEHOLDER_RE.sub(lambda m: values.get(m.group(1), ""), template)


def truncate_prompt(text: str, budget_tokens: int) -> str:
    """Left-truncate so the estimated token count fits the budget: the
    oldest content is dropped first."""
    if estimate_tokens(text) <= budget_tokens:
        return text
    return text[-(budget_tokens * 4):]


def render_dialogues(records: list[DialogueRecord]) -> str:
    blocks = []
    for record in records:
        lines = [f"Dialogue {record.id}:"]
        lines += [f"{speaker}: {text}" for speaker, text in record.turns]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def render_result(result: QueryResult) -> str:
    if result.error is not None:
        return f"Error: {result.error}"
    if not result.rows:
        return "No Result"
    rows = ", ".join(
        "(" + ", ".join(repr(cell) for cell in row) + ")"
        for row in result.rows
    )
    suffix = " (truncated)" if result.truncated else ""
    return f"Result: [{rows}]{suffix}"


def render_executions(results: list[QueryResult]) -> str:
    blocks = [
        f"Query: {r.statement};\n{render_result(r)}" for r in results
    ]
    return "\n\n".join(blocks)


def query_literals(sql: str) -> list[str]:
    """String literals mentioned in a statement, quotes unescaped."""
    literals = [m.replace("''", "'") for m in _LITERAL_RE.findall(sql)]
    return [lit for lit in literals if lit.strip()]


def similarity_augment(
    query_terms: list[str],
    session: DbSession,
    embedder: EmbeddingProvider,
    threshold: float = 0.436,
    max_results: int = 5,
) -> list[tuple[str, float]]:
    """Stored concepts (table names, column names, cell values) whose
    embedding similarity to any query term strictly exceeds the threshold,
    best first, at most ``max_results``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    if max_results < 1:
        raise ValueError("max_results must be >= 1")
    terms = sorted({t for t in query_terms if t.strip()})
    if not terms:
        return []
    snapshot = session.snapshot_schema(include_values=True)
    pool: set[str] = set()
    for table in snapshot.tables:
        pool.add(table.name)
        pool.update(col.name for col in table.columns)
        for col_values in (table.values or {}).values():
            pool.update(col_values)
    pool_list = sorted(pool - set(terms))
    if not pool_list:
        return []
    term_vectors = embedder.embed(terms)
    pool_vectors = embedder.embed(pool_list)
    scored = []
    for concept, vec in zip(pool_list, pool_vectors):
        best = max(cosine_similarity(tv, vec) for tv in term_vectors)
        if best > threshold:
            scored.append((concept, best))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:max_results]


def render_similar(similar: list[tuple[str, list[tuple[str, float]]]]) -> str:
    blocks = []
    for statement, matches in similar:
        lines = [f"Similar stored concepts for: {statement};"]
        lines += [f"  ({concept!r}, {sim:.4f})" for concept, sim in matches]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


class PipelineRunner:
    """Drives the construction loop against one database session."""

    def __init__(
        self,
        session: DbSession,
        chat: ChatProvider,
        config: RunConfig,
        embedder: EmbeddingProvider | None = None,
        templates: PromptTemplates | None = None,
    ):
        if config.use_similarity and embedder is None:
            raise ValueError("use_similarity requires an embedding provider")
        self.session = session
        self.chat = chat
        self.config = config
        if embedder is not None and not isinstance(embedder, CachedEmbedder):
            embedder = CachedEmbedder(embedder)
        self.embedder = embedder
        self.templates = templates or PromptTemplates.load(config.prompt_set)
        self.stats = RunStats()

    # -- plumbing --------------------------------------------------------

    def _chat(self, step: str, prompt: str, trace: StepTrace) -> str:
        prompt = truncate_prompt(prompt, self.config.prompt_budget)
        trace.prompts[step] = prompt
        request = ChatRequest(
            messages=[("user", prompt)],
            temperature=self.config.temperature,
            max_output_tokens=self.config.max_output_tokens,
        )
        reply = self.chat.chat(request)
        trace.chat_calls += 1
        self.stats.chat_calls += 1
        trace.replies[step] = reply
        return reply

    def _run_retrievals(self, statements: list[SqlStatement], step: str,
                        trace: StepTrace, context: dict) -> list[QueryResult]:
        results = []
        for stmt in statements:
            if stmt.kind != RETRIEVAL:
                trace.violations.append(
                    f"{step}: discarded {stmt.kind} statement: {stmt.text[:120]}"
                )
                continue
            results.append(
                self.session.execute_retrieval(stmt, {**context, "step": step})
            )
            self.stats.retrieval_statements += 1
        return results

    # -- the four steps ---------------------------------------------------

    def step1_inspect(self, records: list[DialogueRecord],
                      trace: StepTrace, context: dict) -> None:
        """List current tables locally, ask the model which to inspect, and
        run only the PRAGMA statements it returns."""
        listing_result = self.session.execute_retrieval(
            SqlStatement(DbSession.TABLE_LIST_SQL, RETRIEVAL),
            {**context, "step": "step1"},
        )
        self.stats.retrieval_statements += 1
        names = [
            row[0] for row in listing_result.rows
            if not row[0].startswith("sqlite_")
        ]
        trace.tables_listed = names
        listing = "[" + ", ".join(repr(n) for n in names) + "]"
        prompt = fill_template(
            self.templates.step1,
            {"db_result_input": listing,
             "dialogue": render_dialogues(records)},
        )
        reply = self._chat("step1", prompt, trace)
        statements = extract_statements(reply)
        trace.pragma_results = self._run_retrievals(
            statements, "step1", trace, context
        )

    def _value_example_section(self, trace: StepTrace) -> str:
        snapshot = self.session.snapshot_schema()
        examples: dict[str, list[str]] = {}
        for table in snapshot.tables:
            for column in table.columns:
                values = self.session.sample_column_values(
                    table.name, column.name,
                    self.config.value_example_count, self.config.seed,
                )
                if values:
                    examples[f"{table.name}.{column.name}"] = values
        trace.value_examples = examples
        if not examples:
            return ""
        lines = ["Examples of values currently stored per column:"]
        lines += [f"{key}: {values!r}" for key, values in examples.items()]
        return "\n".join(lines)

    def step2_selects(self, records: list[DialogueRecord],
                      trace: StepTrace, context: dict) -> None:
        """Ask for SELECT queries against the inspected schema and execute
        them; optionally splice in sampled column values and append
        similarity matches for each query's literals."""
        schema_section = (
            render_executions(trace.pragma_results or [])
            or "No schema information was returned."
        )
        if self.config.use_value_examples:
            example_section = self._value_example_section(trace)
            if example_section:
                schema_section = f"{schema_section}\n\n{example_section}"
        prompt = fill_template(
            self.templates.step2,
            {"db_result_input": schema_section,
             "dialogue": render_dialogues(records)},
        )
        reply = self._chat("step2", prompt, trace)
        statements = extract_statements(reply)
        trace.select_results = self._run_retrievals(
            statements, "step2", trace, context
        )
        if self.config.use_similarity:
            assert self.embedder is not None
            similar = []
            for result in trace.select_results:
                terms = query_literals(result.statement)
                if not terms:
                    continue
                matches = similarity_augment(
                    terms, self.session, self.embedder,
                    self.config.similarity_threshold,
                    self.config.similarity_top_k,
                )
                if matches:
                    similar.append((result.statement, matches))
            trace.similar_concepts = similar

    def _results_section(self, trace: StepTrace) -> str:
        section = (
            render_executions(trace.select_results or [])
            or "No query results."
        )
        if trace.similar_concepts:
            section = f"{section}\n\n{render_similar(trace.similar_concepts)}"
        return section

    def step3_dst(self, records: list[DialogueRecord],
                  trace: StepTrace) -> None:
        """Ask for the dialogue-state summary; the reply is stored verbatim
        (an empty reply means nothing is stored yet)."""
        prompt = fill_template(
            self.templates.step3,
            {"db_result_input": self._results_section(trace),
             "dialogue": render_dialogues(records)},
        )
        trace.dst_summary = self._chat("step3", prompt, trace).strip()

    def step4_update(self, records: list[DialogueRecord],
                     trace: StepTrace, context: dict) -> None:
        """Ask for update statements and execute them, recording failures."""
        if self.config.variant == "query_update":
            tables = trace.tables_listed or []
            listing = "[" + ", ".join(repr(n) for n in tables) + "]"
            parts = [
                "The structure and relevant current contents of the database:",
                f"Tables: {listing}",
            ]
            if trace.pragma_results:
                parts.append(render_executions(trace.pragma_results))
            parts.append(self._results_section(trace))
            db_section = "\n\n".join(parts)
        else:
            db_section = ""
        dst_section = ""
        if self.config.use_dst:
            summary = trace.dst_summary or "(nothing already stored)"
            dst_section = (
                "Dialogue state summary of what is already stored:\n" + summary
            )
        prompt = fill_template(
            self.templates.step4,
            {
                "db_result_input": db_section,
                "dst_input": dst_section,
                "success_clause": SUCCESS_CLAUSE if self.config.use_success else "",
                "dialogue": render_dialogues(records),
            },
        )
        reply = self._chat("step4", prompt, trace)
        statements = extract_statements(reply)
        updates = []
        for stmt in statements:
            if stmt.kind in UPDATE_KINDS:
                updates.append(stmt)
            else:
                trace.violations.append(
                    f"step4: discarded {stmt.kind} statement: {stmt.text[:120]}"
                )
        trace.update_statements = updates
        trace.update_outcome = self.session.execute_updates(
            updates, {**context, "step": "step4"}
        )
        self.stats.update_statements += len(updates)
        self.stats.update_failures += len(trace.update_outcome.failures)

    # -- batch and run loops ----------------------------------------------

    def run_batch(self, records: list[DialogueRecord],
                  batch_index: int) -> StepTrace:
        """Run the enabled steps for one batch; a provider failure marks the
        batch failed and the run moves on."""
        trace = StepTrace(
            batch_index=batch_index,
            dialogue_ids=[r.id for r in records],
        )
        context = {"batch": batch_index}
        try:
            if self.config.variant == "query_update":
                self.step1_inspect(records, trace, context)
                self.step2_selects(records, trace, context)
                if self.config.use_dst:
                    self.step3_dst(records, trace)
            self.step4_update(records, trace, context)
        except ProviderError as exc:
            trace.failed = True
            trace.failure = str(exc)
            self.stats.batches_failed += 1
            logger.warning("batch %d failed: %s", batch_index, exc)
            self.session.audit_event({
                "event": "batch_failed",
                "batch": batch_index,
                "ids": trace.dialogue_ids,
                "error": str(exc),
            })
        else:
            self.session.audit_event({
                "event": "batch_done",
                "batch": batch_index,
                "ids": trace.dialogue_ids,
            })
        self.stats.batches += 1
        self.stats.dialogues += len(records)
        return trace

    def run(self, corpus: Corpus, resume_from: int = 0
            ) -> tuple[OntologyGraph, RunStats]:
        """Process the corpus in order, batch by batch, then read the
        ontology off the final database state."""
        for index, records in enumerate(make_batches(corpus, self.config.batch_size)):
            if index < resume_from:
                continue
            self.run_batch(records, index)
        snapshot = self.session.snapshot_schema(include_values=True)
        self.stats.table_count = len(snapshot.tables)
        return extract_ontology(snapshot), self.stats


def completed_batches(audit_path: str | Path) -> int:
    """Next batch index to process, recovered from the audit log."""
    path = Path(audit_path)
    if not path.exists():
        return 0
    import json

    last = -1
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except ValueError:
                continue
            if record.get("event") in ("batch_done", "batch_failed"):
                last = max(last, int(record["batch"]))
    return last + 1


def run_dataset(
    corpus: Corpus,
    config: RunConfig,
    session: DbSession,
    chat: ChatProvider,
    embedder: EmbeddingProvider | None = None,
    resume_from: int = 0,
) -> tuple[OntologyGraph, RunStats]:
    """One-shot convenience around :class:`PipelineRunner`."""
    runner = PipelineRunner(session, chat, config, embedder=embedder)
    return runner.run(corpus, resume_from=resume_from)
