"""Embedded SQLite sandbox for model-generated SQL.

Owns one database session per construction run: it pulls SQL statements out
of raw model output, classifies them, executes the allowed ones, snapshots
the schema, samples column values, and keeps per-statement accounting in an
append-only audit log.  Destructive statements (DROP, TRUNCATE) are parsed
but never executed; the pipeline only ever creates and extends tables.
"""

from __future__ import annotations

import json
import logging
import random
import re
import sqlite3
import time
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

RETRIEVAL = "retrieval"
SCHEMA_UPDATE = "schema_update"
DATA_UPDATE = "data_update"
OTHER = "other"

UPDATE_KINDS = (SCHEMA_UPDATE, DATA_UPDATE)

_KIND_BY_KEYWORD = {
    "SELECT": RETRIEVAL,
    "PRAGMA": RETRIEVAL,
    "CREATE": SCHEMA_UPDATE,
    "ALTER": SCHEMA_UPDATE,
    "INSERT": DATA_UPDATE,
    "UPDATE": DATA_UPDATE,
    "DELETE": DATA_UPDATE,
}

# Keywords that may open a statement.  Anything else is prose and dropped.
_STARTER_KEYWORDS = (
    "SELECT", "PRAGMA", "CREATE", "ALTER", "INSERT", "UPDATE", "DELETE",
    "DROP", "TRUNCATE", "WITH", "BEGIN", "COMMIT", "ROLLBACK", "REPLACE",
    "VACUUM",
)

# Required continuation when scanning prose for an embedded statement.
# Cuts false positives like "please update the booking".
_CONTINUATIONS = {
    "CREATE": {"TABLE", "INDEX", "VIEW", "TRIGGER", "VIRTUAL", "UNIQUE",
               "TEMP", "TEMPORARY", "IF"},
    "ALTER": {"TABLE"},
    "INSERT": {"INTO", "OR"},
    "DELETE": {"FROM"},
    "DROP": {"TABLE", "INDEX", "VIEW", "TRIGGER", "IF"},
}

_STARTER_RE = re.compile(
    r"\b(" + "|".join(_STARTER_KEYWORDS) + r")\b", re.IGNORECASE
)
_WORD_RE = re.compile(r"[A-Za-z_]+")


@dataclass(frozen=True)
class SqlStatement:
    """One SQL statement with its coarse classification."""

    text: str
    kind: str


@dataclass
class QueryResult:
    """Outcome of one retrieval statement; rows are rendered as strings."""

    statement: str
    rows: list[tuple[str, ...]] = field(default_factory=list)
    error: str | None = None
    truncated: bool = False


@dataclass
class UpdateOutcome:
    """Per-call record of executed update statements and their failures."""

    statements: list[SqlStatement] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)

    @property
    def error_ratio(self) -> float:
        return len(self.failures) / max(1, len(self.statements))


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    decl_type: str


@dataclass
class TableInfo:
    name: str
    columns: list[ColumnInfo] = field(default_factory=list)
    # Optional rendered cell values per column name.
    values: dict[str, list[str]] | None = None


@dataclass
class DbSnapshot:
    """Sorted listing of tables, columns, and (optionally) column values."""

    tables: list[TableInfo] = field(default_factory=list)

    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]


def classify_statement(sql: str) -> str:
    """Classify by leading keyword: SELECT/PRAGMA retrieve, CREATE/ALTER
    change schema, INSERT/UPDATE/DELETE change data, everything else is
    'other' and is never executed."""
    match = _WORD_RE.search(sql)
    if match is None:
        return OTHER
    return _KIND_BY_KEYWORD.get(match.group(0).upper(), OTHER)


def render_cell(value: object) -> str:
    """Render one cell for prompts and snapshots.

    Numbers use their shortest decimal form (4.0 -> "4"), NULL is spelled
    out, and blobs are hex-encoded.
    """
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value.is_integer():
            return str(int(value))
        return repr(value)
    if isinstance(value, bytes):
        return value.hex()
    return str(value)


def _strip_fences(text: str) -> tuple[str, bool]:
    """Return the SQL-bearing text: fenced code block contents when present
    (joined), else the full text.  Second element tells whether fences were
    used."""
    if "```" not in text:
        return text, False
    parts = text.split("```")
    blocks = []
    # Odd-indexed parts are inside fences; an unterminated final fence still
    # lands on an odd index and is kept.
    for inside in parts[1::2]:
        lines = inside.split("\n")
        if lines and re.fullmatch(r"[A-Za-z0-9_+-]*", lines[0].strip()) and len(lines) > 1:
            inside = "\n".join(lines[1:])
        if inside.strip():
            blocks.append(inside)
    if not blocks:
        return text, False
    return "\n".join(blocks), True


def split_sql(text: str) -> list[str]:
    """Split on statement-terminating semicolons, honouring single- and
    double-quoted literals (with doubled-quote escapes) and stripping
    ``--`` and ``/* */`` comments."""
    chunks: list[str] = []
    buf: list[str] = []
    i, n = 0, len(text)
    quote: str | None = None
    while i < n:
        ch = text[i]
        if quote is not None:
            buf.append(ch)
            if ch == quote:
                if i + 1 < n and text[i + 1] == quote:
                    buf.append(quote)
                    i += 1
                else:
                    quote = None
            i += 1
            continue
        if ch in ("'", '"'):
            quote = ch
            buf.append(ch)
            i += 1
            continue
        if ch == "-" and text[i:i + 2] == "--":
            eol = text.find("\n", i)
            i = n if eol == -1 else eol
            continue
        if ch == "/" and text[i:i + 2] == "/*":
            end = text.find("*/", i + 2)
            i = n if end == -1 else end + 2
            continue
        if ch == ";":
            chunk = "".join(buf).strip()
            if chunk:
                chunks.append(chunk)
            buf = []
            i += 1
            continue
        buf.append(ch)
        i += 1
    tail = "".join(buf).strip()
    if tail:
        chunks.append(tail)
    return chunks


def _statement_start(chunk: str, from_code_block: bool) -> int | None:
    """Offset of the first plausible SQL keyword in a chunk, or None."""
    for match in _STARTER_RE.finditer(chunk):
        keyword = match.group(0).upper()
        rest = chunk[match.end():]
        if not from_code_block:
            required = _CONTINUATIONS.get(keyword)
            if required is not None:
                nxt = _WORD_RE.search(rest)
                if nxt is None or nxt.group(0).upper() not in required:
                    continue
            if keyword == "UPDATE" and not re.search(r"\bSET\b", rest, re.IGNORECASE):
                continue
        return match.start()
    return None


def extract_statements(model_output: str) -> list[SqlStatement]:
    """Pull classified SQL statements out of raw model output.

    Statements are taken from fenced code blocks when present, otherwise
    from the whole text.  Chunks without a recognisable SQL opening are
    discarded as prose.
    """
    body, fenced = _strip_fences(model_output)
    statements: list[SqlStatement] = []
    for chunk in split_sql(body):
        start = _statement_start(chunk, fenced)
        if start is None:
            logger.debug("discarding non-SQL chunk: %.80r", chunk)
            continue
        sql = chunk[start:].strip()
        statements.append(SqlStatement(text=sql, kind=classify_statement(sql)))
    if not statements and model_output.strip():
        logger.debug("no SQL statements found in model output (%d chars)",
                     len(model_output))
    return statements


class DbSession:
    """Single-writer SQLite session with statement accounting.

    Every executed statement is appended to the audit log (one JSON line,
    no timestamps so repeated runs are byte-identical).  Failed update
    statements are recorded and skipped; they never abort the session.
    """

    TABLE_LIST_SQL = "SELECT name FROM sqlite_master WHERE type='table' ORDER BY name"

    def __init__(
        self,
        location: str | Path = ":memory:",
        audit_path: str | Path | None = None,
        row_limit: int = 1000,
        statement_timeout: float = 5.0,
    ):
        self.location = str(location)
        self.row_limit = row_limit
        self.statement_timeout = statement_timeout
        try:
            # Autocommit: each statement is its own transaction, so a failed
            # statement can never leave a partial write behind.
            self._conn = sqlite3.connect(self.location, isolation_level=None)
            self._conn.execute("SELECT 1").fetchone()
        except sqlite3.Error as exc:
            raise OSError(f"cannot open database at {self.location!r}: {exc}") from exc
        self.updates_attempted = 0
        self.update_failures = 0
        self.retrievals_executed = 0
        self._audit_path = Path(audit_path) if audit_path is not None else None
        self._audit_seq = 0
        if self._audit_path is not None and self._audit_path.exists():
            self._recover_from_audit()

    def _recover_from_audit(self) -> None:
        """Resume statement accounting from an existing audit log."""
        with open(self._audit_path, "r", encoding="utf-8") as fh:
            for line in fh:
                self._audit_seq += 1
                try:
                    record = json.loads(line)
                except ValueError:
                    continue
                if record.get("event") != "statement":
                    continue
                if record.get("kind") == RETRIEVAL:
                    self.retrievals_executed += 1
                elif record.get("kind") in UPDATE_KINDS:
                    self.updates_attempted += 1
                    if not record.get("ok", False):
                        self.update_failures += 1

    def __enter__(self) -> "DbSession":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def close(self) -> None:
        self._conn.close()

    @property
    def error_ratio(self) -> float:
        """Cumulative fraction of failed update statements this session."""
        return self.update_failures / max(1, self.updates_attempted)

    # -- audit ---------------------------------------------------------

    def audit_event(self, record: dict) -> None:
        if self._audit_path is None:
            return
        record = dict(record)
        record["seq"] = self._audit_seq
        self._audit_seq += 1
        with open(self._audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _audit_statement(self, stmt: SqlStatement, ok: bool, error: str | None,
                         rows: int, context: dict | None) -> None:
        record = {
            "event": "statement",
            "kind": stmt.kind,
            "sql": stmt.text,
            "ok": ok,
            "error": error,
            "rows": rows,
        }
        if context:
            record.update(context)
        self.audit_event(record)

    # -- execution -----------------------------------------------------

    def _deadline_handler(self):
        deadline = time.monotonic() + self.statement_timeout
        return lambda: 1 if time.monotonic() > deadline else 0

    def execute_retrieval(self, stmt: SqlStatement,
                          context: dict | None = None) -> QueryResult:
        """Run one retrieval statement; SQL errors are captured, not raised."""
        if stmt.kind != RETRIEVAL:
            raise ValueError(f"not a retrieval statement: {stmt.text!r}")
        result = QueryResult(statement=stmt.text)
        self._conn.set_progress_handler(self._deadline_handler(), 10000)
        try:
            cursor = self._conn.execute(stmt.text)
            fetched = cursor.fetchmany(self.row_limit + 1)
            if len(fetched) > self.row_limit:
                fetched = fetched[: self.row_limit]
                result.truncated = True
            result.rows = [tuple(render_cell(c) for c in row) for row in fetched]
        except sqlite3.Error as exc:
            result.error = str(exc)
        finally:
            self._conn.set_progress_handler(None, 0)
        self.retrievals_executed += 1
        self._audit_statement(stmt, result.error is None, result.error,
                              len(result.rows), context)
        return result

    def execute_updates(self, stmts: list[SqlStatement],
                        context: dict | None = None) -> UpdateOutcome:
        """Apply update statements in order; a failure is recorded and the
        remaining statements still run."""
        for stmt in stmts:
            if stmt.kind not in UPDATE_KINDS:
                raise ValueError(f"not an update statement: {stmt.text!r}")
        outcome = UpdateOutcome(statements=list(stmts))
        for index, stmt in enumerate(stmts):
            self.updates_attempted += 1
            error = None
            try:
                self._conn.execute(stmt.text)
            except sqlite3.Error as exc:
                error = str(exc)
                outcome.failures.append((index, error))
                self.update_failures += 1
            self._audit_statement(stmt, error is None, error, 0, context)
        return outcome

    # -- introspection --------------------------------------------------

    def _user_tables(self) -> list[str]:
        rows = self._conn.execute(self.TABLE_LIST_SQL).fetchall()
        return sorted(
            name for (name,) in rows if not name.startswith("sqlite_")
        )

    def snapshot_schema(self, include_values: bool = False,
                        max_values: int | None = None) -> DbSnapshot:
        """Deterministic sorted listing of tables and columns.

        With ``include_values`` the distinct rendered cell values of every
        column are attached (capped at ``max_values`` per column if given).
        """
        tables = []
        for name in self._user_tables():
            cols = [
                ColumnInfo(name=row[1], decl_type=row[2] or "")
                for row in self._conn.execute(f'PRAGMA table_info("{name}")')
            ]
            cols.sort(key=lambda c: c.name)
            values = None
            if include_values:
                values = {}
                for col in cols:
                    values[col.name] = self._distinct_values(
                        name, col.name, max_values
                    )
            tables.append(TableInfo(name=name, columns=cols, values=values))
        return DbSnapshot(tables=tables)

    def _distinct_values(self, table: str, column: str,
                         limit: int | None) -> list[str]:
        sql = (
            f'SELECT DISTINCT "{column}" FROM "{table}" '
            f'WHERE "{column}" IS NOT NULL'
        )
        rows = self._conn.execute(sql).fetchall()
        rendered = sorted(render_cell(r[0]) for r in rows)
        if limit is not None:
            rendered = rendered[:limit]
        return rendered

    def sample_column_values(self, table: str, column: str, k: int,
                             seed: int = 0) -> list[str]:
        """Up to ``k`` distinct non-null values, deterministic per seed."""
        try:
            values = self._distinct_values(table, column, None)
        except sqlite3.Error as exc:
            raise KeyError(f"unknown table/column {table}.{column}: {exc}") from exc
        if len(values) <= k:
            return values
        rng = random.Random(seed)
        return sorted(rng.sample(values, k))
