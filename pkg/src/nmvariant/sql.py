"""Parser and canonical printer for the SQL subset the verifier votes on.

Supported: single SELECT / INSERT (with or without column list) / UPDATE /
DELETE statements, WHERE clauses that are AND-conjunctions of comparisons,
``IS [NOT] NULL`` and ``[NOT] IN (...)`` tests, arithmetic, function calls,
scalar literals and parenthesised SELECT subqueries. The grammar is written
out in ``docs/sql_subset.ebnf``.

Printing is canonical: keywords upper case, unquoted identifiers lower case,
quoted identifiers kept verbatim, single spaces, ``<>`` for inequality and
numbers in their shortest form. ``to_sql(parse_sql(x))`` is a fixed point of
``to_sql(parse_sql(.))``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Union


class SqlError(ValueError):
    pass


class SqlSyntaxError(SqlError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at offset {position}")
        self.position = position


class UnsupportedSql(SqlError):
    def __init__(self, construct: str, position: int | None = None):
        where = "" if position is None else f" at offset {position}"
        super().__init__(f"unsupported SQL construct: {construct}{where}")
        self.construct = construct
        self.position = position


# ---------------------------------------------------------------------------
# tokens

KEYWORDS = frozenset("""
    SELECT DISTINCT FROM WHERE AND OR NOT INSERT INTO VALUES UPDATE SET DELETE
    NULL IS IN AS ORDER BY ASC DESC LIMIT OFFSET TRUE FALSE
    JOIN INNER LEFT RIGHT OUTER CROSS ON UNION INTERSECT EXCEPT GROUP HAVING
    RETURNING WITH CASE WHEN THEN ELSE END LIKE BETWEEN EXISTS USING
    GRANT REVOKE CREATE DROP ALTER TRUNCATE BEGIN COMMIT ROLLBACK COPY LOCK
    VACUUM ANALYZE EXPLAIN SHOW CALL DO MERGE
""".split())

_UNSUPPORTED_CLAUSES = frozenset("""
    OR JOIN INNER LEFT RIGHT OUTER CROSS ON UNION INTERSECT EXCEPT GROUP HAVING
    RETURNING WITH CASE LIKE BETWEEN EXISTS USING
""".split())

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+|--[^\n]*)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<word>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<qident>"(?:[^"]|"")+")
  | (?P<string>'(?:[^']|'')*')
  | (?P<op><>|!=|<=|>=|\|\||[=<>+\-*/])
  | (?P<punct>[(),.;])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str   # keyword, ident, qident, string, number, op, punct, eof
    value: str
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        mo = _TOKEN_RE.match(text, pos)
        if mo is None:
            raise SqlSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = mo.lastgroup
        raw = mo.group()
        if kind == "word":
            if raw.upper() in KEYWORDS:
                tokens.append(Token("keyword", raw.upper(), pos))
            else:
                tokens.append(Token("ident", raw, pos))
        elif kind == "qident":
            tokens.append(Token("qident", raw[1:-1].replace('""', '"'), pos))
        elif kind == "string":
            tokens.append(Token("string", raw[1:-1].replace("''", "'"), pos))
        elif kind != "ws":
            tokens.append(Token(kind, raw, pos))
        pos = mo.end()
    tokens.append(Token("eof", "", len(text)))
    return tokens


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Ident:
    name: str
    quoted: bool = False

    @classmethod
    def of(cls, tok: Token) -> "Ident":
        if tok.kind == "qident":
            return cls(tok.value, True)
        return cls(tok.value.lower(), False)

    @property
    def key(self) -> str:
        """Name used for policy lookups (case-insensitive)."""
        return self.name.lower()


@dataclass(frozen=True)
class Literal:
    kind: str   # string, int, float, null, bool
    value: str


@dataclass(frozen=True)
class Placeholder:
    """Constant that replaces a non-deterministic value during normalization."""

    token: str = "⟨ND⟩"


@dataclass(frozen=True)
class ColumnRef:
    name: Ident
    table: Optional[Ident] = None


@dataclass(frozen=True)
class Star:
    table: Optional[Ident] = None


@dataclass(frozen=True)
class FuncCall:
    name: Ident
    args: tuple["Expr", ...] = ()
    star: bool = False


@dataclass(frozen=True)
class Negate:
    operand: "Expr"


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Subquery:
    select: "Select"


Expr = Union[Literal, Placeholder, ColumnRef, Star, FuncCall, Negate, BinaryOp, Subquery]


@dataclass(frozen=True)
class Comparison:
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class IsNull:
    operand: Expr
    negated: bool = False


@dataclass(frozen=True)
class InList:
    operand: Expr
    items: tuple[Expr, ...]
    negated: bool = False


Predicate = Union[Comparison, IsNull, InList]


@dataclass(frozen=True)
class TableRef:
    name: Ident
    alias: Optional[Ident] = None


@dataclass(frozen=True)
class SelectItem:
    expr: Expr
    alias: Optional[Ident] = None


@dataclass(frozen=True)
class OrderItem:
    expr: Expr
    descending: bool = False


@dataclass(frozen=True)
class Select:
    items: tuple[SelectItem, ...]
    table: Optional[TableRef] = None
    where: tuple[Predicate, ...] = ()
    distinct: bool = False
    order_by: tuple[OrderItem, ...] = ()
    limit: Optional[Literal] = None
    offset: Optional[Literal] = None

    kind = "SELECT"


@dataclass(frozen=True)
class Insert:
    table: TableRef
    columns: Optional[tuple[Ident, ...]]
    rows: tuple[tuple[Expr, ...], ...] = ()
    query: Optional[Select] = None

    kind = "INSERT"


@dataclass(frozen=True)
class Assignment:
    column: Ident
    value: Expr


@dataclass(frozen=True)
class Update:
    table: TableRef
    assignments: tuple[Assignment, ...]
    where: tuple[Predicate, ...] = ()

    kind = "UPDATE"


@dataclass(frozen=True)
class Delete:
    table: TableRef
    where: tuple[Predicate, ...] = ()

    kind = "DELETE"


Statement = Union[Select, Insert, Update, Delete]
WRITE_KINDS = frozenset({"INSERT", "UPDATE", "DELETE"})

_COMPARISON_OPS = {"=", "<>", "!=", "<", "<=", ">", ">="}


# ---------------------------------------------------------------------------
# parser

class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at(self, kind: str, value: str | None = None) -> bool:
        tok = self.tok
        return tok.kind == kind and (value is None or tok.value == value)

    def at_kw(self, *words: str) -> bool:
        return self.tok.kind == "keyword" and self.tok.value in words

    def accept(self, kind: str, value: str | None = None) -> Token | None:
        if self.at(kind, value):
            return self.advance()
        return None

    def accept_kw(self, word: str) -> bool:
        return self.accept("keyword", word) is not None

    def expect(self, kind: str, value: str | None = None) -> Token:
        tok = self.accept(kind, value)
        if tok is None:
            self.fail(f"expected {value or kind}")
        return tok  # type: ignore[return-value]

    def expect_kw(self, word: str) -> None:
        if not self.accept_kw(word):
            self.fail(f"expected {word}")

    def fail(self, message: str):
        tok = self.tok
        if tok.kind == "keyword" and tok.value in _UNSUPPORTED_CLAUSES:
            raise UnsupportedSql(tok.value, tok.pos)
        found = "end of input" if tok.kind == "eof" else repr(tok.value)
        raise SqlSyntaxError(f"{message}, found {found}", tok.pos)

    # statements

    def statement(self) -> Statement:
        tok = self.tok
        if tok.kind != "keyword":
            self.fail("expected a statement")
        if tok.value == "SELECT":
            stmt: Statement = self.select()
        elif tok.value == "INSERT":
            stmt = self.insert()
        elif tok.value == "UPDATE":
            stmt = self.update()
        elif tok.value == "DELETE":
            stmt = self.delete()
        else:
            raise UnsupportedSql(tok.value, tok.pos)
        self.accept("punct", ";")
        if not self.at("eof"):
            if self.i > 0 and self.tokens[self.i - 1].value == ";":
                raise UnsupportedSql("multiple statements", self.tok.pos)
            self.fail("unexpected trailing input")
        return stmt

    def select(self) -> Select:
        self.expect_kw("SELECT")
        distinct = self.accept_kw("DISTINCT")
        items = [self.select_item()]
        while self.accept("punct", ","):
            items.append(self.select_item())
        table = None
        if self.accept_kw("FROM"):
            table = self.table_ref()
            if self.at("punct", ","):
                raise UnsupportedSql("multiple FROM tables", self.tok.pos)
        where = self.where()
        order: list[OrderItem] = []
        if self.accept_kw("ORDER"):
            self.expect_kw("BY")
            while True:
                expr = self.expr()
                desc = False
                if self.accept_kw("DESC"):
                    desc = True
                else:
                    self.accept_kw("ASC")
                order.append(OrderItem(expr, desc))
                if not self.accept("punct", ","):
                    break
        limit = offset = None
        if self.accept_kw("LIMIT"):
            limit = self.int_literal()
        if self.accept_kw("OFFSET"):
            offset = self.int_literal()
        return Select(tuple(items), table, where, distinct, tuple(order), limit, offset)

    def select_item(self) -> SelectItem:
        expr = self.expr()
        alias = None
        if self.accept_kw("AS"):
            alias = self.ident()
        elif self.at("ident") or self.at("qident"):
            alias = self.ident()
        return SelectItem(expr, alias)

    def insert(self) -> Insert:
        self.expect_kw("INSERT")
        self.expect_kw("INTO")
        table = self.table_ref(allow_alias=False)
        columns = None
        if self.at("punct", "(") and not self._paren_starts_select():
            self.advance()
            cols = [self.ident()]
            while self.accept("punct", ","):
                cols.append(self.ident())
            self.expect("punct", ")")
            columns = tuple(cols)
        if self.accept_kw("VALUES"):
            rows = [self.value_row(columns)]
            while self.accept("punct", ","):
                rows.append(self.value_row(columns))
            return Insert(table, columns, tuple(rows))
        if self.at_kw("SELECT") or self._paren_starts_select():
            paren = self.accept("punct", "(") is not None
            query = self.select()
            if paren:
                self.expect("punct", ")")
            if columns is not None and len(query.items) != len(columns):
                raise SqlSyntaxError(
                    f"INSERT lists {len(columns)} columns but SELECT yields {len(query.items)}",
                    self.tok.pos)
            return Insert(table, columns, (), query)
        self.fail("expected VALUES or SELECT")
        raise AssertionError  # unreachable

    def _paren_starts_select(self) -> bool:
        nxt = self.tokens[self.i + 1] if self.i + 1 < len(self.tokens) else None
        return self.at("punct", "(") and nxt is not None and nxt.kind == "keyword" \
            and nxt.value == "SELECT"

    def value_row(self, columns) -> tuple[Expr, ...]:
        start = self.expect("punct", "(")
        values = [self.expr()]
        while self.accept("punct", ","):
            values.append(self.expr())
        self.expect("punct", ")")
        if columns is not None and len(values) != len(columns):
            raise SqlSyntaxError(
                f"VALUES row has {len(values)} values for {len(columns)} columns", start.pos)
        return tuple(values)

    def update(self) -> Update:
        self.expect_kw("UPDATE")
        table = self.table_ref()
        self.expect_kw("SET")
        assignments = [self.assignment()]
        while self.accept("punct", ","):
            assignments.append(self.assignment())
        if self.at_kw("FROM"):
            raise UnsupportedSql("UPDATE ... FROM", self.tok.pos)
        return Update(table, tuple(assignments), self.where())

    def assignment(self) -> Assignment:
        column = self.ident()
        if self.accept("punct", "."):
            # qualified target column: keep only the column part
            column = self.ident()
        self.expect("op", "=")
        return Assignment(column, self.expr())

    def delete(self) -> Delete:
        self.expect_kw("DELETE")
        self.expect_kw("FROM")
        table = self.table_ref()
        if self.at_kw("USING"):
            raise UnsupportedSql("DELETE ... USING", self.tok.pos)
        return Delete(table, self.where())

    # clauses

    def table_ref(self, allow_alias: bool = True) -> TableRef:
        if self.at("punct", "("):
            raise UnsupportedSql("derived table", self.tok.pos)
        name = self.ident()
        if self.accept("punct", "."):
            raise UnsupportedSql("schema-qualified table", self.tokens[self.i - 1].pos)
        alias = None
        if allow_alias:
            if self.accept_kw("AS"):
                alias = self.ident()
            elif self.at("ident") or self.at("qident"):
                alias = self.ident()
        return TableRef(name, alias)

    def where(self) -> tuple[Predicate, ...]:
        if not self.accept_kw("WHERE"):
            return ()
        preds = [self.predicate()]
        while self.accept_kw("AND"):
            preds.append(self.predicate())
        if self.at_kw("OR"):
            raise UnsupportedSql("OR", self.tok.pos)
        return tuple(preds)

    def predicate(self) -> Predicate:
        if self.at_kw("NOT"):
            raise UnsupportedSql("NOT", self.tok.pos)
        left = self.expr()
        if self.accept_kw("IS"):
            negated = self.accept_kw("NOT")
            self.expect_kw("NULL")
            return IsNull(left, negated)
        negated = self.accept_kw("NOT")
        if self.accept_kw("IN"):
            self.expect("punct", "(")
            if self.at_kw("SELECT"):
                raise UnsupportedSql("IN (SELECT ...)", self.tok.pos)
            items = [self.expr()]
            while self.accept("punct", ","):
                items.append(self.expr())
            self.expect("punct", ")")
            return InList(left, tuple(items), negated)
        if negated:
            self.fail("expected IN after NOT")
        tok = self.tok
        if tok.kind == "op" and tok.value in _COMPARISON_OPS:
            self.advance()
            op = "<>" if tok.value == "!=" else tok.value
            return Comparison(op, left, self.expr())
        self.fail("expected a comparison operator")
        raise AssertionError  # unreachable

    # expressions

    def expr(self) -> Expr:
        left = self.additive()
        while self.accept("op", "||"):
            left = BinaryOp("||", left, self.additive())
        return left

    def additive(self) -> Expr:
        left = self.term()
        while self.at("op", "+") or self.at("op", "-"):
            op = self.advance().value
            left = BinaryOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.factor()
        while self.at("op", "*") or self.at("op", "/"):
            op = self.advance().value
            left = BinaryOp(op, left, self.factor())
        return left

    def factor(self) -> Expr:
        tok = self.tok
        if tok.kind == "op" and tok.value == "-":
            self.advance()
            if self.at("number"):
                return _number("-" + self.advance().value)
            return Negate(self.factor())
        if tok.kind == "op" and tok.value == "+":
            self.advance()
            return self.factor()
        if tok.kind == "op" and tok.value == "*":
            self.advance()
            return Star()
        if tok.kind == "number":
            self.advance()
            return _number(tok.value)
        if tok.kind == "string":
            self.advance()
            return Literal("string", tok.value)
        if tok.kind == "keyword":
            if tok.value == "NULL":
                self.advance()
                return Literal("null", "NULL")
            if tok.value in ("TRUE", "FALSE"):
                self.advance()
                return Literal("bool", tok.value)
            if tok.value == "SELECT":
                raise UnsupportedSql("unparenthesised subquery", tok.pos)
            self.fail("expected an expression")
        if tok.kind == "punct" and tok.value == "(":
            self.advance()
            if self.at_kw("SELECT"):
                sub = self.select()
                self.expect("punct", ")")
                return Subquery(sub)
            inner = self.expr()
            self.expect("punct", ")")
            return inner
        if tok.kind in ("ident", "qident"):
            name = self.ident()
            if self.accept("punct", "("):
                if self.accept("op", "*"):
                    self.expect("punct", ")")
                    return FuncCall(name, (), True)
                args: list[Expr] = []
                if not self.at("punct", ")"):
                    args.append(self.expr())
                    while self.accept("punct", ","):
                        args.append(self.expr())
                self.expect("punct", ")")
                return FuncCall(name, tuple(args))
            if self.accept("punct", "."):
                if self.accept("op", "*"):
                    return Star(name)
                return ColumnRef(self.ident(), name)
            return ColumnRef(name)
        self.fail("expected an expression")
        raise AssertionError  # unreachable

    def ident(self) -> Ident:
        tok = self.tok
        if tok.kind in ("ident", "qident"):
            self.advance()
            return Ident.of(tok)
        self.fail("expected an identifier")
        raise AssertionError  # unreachable

    def int_literal(self) -> Literal:
        tok = self.expect("number")
        lit = _number(tok.value)
        if lit.kind != "int":
            raise SqlSyntaxError("expected an integer", tok.pos)
        return lit


def _number(text: str) -> Literal:
    if re.fullmatch(r"-?\d+", text):
        return Literal("int", str(int(text)))
    value = float(text)
    if not math.isfinite(value):
        raise SqlSyntaxError(f"numeric literal {text} out of range", 0)
    return Literal("float", repr(value))


def parse_sql(text: str) -> Statement:
    """Parse one statement of the supported subset."""
    if not text or not text.strip():
        raise SqlSyntaxError("empty statement", 0)
    return _Parser(text).statement()


# ---------------------------------------------------------------------------
# printer

_PRECEDENCE = {"||": 0, "+": 1, "-": 1, "*": 2, "/": 2}


def _ident(ident: Ident) -> str:
    if ident.quoted:
        return '"' + ident.name.replace('"', '""') + '"'
    return ident.name


def _literal(lit: Literal) -> str:
    if lit.kind == "string":
        return "'" + lit.value.replace("'", "''") + "'"
    return lit.value


def _expr(node, parent_prec: int = -1, right: bool = False) -> str:
    if isinstance(node, Literal):
        return _literal(node)
    if isinstance(node, Placeholder):
        return node.token
    if isinstance(node, ColumnRef):
        if node.table is not None:
            return f"{_ident(node.table)}.{_ident(node.name)}"
        return _ident(node.name)
    if isinstance(node, Star):
        return "*" if node.table is None else f"{_ident(node.table)}.*"
    if isinstance(node, FuncCall):
        if node.star:
            return f"{_ident(node.name)}(*)"
        return f"{_ident(node.name)}({', '.join(_expr(a) for a in node.args)})"
    if isinstance(node, Negate):
        return f"-({_expr(node.operand)})"
    if isinstance(node, BinaryOp):
        prec = _PRECEDENCE[node.op]
        text = f"{_expr(node.left, prec)} {node.op} {_expr(node.right, prec, True)}"
        if prec < parent_prec or (right and prec == parent_prec):
            return f"({text})"
        return text
    if isinstance(node, Subquery):
        return f"({to_sql(node.select)})"
    raise TypeError(f"not an expression node: {node!r}")


def _predicate(pred) -> str:
    if isinstance(pred, Comparison):
        return f"{_expr(pred.left)} {pred.op} {_expr(pred.right)}"
    if isinstance(pred, IsNull):
        return f"{_expr(pred.operand)} IS {'NOT ' if pred.negated else ''}NULL"
    if isinstance(pred, InList):
        items = ", ".join(_expr(i) for i in pred.items)
        return f"{_expr(pred.operand)} {'NOT ' if pred.negated else ''}IN ({items})"
    raise TypeError(f"not a predicate: {pred!r}")


def _table(ref: TableRef) -> str:
    if ref.alias is None:
        return _ident(ref.name)
    return f"{_ident(ref.name)} AS {_ident(ref.alias)}"


def _where(preds) -> str:
    if not preds:
        return ""
    return " WHERE " + " AND ".join(_predicate(p) for p in preds)


def to_sql(stmt: Statement) -> str:
    """Canonical text of ``stmt``."""
    if isinstance(stmt, Select):
        items = ", ".join(
            _expr(it.expr) + ("" if it.alias is None else f" AS {_ident(it.alias)}")
            for it in stmt.items
        )
        out = "SELECT " + ("DISTINCT " if stmt.distinct else "") + items
        if stmt.table is not None:
            out += " FROM " + _table(stmt.table)
        out += _where(stmt.where)
        if stmt.order_by:
            out += " ORDER BY " + ", ".join(
                _expr(o.expr) + (" DESC" if o.descending else "") for o in stmt.order_by)
        if stmt.limit is not None:
            out += f" LIMIT {stmt.limit.value}"
        if stmt.offset is not None:
            out += f" OFFSET {stmt.offset.value}"
        return out
    if isinstance(stmt, Insert):
        out = "INSERT INTO " + _table(stmt.table)
        if stmt.columns is not None:
            out += " (" + ", ".join(_ident(c) for c in stmt.columns) + ")"
        if stmt.query is not None:
            return out + " " + to_sql(stmt.query)
        rows = ", ".join("(" + ", ".join(_expr(v) for v in row) + ")" for row in stmt.rows)
        return out + " VALUES " + rows
    if isinstance(stmt, Update):
        sets = ", ".join(f"{_ident(a.column)} = {_expr(a.value)}" for a in stmt.assignments)
        return f"UPDATE {_table(stmt.table)} SET {sets}{_where(stmt.where)}"
    if isinstance(stmt, Delete):
        return f"DELETE FROM {_table(stmt.table)}{_where(stmt.where)}"
    raise TypeError(f"not a statement: {stmt!r}")


def canonicalize(text: str) -> str:
    return to_sql(parse_sql(text))
