"""Surface-syntax parser for harness programs.

The grammar is line-oriented; a statement ends at a newline unless a paren
or brace is still open:

    use channels ubsan, miracleptr
    name = agent(role="...", prompt="...", tools={read, exec}, model=M)
    name = fanout(inner, k=8)
    a >> b >> c
    a.on_fail >> b

``#`` starts a comment.  Prompt strings are double-quoted with backslash
escapes.  An agent named as a fanout inner is consumed by the family and can
no longer be wired directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .errors import ParseError, TemplateError
from .program import (
    FANOUT_INDEX_VAR,
    GUARDS,
    STANDARD_CHANNELS,
    AgentNode,
    Edge,
    FanoutNode,
    Node,
    Program,
    TemplateString,
)

_SYMBOLS = (">>", "=", "(", ")", "{", "}", ",", ".")
_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}


@dataclass(frozen=True)
class Token:
    kind: str  # name | string | int | sym | newline | eof
    value: str
    line: int
    column: int


def _tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    i, n = 0, len(source)
    depth = 0
    while i < n:
        ch = source[i]
        if ch == "\n":
            if depth == 0:
                tokens.append(Token("newline", "\n", line, col))
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and source[i] != "\n":
                i += 1
            continue
        if ch == '"':
            start_line, start_col = line, col
            i += 1
            col += 1
            buf: list[str] = []
            while True:
                if i >= n or source[i] == "\n":
                    raise ParseError("unterminated string", start_line, start_col)
                c = source[i]
                if c == "\\":
                    if i + 1 >= n or source[i + 1] not in _ESCAPES:
                        raise ParseError("bad escape in string", line, col)
                    buf.append(_ESCAPES[source[i + 1]])
                    i += 2
                    col += 2
                    continue
                if c == '"':
                    i += 1
                    col += 1
                    break
                buf.append(c)
                i += 1
                col += 1
            tokens.append(Token("string", "".join(buf), start_line, start_col))
            continue
        if ch.isdigit():
            start_col = col
            j = i
            while j < n and source[j].isdigit():
                j += 1
            tokens.append(Token("int", source[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            start_col = col
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(Token("name", source[i:j], line, start_col))
            col += j - i
            i = j
            continue
        for sym in _SYMBOLS:
            if source.startswith(sym, i):
                if sym in "({":
                    depth += 1
                elif sym in ")}":
                    depth = max(0, depth - 1)
                tokens.append(Token("sym", sym, line, col))
                i += len(sym)
                col += len(sym)
                break
        else:
            raise ParseError("unexpected character", line, col, ch)
    tokens.append(Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(
        self,
        tokens: list[Token],
        extra_channels: Iterable[str],
        tool_registry: Iterable[str] | None,
    ):
        self.tokens = tokens
        self.pos = 0
        self.nodes: dict[str, Node] = {}
        self.edges: list[Edge] = []
        self.consumed: dict[str, str] = {}  # inner -> family
        self.param_channels = frozenset(extra_channels)
        self.channels = frozenset(STANDARD_CHANNELS) | self.param_channels
        self.tool_registry = None if tool_registry is None else frozenset(tool_registry)
        self.saw_declaration = False

    # -- token plumbing -----------------------------------------------------

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, value: str | None = None) -> Token:
        tok = self.next()
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value if value is not None else kind
            raise ParseError(f"expected {want}", tok.line, tok.column, tok.value)
        return tok

    def skip_newlines(self) -> None:
        while self.peek().kind == "newline":
            self.next()

    def end_statement(self) -> None:
        tok = self.peek()
        if tok.kind == "newline":
            self.next()
        elif tok.kind != "eof":
            raise ParseError("unexpected trailing token", tok.line, tok.column, tok.value)

    # -- statements -----------------------------------------------------------

    def parse(self) -> Program:
        while True:
            self.skip_newlines()
            tok = self.peek()
            if tok.kind == "eof":
                break
            if tok.kind != "name":
                raise ParseError("expected a statement", tok.line, tok.column, tok.value)
            if tok.value == "use":
                self.parse_use()
            elif self.tokens[self.pos + 1].value == "=":
                self.parse_declaration()
            else:
                self.parse_edges()
        return Program(nodes=self.nodes, edges=self.edges, channels=self.channels)

    def parse_use(self) -> None:
        # The directive declares the program's channel universe outright
        # (task stays implicitly available as the campaign input).
        tok = self.next()
        if self.saw_declaration:
            raise ParseError(
                "use channels must precede node declarations", tok.line, tok.column
            )
        self.expect("name", "channels")
        names = [self.expect("name").value]
        while self.peek().value == ",":
            self.next()
            names.append(self.expect("name").value)
        self.channels = frozenset(names) | {"task"} | self.param_channels
        self.end_statement()

    def parse_declaration(self) -> None:
        name_tok = self.expect("name")
        name = name_tok.value
        if name in self.nodes:
            raise ParseError(
                f"duplicate node name {name!r}", name_tok.line, name_tok.column
            )
        self.expect("sym", "=")
        kind = self.expect("name")
        if kind.value == "agent":
            node: Node = self.parse_agent(name, kind)
        elif kind.value == "fanout":
            node = self.parse_fanout(name)
        else:
            raise ParseError(
                "expected agent(...) or fanout(...)", kind.line, kind.column, kind.value
            )
        self.nodes[name] = node
        self.saw_declaration = True
        self.end_statement()

    def parse_agent(self, name: str, at: Token) -> AgentNode:
        self.expect("sym", "(")
        kwargs: dict[str, Token] = {}
        tools: frozenset[str] | None = None
        while True:
            key_tok = self.expect("name")
            key = key_tok.value
            if key in kwargs or (key == "tools" and tools is not None):
                raise ParseError(f"duplicate {key}=", key_tok.line, key_tok.column)
            self.expect("sym", "=")
            if key == "tools":
                tools = self.parse_tool_set()
            elif key in ("role", "prompt"):
                kwargs[key] = self.expect("string")
            elif key == "model":
                tok = self.next()
                if tok.kind not in ("name", "string"):
                    raise ParseError("expected model id", tok.line, tok.column, tok.value)
                kwargs[key] = tok
            elif key == "sentinel":
                tok = self.expect("name")
                if tok.value not in ("true", "false"):
                    raise ParseError(
                        "sentinel must be true or false", tok.line, tok.column, tok.value
                    )
                kwargs[key] = tok
            else:
                raise ParseError(
                    f"unknown agent field {key!r}", key_tok.line, key_tok.column
                )
            tok = self.next()
            if tok.value == ")":
                break
            if tok.value != ",":
                raise ParseError("expected , or )", tok.line, tok.column, tok.value)
        for required in ("role", "prompt", "model"):
            if required not in kwargs:
                raise ParseError(f"agent {name!r} missing {required}=", at.line, at.column)
        if tools is None:
            raise ParseError(f"agent {name!r} missing tools=", at.line, at.column)
        prompt_tok = kwargs["prompt"]
        try:
            template = TemplateString(prompt_tok.value)
        except TemplateError as exc:
            raise ParseError(exc.message, prompt_tok.line, prompt_tok.column) from None
        self.check_channel_refs(template, prompt_tok)
        return AgentNode(
            name=name,
            role=kwargs["role"].value,
            template=template,
            model_id=kwargs["model"].value,
            tools=tools,
            sentinel=kwargs.get("sentinel", Token("name", "false", 0, 0)).value == "true",
        )

    def parse_tool_set(self) -> frozenset[str]:
        self.expect("sym", "{")
        tools: set[str] = set()
        if self.peek().value == "}":
            self.next()
            return frozenset()
        while True:
            tok = self.next()
            if tok.kind not in ("name", "string"):
                raise ParseError("expected tool id", tok.line, tok.column, tok.value)
            if self.tool_registry is not None and tok.value not in self.tool_registry:
                raise ParseError(
                    f"tool {tok.value!r} not in campaign tool registry",
                    tok.line,
                    tok.column,
                )
            tools.add(tok.value)
            tok = self.next()
            if tok.value == "}":
                break
            if tok.value != ",":
                raise ParseError("expected , or }", tok.line, tok.column, tok.value)
        return frozenset(tools)

    def check_channel_refs(self, template: TemplateString, at: Token) -> None:
        # Unknown channel names are parse-time errors; node output refs are
        # resolved later by the checker.  fanout_index is a reserved runtime
        # variable (only valid inside families, which the checker enforces).
        for ref in template.channel_refs():
            if ref == FANOUT_INDEX_VAR:
                continue
            if ref not in self.channels:
                raise ParseError(
                    f"unknown channel {ref!r} in template", at.line, at.column
                )

    def parse_fanout(self, name: str) -> FanoutNode:
        self.expect("sym", "(")
        inner_tok = self.expect("name")
        inner_name = inner_tok.value
        inner = self.nodes.get(inner_name)
        if inner is None:
            raise ParseError(
                f"fanout inner {inner_name!r} is not declared",
                inner_tok.line,
                inner_tok.column,
            )
        if not isinstance(inner, AgentNode):
            raise ParseError(
                f"fanout inner {inner_name!r} must be an agent",
                inner_tok.line,
                inner_tok.column,
            )
        if inner_name in self.consumed:
            raise ParseError(
                f"{inner_name!r} is already consumed by fanout {self.consumed[inner_name]!r}",
                inner_tok.line,
                inner_tok.column,
            )
        self.expect("sym", ",")
        self.expect("name", "k")
        self.expect("sym", "=")
        k_tok = self.expect("int")
        if int(k_tok.value) < 1:
            raise ParseError("fanout k must be >= 1", k_tok.line, k_tok.column)
        self.expect("sym", ")")
        self.consumed[inner_name] = name
        return FanoutNode(name=name, inner=inner, k=int(k_tok.value))

    def parse_edges(self) -> None:
        src_name, src_guard = self.parse_endpoint()
        while True:
            tok = self.next()
            if tok.value != ">>":
                raise ParseError("expected >>", tok.line, tok.column, tok.value)
            dst_name, dst_guard = self.parse_endpoint()
            self.edges.append(Edge(src=src_name, dst=dst_name, guard=src_guard))
            src_name, src_guard = dst_name, dst_guard
            nxt = self.peek()
            if nxt.kind in ("newline", "eof"):
                if src_guard is not None:
                    raise ParseError(
                        f"guard suffix on edge destination {src_name!r}",
                        nxt.line,
                        nxt.column,
                    )
                self.end_statement()
                return

    def parse_endpoint(self) -> tuple[str, str | None]:
        tok = self.expect("name")
        if tok.value not in self.nodes:
            raise ParseError(
                f"edge endpoint {tok.value!r} is not declared", tok.line, tok.column
            )
        guard: str | None = None
        if self.peek().value == ".":
            self.next()
            suffix = self.expect("name")
            if not suffix.value.startswith("on_") or suffix.value[3:] not in GUARDS:
                raise ParseError(
                    "expected on_ok or on_fail", suffix.line, suffix.column, suffix.value
                )
            guard = suffix.value[3:]
        return tok.value, guard


def parse_program(
    source: str,
    *,
    extra_channels: Iterable[str] = (),
    tool_registry: Iterable[str] | None = None,
) -> Program:
    """Parse surface text into a Program, or raise ParseError.

    ``extra_channels`` widens the channel universe beyond the standard set
    (equivalent to a ``use channels`` directive).  When ``tool_registry`` is
    given, tool ids outside it are rejected at parse time.
    """
    return _Parser(_tokenize(source), extra_channels, tool_registry).parse()
