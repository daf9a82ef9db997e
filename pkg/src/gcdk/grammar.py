"""Context-free grammars over a finite token vocabulary.

A grammar is loaded from a small EBNF-like text format (see `load_grammar`),
resolved against a `Vocabulary`, and then reduced with `reduce_grammar` so
that every surviving nonterminal is productive and reachable.  The recognizer
in `gcdk.earley` relies on that reduction: only for reduced grammars does a
non-empty chart frontier certify that a prefix can still be completed.

Terminals are matched at whole-token granularity: a literal matches exactly
one vocabulary string, a pattern terminal matches a vocabulary string iff the
regex matches the entire string.  There is no lexer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

# Slot value used for a masked position in an output canvas.  Real token ids
# are 0..len(vocab)-1 and EOS is len(vocab); MASK deliberately sits outside.
MASK = -1


class GrammarError(ValueError):
    """Base class for grammar loading/validation failures."""

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"line {line}" + (f", col {col}" if col is not None else "") + f": {message}"
        super().__init__(message)


class GrammarSyntaxError(GrammarError):
    pass


class UndeclaredSymbolError(GrammarError):
    pass


class DuplicateRuleError(GrammarError):
    pass


class PatternCompileError(GrammarError):
    pass


class EmptyLanguageError(GrammarError):
    """The start symbol cannot derive any token string."""


class GrammarNotReducedError(GrammarError):
    """An operation that requires a reduced grammar got an unreduced one."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token alphabet plus the EOS/MASK sentinels.

    Token ids are dense 0..size-1.  The EOS sentinel gets id `size` so that
    probability arrays over "alphabet plus EOS" stay dense; MASK is the
    module constant `MASK` and never appears in distributions.
    """

    tokens: tuple[str, ...]
    eos_marker: str = "[EOS]"
    mask_marker: str = "[MASK]"

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            dupes = sorted({t for t in self.tokens if self.tokens.count(t) > 1})
            raise ValueError(f"duplicate vocabulary tokens: {dupes}")
        for marker in (self.eos_marker, self.mask_marker):
            if marker in self.tokens:
                raise ValueError(f"sentinel {marker!r} collides with a vocabulary token")
        if self.eos_marker == self.mask_marker:
            raise ValueError("eos and mask markers must differ")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def display(self, token_id: int) -> str:
        if token_id == MASK:
            return self.mask_marker
        if token_id == self.eos_id:
            return self.eos_marker
        return self.tokens[token_id]

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(t) for t in tokens)


@dataclass(frozen=True)
class TerminalSpec:
    """A terminal: either an exact token string or a whole-token regex."""

    kind: str  # "literal" | "pattern"
    body: str

    def __post_init__(self):
        if self.kind not in ("literal", "pattern"):
            raise ValueError(f"bad terminal kind {self.kind!r}")
        if self.kind == "pattern":
            try:
                compiled = re.compile(self.body)
            except re.error as exc:
                raise PatternCompileError(f"bad pattern /{self.body}/: {exc}") from None
            object.__setattr__(self, "_regex", compiled)

    def matches(self, token: str) -> bool:
        if self.kind == "literal":
            return token == self.body
        return self._regex.fullmatch(token) is not None

    def __str__(self):
        if self.kind == "literal":
            return '"%s"' % self.body.replace("\\", "\\\\").replace('"', '\\"')
        return "/%s/" % self.body


def terminal_matches(spec: TerminalSpec, token: str) -> bool:
    """True iff `spec` matches the whole token string (never a substring)."""
    return spec.matches(token)


# Symbols inside a production right-hand side are encoded as ints:
# nonterminal index i -> i, terminal index j -> -(j + 1).


def term_code(term_index: int) -> int:
    return -(term_index + 1)


def term_index(code: int) -> int:
    return -code - 1


def is_terminal_code(code: int) -> bool:
    return code < 0


@dataclass(frozen=True)
class Production:
    lhs: int  # nonterminal index
    rhs: tuple[int, ...]  # symbol codes; empty tuple = epsilon


@dataclass(frozen=True)
class Grammar:
    """A CFG resolved against a concrete vocabulary.

    `term_tokens[j]` is the set of vocabulary token ids matched by terminal j;
    it is precomputed so the recognizer never touches regexes in its inner
    loop.  `reduced` is set only by `reduce_grammar`.
    """

    nonterminals: tuple[str, ...]
    terminals: tuple[TerminalSpec, ...]
    productions: tuple[Production, ...]
    start: int
    vocab: Vocabulary
    nullable: frozenset[int] = frozenset()
    reduced: bool = False
    term_tokens: tuple[frozenset[int], ...] = ()

    def __post_init__(self):
        if not self.term_tokens:
            object.__setattr__(self, "term_tokens", _match_terminals(self.terminals, self.vocab))
        by_lhs = [[] for _ in self.nonterminals]
        for pid, prod in enumerate(self.productions):
            by_lhs[prod.lhs].append(pid)
        object.__setattr__(self, "prods_by_lhs", tuple(tuple(ps) for ps in by_lhs))

    def nt_name(self, index: int) -> str:
        return self.nonterminals[index]

    def nullable_names(self) -> frozenset[str]:
        return frozenset(self.nonterminals[i] for i in self.nullable)

    def symbol_str(self, code: int) -> str:
        if is_terminal_code(code):
            return str(self.terminals[term_index(code)])
        return self.nonterminals[code]

    def production_str(self, prod: Production) -> str:
        rhs = " ".join(self.symbol_str(c) for c in prod.rhs)
        return f"{self.nonterminals[prod.lhs]} ::= {rhs}"


def _match_terminals(terminals, vocab) -> tuple[frozenset[int], ...]:
    out = []
    for spec in terminals:
        if spec.kind == "literal":
            out.append(frozenset({vocab.id_of(spec.body)}) if spec.body in vocab else frozenset())
        else:
            out.append(frozenset(i for i, tok in enumerate(vocab.tokens) if spec.matches(tok)))
    return tuple(out)


# ---------------------------------------------------------------------------
# Grammar file loader.
#
# Format, one rule per line group:
#     name ::= alt | alt | ...
#       | more alternates on continuation lines
# Alternates are sequences of: "literal", /pattern/, or a rule name, each
# optionally suffixed with + * ?.  An empty alternate denotes epsilon.
# '#' starts a comment outside quotes and patterns.  Suffix sugar expands to
# fresh helper nonterminals at load time.
# ---------------------------------------------------------------------------

_RULE_HEAD = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*::=(.*)$")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def _scan_body(text: str, line_no: int, col0: int):
    """Tokenize one rule-body fragment into (kind, value, col) atoms."""
    out = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in " \t":
            i += 1
            continue
        if ch == "#":
            break
        col = col0 + i + 1
        if ch == "|":
            out.append(("pipe", "|", col))
            i += 1
        elif ch in "+*?":
            out.append(("suffix", ch, col))
            i += 1
        elif ch == '"':
            i += 1
            buf = []
            while i < n:
                c = text[i]
                if c == "\\":
                    if i + 1 >= n:
                        raise GrammarSyntaxError("dangling escape in literal", line_no, col0 + i + 1)
                    nxt = text[i + 1]
                    if nxt in ('"', "\\"):
                        buf.append(nxt)
                        i += 2
                        continue
                    buf.append(c)
                    buf.append(nxt)
                    i += 2
                    continue
                if c == '"':
                    break
                buf.append(c)
                i += 1
            else:
                raise GrammarSyntaxError("unterminated literal", line_no, col)
            i += 1  # closing quote
            out.append(("literal", "".join(buf), col))
        elif ch == "/":
            i += 1
            buf = []
            while i < n:
                c = text[i]
                if c == "\\" and i + 1 < n and text[i + 1] == "/":
                    buf.append("/")
                    i += 2
                    continue
                if c == "\\" and i + 1 < n:
                    buf.append(c)
                    buf.append(text[i + 1])
                    i += 2
                    continue
                if c == "/":
                    break
                buf.append(c)
                i += 1
            else:
                raise GrammarSyntaxError("unterminated pattern", line_no, col)
            i += 1  # closing slash
            out.append(("pattern", "".join(buf), col))
        else:
            m = _IDENT.match(text, i)
            if not m:
                raise GrammarSyntaxError(f"unexpected character {ch!r}", line_no, col)
            out.append(("ident", m.group(0), col))
            i = m.end()
    return out


def load_grammar(text: str, vocab: Vocabulary) -> Grammar:
    """Parse grammar text into an unreduced `Grammar` over `vocab`.

    The start symbol is the left-hand side of the first rule.  Raises
    `GrammarSyntaxError`, `DuplicateRuleError`, `UndeclaredSymbolError`, or
    `PatternCompileError` on malformed input.
    """
    # rule name -> list of alternates; alternate = list of (kind, value, line, col)
    rules: dict[str, list[list[tuple]]] = {}
    order: list[str] = []
    current: Optional[str] = None

    def add_atoms(name, atoms, line_no):
        alts = rules[name]
        for kind, value, col in atoms:
            if kind == "pipe":
                alts.append([])
            elif kind == "suffix":
                if not alts[-1]:
                    raise GrammarSyntaxError(f"suffix {value!r} with no preceding symbol", line_no, col)
                pk, pv, pl, pc, psuf = alts[-1][-1]
                if psuf is not None:
                    raise GrammarSyntaxError("double suffix", line_no, col)
                alts[-1][-1] = (pk, pv, pl, pc, value)
            else:
                alts[-1].append((kind, value, line_no, col, None))

    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        head = _RULE_HEAD.match(raw)
        if head:
            name = head.group(1)
            if name in rules:
                raise DuplicateRuleError(f"duplicate rule name {name!r}", line_no)
            rules[name] = [[]]
            order.append(name)
            current = name
            add_atoms(name, _scan_body(head.group(2), line_no, head.start(2)), line_no)
        elif stripped.startswith("|"):
            if current is None:
                raise GrammarSyntaxError("continuation line before any rule", line_no, 1)
            idx = raw.index("|")
            add_atoms(current, _scan_body(raw[idx:], line_no, idx), line_no)
        else:
            raise GrammarSyntaxError("expected 'name ::= ...' or '| ...' continuation", line_no, 1)

    if not order:
        raise GrammarSyntaxError("no rules found", 1, 1)

    # Resolve symbols.  Identifiers must appear as a rule LHS somewhere.
    nt_index = {name: i for i, name in enumerate(order)}
    terminals: list[TerminalSpec] = []
    term_by_key: dict[tuple[str, str], int] = {}

    def term_ref(kind, value, line_no, col):
        key = (kind, value)
        if key not in term_by_key:
            try:
                spec = TerminalSpec(kind, value)
            except PatternCompileError as exc:
                raise PatternCompileError(str(exc), line_no, col) from None
            term_by_key[key] = len(terminals)
            terminals.append(spec)
        return term_code(term_by_key[key])

    nonterminals = list(order)
    productions: list[Production] = []
    sugar_cache: dict[tuple[str, int], int] = {}

    def fresh_nt(base: str) -> int:
        name = base
        k = 2
        while name in nt_index:
            name = f"{base}{k}"
            k += 1
        nt_index[name] = len(nonterminals)
        nonterminals.append(name)
        return nt_index[name]

    def sugar_nt(suffix: str, code: int) -> int:
        key = (suffix, code)
        if key in sugar_cache:
            return sugar_cache[key]
        base = nonterminals[code] if code >= 0 else f"t{term_index(code)}"
        tag = {"?": "opt", "*": "star", "+": "plus"}[suffix]
        nt = fresh_nt(f"__{tag}_{base}")
        sugar_cache[key] = nt
        if suffix == "?":
            productions.append(Production(nt, ()))
            productions.append(Production(nt, (code,)))
        elif suffix == "*":
            productions.append(Production(nt, ()))
            productions.append(Production(nt, (code, nt)))
        else:  # "+"
            productions.append(Production(nt, (code,)))
            productions.append(Production(nt, (code, nt)))
        return nt

    for name in order:
        lhs = nt_index[name]
        for alt in rules[name]:
            rhs = []
            for kind, value, line_no, col, suffix in alt:
                if kind == "ident":
                    if value not in nt_index:
                        raise UndeclaredSymbolError(f"undeclared symbol {value!r}", line_no, col)
                    code = nt_index[value]
                else:
                    code = term_ref(kind, value, line_no, col)
                if suffix is not None:
                    code = sugar_nt(suffix, code)
                rhs.append(code)
            productions.append(Production(lhs, tuple(rhs)))

    g = Grammar(
        nonterminals=tuple(nonterminals),
        terminals=tuple(terminals),
        productions=tuple(productions),
        start=nt_index[order[0]],
        vocab=vocab,
    )
    return Grammar(
        nonterminals=g.nonterminals,
        terminals=g.terminals,
        productions=g.productions,
        start=g.start,
        vocab=vocab,
        nullable=nullable_set(g),
        term_tokens=g.term_tokens,
    )


def nullable_set(g: Grammar) -> frozenset[int]:
    """Indices of nonterminals that derive the empty string."""
    nullable: set[int] = set()
    changed = True
    while changed:
        changed = False
        for prod in g.productions:
            if prod.lhs in nullable:
                continue
            if all(not is_terminal_code(c) and c in nullable for c in prod.rhs):
                nullable.add(prod.lhs)
                changed = True
    return frozenset(nullable)


def reduce_grammar(g: Grammar) -> Grammar:
    """Strip unproductive and unreachable symbols; preserve the language.

    Productivity is judged against the vocabulary: a terminal that matches no
    vocabulary token can never be scanned, so rules through it are pruned.
    This is what makes "non-empty Earley frontier" equivalent to prefix
    extendability downstream.  Raises `EmptyLanguageError` when the start
    symbol itself is unproductive.
    """
    term_ok = [len(tok_set) > 0 for tok_set in g.term_tokens]

    productive: set[int] = set()
    changed = True
    while changed:
        changed = False
        for prod in g.productions:
            if prod.lhs in productive:
                continue
            ok = True
            for code in prod.rhs:
                if is_terminal_code(code):
                    if not term_ok[term_index(code)]:
                        ok = False
                        break
                elif code not in productive:
                    ok = False
                    break
            if ok:
                productive.add(prod.lhs)
                changed = True

    if g.start not in productive:
        raise EmptyLanguageError(
            f"start symbol {g.nonterminals[g.start]!r} derives no token string"
        )

    def prod_ok(prod):
        if prod.lhs not in productive:
            return False
        for code in prod.rhs:
            if is_terminal_code(code):
                if not term_ok[term_index(code)]:
                    return False
            elif code not in productive:
                return False
        return True

    kept = [p for p in g.productions if prod_ok(p)]

    reachable = {g.start}
    frontier = [g.start]
    by_lhs: dict[int, list[Production]] = {}
    for p in kept:
        by_lhs.setdefault(p.lhs, []).append(p)
    while frontier:
        nt = frontier.pop()
        for p in by_lhs.get(nt, ()):
            for code in p.rhs:
                if not is_terminal_code(code) and code not in reachable:
                    reachable.add(code)
                    frontier.append(code)

    kept = [p for p in kept if p.lhs in reachable]

    nt_keep = [i for i in range(len(g.nonterminals)) if i in reachable and i in productive]
    nt_remap = {old: new for new, old in enumerate(nt_keep)}

    used_terms: list[int] = []
    term_remap: dict[int, int] = {}
    for p in kept:
        for code in p.rhs:
            if is_terminal_code(code):
                ti = term_index(code)
                if ti not in term_remap:
                    term_remap[ti] = len(used_terms)
                    used_terms.append(ti)

    def remap_code(code):
        if is_terminal_code(code):
            return term_code(term_remap[term_index(code)])
        return nt_remap[code]

    new_prods = tuple(
        Production(nt_remap[p.lhs], tuple(remap_code(c) for c in p.rhs)) for p in kept
    )
    reduced = Grammar(
        nonterminals=tuple(g.nonterminals[i] for i in nt_keep),
        terminals=tuple(g.terminals[i] for i in used_terms),
        productions=new_prods,
        start=nt_remap[g.start],
        vocab=g.vocab,
        reduced=True,
        term_tokens=tuple(g.term_tokens[i] for i in used_terms),
    )
    return Grammar(
        nonterminals=reduced.nonterminals,
        terminals=reduced.terminals,
        productions=reduced.productions,
        start=reduced.start,
        vocab=g.vocab,
        nullable=nullable_set(reduced),
        reduced=True,
        term_tokens=reduced.term_tokens,
    )


def load_vocabulary(text: str, eos_marker: str = "[EOS]", mask_marker: str = "[MASK]") -> Vocabulary:
    """Parse a vocabulary file: one token per line, taken verbatim."""
    tokens = [line for line in text.splitlines() if line != ""]
    return Vocabulary(tuple(tokens), eos_marker=eos_marker, mask_marker=mask_marker)


def literal_vocabulary(g_text: str) -> Vocabulary:
    """Build a vocabulary from the literal terminals of a grammar text.

    Convenience for grammars without pattern terminals; the CLI uses it when
    no vocabulary file is given.
    """
    probe = Vocabulary((), eos_marker="\x00eos", mask_marker="\x00mask")
    # Parse with a throwaway vocabulary; only the terminal list is wanted.
    g = load_grammar(g_text, probe)
    literals = []
    seen = set()
    has_pattern = False
    for spec in g.terminals:
        if spec.kind == "pattern":
            has_pattern = True
        elif spec.body not in seen:
            seen.add(spec.body)
            literals.append(spec.body)
    if has_pattern:
        raise GrammarError("grammar has pattern terminals; an explicit vocabulary is required")
    return Vocabulary(tuple(literals))
