"""Incremental Earley recognizer over reduced grammars.

Exposes the three queries the decoding engine needs: `is_valid` (sentence
membership), `is_extendable` (can this prefix still be completed), and
`next_tokens` (which tokens keep a prefix extendable).  `ChartState` is a
value: `advance` returns a new state and never mutates its input, so states
can be cloned and probed freely during lookahead verification.

Extendability equals "frontier non-empty" only because grammars are reduced;
`init_chart` therefore rejects unreduced grammars outright.
"""

from __future__ import annotations

from .grammar import Grammar, GrammarNotReducedError, is_terminal_code, term_index

# An item is (production id, dot position, origin column); plain tuples keep
# the closure loop cheap.


class NotExtendablePrefixError(ValueError):
    """`next_tokens` was asked about a prefix that is already dead."""


class ChartState:
    """Recognizer state after consuming a fixed token prefix.

    `dead` (empty frontier) is an ordinary value, not an error, and is
    absorbing under `advance`.  `accepting` means the consumed prefix is a
    complete sentence.
    """

    __slots__ = ("grammar", "columns", "accepting")

    def __init__(self, grammar: Grammar, columns: tuple[frozenset, ...], accepting: bool):
        self.grammar = grammar
        self.columns = columns
        self.accepting = accepting

    @property
    def n(self) -> int:
        return len(self.columns) - 1

    @property
    def frontier(self) -> frozenset:
        return self.columns[-1]

    @property
    def dead(self) -> bool:
        return not self.columns[-1]

    def advance(self, token_id: int) -> "ChartState":
        return advance(self, token_id)

    def expected_terminals(self) -> frozenset[int]:
        """Terminal indices appearing after a dot anywhere in the frontier."""
        g = self.grammar
        out = set()
        for pid, dot, _origin in self.columns[-1]:
            rhs = g.productions[pid].rhs
            if dot < len(rhs) and is_terminal_code(rhs[dot]):
                out.add(term_index(rhs[dot]))
        return frozenset(out)

    def admissible_tokens(self) -> frozenset[int]:
        """Vocabulary token ids that keep this prefix extendable."""
        out = set()
        for ti in self.expected_terminals():
            out |= self.grammar.term_tokens[ti]
        return frozenset(out)


def _close(g: Grammar, columns: tuple, col_index: int, seed):
    """Run prediction and completion to a fixpoint over one column.

    Nullable nonterminals are handled at prediction time: any item whose dot
    sits before a nullable nonterminal also spawns the dot-advanced item,
    which avoids same-column completion races for epsilon derivations.
    """
    productions = g.productions
    prods_by_lhs = g.prods_by_lhs
    nullable = g.nullable

    column = set(seed)
    work = list(column)
    while work:
        item = work.pop()
        pid, dot, origin = item
        rhs = productions[pid].rhs
        if dot == len(rhs):
            lhs = productions[pid].lhs
            parents = column if origin == col_index else columns[origin]
            for parent in tuple(parents):
                ppid, pdot, porigin = parent
                prhs = productions[ppid].rhs
                if pdot < len(prhs) and prhs[pdot] == lhs:
                    nxt = (ppid, pdot + 1, porigin)
                    if nxt not in column:
                        column.add(nxt)
                        work.append(nxt)
        else:
            sym = rhs[dot]
            if not is_terminal_code(sym):
                for npid in prods_by_lhs[sym]:
                    nxt = (npid, 0, col_index)
                    if nxt not in column:
                        column.add(nxt)
                        work.append(nxt)
                if sym in nullable:
                    nxt = (pid, dot + 1, origin)
                    if nxt not in column:
                        column.add(nxt)
                        work.append(nxt)
    return frozenset(column)


def _is_accepting(g: Grammar, column) -> bool:
    for pid, dot, origin in column:
        prod = g.productions[pid]
        if origin == 0 and prod.lhs == g.start and dot == len(prod.rhs):
            return True
    return False


def init_chart(g: Grammar) -> ChartState:
    """Fresh chart for the empty prefix; requires a reduced grammar."""
    if not g.reduced:
        raise GrammarNotReducedError("init_chart requires a reduced grammar; call reduce_grammar first")
    seed = [(pid, 0, 0) for pid in g.prods_by_lhs[g.start]]
    column0 = _close(g, (), 0, seed)
    return ChartState(g, (column0,), _is_accepting(g, column0))


def advance(state: ChartState, token_id: int) -> ChartState:
    """Consume one token; dead states stay dead."""
    g = state.grammar
    frontier = state.columns[-1]
    if not frontier:
        return ChartState(g, state.columns + (frozenset(),), False)
    productions = g.productions
    term_tokens = g.term_tokens
    scanned = []
    for pid, dot, origin in frontier:
        rhs = productions[pid].rhs
        if dot < len(rhs):
            sym = rhs[dot]
            if sym < 0 and token_id in term_tokens[-sym - 1]:
                scanned.append((pid, dot + 1, origin))
    if not scanned:
        return ChartState(g, state.columns + (frozenset(),), False)
    col_index = len(state.columns)
    column = _close(g, state.columns, col_index, scanned)
    return ChartState(g, state.columns + (column,), _is_accepting(g, column))


def run_chart(g: Grammar, tokens) -> ChartState:
    state = init_chart(g)
    for t in tokens:
        state = state.advance(t)
        if state.dead:
            break
    if state.dead:
        # Dead is absorbing; pad so n reflects the full input length anyway.
        missing = len(tokens) - (len(state.columns) - 1)
        if missing > 0:
            state = ChartState(g, state.columns + (frozenset(),) * missing, False)
    return state


def is_valid(g: Grammar, tokens) -> bool:
    """True iff the token sequence is a sentence of the grammar's language."""
    return run_chart(g, tokens).accepting


def is_extendable(g: Grammar, tokens) -> bool:
    """True iff some continuation of the token sequence is a sentence."""
    return not run_chart(g, tokens).dead


def next_tokens(g: Grammar, tokens) -> frozenset[int]:
    """Token ids t with is_extendable(tokens + [t]); requires an extendable prefix."""
    state = run_chart(g, tokens)
    if state.dead:
        raise NotExtendablePrefixError("prefix is not extendable; next_tokens is undefined")
    return state.admissible_tokens()
