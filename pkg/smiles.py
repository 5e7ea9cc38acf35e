import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import constants
from utils import InvalidSmilesError, UnknownTokenError, UnsupportedAtomError

logger = logging.getLogger(__name__)

UNKNOWN_TOKEN = "UNKNOWN_TOKEN"
UNBALANCED_PAREN = "UNBALANCED_PAREN"
UNBALANCED_BRACKET = "UNBALANCED_BRACKET"
UNMATCHED_RING_BOND = "UNMATCHED_RING_BOND"
EMPTY = "EMPTY"
VALENCE_VIOLATION = "VALENCE_VIOLATION"
# grammar failures the counting checks cannot see: dangling/doubled bonds, malformed atoms
BAD_BOND = "BAD_BOND"
BAD_ATOM = "BAD_ATOM"
failure_codes = (UNKNOWN_TOKEN, UNBALANCED_PAREN, UNBALANCED_BRACKET, UNMATCHED_RING_BOND, EMPTY, VALENCE_VIOLATION,
                 BAD_BOND, BAD_ATOM)

# IUPAC 2021 standard (abridged) atomic weights
atomic_weights = {
    "H": 1.008, "B": 10.81, "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998, "Si": 28.085,
    "P": 30.974, "S": 32.06, "Cl": 35.45, "Br": 79.904, "Sn": 118.71, "I": 126.90,
}

# allowed valences, smallest first; the first entry is the default used for implicit hydrogens
valences = {
    "H": (1,), "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}

organic_atoms = {"B", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "c", "n", "o", "p", "s"}
bracket_elements = organic_atoms | {"Si", "Sn", "H"}
bond_orders = {"-": 1, "=": 2, "#": 3, "/": 1, "\\": 1}
ring_labels = set("123456789")


class Vocabulary:
    def __init__(self, symbols: Sequence[str] = constants.smiles_symbols) -> None:
        self.tokens = list(constants.special_tokens) + list(symbols)
        self.token_to_id = {token: idx for idx, token in enumerate(self.tokens)}
        assert len(self.token_to_id) == len(self.tokens), "Vocabulary tokens must be unique"
        self.pad_id = self.token_to_id[constants.pad_token]
        self.bos_id = self.token_to_id[constants.bos_token]
        self.eos_id = self.token_to_id[constants.eos_token]
        self.special_ids = {self.pad_id, self.bos_id, self.eos_id}
        self.symbols = set(symbols)
        self.max_symbol_len = max(len(s) for s in symbols)

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]


VOCAB = Vocabulary()


@dataclass(frozen=True)
class TokenSeq:
    ids: Tuple[int, ...]
    framed: bool = False

    def __len__(self):
        return len(self.ids)

    def frame(self, vocab: Vocabulary = VOCAB) -> "TokenSeq":
        if self.framed:
            return self
        return TokenSeq((vocab.bos_id,) + tuple(self.ids) + (vocab.eos_id,), framed=True)

    def texts(self, vocab: Vocabulary = VOCAB) -> List[str]:
        return [vocab.token_of(i) for i in self.ids]


@dataclass(frozen=True)
class ValidityReport:
    """Failure codes of a SMILES string, each one of `failure_codes`; empty when valid."""
    reasons: Tuple[str, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.reasons


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    bracket: bool = False
    hcount: int = 0
    charge: int = 0
    bonds: List[Tuple[int, int, bool]] = field(default_factory=list)

    def bond_order_sum(self) -> int:
        return sum(order for _, order, _ in self.bonds)

    def implicit_hydrogens(self) -> int:
        if self.bracket or self.element not in valences:
            return 0
        used = self.bond_order_sum()
        if self.aromatic:
            # an aromatic atom gives up one valence slot to the ring
            return max(0, valences[self.element][0] - used - 1)
        for valence in valences[self.element]:
            if valence >= used:
                return valence - used
        return 0


def split_symbols(s: str, vocab: Vocabulary = VOCAB) -> List[str]:
    """Greedy longest-match split of `s` into vocabulary symbols."""
    out = []
    i = 0
    while i < len(s):
        for n in range(min(vocab.max_symbol_len, len(s) - i), 0, -1):
            if s[i:i + n] in vocab.symbols:
                out.append(s[i:i + n])
                i += n
                break
        else:
            raise UnknownTokenError(s[i], i)
    return out


def tokenize(s: str, vocab: Vocabulary = VOCAB) -> TokenSeq:
    return TokenSeq(tuple(vocab.token_to_id[t] for t in split_symbols(s, vocab)))


def detokenize(t, vocab: Vocabulary = VOCAB) -> str:
    ids = t.ids if isinstance(t, TokenSeq) else t
    return "".join(vocab.token_of(int(i)) for i in ids if int(i) not in vocab.special_ids)


def _bracket_atom(inner: List[str], smiles: str) -> Atom:
    """[isotope] element [@|@@] [H[n]] [charge]"""
    i = 0
    while i < len(inner) and inner[i] in ring_labels:
        i += 1
    if i >= len(inner) or inner[i] not in bracket_elements:
        raise InvalidSmilesError("Bracket atom without element in {!r}".format(smiles), BAD_ATOM)
    symbol = inner[i]
    atom = Atom(element=symbol.capitalize() if symbol in "cnops" else symbol, aromatic=symbol in "cnops",
                bracket=True)
    i += 1
    if i < len(inner) and inner[i] in ("@", "@@"):
        i += 1
    if i < len(inner) and inner[i] == "H" and symbol != "H":
        atom.hcount = 1
        i += 1
        if i < len(inner) and inner[i] in ring_labels:
            atom.hcount = int(inner[i])
            i += 1
    while i < len(inner) and inner[i] in ("+", "-"):
        sign = 1 if inner[i] == "+" else -1
        i += 1
        if i < len(inner) and inner[i] in ring_labels:
            atom.charge += sign * int(inner[i])
            i += 1
        else:
            atom.charge += sign
    if i != len(inner):
        raise InvalidSmilesError("Unexpected {!r} in bracket atom of {!r}".format(inner[i], smiles), BAD_ATOM)
    return atom


def parse_molecule(s: str, vocab: Vocabulary = VOCAB) -> List[Atom]:
    """Walk the SMILES grammar and return atoms with their bonds.

    Raises InvalidSmilesError whose `reason` is one of the ValidityReport codes.
    """
    symbols = split_symbols(s, vocab)
    atoms: List[Atom] = []
    prev: Optional[int] = None
    branches: List[int] = []
    pending: Optional[int] = None
    rings: Dict[str, Tuple[int, Optional[int]]] = {}
    last = None

    def add_bond(i, j, order):
        aromatic = order is None and atoms[i].aromatic and atoms[j].aromatic
        order = 1 if order is None else order
        atoms[i].bonds.append((j, order, aromatic))
        atoms[j].bonds.append((i, order, aromatic))

    def add_atom(atom):
        nonlocal prev, pending
        atoms.append(atom)
        if prev is not None:
            add_bond(prev, len(atoms) - 1, pending)
        elif pending is not None:
            raise InvalidSmilesError("Bond before first atom in {!r}".format(s), BAD_BOND)
        pending = None
        prev = len(atoms) - 1

    i = 0
    while i < len(symbols):
        sym = symbols[i]
        if sym == "[":
            try:
                end = symbols.index("]", i)
            except ValueError:
                raise InvalidSmilesError("Unclosed bracket in {!r}".format(s), UNBALANCED_BRACKET)
            inner = symbols[i + 1:end]
            if "[" in inner:
                raise InvalidSmilesError("Nested bracket in {!r}".format(s), UNBALANCED_BRACKET)
            add_atom(_bracket_atom(inner, s))
            i = end
        elif sym == "]":
            raise InvalidSmilesError("Unopened bracket in {!r}".format(s), UNBALANCED_BRACKET)
        elif sym in organic_atoms:
            add_atom(Atom(element=sym.capitalize() if sym in "cnops" else sym, aromatic=sym in "cnops"))
        elif sym == "(":
            if prev is None or pending is not None:
                raise InvalidSmilesError("Branch without anchor atom in {!r}".format(s), UNBALANCED_PAREN)
            branches.append(prev)
        elif sym == ")":
            if not branches or last == "(":
                raise InvalidSmilesError("Empty or unopened branch in {!r}".format(s), UNBALANCED_PAREN)
            if pending is not None:
                raise InvalidSmilesError("Dangling bond before ')' in {!r}".format(s), BAD_BOND)
            prev = branches.pop()
        elif sym in bond_orders:
            if pending is not None or prev is None:
                raise InvalidSmilesError("Misplaced bond {!r} in {!r}".format(sym, s), BAD_BOND)
            pending = bond_orders[sym]
        elif sym in ring_labels:
            if prev is None:
                raise InvalidSmilesError("Ring bond before any atom in {!r}".format(s), UNMATCHED_RING_BOND)
            if sym in rings:
                other, order = rings.pop(sym)
                if other == prev:
                    raise InvalidSmilesError("Ring bond closes on its own atom in {!r}".format(s),
                                             UNMATCHED_RING_BOND)
                add_bond(prev, other, pending if pending is not None else order)
            else:
                rings[sym] = (prev, pending)
            pending = None
        else:
            # bare H, Si, Sn, chirality or charge outside brackets
            raise InvalidSmilesError("Symbol {!r} must be inside brackets in {!r}".format(sym, s), BAD_ATOM)
        last = sym
        i += 1

    if pending is not None:
        raise InvalidSmilesError("Dangling bond at end of {!r}".format(s), BAD_BOND)
    if branches:
        raise InvalidSmilesError("Unclosed branch in {!r}".format(s), UNBALANCED_PAREN)
    if rings:
        raise InvalidSmilesError("Unclosed ring bond(s) {} in {!r}".format(sorted(rings), s), UNMATCHED_RING_BOND)
    if not atoms:
        raise InvalidSmilesError("No atoms in {!r}".format(s), EMPTY)
    return atoms


def _valence_ok(atom: Atom) -> bool:
    if atom.element not in valences:
        return True
    used = atom.bond_order_sum() + atom.hcount
    return used <= max(valences[atom.element]) + abs(atom.charge)


def check_validity(s: str, strict: bool = False, vocab: Vocabulary = VOCAB) -> ValidityReport:
    try:
        symbols = split_symbols(s, vocab)
    except UnknownTokenError:
        return ValidityReport((UNKNOWN_TOKEN,))

    reasons = []
    depth = 0
    in_bracket = False
    paren_ok = True
    bracket_ok = True
    ring_counts: Dict[str, int] = {}
    n_atoms = 0
    for sym in symbols:
        if sym == "[":
            bracket_ok = bracket_ok and not in_bracket
            in_bracket = True
            n_atoms += 1
        elif sym == "]":
            bracket_ok = bracket_ok and in_bracket
            in_bracket = False
        elif in_bracket:
            continue
        elif sym == "(":
            depth += 1
        elif sym == ")":
            depth -= 1
            paren_ok = paren_ok and depth >= 0
        elif sym in ring_labels:
            ring_counts[sym] = ring_counts.get(sym, 0) + 1
        elif sym in organic_atoms:
            n_atoms += 1
    if not paren_ok or depth != 0:
        reasons.append(UNBALANCED_PAREN)
    if not bracket_ok or in_bracket:
        reasons.append(UNBALANCED_BRACKET)
    if any(count % 2 for count in ring_counts.values()):
        reasons.append(UNMATCHED_RING_BOND)
    if n_atoms == 0:
        reasons.append(EMPTY)
    if reasons:
        return ValidityReport(tuple(reasons))

    try:
        atoms = parse_molecule(s, vocab)
    except InvalidSmilesError as e:
        return ValidityReport((e.reason,))
    if strict and not all(_valence_ok(atom) for atom in atoms):
        return ValidityReport((VALENCE_VIOLATION,))
    return ValidityReport()


def molecular_weight(s: str, strict: bool = False, vocab: Vocabulary = VOCAB) -> float:
    """Average molecular mass in g/mol, implicit hydrogens filled to the default valence."""
    report = check_validity(s, strict=strict, vocab=vocab)
    if not report.valid:
        raise InvalidSmilesError("Invalid SMILES {!r}: {}".format(s, ", ".join(report.reasons)), report.reasons[0])
    atoms = parse_molecule(s, vocab)
    mass = 0.0
    for atom in atoms:
        if strict and atom.bracket and atom.element not in valences:
            raise UnsupportedAtomError("No valence rule for bracket atom {} in {!r}".format(atom.element, s))
        hydrogens = atom.hcount + atom.implicit_hydrogens()
        mass += atomic_weights[atom.element] + hydrogens * atomic_weights["H"]
    return mass
