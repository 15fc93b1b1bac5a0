#!/usr/bin/env python3
"""
Semantic rule tree: turn scaled states into sentences.

The grammar is a JSON tree. Every node has a non-empty `phrase`; inner nodes
list `children`; leaves carry a `descriptor`. A node may declare the `kpi`
its subtree talks about (inherited downwards). Named subtrees live under
`definitions` and are referenced with {"ref": "<name>"}; each reference
expands into its own vertices, so the result is still a tree.

    {
      "version": 1,
      "root": {"phrase": "the node reports that", "children": [
        {"phrase": "the packet loss rate", "kpi": "packet_loss",
         "children": [{"ref": "severity_a"}, ...]}
      ]},
      "definitions": {
        "severity_a": {"phrase": "shows a", "children": [
          {"phrase": "slight anomaly", "descriptor": "slight"}, ...]}
      }
    }

A sentence is the root-to-leaf path joined by spaces, capitalised and closed
with a period. Normal states are pruned; a value is reported when it exceeds
the interval's upper bound by the factor tau.

Usage:
    python src/semtree.py data/grammar.json
    python src/semtree.py data/grammar.json --rulebase data/run/rulebase.json
"""

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from errors import DescriptorLookupError, DomainError, GrammarStructureError, MsadmError
from ingest import KPI_UNITS
from rulebase import load_rulebase, needs_update, recluster, scale_windows

logger = logging.getLogger(__name__)

TAU = 1.15


@dataclass(frozen=True)
class Node:
    node_id: int
    phrase: str
    kpi: str = None
    descriptor: str = None
    parent: int = None
    children: tuple = ()

    @property
    def is_leaf(self):
        return not self.children


@dataclass(frozen=True)
class SemanticTree:
    nodes: tuple
    root: int
    leaves: dict
    unreachable: tuple = ()

    def node(self, node_id):
        return self.nodes[node_id]

    def leaf_keys(self):
        return set(self.leaves)


@dataclass(frozen=True)
class DescriptorMapping:
    """(entity_class, kpi) → {state code: descriptor}, plus each group's normal code."""

    codes: dict
    normal_codes: dict

    def describe(self, entity_class, kpi_name, code):
        try:
            return self.codes[(entity_class, kpi_name)][code]
        except KeyError:
            raise DescriptorLookupError(
                f"no descriptor for code {code} of KPI '{kpi_name}' ({entity_class})"
            ) from None

    def normal_code(self, entity_class, kpi_name):
        try:
            return self.normal_codes[(entity_class, kpi_name)]
        except KeyError:
            raise DescriptorLookupError(f"no mapping for KPI '{kpi_name}' ({entity_class})") from None

    def used_descriptors(self):
        """(kpi, descriptor) pairs the tree has to resolve."""
        return {(kpi, d) for (_, kpi), table in self.codes.items() for d in table.values()}


# --- grammar ---------------------------------------------------------------

class _Builder:
    def __init__(self, definitions):
        self.definitions = definitions
        self.nodes = []
        self.leaves = {}
        self.unkeyed = []
        self.referenced = set()

    def build(self, entry, parent, kpi, refs):
        if not isinstance(entry, dict):
            raise GrammarStructureError(f"expected an object, got {type(entry).__name__}", node=parent)

        if "ref" in entry:
            name = entry["ref"]
            if name in refs:
                raise GrammarStructureError("reference cycle " + " → ".join(refs + [name]), node=name)
            if name not in self.definitions:
                raise GrammarStructureError("unknown reference", node=name)
            self.referenced.add(name)
            return self.build(self.definitions[name], parent, kpi, refs + [name])

        phrase = entry.get("phrase")
        if not isinstance(phrase, str) or not phrase.strip():
            raise GrammarStructureError("missing or empty phrase", node=parent)
        phrase = " ".join(phrase.split())
        kpi = entry.get("kpi", kpi)
        children = entry.get("children", [])
        descriptor = entry.get("descriptor")

        if children and descriptor is not None:
            raise GrammarStructureError("inner node carries a descriptor", node=phrase)
        if not children and descriptor is None:
            raise GrammarStructureError("leaf has no descriptor", node=phrase)

        node_id = len(self.nodes)
        self.nodes.append(None)
        child_ids = tuple(self.build(child, node_id, kpi, refs) for child in children)
        self.nodes[node_id] = Node(node_id, phrase, kpi, descriptor, parent, child_ids)

        if descriptor is not None:
            if kpi is None:
                self.unkeyed.append(f"{phrase} (no kpi)")
            elif (kpi, descriptor) in self.leaves:
                raise GrammarStructureError(f"duplicate leaf for ({kpi}, {descriptor})", node=phrase)
            else:
                self.leaves[(kpi, descriptor)] = node_id
        return node_id


def grammar_from_dict(doc, mapping=None):
    """Build and verify a SemanticTree from a parsed grammar document."""
    if isinstance(doc, list):
        if len(doc) != 1:
            raise GrammarStructureError(f"grammar must have exactly one root, found {len(doc)}")
        doc = {"root": doc[0]}
    root = doc.get("root")
    if isinstance(root, list):
        if len(root) != 1:
            raise GrammarStructureError(f"grammar must have exactly one root, found {len(root)}")
        root = root[0]
    if root is None:
        raise GrammarStructureError("grammar has no root")

    definitions = doc.get("definitions", {})
    builder = _Builder(definitions)
    root_id = builder.build(root, None, None, [])

    unreachable = [f"definition '{name}' is never referenced" for name in definitions if name not in builder.referenced]
    unreachable.extend(builder.unkeyed)
    for message in unreachable:
        logger.warning("grammar: %s", message)

    tree = SemanticTree(
        nodes=tuple(builder.nodes),
        root=root_id,
        leaves=dict(builder.leaves),
        unreachable=tuple(unreachable),
    )
    if mapping is not None:
        missing = validate_mapping(tree, mapping)
        if missing:
            raise GrammarStructureError(f"grammar has no leaf for {missing}")
    return tree


def load_grammar(path, mapping=None):
    """
    Load a grammar file.

    Args:
        path: grammar JSON
        mapping: optional DescriptorMapping every descriptor of which must resolve
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Grammar file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise GrammarStructureError(f"{path.name}: invalid JSON ({e.msg}, line {e.lineno})") from None
    tree = grammar_from_dict(doc, mapping)
    logger.info("loaded grammar %s: %d nodes, %d leaves", path, len(tree.nodes), len(tree.leaves))
    return tree


def validate_mapping(tree, mapping):
    """Sorted (kpi, descriptor) pairs used by the mapping that have no leaf."""
    return sorted(mapping.used_descriptors() - tree.leaf_keys())


def tree_fingerprint(tree):
    """sha256 over every root-to-leaf path with its key."""
    lines = []
    for (kpi, descriptor), leaf in sorted(tree.leaves.items()):
        phrases = [n.phrase for n in _path_to(tree, leaf)]
        lines.append(f"{kpi}|{descriptor}|{' / '.join(phrases)}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def mapping_from_rulebase(rb):
    codes = {}
    normal_codes = {}
    for group, rs in rb.rule_sets.items():
        table = rs.descriptor_map()
        if len(set(table.values())) != len(table):
            raise DescriptorLookupError(f"descriptors of {group[0]}/{group[1]} are not unique: {table}")
        codes[group] = table
        normal_codes[group] = rs.normal_code
    return DescriptorMapping(codes=codes, normal_codes=normal_codes)


# --- traversal and sentences -----------------------------------------------

def _path_to(tree, node_id):
    path = []
    while node_id is not None:
        node = tree.node(node_id)
        path.append(node)
        node_id = node.parent
    return path[::-1]


def traverse_tree(tree, kpi, descriptor):
    """Nodes from the root to the leaf of (kpi, descriptor)."""
    try:
        leaf = tree.leaves[(kpi, descriptor)]
    except KeyError:
        raise DescriptorLookupError(f"grammar has no '{descriptor}' leaf for KPI '{kpi}'") from None
    return _path_to(tree, leaf)


def construct_sentence(path, suffix=None):
    """
    Join phrases with single spaces, capitalise, end with a period.

    `suffix` goes before the period: "... moderate anomaly with value 12.0%."
    """
    if not path:
        raise DomainError("cannot build a sentence from an empty path")
    phrases = [getattr(p, "phrase", p) for p in path]
    if any(not isinstance(p, str) or not p.strip() for p in phrases):
        raise DomainError(f"empty phrase in path {phrases!r}")
    text = " ".join(" ".join(p.split()) for p in phrases)
    if suffix:
        text = f"{text} {' '.join(suffix.split())}"
    return text[0].upper() + text[1:] + "."


def format_value(kpi_name, v):
    """Fractions as percent (1 decimal), ms as integers, Mb/s with 1 decimal."""
    unit = KPI_UNITS.get(kpi_name)
    if unit == "fraction":
        return f"{v * 100:.1f}%"
    if unit == "ms":
        return f"{v:.0f} ms"
    if unit == "Mb/s":
        return f"{v:.1f} Mb/s"
    return f"{v:.4g}"


def exceeds_upper(v, upper, tau=TAU):
    return v > upper * tau


def refresh_if_due(rb, recent, now, period):
    """
    Recluster when `period` has elapsed since the last build.

    Returns:
        (rulebase, mapping, refreshed)
    """
    if recent and needs_update(rb, now, period):
        rb = recluster(rb, recent, now=now)
        logger.info("rule base refreshed at t=%s", now)
        return rb, mapping_from_rulebase(rb), True
    return rb, mapping_from_rulebase(rb), False


def describe_state(entry, tree, mapping, value=None, tau=TAU):
    """Sentence for one LSS entry, or None when the state is normal."""
    if entry.code == mapping.normal_code(entry.entity_class, entry.kpi_name):
        return None
    descriptor = mapping.describe(entry.entity_class, entry.kpi_name, entry.code)
    path = traverse_tree(tree, entry.kpi_name, descriptor)
    v = entry.representative_value if value is None else value
    suffix = None
    if exceeds_upper(v, entry.interval.upper, tau):
        suffix = f"with value {format_value(entry.kpi_name, v)}"
    return construct_sentence(path, suffix)


def reinterpret(entry, rb):
    """
    The entry under another rule base, looked up by its representative value.

    A value outside every interval takes the nearest one.
    """
    rs = rb.lookup(entry.entity_class, entry.kpi_name)
    v = entry.representative_value
    iv = rs.interval_for_value(v)
    if iv is None:
        iv = min(rs.intervals, key=lambda i: (max(i.lower - v, v - i.upper, 0.0), i.severity, i.code))
    return replace(entry, code=iv.code, interval=iv)


@dataclass(frozen=True)
class DescriptionRun:
    """Sentences plus the rule base and mapping they were produced under."""

    sentences: list
    rulebase: object
    mapping: DescriptorMapping
    refreshed: bool


def describe_with_refresh(states, tree, rb, recent, now, period, windows=None, values=None, tau=TAU):
    """
    Refresh the rule base when due, then describe the states under it.

    After a refresh every state is re-interpreted under the new rules: the
    windows are rescaled when given (aligned with `states`), otherwise each
    entry is looked up again by its representative value.

    Returns:
        DescriptionRun
    """
    rb, mapping, refreshed = refresh_if_due(rb, recent, now, period)
    if refreshed:
        if windows is not None:
            states = scale_windows(windows, rb)
        else:
            states = [reinterpret(entry, rb) for entry in states]
    sentences = generate_descriptions(states, tree, mapping, values=values, tau=tau)
    return DescriptionRun(sentences, rb, mapping, refreshed)


def generate_descriptions(states, tree, mapping, values=None, rb=None, recent=None, now=None,
                          period=None, tau=TAU):
    """
    Sentences for a list of scaled states, in input order.

    When rb, now and period are given the rule base is refreshed first (see
    describe_with_refresh). Entries in the normal state produce no sentence.
    """
    if rb is not None and now is not None and period is not None:
        return describe_with_refresh(states, tree, rb, recent, now, period, values=values, tau=tau).sentences

    sentences = []
    for i, entry in enumerate(states):
        value = None if values is None else values[i]
        sentence = describe_state(entry, tree, mapping, value, tau)
        if sentence is not None:
            sentences.append(sentence)
    return sentences


def write_descriptions(sentences, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for sentence in sentences:
            f.write(sentence + "\n")


def main():
    parser = argparse.ArgumentParser(description="Validate a semantic grammar")
    parser.add_argument("grammar", type=Path)
    parser.add_argument("--rulebase", type=Path, help="Check that every descriptor of this rule base resolves")
    args = parser.parse_args()

    try:
        mapping = mapping_from_rulebase(load_rulebase(args.rulebase)) if args.rulebase else None
        tree = load_grammar(args.grammar, mapping)
    except (MsadmError, FileNotFoundError) as e:
        print(f"❌ Error: {e}")
        sys.exit(2)

    print(f"✅ {args.grammar}: {len(tree.nodes)} nodes, {len(tree.leaves)} leaves")
    print(f"   fingerprint {tree_fingerprint(tree)[:16]}")
    for message in tree.unreachable:
        print(f"⚠️  {message}")


if __name__ == "__main__":
    main()
