"""Tests for the semantic rule tree."""

import json

import numpy as np
import pytest

from conftest import make_window
from errors import DescriptorLookupError, DomainError, GrammarStructureError
from rulebase import RuleBaseSettings, ScaledState, StateInterval, build_rulebase, recluster, scale_windows
from semtree import (
    TAU,
    DescriptorMapping,
    construct_sentence,
    describe_state,
    describe_with_refresh,
    exceeds_upper,
    format_value,
    generate_descriptions,
    grammar_from_dict,
    load_grammar,
    mapping_from_rulebase,
    refresh_if_due,
    reinterpret,
    traverse_tree,
    tree_fingerprint,
    validate_mapping,
    write_descriptions,
)

KPIS = ("packet_loss", "delay", "throughput", "jitter")

CODES = {1: "normal", 2: "slight", 3: "elevated", 4: "high", 5: "extreme", 6: "complete"}


@pytest.fixture(scope="module")
def grammar_doc(grammar_path):
    with open(grammar_path) as f:
        return json.load(f)


@pytest.fixture(scope="module")
def tree(grammar_path):
    return load_grammar(grammar_path)


@pytest.fixture(scope="module")
def mapping():
    groups = [(c, k) for c in ("city_vehicle", "plain_uav") for k in KPIS]
    return DescriptorMapping(codes={g: dict(CODES) for g in groups}, normal_codes={g: 1 for g in groups})


def state(kpi, code, value, upper, entity_class="city_vehicle"):
    return ScaledState(
        entity_id=f"{entity_class}-00",
        entity_class=entity_class,
        kpi_name=kpi,
        window_index=0,
        code=code,
        interval=StateInterval(upper / 2, upper, code),
        representative_value=value,
    )


# Reference description procedure written against the raw grammar document

def reference_path(doc, kpi, descriptor):
    definitions = doc.get("definitions", {})

    def walk(node, inherited, phrases):
        if "ref" in node:
            node = definitions[node["ref"]]
        node_kpi = node.get("kpi", inherited)
        here = phrases + [node["phrase"]]
        if "children" not in node or not node["children"]:
            if node_kpi == kpi and node["descriptor"] == descriptor:
                return here
            return None
        for child in node["children"]:
            found = walk(child, node_kpi, here)
            if found:
                return found
        return None

    return walk(doc["root"], None, [])


def reference_value(kpi, v):
    if kpi == "packet_loss":
        return "%.1f%%" % (v * 100)
    if kpi in ("delay", "jitter"):
        return "%.0f ms" % v
    return "%.1f Mb/s" % v


def reference_descriptions(doc, states, codes, normal_codes, tau):
    sentences = []
    for s in states:
        group = (s.entity_class, s.kpi_name)
        if s.code == normal_codes[group]:
            continue
        phrases = reference_path(doc, s.kpi_name, codes[group][s.code])
        text = " ".join(phrases)
        if s.representative_value > s.interval.upper * tau:
            text = text + " with value " + reference_value(s.kpi_name, s.representative_value)
        sentences.append(text[0].upper() + text[1:] + ".")
    return sentences


class TestDescriptionProcedure:
    """Production traversal against the reference procedure"""

    def test_random_state_lists(self, grammar_doc, tree, mapping):
        rng = np.random.default_rng(0)
        boundary_cases = 0
        for _ in range(500):
            states = []
            for _ in range(int(rng.integers(1, 7))):
                kpi = KPIS[int(rng.integers(len(KPIS)))]
                entity_class = ("city_vehicle", "plain_uav")[int(rng.integers(2))]
                code = int(rng.integers(1, 7))
                upper = float(rng.uniform(0.01, 100))
                roll = rng.random()
                if roll < 0.2:
                    value = upper * TAU
                    boundary_cases += 1
                elif roll < 0.6:
                    value = float(rng.uniform(upper * TAU, upper * 3))
                else:
                    value = float(rng.uniform(0, upper * TAU))
                states.append(state(kpi, code, value, upper, entity_class))

            expected = reference_descriptions(grammar_doc, states, mapping.codes, mapping.normal_codes, TAU)
            assert generate_descriptions(states, tree, mapping) == expected

        assert boundary_cases > 50

    def test_value_on_tau_boundary_has_no_suffix(self, tree, mapping):
        s = state("packet_loss", 3, 0.10 * TAU, 0.10)
        assert describe_state(s, tree, mapping) == "The node reports that the packet loss rate shows an elevated anomaly."

    def test_value_above_boundary_has_suffix(self, tree, mapping):
        s = state("packet_loss", 2, 0.2, 0.10)
        assert describe_state(s, tree, mapping) == (
            "The node reports that the packet loss rate shows a slight anomaly with value 20.0%."
        )

    def test_normal_state_pruned(self, tree, mapping):
        assert describe_state(state("delay", 1, 500.0, 10.0), tree, mapping) is None

    def test_explicit_values_override_representative(self, tree, mapping):
        s = state("delay", 4, 10.0, 100.0)
        assert generate_descriptions([s], tree, mapping, values=[200.0])[0].endswith("with value 200 ms.")

    def test_unknown_code(self, tree, mapping):
        with pytest.raises(DescriptorLookupError):
            describe_state(state("delay", 9, 1.0, 1.0), tree, mapping)


class TestSentences:
    """Sentence assembly and value formatting"""

    def test_join_and_capitalise(self):
        phrases = ["the packet loss rate", "shows a", "slight", "anomaly"]
        assert construct_sentence(phrases) == "The packet loss rate shows a slight anomaly."

    def test_single_phrase(self):
        assert construct_sentence(["normal"]) == "Normal."

    def test_whitespace_collapsed(self):
        assert construct_sentence(["the  delay", " rises "], "with value 5 ms") == "The delay rises with value 5 ms."

    def test_empty_path(self):
        with pytest.raises(DomainError):
            construct_sentence([])
        with pytest.raises(DomainError):
            construct_sentence(["ok", "  "])

    def test_exceeds_upper(self):
        assert exceeds_upper(0.12, 0.10)
        assert not exceeds_upper(0.03, 0.05)
        assert not exceeds_upper(0.10 * TAU, 0.10)

    @pytest.mark.parametrize("kpi,value,text", [
        ("packet_loss", 0.12, "12.0%"),
        ("delay", 120.4, "120 ms"),
        ("throughput", 55.0, "55.0 Mb/s"),
        ("bit_error_rate", 0.5, "50.0%"),
    ])
    def test_format_value(self, kpi, value, text):
        assert format_value(kpi, value) == text

    def test_write_descriptions(self, tmp_path):
        write_descriptions(["A.", "B."], tmp_path / "out" / "d.txt")
        assert (tmp_path / "out" / "d.txt").read_text() == "A.\nB.\n"


class TestGrammar:
    """Grammar loading and structure checks"""

    def test_path_depth(self, tree):
        path = traverse_tree(tree, "packet_loss", "moderate")
        assert [n.phrase for n in path] == [
            "the node reports that", "the packet loss rate", "shows a", "moderate anomaly",
        ]

    def test_missing_leaf(self, tree):
        with pytest.raises(DescriptorLookupError):
            traverse_tree(tree, "packet_loss", "apocalyptic")

    def test_two_roots(self):
        with pytest.raises(GrammarStructureError, match="exactly one root"):
            grammar_from_dict({"root": [{"phrase": "a", "descriptor": "x"}, {"phrase": "b", "descriptor": "y"}]})

    def test_reference_cycle(self):
        doc = {
            "root": {"phrase": "r", "children": [{"ref": "a"}]},
            "definitions": {
                "a": {"phrase": "a", "children": [{"ref": "b"}]},
                "b": {"phrase": "b", "children": [{"ref": "a"}]},
            },
        }
        with pytest.raises(GrammarStructureError, match="cycle"):
            grammar_from_dict(doc)

    def test_unknown_reference(self):
        with pytest.raises(GrammarStructureError, match="unknown reference"):
            grammar_from_dict({"root": {"phrase": "r", "children": [{"ref": "nope"}]}})

    @pytest.mark.parametrize("root,message", [
        ({"phrase": "r"}, "leaf has no descriptor"),
        ({"phrase": "r", "descriptor": "x", "children": [{"phrase": "c", "descriptor": "y"}]}, "inner node"),
        ({"phrase": "  ", "descriptor": "x"}, "empty phrase"),
        ({"phrase": "r", "kpi": "delay", "children": [
            {"phrase": "a", "descriptor": "x"}, {"phrase": "b", "descriptor": "x"}]}, "duplicate leaf"),
    ])
    def test_malformed_nodes(self, root, message):
        with pytest.raises(GrammarStructureError, match=message):
            grammar_from_dict({"root": root})

    def test_unreferenced_definition_is_reported(self):
        tree = grammar_from_dict({
            "root": {"phrase": "r", "kpi": "delay", "children": [{"phrase": "x", "descriptor": "x"}]},
            "definitions": {"spare": {"phrase": "s", "descriptor": "s"}},
        })
        assert any("spare" in message for message in tree.unreachable)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "g.json"
        path.write_text("{not json")
        with pytest.raises(GrammarStructureError, match="invalid JSON"):
            load_grammar(path)

    def test_mapping_must_resolve(self, grammar_path):
        mapping = DescriptorMapping(
            codes={("city_vehicle", "delay"): {1: "normal", 2: "apocalyptic"}},
            normal_codes={("city_vehicle", "delay"): 1},
        )
        with pytest.raises(GrammarStructureError, match="apocalyptic"):
            load_grammar(grammar_path, mapping)

    def test_fingerprint_tracks_phrases(self, grammar_doc, tree):
        changed = json.loads(json.dumps(grammar_doc))
        changed["definitions"]["severity_a"]["phrase"] = "exhibits a"

        assert tree_fingerprint(tree) == tree_fingerprint(grammar_from_dict(grammar_doc))
        assert tree_fingerprint(tree) != tree_fingerprint(grammar_from_dict(changed))


class TestRulebaseMapping:
    """Descriptor mappings derived from rule bases"""

    def test_shipped_grammar_covers_rulebase(self, rulebase, tree):
        mapping = mapping_from_rulebase(rulebase)
        assert validate_mapping(tree, mapping) == []

    def test_refresh_only_when_due(self, rulebase, windows):
        period = 3600.0
        _, _, refreshed = refresh_if_due(rulebase, windows, rulebase.built_at + 1, period)
        assert not refreshed

        rb, mapping, refreshed = refresh_if_due(rulebase, windows, rulebase.built_at + period, period)
        assert refreshed
        assert rb.built_at == rulebase.built_at + period
        assert set(mapping.codes) == set(rulebase.rule_sets)


def delay_windows(levels, count, start, seed):
    """`count` delay windows cycling through `levels`, 16 samples each, from `start`."""
    rng = np.random.default_rng(seed)
    windows = []
    for i in range(count):
        level = levels[i % len(levels)]
        windows.append(make_window(
            level * (1 + 0.02 * rng.standard_normal(16)),
            kpi_name="delay",
            window_index=int(start // 16) + i,
            start_time=start + 16.0 * i,
        ))
    return windows


class TestRefreshedDescriptions:
    """Descriptions produced after the rule base is reclustered"""

    PERIOD = 3600.0

    @pytest.fixture(scope="class")
    def history_rb(self):
        history = delay_windows((40.0, 80.0, 160.0, 400.0), 60, 0.0, seed=1)
        return build_rulebase(history, (), RuleBaseSettings(k_max=5, n_init=3, seed=7))

    @pytest.fixture(scope="class")
    def recent(self):
        return delay_windows((40.0, 40.0, 40.0, 45.0), 40, 1024.0, seed=2)

    @pytest.fixture(scope="class")
    def targets(self, recent):
        return recent + delay_windows((400.0,), 5, 2048.0, seed=3)

    def test_rescaled_under_new_rules(self, grammar_doc, tree, history_rb, recent, targets):
        states = scale_windows(targets, history_rb)
        now = history_rb.built_at + self.PERIOD
        run = describe_with_refresh(states, tree, history_rb, recent, now, self.PERIOD, windows=targets)

        assert run.refreshed
        assert run.rulebase.built_at == now
        rescaled = scale_windows(targets, run.rulebase)
        expected = reference_descriptions(grammar_doc, rescaled, run.mapping.codes, run.mapping.normal_codes, TAU)
        assert run.sentences == expected
        assert sum("with value" in s for s in run.sentences) >= 5

    def test_entries_looked_up_again_without_windows(self, grammar_doc, tree, history_rb, recent, targets):
        states = scale_windows(targets, history_rb)
        now = history_rb.built_at + self.PERIOD
        sentences = generate_descriptions(
            states, tree, mapping_from_rulebase(history_rb),
            rb=history_rb, recent=recent, now=now, period=self.PERIOD,
        )

        refreshed = recluster(history_rb, recent, now=now)
        rule_set = refreshed.lookup("city_vehicle", "delay")
        top = rule_set.top_interval()
        looked_up = [reinterpret(s, refreshed) for s in states]
        for before, after in zip(states, looked_up):
            v = before.representative_value
            assert after.interval in rule_set.intervals
            assert after.interval.contains(v, topmost=after.interval is top) or v > top.upper or v < min(
                iv.lower for iv in rule_set.intervals
            )

        mapping = mapping_from_rulebase(refreshed)
        assert sentences == reference_descriptions(grammar_doc, looked_up, mapping.codes, mapping.normal_codes, TAU)
        assert sum("with value" in s for s in sentences) >= 5

    def test_not_due_keeps_rules(self, tree, history_rb, recent, targets):
        states = scale_windows(targets, history_rb)
        run = describe_with_refresh(states, tree, history_rb, recent, history_rb.built_at + 1, self.PERIOD)

        assert not run.refreshed
        assert run.rulebase is history_rb
        assert run.sentences == generate_descriptions(states, tree, mapping_from_rulebase(history_rb))
