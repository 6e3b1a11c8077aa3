"""
Action semantic knowledge graphs.

Composes the two-stage LLM prompts, parses their responses into per-action
subgraphs of object / sub-action concepts and typed relation triples,
validates and persists the subgraphs, and drives graph builds through an
LLM client.
"""
import json
import logging
import os
import re
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import ParseError, ReportIOError, ValidationError

logger = logging.getLogger(__name__)

NODE_KINDS = ("object", "sub_action", "attribute")
TRIPLE_KINDS = ("spatial", "temporal")
K_RANGE = (5, 10)
SEQUENCING_PREDICATES = ("starts with", "start with", "precedes", "precede", "follows", "follow",
                         "ends with", "end with", "comes before", "comes after", "before", "after")

_ITEM = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s+(.*\S)\s*$")
_TRIPLE = re.compile(r"<([^<>]+)>")
_HEADER = re.compile(r"^\s*([A-Za-z][A-Za-z _\-/]*?)\s*:\s*$")


def normalize_name(text):
    """Trim, collapse inner whitespace and casefold."""
    return " ".join(str(text).split()).casefold()


def action_slug(action):
    """File-system name of an action: 'clean and jerk' -> 'clean_and_jerk'."""
    return re.sub(r"[^a-z0-9]+", "_", normalize_name(action)).strip("_")


@dataclass(frozen=True)
class ConceptNode:
    """
    Attributes:
        name (str): Normalized concept name
        kind (str): "object", "sub_action" or "attribute"
    """
    name: str
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "name", normalize_name(self.name))
        if not self.name:
            raise ValidationError("concept name is empty")
        if self.kind not in NODE_KINDS:
            raise ValidationError(f"unknown concept kind '{self.kind}'")


@dataclass(frozen=True)
class RelationTriple:
    head: str
    predicate: str
    tail: str
    kind: str = "spatial"

    def __post_init__(self):
        for attr in ("head", "predicate", "tail"):
            object.__setattr__(self, attr, normalize_name(getattr(self, attr)))
        if self.kind not in TRIPLE_KINDS:
            raise ValidationError(f"unknown triple kind '{self.kind}'")

    @property
    def key(self):
        return (self.head, self.predicate, self.tail)

    def render(self):
        return f"<{self.head}, {self.predicate}, {self.tail}>"

    def to_dict(self):
        return {"head": self.head, "predicate": self.predicate, "tail": self.tail, "kind": self.kind}


@dataclass
class ActionSubgraph:
    """
    Concepts and relations of one action.

    Attributes:
        action (str): Normalized class name
        objects (list[ConceptNode]): Static entities, in response order
        sub_actions (list[ConceptNode]): Dynamic entities, in response order
        triples (list[RelationTriple]): Relations, in response order
        attributes (list[ConceptNode]): Triple endpoints that were not listed as entities
    """
    action: str
    objects: list = field(default_factory=list)
    sub_actions: list = field(default_factory=list)
    triples: list = field(default_factory=list)
    attributes: list = field(default_factory=list)

    def __post_init__(self):
        self.action = normalize_name(self.action)

    def concept_kind(self, name):
        """Return "action", a concept kind, or None for unknown names."""
        name = normalize_name(name)
        if name == self.action:
            return "action"
        for nodes in (self.objects, self.sub_actions, self.attributes):
            for node in nodes:
                if node.name == name:
                    return node.kind
        return None

    @property
    def spatial_triples(self):
        return [t for t in self.triples if t.kind == "spatial"]

    @property
    def temporal_triples(self):
        return [t for t in self.triples if t.kind == "temporal"]

    def to_dict(self):
        return {
            "action": self.action,
            "objects": [n.name for n in self.objects],
            "sub_actions": [n.name for n in self.sub_actions],
            "attributes": [n.name for n in self.attributes],
            "triples": [t.to_dict() for t in self.triples],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(
                action=doc["action"],
                objects=[ConceptNode(n, "object") for n in doc.get("objects", [])],
                sub_actions=[ConceptNode(n, "sub_action") for n in doc.get("sub_actions", [])],
                attributes=[ConceptNode(n, "attribute") for n in doc.get("attributes", [])],
                triples=[RelationTriple(t["head"], t["predicate"], t["tail"], t["kind"])
                         for t in doc.get("triples", [])],
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed graph document: {exc}")

    def render_response(self):
        """Render in the stage-1 response layout; parsing the result gives this subgraph back."""
        lines = ["objects:"]
        lines += [f"  {i}. {n.name}" for i, n in enumerate(self.objects, 1)]
        lines += ["", "sub_actions:"]
        lines += [f"  {i}. {n.name}" for i, n in enumerate(self.sub_actions, 1)]
        lines += ["", "triples:"]
        lines += [f"  - {t.render()}" for t in self.triples]
        return "\n".join(lines) + "\n"


@dataclass
class StructuredPrompt:
    """
    Instruction, one-shot context and input text of one LLM request.

    Attributes:
        instruction (str): Task statement and output format
        context (list[tuple[str, str]]): (role, text) one-shot exchange
        input_text (str): The request itself
        requests (list[str]): Items the response must complete, in order
    """
    instruction: str
    context: list
    input_text: str
    requests: list = field(default_factory=list)

    def render(self):
        parts = [f"Instruction:\n{self.instruction}", "Context:"]
        parts += [f"{role}: {text}" for role, text in self.context]
        parts.append(f"Input:\n{self.input_text}")
        return "\n\n".join(parts)

    def to_messages(self):
        messages = [{"role": "system", "content": self.instruction}]
        messages += [{"role": role, "content": text} for role, text in self.context]
        messages.append({"role": "user", "content": self.input_text})
        return messages


_STAGE1_EXAMPLE_USER = "rock climbing"
_STAGE1_EXAMPLE_ASSISTANT = """objects:
  1. climbing wall
  2. harness
  3. rope
  4. carabiner
  5. climbing shoes

sub_actions:
  1. tying in
  2. reaching for a hold
  3. pulling up
  4. clipping the rope

object_triples:
  - <harness, attached to, rope>
  - <rope, clipped into, carabiner>
  - <climbing shoes, grip, climbing wall>

sub_action_triples:
  - <rock climbing, starts with, tying in>
  - <tying in, precedes, reaching for a hold>
  - <reaching for a hold, precedes, pulling up>
  - <pulling up, precedes, clipping the rope>"""

_STAGE2_EXAMPLE_USER = """objects:
  - harness
triples:
  - <harness, attached to, rope>
  - <rock climbing, starts with, tying in>"""
_STAGE2_EXAMPLE_ASSISTANT = """objects:
  - harness: This is a video of rock climbing, which requires a harness.
triples:
  - <harness, attached to, rope>: This is a video of rock climbing, where a harness is attached to a rope.
  - <rock climbing, starts with, tying in>: This is a video of rock climbing, starting with tying in."""


def compose_stage1_prompt(action, k=7):
    """
    Build the entity-and-relation request for one action.

    Args:
        action (str): Class name
        k (int): Entities requested per list, 5 <= k <= 10

    Returns:
        StructuredPrompt

    Raises:
        ValidationError: On an empty action or k out of range
    """
    action = normalize_name(action)
    if not action:
        raise ValidationError("action name is empty")
    if not isinstance(k, int) or not K_RANGE[0] <= k <= K_RANGE[1]:
        raise ValidationError(f"K must lie in [{K_RANGE[0]}, {K_RANGE[1]}], got {k}")
    instruction = (
        "You are a commonsense knowledge base for human actions. "
        "Answer two questions about the action given as input.\n"
        f"Q1: Return the object entity list containing Top {k} most relevant objects involved in action: {action}. "
        f"Then return the sub-action entity list containing Top {k} most relevant sub-actions involved in action: "
        f"{action}, in temporal order.\n"
        "Q2: Find the proper predicate names that concisely describe the relationship between each object / "
        "sub-action pair chosen from the entity list, and write every relation as <head, predicate, tail>. "
        "Use the action name as head for the relation that opens the sequence of sub-actions.\n"
        "The YAML format output is preferred, with the lists objects, sub_actions, object_triples and "
        "sub_action_triples."
    )
    context = [("user", _STAGE1_EXAMPLE_USER), ("assistant", _STAGE1_EXAMPLE_ASSISTANT)]
    return StructuredPrompt(instruction, context, action, requests=["objects", "sub_actions", "triples"])


@dataclass
class Stage1Result:
    """Parsed stage-1 response; unpacks as (objects, sub_actions, triples)."""
    objects: list
    sub_actions: list
    triples: list
    attributes: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.objects, self.sub_actions, self.triples))

    def to_subgraph(self, action):
        return ActionSubgraph(action, list(self.objects), list(self.sub_actions),
                              list(self.triples), list(self.attributes))


def _section_of(header):
    header = header.casefold()
    if "triple" in header or "relation" in header:
        return "triples"
    if "sub" in header and "action" in header:
        return "sub_actions"
    if "object" in header or "entit" in header:
        return "objects"
    return None


def _clean_entity(text):
    text = text.strip().strip("`'\"").rstrip(".,;:").strip()
    return normalize_name(text)


def _split_triple(body):
    parts = [p.strip() for p in body.split(",")]
    if len(parts) < 3 or not parts[0] or not parts[-1]:
        return None
    return parts[0], ", ".join(parts[1:-1]), parts[-1]


def _is_sequencing(predicate):
    return any(predicate == p or predicate.startswith(p + " ") for p in SEQUENCING_PREDICATES)


def classify_triple(kind_of, head, predicate, tail):
    """
    "temporal" iff an endpoint is a sub-action or the action opens/orders a sequence; otherwise "spatial".

    Args:
        kind_of (Callable[[str], str | None]): Name -> "action", concept kind or None
    """
    kinds = (kind_of(head), kind_of(tail))
    if "sub_action" in kinds:
        return "temporal"
    if kinds[0] == "action" and _is_sequencing(normalize_name(predicate)):
        return "temporal"
    return "spatial"


def parse_stage1_response(text, action):
    """
    Parse entity lists and angle-bracket triples, tolerating surrounding prose.

    Triple endpoints must resolve to the action or a listed entity; an unknown
    endpoint whose partner resolves is admitted as an attribute concept and
    logged as a warning; any other triple is dropped with a warning.

    Args:
        text (str): Raw response
        action (str): Class name the response describes

    Returns:
        Stage1Result

    Raises:
        ParseError: If no entity is found, with per-line diagnostics
    """
    action = normalize_name(action)
    objects, sub_actions, raw_triples = [], [], []
    seen = set()
    section = None
    diagnostics = []
    for number, line in enumerate(str(text).splitlines(), 1):
        if not line.strip():
            continue
        found = _TRIPLE.findall(line)
        if found:
            for body in found:
                raw_triples.append((number, body))
            continue
        header = _HEADER.match(line)
        if header and not _ITEM.match(line):
            section = _section_of(header.group(1))
            if section is None:
                diagnostics.append(f"line {number}: unrecognized section '{header.group(1)}'")
            continue
        item = _ITEM.match(line)
        if item and section in ("objects", "sub_actions"):
            name = _clean_entity(item.group(1))
            if not name or name == action:
                diagnostics.append(f"line {number}: empty or action-named entity ignored")
                continue
            if name in seen:
                logger.debug("duplicate entity '%s' merged", name)
                continue
            seen.add(name)
            kind = "object" if section == "objects" else "sub_action"
            (objects if kind == "object" else sub_actions).append(ConceptNode(name, kind))
        else:
            diagnostics.append(f"line {number}: no entity or triple in '{line.strip()[:60]}'")

    if not objects and not sub_actions:
        raise ParseError(f"no entities found in response for '{action}'", diagnostics)

    result = Stage1Result(objects, sub_actions, [])
    known = {n.name: n.kind for n in objects + sub_actions}
    known[action] = "action"
    for number, body in raw_triples:
        parts = _split_triple(body)
        if parts is None:
            result.warnings.append(f"line {number}: malformed triple <{body}> dropped")
            continue
        head, predicate, tail = (normalize_name(p) for p in parts)
        if head == tail:
            result.warnings.append(f"line {number}: triple <{body}> relates a concept to itself; dropped")
            continue
        head_known, tail_known = head in known, tail in known
        if not head_known and not tail_known:
            result.warnings.append(f"line {number}: triple <{body}> has no listed endpoint; dropped")
            continue
        for name in (head, tail):
            if name not in known:
                logger.warning("%s: line %d: admitting '%s' as an attribute concept", action, number, name)
                known[name] = "attribute"
                result.attributes.append(ConceptNode(name, "attribute"))
        kind = classify_triple(known.get, head, predicate, tail)
        triple = RelationTriple(head, predicate, tail, kind)
        if any(t.key == triple.key for t in result.triples):
            continue
        result.triples.append(triple)
    if not result.triples:
        result.warnings.append("response contains no relation triples")
    for warning in result.warnings:
        logger.warning("%s: %s", action, warning)
    return result


def compose_stage2_prompt(subgraph):
    """
    Build the sentence-completion request: one clause per object and per triple.

    Raises:
        ValidationError: If the subgraph has no triples
    """
    if not subgraph.triples:
        raise ValidationError(f"subgraph of '{subgraph.action}' has no triples to complete")
    action = subgraph.action
    instruction = (
        "You are a commonsense knowledge base for human actions. "
        f"This is an example of {action}. "
        f"Try to complete the whole sentence \"This is a video of {action}, ...\" for each object and for each "
        "relation triple given as input, describing the object or the relation with a clause or a non-predicate "
        "verb form rather than a complete description. Keep the main sentence and the clause consistent.\n"
        "Answer with one line per item in the form `item: sentence`. The YAML format output is preferred."
    )
    context = [("user", _STAGE2_EXAMPLE_USER), ("assistant", _STAGE2_EXAMPLE_ASSISTANT)]
    requests = [n.name for n in subgraph.objects] + [t.render() for t in subgraph.triples]
    lines = ["objects:"]
    lines += [f"  - {n.name}" for n in subgraph.objects]
    lines.append("triples:")
    lines += [f"  - {t.render()}" for t in subgraph.triples]
    return StructuredPrompt(instruction, context, "\n".join(lines), requests=requests)


@dataclass
class Stage2Clauses:
    """
    Completed sentences keyed by what they describe.

    Attributes:
        objects (dict[str, str]): object name -> sentence
        triples (dict[tuple, str]): (head, predicate, tail) -> sentence
    """
    objects: dict = field(default_factory=dict)
    triples: dict = field(default_factory=dict)

    def to_dict(self):
        return {"objects": dict(self.objects),
                "triples": [{"head": h, "predicate": p, "tail": t, "clause": c}
                            for (h, p, t), c in self.triples.items()]}

    @classmethod
    def from_dict(cls, doc):
        doc = doc or {}
        return cls(dict(doc.get("objects", {})),
                   {(normalize_name(t["head"]), normalize_name(t["predicate"]), normalize_name(t["tail"])): t["clause"]
                    for t in doc.get("triples", [])})


def parse_stage2_response(text, subgraph=None):
    """
    Collect `item: sentence` lines; items are object names or <head, predicate, tail>.

    Lines that do not match are ignored. With a subgraph, clauses for unknown
    items are dropped with a warning.
    """
    clauses = Stage2Clauses()
    for number, line in enumerate(str(text).splitlines(), 1):
        item = _ITEM.match(line)
        body = item.group(1) if item else line.strip()
        triple = re.match(r"^<([^<>]+)>\s*:\s*(.+)$", body)
        if triple:
            parts = _split_triple(triple.group(1))
            if parts is None:
                logger.warning("line %d: malformed triple in clause response", number)
                continue
            key = tuple(normalize_name(p) for p in parts)
            if subgraph is not None and all(t.key != key for t in subgraph.triples):
                logger.warning("line %d: clause for unknown triple <%s> dropped", number, ", ".join(key))
                continue
            clauses.triples[key] = triple.group(2).strip()
            continue
        entity = re.match(r"^([^:<>]+?)\s*:\s*(\S.*)$", body)
        if item and entity:
            name = _clean_entity(entity.group(1))
            if subgraph is not None and name not in {n.name for n in subgraph.objects}:
                logger.warning("line %d: clause for unknown object '%s' dropped", number, name)
                continue
            clauses.objects[name] = entity.group(2).strip()
    return clauses


@dataclass
class GraphReport:
    """Violations found by `validate_graph`; each is {"code", "detail"}."""
    action: str
    violations: list = field(default_factory=list)

    @property
    def is_valid(self):
        return not self.violations

    def add(self, code, detail):
        self.violations.append({"code": code, "detail": detail})

    def to_dict(self):
        return {"action": self.action, "valid": self.is_valid, "violations": list(self.violations)}


def validate_graph(subgraph, standard_prompt=True):
    """
    Check a subgraph's structure and return every violation found.

    Args:
        subgraph (ActionSubgraph): Graph to check
        standard_prompt (bool): Enforce 5 <= |objects| <= 10

    Returns:
        GraphReport
    """
    report = GraphReport(subgraph.action)
    if not subgraph.action:
        report.add("empty_action", "action name is empty")
    if standard_prompt and not K_RANGE[0] <= len(subgraph.objects) <= K_RANGE[1]:
        report.add("k_range", f"{len(subgraph.objects)} objects, expected {K_RANGE[0]}..{K_RANGE[1]}")
    names = {}
    for node in subgraph.objects + subgraph.sub_actions + subgraph.attributes:
        if node.name in names and names[node.name] != node.kind:
            report.add("duplicate_concept", f"'{node.name}' listed as {names[node.name]} and {node.kind}")
        names.setdefault(node.name, node.kind)
    for triple in subgraph.triples:
        label = triple.render()
        if triple.head == triple.tail:
            report.add("self_relation", f"{label} relates a concept to itself")
        unresolved = [n for n in (triple.head, triple.tail) if subgraph.concept_kind(n) is None]
        for name in unresolved:
            report.add("unresolved_endpoint", f"{label}: '{name}' is not the action or a listed concept")
        if not unresolved:
            expected = classify_triple(subgraph.concept_kind, triple.head, triple.predicate, triple.tail)
            if expected != triple.kind:
                report.add("kind_mismatch", f"{label} is {triple.kind}, expected {expected}")
    return report


class GraphStore:
    """
    One JSON document per action under a directory.

    Writes are all-or-nothing: a document is written to a temporary file and
    moved into place, one writer per action at a time.
    """

    def __init__(self, directory):
        self.directory = directory
        self._locks = {}
        self._guard = threading.Lock()

    def path_for(self, action):
        return os.path.join(self.directory, f"{action_slug(action)}.json")

    def _lock(self, action):
        with self._guard:
            return self._locks.setdefault(action_slug(action), threading.Lock())

    def write(self, subgraph, clauses=None):
        doc = subgraph.to_dict()
        if clauses is not None:
            doc["clauses"] = clauses.to_dict()
        payload = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
        target = self.path_for(subgraph.action)
        with self._lock(subgraph.action):
            try:
                os.makedirs(self.directory, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
                with os.fdopen(fd, "w", encoding="utf-8") as handle:
                    handle.write(payload)
                os.replace(tmp, target)
            except OSError as exc:
                raise ReportIOError(f"cannot write graph for '{subgraph.action}': {exc}")
        logger.info("stored graph for '%s' at %s", subgraph.action, target)
        return target

    def read(self, action):
        """Return (subgraph, clauses) for one action."""
        return self.read_path(self.path_for(action))

    @staticmethod
    def read_path(path):
        try:
            with open(path, encoding="utf-8") as handle:
                doc = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportIOError(f"cannot read graph {path}: {exc}")
        clauses = Stage2Clauses.from_dict(doc["clauses"]) if "clauses" in doc else None
        return ActionSubgraph.from_dict(doc), clauses

    def list_paths(self):
        if not os.path.isdir(self.directory):
            return []
        return sorted(os.path.join(self.directory, n) for n in os.listdir(self.directory) if n.endswith(".json"))


class ASKGBuilder:
    """
    Runs both prompting stages for actions through an LLM client.

    Attributes:
        client (LLMClient): Response source
        store (GraphStore | None): Destination; None keeps results in memory only
        k (int): Entities requested per list
    """

    def __init__(self, client, store=None, k=7):
        self.client = client
        self.store = store
        self.k = k

    def build(self, action):
        """
        Build, validate and store the subgraph of one action.

        Returns:
            tuple[ActionSubgraph, Stage2Clauses, GraphReport]
        """
        stage1 = compose_stage1_prompt(action, self.k)
        parsed = parse_stage1_response(self.client.complete(1, action, stage1), action)
        subgraph = parsed.to_subgraph(action)
        clauses = Stage2Clauses()
        if subgraph.triples:
            stage2 = compose_stage2_prompt(subgraph)
            clauses = parse_stage2_response(self.client.complete(2, action, stage2), subgraph)
        report = validate_graph(subgraph)
        for violation in report.violations:
            logger.warning("%s: %s", subgraph.action, violation["detail"])
        if self.store is not None:
            self.store.write(subgraph, clauses)
        return subgraph, clauses, report

    def build_all(self, actions, max_workers=4):
        """
        Build several actions concurrently.

        Returns:
            tuple[dict, dict]: (action -> build result, action -> exception) ;
            a failed action leaves no file behind
        """
        results, failures = {}, {}
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {action: pool.submit(self.build, action) for action in actions}
            for action, future in futures.items():
                try:
                    results[action] = future.result()
                except Exception as exc:
                    logger.error("graph build for '%s' failed: %s", action, exc)
                    failures[action] = exc
        return results, failures
