"""
Spatial and temporal text prompts derived from action subgraphs, and the
hashing text embedder that turns them into unit vectors.
"""
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .askg import normalize_name
from .errors import ReportIOError, ValidationError

logger = logging.getLogger(__name__)

TEMPLATE = "This is a video of {action}"


def _squash(text):
    return " ".join(str(text).split())


def make_prompt(action, clause):
    """
    Join the hard template and a clause into one whitespace-normalized sentence.

    A clause that already starts with the template for this action is not prefixed twice.
    """
    head = TEMPLATE.format(action=action)
    clause = _squash(clause)
    prefix = re.compile(rf"^{re.escape(head)}\s*,?\s*", re.IGNORECASE)
    clause = prefix.sub("", clause).lstrip(", ")
    if not clause:
        return f"{head}."
    if clause[-1] not in ".!?":
        clause += "."
    return _squash(f"{head}, {clause}")


def fallback_prompt(action, triple):
    return make_prompt(action, f"where {triple.head} {triple.predicate} {triple.tail}.")


@dataclass
class PromptBank:
    """
    Prompts of one class.

    Spatial and temporal prompts usually share nothing, but a clause the
    language model repeats for a spatial and a temporal triple lands in both
    lists (surfing's fin clause in the shipped fixtures). The duplicate is kept
    and logged as a warning.

    Attributes:
        action (str): Class name
        spatial (list[str]): C^s, object prompts then object-relation prompts
        temporal (list[str]): C^t, sub-action relation prompts
    """
    action: str
    spatial: list = field(default_factory=list)
    temporal: list = field(default_factory=list)

    @property
    def combined(self):
        """C^st: spatial prompts then temporal prompts."""
        return list(self.spatial) + list(self.temporal)

    def __len__(self):
        return len(self.spatial) + len(self.temporal)

    def to_dict(self):
        return {"action": self.action, "spatial": list(self.spatial), "temporal": list(self.temporal)}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["action"], list(doc.get("spatial", [])), list(doc.get("temporal", [])))


def triples_to_prompts(subgraph, clauses=None):
    """
    Build the prompt bank of one subgraph.

    Object clauses become spatial prompts first; then each spatial triple and
    each temporal triple gives one prompt, templated from the triple when its
    clause is missing. A subgraph without triples yields only the class-name
    prompt.

    Args:
        subgraph (ActionSubgraph): Parsed graph
        clauses (Stage2Clauses | None): Completed sentences

    Returns:
        PromptBank
    """
    action = subgraph.action
    bank = PromptBank(action)
    if not subgraph.triples:
        bank.spatial.append(make_prompt(action, ""))
        return bank
    object_clauses = clauses.objects if clauses else {}
    triple_clauses = clauses.triples if clauses else {}
    for node in subgraph.objects:
        if node.name in object_clauses:
            bank.spatial.append(make_prompt(action, object_clauses[node.name]))
    for triple in subgraph.triples:
        clause = triple_clauses.get(triple.key)
        if clause is None:
            logger.info("%s: no clause for %s, using template", action, triple.render())
            prompt = fallback_prompt(action, triple)
        else:
            prompt = make_prompt(action, clause)
        (bank.spatial if triple.kind == "spatial" else bank.temporal).append(prompt)
    shared = set(bank.spatial) & set(bank.temporal)
    for text in sorted(shared):
        logger.warning("%s: prompt appears as both spatial and temporal: %s", action, text)
    return bank


def save_prompt_banks(path, banks):
    doc = {bank.action: {"spatial": bank.spatial, "temporal": bank.temporal} for bank in banks}
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(doc, handle, indent=2, ensure_ascii=False)
            handle.write("\n")
    except OSError as exc:
        raise ReportIOError(f"cannot write prompt banks to {path}: {exc}")


def load_prompt_banks(path):
    try:
        with open(path, encoding="utf-8") as handle:
            doc = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportIOError(f"cannot read prompt banks from {path}: {exc}")
    return [PromptBank(action, list(v.get("spatial", [])), list(v.get("temporal", []))) for action, v in doc.items()]


class HashingTextEmbedder:
    """
    Deterministic bag-of-words text embedder.

    Every lower-cased word seeds a Gaussian vector from a SHA-256 digest; a
    text embeds as the normalized sum of its word vectors.

    Attributes:
        dim (int): Output width
        seed (int): Mixed into every word digest
    """

    def __init__(self, dim, seed=0):
        if dim < 1:
            raise ValidationError(f"embedding width must be positive, got {dim}")
        self.dim = dim
        self.seed = seed
        self._cache = {}

    def word_vector(self, word):
        if word not in self._cache:
            digest = hashlib.sha256(f"{self.seed}:{word}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            self._cache[word] = rng.standard_normal(self.dim)
        return self._cache[word]

    def embed(self, text):
        words = re.findall(r"[a-z0-9']+", normalize_name(text))
        if not words:
            raise ValidationError(f"cannot embed text without words: {text!r}")
        total = np.sum([self.word_vector(w) for w in words], axis=0)
        return total / np.linalg.norm(total)

    def embed_many(self, texts):
        return np.stack([self.embed(t) for t in texts])
